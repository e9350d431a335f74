import csv
import io

import numpy as np
import pytest

from elasticast import encoder as enc
from elasticast.cli import main
from elasticast.spectrogram import (Spectrogram, Waveform, mel_spectrogram, pad_frames, read_spec,
                                   save_wav)
from elasticast.tasks import TaskSpec
from elasticast.trainer import load_run, normalize, tokens_from_spec


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "model"
    assert main(["train-toy", "--epochs", "1", "--n-train", "12", "--seed", "3", "--out", str(path),
                 "--log", str(path.parent / "log.csv")]) == 0
    return path


@pytest.fixture
def tone(tmp_path):
    path = tmp_path / "tone.wav"
    t = np.arange(160000) / 16000
    save_wav(path, Waveform(0.3 * np.sin(2 * np.pi * 440 * t), 16000))
    return path


class TestErrors:
    def test_no_arguments(self, capsys):
        code, _, err = run(capsys)
        assert code == 1 and "usage" in err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "pack-stats", "--lengths", "1,2", "--nope")
        assert code == 1
        assert err.startswith("error:") and err.count("\n") == 1

    def test_module_error_is_single_line(self, capsys):
        code, _, err = run(capsys, "pack-stats", "--lengths", "10,5000", "--budget", "2048")
        assert code == 1 and err == "error: sample of length 5000 exceeds budget 2048\n"

    def test_missing_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "featurize", "--in", tmp_path / "none.wav", "--out", tmp_path / "x")
        assert code == 1 and err.count("\n") == 1

    def test_bad_seed_env(self, capsys, monkeypatch):
        monkeypatch.setenv("ELASTIC_SEED", "abc")
        code, _, err = run(capsys, "pack-stats", "--lengths", "3")
        assert code == 1 and "ELASTIC_SEED" in err

    def test_bad_precision(self, capsys):
        code, _, _ = run(capsys, "pack-stats", "--lengths", "3", "--precision", "f16")
        assert code == 1


class TestFeaturize:
    def test_default_geometry_with_padding(self, capsys, tone, tmp_path):
        code, out, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a.spec",
                           "--pad-to-multiple", "16")
        assert code == 0
        assert rows(out)[0] == {"n_mels": "128", "n_frames": "1024", "frame_shift_ms": "10.0",
                                "patch_size": "16", "n_patches": "512"}
        assert read_spec(tmp_path / "a.spec").energies.shape == (128, 1024)

    def test_padding_is_default(self, capsys, tone, tmp_path):
        _, out, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a.spec")
        assert rows(out)[0]["n_frames"] == "1024"

    def test_unpadded_geometry(self, capsys, tone, tmp_path):
        _, out, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a.spec",
                        "--pad-to-multiple", "0")
        assert rows(out)[0]["n_frames"] == "998"

    def test_fshift(self, capsys, tone, tmp_path):
        _, out, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a.spec",
                        "--compress-fshift", "4.0", "--pad-to-multiple", "0")
        assert rows(out)[0]["frame_shift_ms"] == "40.0"
        assert int(rows(out)[0]["n_frames"]) == 1 + (160000 - 400) // 640

    def test_avgpool(self, capsys, tone, tmp_path):
        _, out, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a.spec",
                        "--compress-avgpool", "2", "--pad-to-multiple", "0")
        assert rows(out)[0]["n_frames"] == "499"

    def test_fshift_outside_set(self, capsys, tone, tmp_path):
        code, _, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a", "--compress-fshift", "1.1")
        assert code == 1

    def test_compressions_exclusive(self, capsys, tone, tmp_path):
        code, _, _ = run(capsys, "featurize", "--in", tone, "--out", tmp_path / "a",
                         "--compress-fshift", "2.0", "--compress-avgpool", "2")
        assert code == 1


class TestPackStats:
    def test_reference_manifest(self, capsys):
        _, out, _ = run(capsys, "pack-stats", "--lengths", "512,1024,600,200", "--budget", "2048")
        r = rows(out)[0]
        assert r["regime"] == "elastic" and r["pad_fraction"] == "736/3072"
        assert float(r["pad_ratio"]) == pytest.approx(0.2396, abs=1e-4)
        assert float(r["cut_ratio"]) == 0.0

    def test_fixed_regime(self, capsys):
        _, out, _ = run(capsys, "pack-stats", "--lengths", "5,15", "--fixed-T", "10")
        r = rows(out)[0]
        assert r["regime"] == "fixed" and r["pad_ratio"] == "0.25" and r["cut_ratio"] == "0.25"

    def test_manifest_files(self, capsys, tmp_path):
        (tmp_path / "m.json").write_text('{"lengths": [512, 1024, 600, 200]}')
        (tmp_path / "m.csv").write_text("length\n512\n1024\n600\n200\n")
        a = run(capsys, "pack-stats", "--lengths", tmp_path / "m.json")[1]
        b = run(capsys, "pack-stats", "--lengths", tmp_path / "m.csv")[1]
        assert a == b and "736/3072" in a

    def test_id_count_manifest(self, capsys, tmp_path):
        (tmp_path / "m.txt").write_text("sample_id,token_count\n1,512\n2,1024\nclip3,600\n4,200\n")
        assert "736/3072" in run(capsys, "pack-stats", "--lengths", tmp_path / "m.txt")[1]

    def test_synthetic_seeded(self, capsys, monkeypatch):
        args = ("pack-stats", "--synthetic", "300", "--batch-sizes", "12,64,128")
        monkeypatch.setenv("ELASTIC_SEED", "4")
        a = run(capsys, *args)[1]
        b = run(capsys, *args, "--seed", "4")[1]
        c = run(capsys, *args, "--seed", "5")[1]
        assert a == b != c
        assert [r["batch"] for r in rows(a)] == ["12", "64", "128"]


class TestGradCheck:
    def test_seed_seven(self, capsys):
        code, out, _ = run(capsys, "grad-check", "--seed", "7", "--probes", "4")
        assert code == 0
        table = rows(out)
        assert table[-1]["group"] == "max" and float(table[-1]["max_rel_error"]) <= 1e-4

    def test_bad_dims(self, capsys):
        assert run(capsys, "grad-check", "--dims", "15,2,1")[0] == 1


class TestTrainEvaluateForward:
    def test_log_columns(self, tiny_model):
        text = (tiny_model.parent / "log.csv").read_text()
        assert text.splitlines()[0] == "step,loss,lr,pad_ratio,cut_ratio"

    def test_checkpoint_metadata(self, tiny_model):
        trainer, task = load_run(tiny_model)
        assert trainer.cfg.mode == "elastic" and task["n_classes"] == 4
        assert trainer.params.dtype == np.float32

    def test_evaluate(self, capsys, tiny_model):
        code, out, _ = run(capsys, "evaluate", "--model", tiny_model, "--lengths", "256,512",
                           "--n-eval", "4")
        assert code == 0
        assert [(r["length"], r["n"]) for r in rows(out)] == [("256", "4"), ("512", "4")]

    def test_evaluate_factors(self, capsys, tiny_model):
        _, out, _ = run(capsys, "evaluate", "--model", tiny_model, "--lengths", "256",
                        "--compress", "fshift", "--factors", "1.0,2.0", "--n-eval", "4")
        assert [r["factor"] for r in rows(out)] == ["1.0", "2.0"]

    def test_evaluate_sweep_matches_trainer(self, capsys, tiny_model):
        _, out, _ = run(capsys, "evaluate", "--model", tiny_model, "--lengths", "512,2048",
                        "--protocol", "sweep", "--n-eval", "4")
        trainer, task_kw = load_run(tiny_model)
        pool = TaskSpec(**task_kw).dataset(4, 0, n_frames=1024)
        expected = trainer.evaluate(pool, [512, 2048])
        assert [float(r["accuracy"]) for r in rows(out)] == [expected[512], expected[2048]]

    def test_forward_matches_in_memory(self, capsys, tiny_model, tone, tmp_path):
        spec_dir = tmp_path / "specs"
        spec_dir.mkdir()
        assert run(capsys, "featurize", "--in", tone, "--out", spec_dir / "t.spec", "--n-mels", "32")[0] == 0
        code, out, _ = run(capsys, "forward", "--model", tiny_model, "--specs", spec_dir)
        assert code == 0
        got = np.array([float(v) for k, v in rows(out)[0].items() if k.startswith("logit_")])

        trainer, _ = load_run(tiny_model)
        from elasticast.spectrogram import load_wav
        spec = pad_frames(mel_spectrogram(load_wav(tone), n_mels=32), 256)
        spec = normalize(Spectrogram(spec.energies.astype(np.float32)), *trainer.norm)
        seq = tokens_from_spec(spec, 16, "t", trainer.params.dtype)
        expected = enc.forward_samples([seq], trainer.params)[0]
        assert got.tolist() == expected.astype(float).tolist()

    def test_forward_rejects_wrong_mels(self, capsys, tiny_model, tone, tmp_path):
        run(capsys, "featurize", "--in", tone, "--out", tmp_path / "t.spec")
        code, _, err = run(capsys, "forward", "--model", tiny_model, "--specs", tmp_path / "t.spec")
        assert code == 1 and "mel bins" in err


class TestBench:
    def test_equal_lengths_fill_rows(self, capsys):
        _, out, _ = run(capsys, "bench", "--n", "8", "--median", "64", "--sigma", "0", "--budget",
                        "128", "--fixed-T", "64", "--batch-size", "8", "--dim", "8", "--heads", "2",
                        "--layers", "1")
        assert [float(r["informative_fraction"]) for r in rows(out)] == [1.0, 1.0]

    def test_packed_beats_fixed_mean(self, capsys):
        _, out, _ = run(capsys, "bench", "--n", "200", "--dim", "8", "--heads", "2", "--layers", "1")
        packed, fixed = rows(out)
        assert float(packed["informative_fraction"]) > float(fixed["informative_fraction"])
        assert float(fixed["pad_ratio"]) > 0 and float(fixed["cut_ratio"]) > 0

    def test_timing_column(self, capsys):
        code, out, err = run(capsys, "bench", "--n", "6", "--median", "40", "--dim", "8", "--heads",
                             "2", "--layers", "1", "--timing")
        assert code == 0 and "tokens_per_s" in out.splitlines()[0] and "tokens/s" in err


class TestDeterminism:
    @pytest.mark.parametrize("argv", [
        ("pack-stats", "--synthetic", "200", "--fixed-T", "300", "--batch-sizes", "12,64"),
        ("grad-check", "--probes", "2", "--dims", "8,2,1"),
        ("bench", "--n", "40", "--dim", "8", "--heads", "2", "--layers", "1"),
    ])
    def test_repeat_is_byte_identical(self, capsys, argv):
        first = run(capsys, *argv, "--seed", "11")[1]
        second = run(capsys, *argv, "--seed", "11")[1]
        assert first == second and first
