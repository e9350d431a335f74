import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from elasticast import ElasticASTClassifier, FixedLengthASTClassifier, MelFeaturizer, Spectrogram
from elasticast.estimators import check_clip, check_clips, check_precision


def clips(n, seed=0, n_mels=8):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i in range(n):
        label = i % 2
        frames = int(rng.integers(16, 48))
        e = rng.normal(0, 0.1, (n_mels, frames))
        e[:4 if label else 4:] += 2.0 if label else 0.0  # class 1: energy in the low bins
        X.append(Spectrogram(e))
        y.append(["quiet", "loud"][label])
    return X, np.array(y)


SMALL = dict(dim=8, heads=2, layers=1, patch_size=4, n_mels=8, lr=1e-2, epochs=15, batch_size=4)


class TestValidation:
    def test_waveform_array(self):
        w = check_clip(np.zeros(400))
        assert w.sample_rate == 16000

    def test_spectrogram_array(self):
        assert isinstance(check_clip(np.zeros((4, 5))), Spectrogram)

    @pytest.mark.parametrize("bad", [np.zeros((2, 2, 2)), np.array([]), np.array(["a", "b"])])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_clip(bad)

    def test_single_clip_not_a_dataset(self):
        with pytest.raises(ValueError, match="sequence of clips"):
            check_clips(np.zeros(400))

    def test_empty(self):
        with pytest.raises(ValueError):
            check_clips([])

    def test_precision(self):
        assert check_precision("f32") is np.float32
        with pytest.raises(ValueError):
            check_precision("f16")


class TestMelFeaturizer:
    def test_shapes(self):
        out = MelFeaturizer(n_mels=16, pad_to_multiple=8).fit_transform([np.zeros(16000), np.zeros(8000)])
        assert [s.energies.shape for s in out] == [(16, 104), (16, 48)]

    def test_avgpool(self):
        out = MelFeaturizer(n_mels=16, avgpool=2).transform([np.zeros(16000)])
        assert out[0].n_frames == 49 and out[0].frame_shift_ms == 20.0

    def test_params(self):
        assert MelFeaturizer(n_mels=64).get_params()["n_mels"] == 64


class TestClassifiers:
    @pytest.mark.parametrize("cls,extra", [(ElasticASTClassifier, dict(budget=64)),
                                           (FixedLengthASTClassifier, dict(fixed_T=32))])
    def test_fit_predict(self, cls, extra):
        X, y = clips(24)
        model = cls(**SMALL, **extra).fit(X, y)
        assert set(model.classes_) == {"loud", "quiet"}
        Xt, yt = clips(12, seed=1)
        assert model.score(Xt, yt) >= 0.9
        proba = model.predict_proba(Xt)
        np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
        assert len(model.history_) == 15 * 6

    def test_get_params_and_clone(self):
        m = ElasticASTClassifier(dim=16, compression="avgpool", factors=(1, 2))
        params = m.get_params()
        assert params["dim"] == 16 and params["factors"] == (1, 2)
        assert clone(m).get_params() == params
        assert FixedLengthASTClassifier(fixed_T=512).get_params()["fixed_T"] == 512

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            ElasticASTClassifier().predict([np.zeros(400)])

    def test_label_count_mismatch(self):
        X, y = clips(4)
        with pytest.raises(ValueError):
            ElasticASTClassifier(**SMALL).fit(X, y[:3])

    def test_single_class(self):
        X, _ = clips(4)
        with pytest.raises(ValueError, match="two classes"):
            ElasticASTClassifier(**SMALL).fit(X, ["a"] * 4)

    def test_seeded(self):
        X, y = clips(8)
        a = ElasticASTClassifier(**{**SMALL, "epochs": 2}, seed=3).fit(X, y).decision_function(X)
        b = ElasticASTClassifier(**{**SMALL, "epochs": 2}, seed=3).fit(X, y).decision_function(X)
        np.testing.assert_array_equal(a, b)

    def test_float32(self):
        X, y = clips(8)
        m = ElasticASTClassifier(**{**SMALL, "epochs": 1}, precision="f32").fit(X, y)
        assert m.decision_function(X).dtype == np.float32
