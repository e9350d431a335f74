"""Command-line front end: ``elasticast <subcommand> ...``.

Every subcommand writes headers-first CSV to ``--out`` (stdout by default).
Randomness comes from ``--seed``, else ``$ELASTIC_SEED``, else 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from .bench import bench, lognormal_lengths
from .gradcheck import grad_check
from .packing import fixed_length_stats, packed_length_stats
from .spectrogram import (compress_avgpool, compress_fshift, load_wav, mel_spectrogram, pad_frames,
                          read_spec, write_spec)
from .tasks import TaskSpec
from .trainer import FSHIFT_FACTORS, load_run, normalize, save_run, tokens_from_spec, train_toy

log = logging.getLogger("elasticast")

DTYPES = {"f32": np.float32, "f64": np.float64}
GRAD_TOL = 1e-4


class CLIError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _default_seed() -> int:
    raw = os.environ.get("ELASTIC_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"ELASTIC_SEED must be an integer, got {raw!r}") from None


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# subcommands


def cmd_featurize(args) -> None:
    wave = load_wav(args.inp)
    if args.compress_fshift is not None:
        spec = compress_fshift(wave, args.compress_fshift, shift_ms=args.shift_ms, n_mels=args.n_mels)
    else:
        spec = mel_spectrogram(wave, shift_ms=args.shift_ms, n_mels=args.n_mels)
    if args.compress_avgpool is not None:
        spec = compress_avgpool(spec, args.compress_avgpool)
    if args.pad_to_multiple:
        # whole p x p patch columns for every frequency row: a multiple of p*p frames
        spec = pad_frames(spec, args.pad_to_multiple ** 2)
    write_spec(args.out, spec)
    p = args.patch_size
    n_patches = (spec.n_mels // p) * (spec.n_frames // p)
    _write_csv(args.csv, ["n_mels", "n_frames", "frame_shift_ms", "patch_size", "n_patches"],
               [[spec.n_mels, spec.n_frames, float(spec.frame_shift_ms), p, n_patches]])


def _read_lengths(src: str) -> list:
    path = Path(src)
    if path.exists():
        text = path.read_text()
        if path.suffix == ".json":
            data = json.loads(text)
            data = data.get("lengths", data) if isinstance(data, dict) else data
            return [int(v) for v in data]
        # one length per line, or "sample_id,token_count"; a header row is skipped
        vals = [row[-1].strip() for row in csv.reader(io.StringIO(text)) if row]
        return [int(v) for v in vals if v.lstrip("-").isdigit()]
    return _int_list(src)


def cmd_pack_stats(args) -> None:
    if args.lengths is not None:
        lengths = _read_lengths(args.lengths)
    else:
        rng = np.random.default_rng(args.seed)
        lengths = lognormal_lengths(args.synthetic, args.median, args.sigma, 1, args.budget, rng)
        lengths = [int(v) for v in lengths]
    if not lengths or min(lengths) <= 0:
        raise CLIError("lengths must be positive integers")
    rows = []
    if args.fixed_T:
        s = fixed_length_stats(lengths, args.fixed_T)
        rows.append(["fixed", len(lengths), s])
    for b in args.batch_sizes or [len(lengths)]:
        too_long = [n for n in lengths if n > args.budget]
        if too_long:
            raise CLIError(f"sample of length {too_long[0]} exceeds budget {args.budget}")
        rows.append(["elastic", b, packed_length_stats(lengths, args.budget, b)])
    _write_csv(args.out, ["regime", "batch", "pad_ratio", "cut_ratio", "rows", "total_tokens",
                          "pad_fraction", "cut_fraction"],
               [[r, b, s.pad_ratio, s.cut_ratio, s.rows, s.total_tokens,
                 f"{s.pad_tokens}/{s.total_tokens}", f"{s.cut_tokens}/{s.native_tokens}"]
                for r, b, s in rows])


def cmd_forward(args) -> None:
    trainer, _ = load_run(args.model)
    params = trainer.params.astype(DTYPES[args.precision]) if args.precision else trainer.params
    src = Path(args.specs)
    files = sorted(src.glob("*.spec")) if src.is_dir() else [src]
    if not files:
        raise CLIError(f"no .spec files in {src}")
    seqs = []
    for f in files:
        spec = read_spec(f)
        if spec.n_mels != trainer.n_mels:
            raise CLIError(f"{f.name} has {spec.n_mels} mel bins, model expects {trainer.n_mels}")
        spec = normalize(spec, *trainer.norm)
        seqs.append(tokens_from_spec(spec, params.config.patch_size, f.name, params.dtype))
    budget = max(args.budget, max(len(s) for s in seqs))
    if params.config.pooling == "cls":
        logits = enc.forward_isolated(seqs, params)
    else:
        logits = enc.forward_samples(seqs, params, budget)
    k = logits.shape[1]
    _write_csv(args.out, ["file"] + [f"logit_{i}" for i in range(k)] + ["pred"],
               [[f.name, *row.tolist(), int(row.argmax())] for f, row in zip(files, logits)])


def cmd_grad_check(args) -> None:
    dim, heads, layers = args.dims
    report = grad_check(args.seed, dim, heads, layers, args.eps, args.probes)
    worst = max(report.values())
    _write_csv(args.out, ["group", "max_rel_error", "ok"],
               [[k, v, int(v <= args.tol)] for k, v in report.items()]
               + [["max", worst, int(worst <= args.tol)]])
    if worst > args.tol:
        raise CLIError(f"gradient check failed: max relative error {worst:.3e} > {args.tol:g}")


def _task(args) -> TaskSpec:
    return TaskSpec(n_classes=args.classes, distractor_every_ms=args.distractor_ms)


def cmd_train_toy(args) -> None:
    task = _task(args)
    factors = tuple(args.factors or ())
    if args.compress == "avgpool":
        factors = tuple(int(f) for f in factors)
    trainer = train_toy(task, args.mode, args.compress, factors, epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size, budget=args.budget, fixed_T=args.fixed_T,
                        n_train=args.n_train, n_mels=args.n_mels, patch_size=args.patch_size,
                        seed=args.seed, dtype=DTYPES[args.precision or "f32"],
                        model_kw=dict(dim=args.dim, heads=args.heads, layers=args.layers))
    save_run(args.model_out, trainer, task)
    _write_csv(args.log, ["step", "loss", "lr", "pad_ratio", "cut_ratio"],
               [[h["step"], h["loss"], h["lr"], h["pad_ratio"], h["cut_ratio"]]
                for h in trainer.history])


def cmd_evaluate(args) -> None:
    trainer, task_kw = load_run(args.model)
    if args.precision:
        trainer.params = trainer.params.astype(DTYPES[args.precision])
    task = TaskSpec(**task_kw) if task_kw else TaskSpec()
    factors = args.factors or [1.0]
    if args.compress == "avgpool":
        factors = [int(f) for f in factors]
    rows = []
    pool = None
    if args.protocol == "sweep":
        # one pool at the median training length, cut or padded to each x
        pool = task.dataset(args.n_eval, args.seed, n_frames=int(task.median_frames))
    for x in args.lengths:
        for c in factors:
            if pool is None:
                # clips recorded at exactly x frames, fed as they are
                data = task.dataset(args.n_eval, args.seed + x, n_frames=x)
                acc = trainer.accuracy(data, args.compress, c)
                n = len(data)
            else:
                # lengths are at the base frame rate; compression shortens inputs by c
                eff = max(int(round(x / c)), trainer.params.config.patch_size)
                acc = trainer.evaluate(pool, [eff], args.compress, c)[eff]
                n = len(pool)
            rows.append([x, c, acc, n])
    _write_csv(args.out, ["length", "factor", "accuracy", "n"], rows)


def cmd_bench(args) -> None:
    rng = np.random.default_rng(args.seed)
    lengths = lognormal_lengths(args.n, args.median, args.sigma, 1, args.budget, rng)
    t_max = args.budget // args.f + 1
    cfg = enc.ModelConfig(dim=args.dim, heads=args.heads, layers=args.layers, patch_size=args.patch_size,
                          n_classes=2, f_max=args.f, t_max=t_max)
    fixed_T = args.fixed_T or int(round(float(np.mean(lengths))))
    rows = bench(lengths, args.budget, fixed_T, args.batch_size, cfg, args.seed,
                 DTYPES[args.precision or "f64"], timing=args.timing)
    header = ["regime", "batch", "rows", "total_tokens", "informative_tokens",
              "informative_fraction", "pad_ratio", "cut_ratio"]
    out = [[r.regime, r.batch, r.rows, r.total_tokens, r.informative_tokens,
            r.informative_fraction, r.pad_ratio, r.cut_ratio] for r in rows]
    if args.timing:
        header.append("tokens_per_s")
        for line, r in zip(out, rows):
            line.append(r.tokens_per_s)
            print(f"{r.regime}: {r.tokens_per_s:.0f} tokens/s, informative "
                  f"{r.informative_fraction:.3f}", file=sys.stderr)
    _write_csv(args.out, header, out)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default: $ELASTIC_SEED or 0)")
    common.add_argument("--precision", choices=sorted(DTYPES), default=None,
                        help="floating point width of model computation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="elasticast", description="Variable-length spectrogram transformer toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    f = sub.add_parser("featurize", parents=[common], help="WAV to SPEC1 log-mel spectrogram")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--shift-ms", type=float, default=10.0)
    f.add_argument("--n-mels", type=int, default=128)
    g = f.add_mutually_exclusive_group()
    g.add_argument("--compress-fshift", type=float, default=None)
    g.add_argument("--compress-avgpool", type=int, default=None)
    f.add_argument("--pad-to-multiple", type=int, default=16, metavar="P",
                   help="zero-pad frames to a multiple of P*P (default 16; 0 disables)")
    f.add_argument("--patch-size", type=int, default=16)
    f.add_argument("--csv", default=None, help="geometry CSV destination (default stdout)")
    f.set_defaults(func=cmd_featurize)

    s = sub.add_parser("pack-stats", parents=[common], help="pad/cut accounting")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--lengths", help="comma list, CSV file or JSON manifest of token lengths")
    src.add_argument("--synthetic", type=int, help="draw this many log-normal lengths")
    s.add_argument("--median", type=float, default=400.0)
    s.add_argument("--sigma", type=float, default=0.7)
    s.add_argument("--budget", type=int, default=2048)
    s.add_argument("--fixed-T", type=int, default=None)
    s.add_argument("--batch-sizes", type=_int_list, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_pack_stats)

    fw = sub.add_parser("forward", parents=[common], help="logits for stored spectrograms")
    fw.add_argument("--model", required=True)
    fw.add_argument("--specs", required=True, help="a .spec file or a directory of them")
    fw.add_argument("--budget", type=int, default=2048)
    fw.add_argument("--out", default=None)
    fw.set_defaults(func=cmd_forward)

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--dims", type=_int_list, default=[16, 2, 2], help="D,H,layers")
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--probes", type=int, default=12)
    gc.add_argument("--tol", type=float, default=GRAD_TOL)
    gc.add_argument("--out", default=None)
    gc.set_defaults(func=cmd_grad_check)

    t = sub.add_parser("train-toy", parents=[common], help="train on the synthetic task")
    t.add_argument("--mode", choices=["elastic", "fixed"], default="elastic")
    t.add_argument("--fixed-T", type=int, default=1024, help="frames, fixed mode only")
    t.add_argument("--compress", choices=["none", "fshift", "avgpool"], default="none")
    t.add_argument("--factors", type=_float_list, default=None)
    t.add_argument("--budget", type=int, default=2048)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--batch-size", type=int, default=12)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--n-train", type=int, default=480)
    t.add_argument("--classes", type=int, default=4)
    t.add_argument("--distractor-ms", type=float, default=0.0)
    t.add_argument("--n-mels", type=int, default=32)
    t.add_argument("--patch-size", type=int, default=16)
    t.add_argument("--dim", type=int, default=32)
    t.add_argument("--heads", type=int, default=2)
    t.add_argument("--layers", type=int, default=1)
    t.add_argument("--out", dest="model_out", required=True, help="checkpoint directory")
    t.add_argument("--log", default=None)
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("evaluate", parents=[common], help="accuracy per length and factor")
    e.add_argument("--model", required=True)
    e.add_argument("--lengths", type=_int_list, default=[256, 512, 1024, 1536, 2048, 3072])
    e.add_argument("--compress", choices=["none", "fshift", "avgpool"], default="none")
    e.add_argument("--factors", type=_float_list, default=None)
    e.add_argument("--protocol", choices=["native", "sweep"], default="native",
                   help="native: fresh clips of exactly each length; sweep: one pool cut per length")
    e.add_argument("--n-eval", type=int, default=96)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", parents=[common], help="packed vs fixed-length throughput")
    b.add_argument("--n", type=int, default=256)
    b.add_argument("--median", type=float, default=300.0)
    b.add_argument("--sigma", type=float, default=0.7)
    b.add_argument("--budget", type=int, default=2048)
    b.add_argument("--fixed-T", type=int, default=None, help="tokens (default: mean length)")
    b.add_argument("--batch-size", type=int, default=12)
    b.add_argument("--f", type=int, default=8, help="frequency patch rows")
    b.add_argument("--patch-size", type=int, default=16)
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--timing", action="store_true",
                   help="run forward passes and add a tokens_per_s column (not reproducible)")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)
    return p


def _validate(args) -> None:
    if args.command == "grad-check":
        if len(args.dims) != 3 or min(args.dims) < 1 or args.dims[0] % args.dims[1]:
            raise CLIError("--dims needs D,H,layers with D divisible by H")
        # oracle-grade: finite differences always run in 64-bit
        args.precision = "f64"
    if args.command == "featurize":
        if args.compress_fshift is not None and args.compress_fshift not in FSHIFT_FACTORS:
            raise CLIError(f"--compress-fshift must be one of {', '.join(map(str, FSHIFT_FACTORS))}")
        if args.pad_to_multiple < 0:
            raise CLIError("--pad-to-multiple must be >= 0")
    for name in ("budget", "epochs", "n_train", "n_eval", "batch_size", "n"):
        v = getattr(args, name, None)
        if v is not None and v < (0 if name == "epochs" else 1):
            raise CLIError(f"--{name.replace('_', '-')} must be positive")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.seed is None:
            args.seed = _default_seed()
        _validate(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
