"""Toy-scale training: packed (elastic) and fixed-length (cls baseline) regimes,
with optional mixed-resolution compression."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import encoder as enc
from .packing import (BLANK, DEFAULT_BUDGET, TokenSequence, fixed_length_stats, pack,
                      packed_stats)
from .spectrogram import (Spectrogram, Waveform, compress_avgpool, compress_fshift,
                          mel_spectrogram, patchify)

log = logging.getLogger(__name__)

FSHIFT_FACTORS = tuple(round(1.0 + 0.2 * i, 1) for i in range(16))
AVGPOOL_FACTORS = (1, 2, 3, 4)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 12
    budget: int = DEFAULT_BUDGET
    compression: str = "none"          # none | fshift | avgpool
    factors: tuple = ()
    mode: str = "elastic"              # elastic | fixed
    fixed_T: int = 1024                # frames, fixed mode only
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.mode not in ("elastic", "fixed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.compression not in ("none", "fshift", "avgpool"):
            raise ValueError(f"unknown compression {self.compression!r}")
        if self.compression == "fshift" and not set(self.compression_set) <= set(FSHIFT_FACTORS):
            raise ValueError(f"fshift factors must come from {FSHIFT_FACTORS}")
        if self.compression == "avgpool" and not set(self.compression_set) <= set(AVGPOOL_FACTORS):
            raise ValueError(f"avgpool factors must come from {AVGPOOL_FACTORS}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def compression_set(self) -> tuple:
        if self.factors:
            return tuple(self.factors)
        return {"fshift": FSHIFT_FACTORS, "avgpool": AVGPOOL_FACTORS}.get(self.compression, (1.0,))


def sample_compression(cfg: TrainConfig, rng: np.random.Generator):
    """Uniform draw from the configured compression set."""
    choices = cfg.compression_set
    if not choices:
        raise ValueError("empty compression set")
    return choices[rng.integers(len(choices))]


def trim_or_pad(s: TokenSequence, T: int) -> TokenSequence:
    """Keep the first ``T`` tokens, or append zero-embedding tokens up to ``T``.

    Appended tokens stay inside the sample's segment, so a baseline model
    attends to them like real tokens. Their coordinates are ``BLANK``, which
    the encoder embeds as an all-zero vector.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    n = len(s)
    if n >= T:
        return TokenSequence(s.tokens[:T], s.coords[:T], s.sample_id, s.embedded)
    extra = T - n
    tokens = np.concatenate([s.tokens, np.zeros((extra, s.width), s.tokens.dtype)])
    coords = np.concatenate([s.coords, np.full((extra, 2), BLANK, np.int64)])
    return TokenSequence(tokens, coords, s.sample_id, s.embedded)


def cut_to(s: TokenSequence, T: int) -> TokenSequence:
    """Elastic evaluation: shorten only when longer than ``T``."""
    return s if len(s) <= T else TokenSequence(s.tokens[:T], s.coords[:T], s.sample_id, s.embedded)


# --------------------------------------------------------------------------
# featurization of toy examples


@dataclass(frozen=True)
class Example:
    """A labelled clip; ``audio`` is a Waveform or a Spectrogram."""
    audio: object
    label: int
    sample_id: object = None


def featurize(ex: Example, n_mels: int, compression: str = "none", factor=1.0) -> Spectrogram:
    if isinstance(ex.audio, Waveform):
        if compression == "fshift":
            return compress_fshift(ex.audio, factor, n_mels=n_mels)
        spec = mel_spectrogram(ex.audio, n_mels=n_mels)
    else:
        spec = ex.audio
        if compression == "fshift":
            raise ValueError("fshift compression needs a waveform")
    if compression == "avgpool":
        spec = compress_avgpool(spec, int(factor))
    return spec


def normalize(spec: Spectrogram, mean: float, std: float) -> Spectrogram:
    return Spectrogram((spec.energies - mean) / std, spec.frame_shift_ms)


def tokens_from_spec(spec: Spectrogram, patch_size: int, sample_id=None, dtype=np.float64):
    grid = patchify(spec, patch_size, sample_id)
    return TokenSequence(grid.flat().astype(dtype), grid.coords, sample_id, embedded=False)


# --------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: enc.ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: enc.ModelParams, grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k in params.names():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def prepare_batch(seqs: Sequence[TokenSequence], cfg: TrainConfig, patch_size: int,
                  n_freq: int):
    """Pack a list of token sequences for one optimisation step.

    Returns ``(PackedBatch, PackingStats)``.
    """
    if cfg.mode == "elastic":
        batch = pack(seqs, cfg.budget)
        return batch, packed_stats(batch)
    T = (cfg.fixed_T // patch_size) * n_freq
    fixed = [trim_or_pad(s, T) for s in seqs]
    batch = pack(fixed, T)
    return batch, fixed_length_stats([len(s) for s in seqs], T)


def loss_and_grads(batch, labels, params: enc.ModelParams):
    trace = enc.encoder_forward(batch, params)
    loss, dlogits = enc.cross_entropy(trace.logits, labels)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    return loss, enc.backward(trace, dlogits, params), trace


@dataclass
class Trainer:
    """Holds parameters, optimiser state and feature normalisation for a run."""

    params: enc.ModelParams
    cfg: TrainConfig
    n_mels: int = 32
    norm: tuple = (0.0, 1.0)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.opt = Adam(self.params, self.cfg.lr, self.cfg.betas, self.cfg.eps)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step_count = 0
        self._cache = {}

    @property
    def n_freq(self) -> int:
        return self.n_mels // self.params.config.patch_size

    def sequence(self, ex: Example, compression="none", factor=1.0) -> TokenSequence:
        key = (ex.sample_id, compression, factor)
        if ex.sample_id is not None and compression != "fshift" and key in self._cache:
            return self._cache[key]
        spec = normalize(featurize(ex, self.n_mels, compression, factor), *self.norm)
        seq = tokens_from_spec(spec, self.params.config.patch_size, ex.sample_id,
                               self.params.dtype)
        if ex.sample_id is not None and compression != "fshift":
            self._cache[key] = seq
        return seq

    def step(self, examples: Sequence[Example]) -> dict:
        cfg = self.cfg
        seqs = []
        for ex in examples:
            factor = sample_compression(cfg, self.rng) if cfg.compression != "none" else 1.0
            seqs.append(self.sequence(ex, cfg.compression, factor))
        batch, stats = prepare_batch(seqs, cfg, self.params.config.patch_size, self.n_freq)
        labels = [ex.label for ex in examples]
        loss, grads, _ = loss_and_grads(batch, labels, self.params)
        self.opt.step(self.params, grads)
        self.step_count += 1
        row = {"step": self.step_count, "loss": loss, "lr": cfg.lr,
               "pad_ratio": stats.pad_ratio, "cut_ratio": stats.cut_ratio}
        self.history.append(row)
        return row

    def train_epoch(self, data: Sequence[Example]) -> float:
        """One shuffled pass; returns the mean step loss."""
        order = self.rng.permutation(len(data))
        losses = []
        for i in range(0, len(order), self.cfg.batch_size):
            losses.append(self.step([data[j] for j in order[i:i + self.cfg.batch_size]])["loss"])
        mean = float(np.mean(losses))
        log.info("epoch done: steps=%d mean_loss=%.4f", len(losses), mean)
        return mean

    def fit(self, data: Sequence[Example]) -> "Trainer":
        for _ in range(self.cfg.epochs):
            self.train_epoch(data)
        return self

    # ------------------------------------------------------------------
    def predict_sequences(self, seqs: Sequence[TokenSequence], chunk: int = 32) -> np.ndarray:
        out = []
        for i in range(0, len(seqs), chunk):
            part = seqs[i:i + chunk]
            if self.cfg.mode == "elastic":
                batch = pack(part, max(self.cfg.budget, max(len(s) for s in part)))
            elif len({len(s) for s in part}) == 1:
                batch = pack(part, len(part[0]))
            else:
                # one sample per row without padding anything
                out.append(enc.forward_isolated(part, self.params))
                continue
            out.append(enc.encoder_forward(batch, self.params).logits)
        return np.concatenate(out)

    def evaluate(self, data: Sequence[Example], eval_lengths: Sequence[int],
                 compression="none", factor=1.0) -> dict:
        """Top-1 accuracy per evaluation length (in frames).

        Elastic models only cut inputs longer than the length; the fixed
        baseline is trimmed or padded to it.
        """
        base = [self.sequence(ex, compression, factor) for ex in data]
        labels = np.array([ex.label for ex in data])
        result = {}
        for x in eval_lengths:
            T = (int(x) // self.params.config.patch_size) * self.n_freq
            if self.cfg.mode == "elastic":
                seqs = [cut_to(s, T) for s in base]
            else:
                seqs = [trim_or_pad(s, T) for s in base]
            pred = self.predict_sequences(seqs).argmax(1)
            result[int(x)] = float((pred == labels).mean())
        return result

    def accuracy(self, data: Sequence[Example], compression="none", factor=1.0) -> float:
        """Top-1 accuracy on native-length inputs."""
        seqs = [self.sequence(ex, compression, factor) for ex in data]
        pred = self.predict_sequences(seqs).argmax(1)
        return float((pred == np.array([ex.label for ex in data])).mean())


def spec_stats(data: Sequence[Example], n_mels: int, limit: int = 64) -> tuple:
    """Mean and std of log-mel energies over (a prefix of) a dataset."""
    vals = [featurize(ex, n_mels).energies.ravel() for ex in data[:limit]]
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std() or 1.0)


def default_model_config(n_classes: int, patch_size: int = 16, n_mels: int = 32, **kw):
    base = dict(dim=32, heads=2, layers=1, patch_size=patch_size, n_classes=n_classes,
                f_max=max(n_mels // patch_size, 1), t_max=192)
    base.update(kw)
    return enc.ModelConfig(**base)


def with_mode(cfg: enc.ModelConfig, mode: str) -> enc.ModelConfig:
    return replace(cfg, pooling="attention" if mode == "elastic" else "cls")


def train_toy(task, mode: str = "elastic", compression: str = "none", factors=(), *,
              epochs: int = 1, lr: float = 1e-3, batch_size: int = 12, budget: int = DEFAULT_BUDGET,
              fixed_T: int = 1024, n_train: int = 480, n_mels: int = 32, patch_size: int = 16,
              seed: int = 0, dtype=np.float32, model_kw: dict | None = None) -> Trainer:
    """Train one model on ``task.dataset(n_train, seed)`` and return its trainer."""
    data = task.dataset(n_train, seed)
    cfg = TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, budget=budget,
                      compression=compression, factors=tuple(factors), mode=mode,
                      fixed_T=fixed_T, seed=seed)
    mc = default_model_config(task.n_classes, patch_size, n_mels, **(model_kw or {}))
    params = enc.init_params(with_mode(mc, mode), seed, dtype)
    return Trainer(params, cfg, n_mels, spec_stats(data, n_mels)).fit(data)


# --------------------------------------------------------------------------
# persisted runs


def save_run(path, trainer: Trainer, task=None) -> None:
    """Checkpoint parameters plus what evaluation needs to rebuild the trainer."""
    cfg = trainer.cfg
    extra = {"mode": cfg.mode, "fixed_T": cfg.fixed_T, "budget": cfg.budget,
             "compression": cfg.compression, "factors": list(cfg.factors), "lr": cfg.lr,
             "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed,
             "n_mels": trainer.n_mels, "norm": list(trainer.norm)}
    if task is not None:
        extra["task"] = asdict(task)
    enc.save_checkpoint(path, trainer.params, extra)


def load_run(path) -> tuple:
    """``(Trainer, task_kwargs or None)`` from a directory written by :func:`save_run`."""
    params, extra = enc.load_checkpoint(path)
    try:
        cfg = TrainConfig(lr=extra["lr"], epochs=extra["epochs"], batch_size=extra["batch_size"],
                          budget=extra["budget"], compression=extra["compression"],
                          factors=tuple(extra["factors"]), mode=extra["mode"],
                          fixed_T=extra["fixed_T"], seed=extra["seed"])
        trainer = Trainer(params, cfg, extra["n_mels"], tuple(extra["norm"]))
    except KeyError as exc:
        raise ValueError(f"checkpoint {path} lacks training metadata ({exc.args[0]})") from None
    return trainer, extra.get("task")
