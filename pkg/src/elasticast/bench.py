"""Throughput and token-efficiency comparison of packed vs. fixed-length batching."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from .packing import TokenSequence, fixed_length_stats, pack, packed_stats
from .trainer import trim_or_pad


@dataclass(frozen=True)
class BenchRow:
    regime: str
    batch: int
    rows: int
    total_tokens: int
    informative_tokens: int
    pad_ratio: float
    cut_ratio: float
    seconds: float

    @property
    def informative_fraction(self) -> float:
        return self.informative_tokens / self.total_tokens if self.total_tokens else 0.0

    @property
    def tokens_per_s(self) -> float:
        return self.total_tokens / self.seconds if self.seconds > 0 else float("inf")


def lognormal_lengths(n: int, median: float, sigma: float, lo: int, hi: int,
                      rng: np.random.Generator) -> np.ndarray:
    raw = rng.lognormal(np.log(median), sigma, size=n)
    return np.clip(np.round(raw), lo, hi).astype(int)


def _sequences(lengths, width, n_freq, rng, dtype):
    out = []
    for i, n in enumerate(lengths):
        idx = np.arange(n)
        coords = np.stack([idx % n_freq, idx // n_freq], 1)
        out.append(TokenSequence(rng.standard_normal((n, width)).astype(dtype), coords, i,
                                 embedded=False))
    return out


def bench(lengths, budget: int, fixed_T: int, batch_size: int, config: enc.ModelConfig,
          seed: int = 0, dtype=np.float64, timing: bool = True) -> list:
    """Forward every sample once per regime and account for the tokens processed.

    ``lengths`` and ``fixed_T`` are in tokens. With ``timing`` off, no forward
    pass runs and ``seconds`` is 0.
    """
    rng = np.random.default_rng(seed)
    if max(lengths) // config.f_max + 1 > config.t_max:
        raise ValueError(f"longest sample ({max(lengths)} tokens) exceeds the positional table")
    seqs = _sequences(lengths, config.patch_size ** 2, config.f_max, rng, dtype)
    models = {"packed": enc.init_params(replace(config, pooling="attention"), seed, dtype),
              "fixed": enc.init_params(replace(config, pooling="cls"), seed, dtype)}

    out = []
    for regime in ("packed", "fixed"):
        total = None
        seconds = 0.0
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            if regime == "packed":
                batch = pack(chunk, budget)
                stats = packed_stats(batch)
            else:
                batch = pack([trim_or_pad(s, fixed_T) for s in chunk], fixed_T)
                stats = fixed_length_stats([len(s) for s in chunk], fixed_T)
            if timing:
                t0 = time.perf_counter()
                enc.encoder_forward(batch, models[regime])
                seconds += time.perf_counter() - t0
            total = stats if total is None else total + stats
        informative = total.native_tokens - total.cut_tokens
        out.append(BenchRow(regime, batch_size, total.rows, total.total_tokens, informative,
                            total.pad_ratio, total.cut_ratio, seconds))
    return out
