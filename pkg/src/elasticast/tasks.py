"""Synthetic variable-length audio classification tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectrogram import Waveform
from .trainer import Example

SAMPLE_RATE = 16000


def frames_to_samples(n_frames: int, window_ms=25.0, shift_ms=10.0, sr=SAMPLE_RATE) -> int:
    win = int(round(window_ms * sr / 1000))
    hop = int(round(shift_ms * sr / 1000))
    return (n_frames - 1) * hop + win


@dataclass(frozen=True)
class TaskSpec:
    """Class-dependent chirps confined to the tail of each clip.

    Each class is a (start band, direction) pair: a short tone sweep
    repeated through the final ``1 - signal_start`` fraction of the clip,
    over low-level noise. Lengths are log-normal in frames, clipped to
    ``[min_frames, max_frames]``.
    """

    n_classes: int = 4
    min_frames: int = 256
    max_frames: int = 3072
    median_frames: float = 1024.0
    sigma: float = 0.6
    signal_start: float = 0.8
    chirp_ms: float = 120.0
    chirp_every_ms: float = 250.0
    noise: float = 0.02
    distractor_every_ms: float = 0.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0 < self.min_frames <= self.max_frames:
            raise ValueError("bad length range")

    def draw_lengths(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raw = rng.lognormal(np.log(self.median_frames), self.sigma, size=n)
        return np.clip(np.round(raw), self.min_frames, self.max_frames).astype(int)

    def chirp_band(self, label: int) -> tuple:
        """Start and end frequency (Hz) of the sweep for ``label``."""
        pairs = self.n_classes // 2 + self.n_classes % 2
        lo_edges = np.geomspace(300.0, 3000.0, pairs + 1)
        band = label // 2
        f0, f1 = lo_edges[band], lo_edges[band + 1]
        return (f0, f1) if label % 2 == 0 else (f1, f0)

    def _chirp(self, label, n, rng):
        f0, f1 = self.chirp_band(label)
        t = np.arange(n) / self.sample_rate
        dur = n / self.sample_rate
        # exponential sweep
        k = np.log(f1 / f0) / dur
        phase = 2 * np.pi * f0 * (np.exp(k * t) - 1) / k + rng.uniform(0, 2 * np.pi)
        env = np.hanning(n)
        return 0.5 * env * np.sin(phase)

    def synthesize(self, label: int, n_frames: int, rng: np.random.Generator) -> Waveform:
        n = frames_to_samples(n_frames, sr=self.sample_rate)
        x = self.noise * rng.standard_normal(n)
        chirp_n = int(self.chirp_ms * self.sample_rate / 1000)
        every = int(self.chirp_every_ms * self.sample_rate / 1000)
        start = int(self.signal_start * n)
        for pos in range(start, n - chirp_n + 1, every):
            x[pos:pos + chirp_n] += self._chirp(label, chirp_n, rng)
        if self.distractor_every_ms > 0 and start > chirp_n:
            rate = start / (self.distractor_every_ms * self.sample_rate / 1000)
            for _ in range(rng.poisson(rate)):
                other = int((label + rng.integers(1, self.n_classes)) % self.n_classes)
                pos = int(rng.integers(0, start - chirp_n))
                x[pos:pos + chirp_n] += self._chirp(other, chirp_n, rng)
        return Waveform(np.clip(x, -1.0, 1.0), self.sample_rate)

    def dataset(self, n: int, seed: int, n_frames=None) -> list:
        """``n`` labelled clips; fixed ``n_frames`` overrides the length draw."""
        rng = np.random.default_rng(seed)
        if n_frames is None:
            lengths = self.draw_lengths(n, rng)
        else:
            lengths = np.full(n, int(n_frames))
        labels = np.arange(n) % self.n_classes
        rng.shuffle(labels)
        return [Example(self.synthesize(int(y), int(L), rng), int(y), f"s{seed}_{i}")
                for i, (y, L) in enumerate(zip(labels, lengths))]
