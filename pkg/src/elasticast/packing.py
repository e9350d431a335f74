"""Greedy first-come-first-served sequence packing and token accounting."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np

PAD = -1
# coordinate marking a zero-embedding filler token (fixed-length padding)
BLANK = -1
DEFAULT_BUDGET = 2048


class PackingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    """One sample's tokens, shape ``(L, width)``, with ``(freq, time)`` coords.

    ``embedded`` tells whether ``tokens`` are already model embeddings or
    still flattened raw patches waiting for the patch projection.
    """

    tokens: np.ndarray
    coords: np.ndarray
    sample_id: object = None
    embedded: bool = True

    def __post_init__(self):
        t = np.asarray(self.tokens)
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if t.ndim != 2:
            raise ValueError(f"tokens must be 2-D, got shape {t.shape}")
        if len(c) != len(t):
            raise ValueError("coords and tokens disagree in length")
        object.__setattr__(self, "tokens", t)
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def from_grid(cls, grid) -> "TokenSequence":
        return cls(grid.flat(), grid.coords, grid.sample_id, embedded=False)


class Placement(NamedTuple):
    sample_id: object
    row: int
    slot: int
    start: int
    length: int


@dataclass(frozen=True)
class PackedBatch:
    tokens: np.ndarray          # (B', N', width), zeros at PAD
    segment_ids: np.ndarray     # (B', N'), slot index or PAD
    coords: np.ndarray          # (B', N', 2), zeros at PAD
    placements: tuple
    budget: int
    embedded: bool = True

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def row_len(self) -> int:
        return self.tokens.shape[1]

    @property
    def n_samples(self) -> int:
        return len(self.placements)

    @property
    def max_slots(self) -> int:
        """Largest number of samples sharing a row."""
        return int(self.segment_ids.max()) + 1 if self.n_samples else 0

    @property
    def lengths(self) -> list:
        return [p.length for p in self.placements]

    def attention_mask(self) -> np.ndarray:
        return build_attention_mask(self.segment_ids)

    def pool_mask(self) -> np.ndarray:
        return build_pool_mask(self.segment_ids, self.max_slots)

    def with_extra_padding(self, extra: int) -> "PackedBatch":
        """Same batch with ``extra`` additional PAD positions on every row."""
        b, n, w = self.tokens.shape
        tokens = np.concatenate([self.tokens, np.zeros((b, extra, w), self.tokens.dtype)], 1)
        seg = np.concatenate([self.segment_ids, np.full((b, extra), PAD)], 1)
        coords = np.concatenate([self.coords, np.zeros((b, extra, 2), np.int64)], 1)
        return PackedBatch(tokens, seg, coords, self.placements, max(self.budget, n + extra),
                           self.embedded)


def assign_rows(lengths: Sequence[int], budget: int = DEFAULT_BUDGET) -> list:
    """Row layout of the greedy fill, as a list of lists of sample indices."""
    rows: list = []
    used = budget + 1
    for i, length in enumerate(lengths):
        if length > budget:
            raise PackingError(f"sample {i} has {length} tokens, more than the budget {budget}")
        if length < 1:
            raise PackingError(f"sample {i} is empty")
        if used + length > budget:
            rows.append([])
            used = 0
        rows[-1].append(i)
        used += length
    return rows


def pack(samples: Sequence[TokenSequence], budget: int = DEFAULT_BUDGET) -> PackedBatch:
    """Pack samples in input order, opening a new row whenever the next one
    would overflow ``budget``. Rows are padded to the longest row."""
    if not samples:
        raise PackingError("nothing to pack")
    widths = {s.width for s in samples}
    if len(widths) != 1:
        raise PackingError(f"inconsistent token widths {sorted(widths)}")
    if len({s.embedded for s in samples}) != 1:
        raise PackingError("cannot mix embedded and raw-patch samples")
    for i, s in enumerate(samples):
        if len(s) > budget:
            raise PackingError(
                f"sample {s.sample_id if s.sample_id is not None else i} has {len(s)} tokens, "
                f"more than the budget {budget}")
    rows = assign_rows([len(s) for s in samples], budget)
    row_len = max(sum(len(samples[i]) for i in r) for r in rows)
    width = widths.pop()
    dtype = np.result_type(*[s.tokens.dtype for s in samples])
    tokens = np.zeros((len(rows), row_len, width), dtype=dtype)
    seg = np.full((len(rows), row_len), PAD, dtype=np.int64)
    coords = np.zeros((len(rows), row_len, 2), dtype=np.int64)
    placements = [None] * len(samples)
    for r, members in enumerate(rows):
        start = 0
        for slot, i in enumerate(members):
            s = samples[i]
            end = start + len(s)
            tokens[r, start:end] = s.tokens
            coords[r, start:end] = s.coords
            seg[r, start:end] = slot
            sid = s.sample_id if s.sample_id is not None else i
            placements[i] = Placement(sid, r, slot, start, len(s))
            start = end
    return PackedBatch(tokens, seg, coords, tuple(placements), budget, samples[0].embedded)


def build_attention_mask(segment_ids) -> np.ndarray:
    """``M[..., i, j]`` is true iff tokens i and j share a non-PAD segment."""
    seg = np.asarray(segment_ids)
    same = seg[..., :, None] == seg[..., None, :]
    valid = seg != PAD
    return same & valid[..., :, None] & valid[..., None, :]


def build_pool_mask(segment_ids, n: int) -> np.ndarray:
    """``M[..., i, j]`` is true iff token j belongs to slot i (``i < n``)."""
    seg = np.asarray(segment_ids)
    slots = np.arange(n).reshape((1,) * (seg.ndim - 1) + (n, 1))
    return seg[..., None, :] == slots


def unpack(pooled: np.ndarray, placements: Sequence[Placement]) -> np.ndarray:
    """Gather per-slot vectors back into input order, shape ``(B, D)``."""
    pooled = np.asarray(pooled)
    n_rows, n_slots = pooled.shape[:2]
    rows = np.array([p.row for p in placements], dtype=np.int64)
    slots = np.array([p.slot for p in placements], dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows
                      or slots.min() < 0 or slots.max() >= n_slots):
        raise PackingError("placement references a row or slot outside the pooled grid")
    return pooled[rows, slots]


@dataclass(frozen=True)
class PackingStats:
    total_tokens: int
    pad_tokens: int
    cut_tokens: int
    native_tokens: int
    rows: int

    @property
    def pad_ratio(self) -> float:
        return self.pad_tokens / self.total_tokens if self.total_tokens else 0.0

    @property
    def cut_ratio(self) -> float:
        return self.cut_tokens / self.native_tokens if self.native_tokens else 0.0

    @property
    def pad_fraction(self) -> Fraction:
        return Fraction(self.pad_tokens, self.total_tokens)

    @property
    def informative_fraction(self) -> float:
        return 1.0 - self.pad_ratio

    def __add__(self, other: "PackingStats") -> "PackingStats":
        return PackingStats(self.total_tokens + other.total_tokens,
                            self.pad_tokens + other.pad_tokens,
                            self.cut_tokens + other.cut_tokens,
                            self.native_tokens + other.native_tokens,
                            self.rows + other.rows)


def fixed_length_stats(lengths: Sequence[int], T: int) -> PackingStats:
    """Accounting for trimming or padding every sample to ``T`` tokens."""
    if T <= 0:
        raise ValueError("T must be positive")
    lengths = np.asarray(lengths, dtype=np.int64)
    pad = int(np.maximum(0, T - lengths).sum())
    cut = int(np.maximum(0, lengths - T).sum())
    return PackingStats(len(lengths) * T, pad, cut, int(lengths.sum()), len(lengths))


def packed_stats(batch: PackedBatch, native_lengths: Sequence[int] | None = None) -> PackingStats:
    native = int(np.sum(native_lengths if native_lengths is not None else batch.lengths))
    total = batch.n_rows * batch.row_len
    return PackingStats(total, total - native, 0, native, batch.n_rows)


def packed_length_stats(lengths: Sequence[int], budget: int = DEFAULT_BUDGET,
                        batch_size: int | None = None) -> PackingStats:
    """Packing accounting from lengths alone, split into packing batches of
    ``batch_size`` consecutive samples (all at once if ``None``)."""
    lengths = [int(x) for x in lengths]
    step = batch_size or max(len(lengths), 1)
    total = PackingStats(0, 0, 0, 0, 0)
    for i in range(0, len(lengths), step):
        chunk = lengths[i:i + step]
        rows = assign_rows(chunk, budget)
        row_len = max(sum(chunk[j] for j in r) for r in rows)
        t = len(rows) * row_len
        total = total + PackingStats(t, t - sum(chunk), 0, sum(chunk), len(rows))
    return total
