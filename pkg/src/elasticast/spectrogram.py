"""Audio to log-mel spectrograms, temporal compression and patchification."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
SPEC_MAGIC = b"SPEC1"


class AudioFormatError(ValueError):
    """Raised for WAV files that are not 16-bit PCM mono."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("waveform samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """Log-mel energies laid out as ``(n_mels, n_frames)``."""

    energies: np.ndarray
    frame_shift_ms: float = 10.0

    def __post_init__(self):
        e = np.asarray(self.energies)
        if e.ndim != 2 or e.shape[1] < 1 or e.shape[0] < 1:
            raise ValueError(f"energies must be a non-empty 2-D grid, got shape {e.shape}")
        if not self.frame_shift_ms > 0:
            raise ValueError("frame_shift_ms must be positive")
        object.__setattr__(self, "energies", e)

    @property
    def n_mels(self) -> int:
        return self.energies.shape[0]

    @property
    def n_frames(self) -> int:
        return self.energies.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping ``p x p`` patches in time-major order.

    ``patches`` has shape ``(S, p, p)`` and ``coords`` has shape ``(S, 2)``
    holding ``(freq_index, time_index)`` for each patch.
    """

    patches: np.ndarray
    coords: np.ndarray
    patch_size: int = 16
    sample_id: object = None
    grid_shape: tuple = field(default=(0, 0))

    def __len__(self) -> int:
        return len(self.patches)

    def flat(self) -> np.ndarray:
        return self.patches.reshape(len(self.patches), -1)


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM mono WAV file into a waveform scaled to [-1, 1]."""
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioFormatError(f"cannot read {path}: {exc}") from exc
    if n_channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {n_channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if data.size == 0:
        raise AudioFormatError(f"{path}: no audio frames")
    return Waveform(data, rate)


def save_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin: float = 20.0, fmax: float | None = None) -> np.ndarray:
    """HTK-style triangular filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (center - lo)
    down = (hi - freqs) / (hi - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers(n_mels: int, sample_rate: int, fmin: float = 20.0,
                fmax: float | None = None) -> np.ndarray:
    fmax = sample_rate / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def frame_count(n_samples: int, window: int, shift: int) -> int:
    """Frames without edge padding: ``1 + (n - window) // shift``."""
    if n_samples < window:
        return 0
    return 1 + (n_samples - window) // shift


def _ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000.0))


def mel_spectrogram(w: Waveform, window_ms: float = 25.0, shift_ms: float = 10.0,
                    n_mels: int = 128) -> Spectrogram:
    """Log-mel filterbank energies of a waveform.

    Frames are taken without padding, a Hann window is applied and the
    power spectrum is projected on ``n_mels`` triangular filters. Energies
    are ``log(mel + 1e-10)``.
    """
    if window_ms <= 0 or shift_ms <= 0:
        raise ValueError("window_ms and shift_ms must be positive")
    win = _ms_to_samples(window_ms, w.sample_rate)
    hop = _ms_to_samples(shift_ms, w.sample_rate)
    n = frame_count(w.samples.size, win, hop)
    if n < 1:
        raise ValueError(
            f"waveform of {w.samples.size} samples is shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    frames = w.samples[idx] * np.hanning(win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(n_mels, n_fft, w.sample_rate)
    energies = np.log(fb @ power.T + LOG_FLOOR)
    return Spectrogram(energies, float(shift_ms))


def compress_fshift(w: Waveform, c: float, shift_ms: float = 10.0, **kwargs) -> Spectrogram:
    """Lower the temporal resolution by stretching the frame shift by ``c``."""
    if not c >= 1.0:
        raise ValueError(f"compression factor must be >= 1.0, got {c}")
    return mel_spectrogram(w, shift_ms=shift_ms * c, **kwargs)


def compress_avgpool(s: Spectrogram, c: int) -> Spectrogram:
    """Average non-overlapping groups of ``c`` frames (kernel = stride = 1 x c)."""
    if isinstance(c, bool) or int(c) != c or c not in (1, 2, 3, 4):
        raise ValueError(f"avg-pool factor must be an integer in 1..4, got {c!r}")
    c = int(c)
    if s.n_frames < c:
        raise ValueError(f"need at least {c} frames, got {s.n_frames}")
    keep = (s.n_frames // c) * c
    pooled = s.energies[:, :keep].reshape(s.n_mels, keep // c, c).mean(axis=2)
    return Spectrogram(pooled, s.frame_shift_ms * c)


def pad_frames(s: Spectrogram, multiple: int) -> Spectrogram:
    """Zero-pad the frame axis up to the next multiple of ``multiple``."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    target = -(-s.n_frames // multiple) * multiple
    if target == s.n_frames:
        return s
    e = np.zeros((s.n_mels, target), dtype=s.energies.dtype)
    e[:, :s.n_frames] = s.energies
    return Spectrogram(e, s.frame_shift_ms)


def patchify(s: Spectrogram, p: int = 16, sample_id=None) -> PatchGrid:
    """Split a spectrogram into ``p x p`` patches, time-major.

    The time axis is truncated to the largest multiple of ``p``.
    """
    if s.n_mels % p:
        raise ValueError(f"n_mels={s.n_mels} is not divisible by patch size {p}")
    nf, nt = s.n_mels // p, s.n_frames // p
    if nt == 0:
        raise ValueError(f"{s.n_frames} frames is fewer than one patch of width {p}")
    e = s.energies[:, :nt * p]
    # (nf, p, nt, p) -> (nt, nf, p, p)
    patches = e.reshape(nf, p, nt, p).transpose(2, 0, 1, 3).reshape(nt * nf, p, p)
    b, a = np.divmod(np.arange(nt * nf), nf)
    coords = np.stack([a, b], axis=1)
    return PatchGrid(np.ascontiguousarray(patches), coords, p, sample_id, (nf, nt))


def unpatchify(g: PatchGrid) -> np.ndarray:
    nf, nt = g.grid_shape
    p = g.patch_size
    out = np.empty((nf * p, nt * p), dtype=g.patches.dtype)
    for patch, (a, b) in zip(g.patches, g.coords):
        out[a * p:(a + 1) * p, b * p:(b + 1) * p] = patch
    return out


def write_spec(path, s: Spectrogram) -> None:
    """Write the SPEC1 binary format (little-endian, float32, frequency-major)."""
    shift_us = int(round(s.frame_shift_ms * 1000))
    header = SPEC_MAGIC + struct.pack("<III", s.n_mels, s.n_frames, shift_us)
    body = np.ascontiguousarray(s.energies, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_spec(path) -> Spectrogram:
    data = Path(path).read_bytes()
    if data[:5] != SPEC_MAGIC:
        raise ValueError(f"{path}: not a SPEC1 file")
    n_mels, n_frames, shift_us = struct.unpack_from("<III", data, 5)
    expected = 17 + 4 * n_mels * n_frames
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    e = np.frombuffer(data, dtype="<f4", offset=17).reshape(n_mels, n_frames)
    return Spectrogram(e.astype(np.float32), shift_us / 1000.0)
