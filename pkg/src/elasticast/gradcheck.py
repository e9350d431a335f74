"""Central finite-difference verification of the analytic backward pass."""

from __future__ import annotations

import numpy as np

from . import encoder as enc
from .packing import TokenSequence, pack


def random_problem(seed: int, dim: int = 16, heads: int = 2, layers: int = 2,
                   pooling: str = "attention", n_samples: int = 4, patch_size: int = 4,
                   n_classes: int = 3):
    """A tiny packed batch with raw patches, labels and float64 parameters."""
    rng = np.random.default_rng(seed)
    cfg = enc.ModelConfig(dim=dim, heads=heads, layers=layers, patch_size=patch_size,
                          n_classes=n_classes, f_max=3, t_max=24, pooling=pooling)
    params = enc.init_params(cfg, seed)
    # move layer norms off their identity init so every group has a generic gradient
    for name, value in params.items():
        if "ln" in name:
            params[name] = value + rng.normal(0, 0.1, value.shape)
    samples = []
    for i in range(n_samples):
        n_freq = int(rng.integers(1, cfg.f_max + 1))
        n_time = int(rng.integers(1, 7))
        coords = np.array([[a, b] for b in range(n_time) for a in range(n_freq)])
        samples.append(TokenSequence(rng.standard_normal((len(coords), patch_size ** 2)),
                                     coords, i, embedded=False))
    if pooling == "cls":
        batch = _one_per_row(samples)
    else:
        budget = max(sum(len(s) for s in samples) // 2, max(len(s) for s in samples))
        batch = pack(samples, budget)
    labels = rng.integers(0, n_classes, n_samples)
    return params, batch, labels


def _one_per_row(samples):
    from .trainer import trim_or_pad
    T = max(len(s) for s in samples)
    return pack([trim_or_pad(s, T) for s in samples], T)


def loss_fn(params, batch, labels, scale: float = 1.0) -> float:
    return scale * enc.cross_entropy(enc.encoder_forward(batch, params).logits, labels)[0]


def analytic_grads(params, batch, labels, scale: float = 1.0) -> dict:
    trace = enc.encoder_forward(batch, params)
    _, dlogits = enc.cross_entropy(trace.logits, labels)
    return enc.backward(trace, scale * dlogits, params)


def relative_error(a, n, floor: float = 1e-6):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def check_gradients(params, batch, labels, eps: float = 1e-5, probes: int = 12,
                    seed: int = 0) -> dict:
    """Max relative error per parameter group over randomly probed entries.

    Entries whose gradient is structurally zero (e.g. positional rows no
    token uses) are always included and must match exactly.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_grads(params, batch, labels)
    report = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        g = grads[name].reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        errs = []
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn(params, batch, labels)
            flat[i] = old - eps
            down = loss_fn(params, batch, labels)
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            errs.append(0.0 if g[i] == numeric == 0.0 else float(relative_error(g[i], numeric)))
        report[name] = max(errs)
    return report


def grad_check(seed: int = 0, dim: int = 16, heads: int = 2, layers: int = 2,
               eps: float = 1e-5, probes: int = 12) -> dict:
    """Finite-difference report for both pooling variants of a random problem."""
    out = {}
    for pooling in ("attention", "cls"):
        params, batch, labels = random_problem(seed, dim, heads, layers, pooling)
        for name, err in check_gradients(params, batch, labels, eps, probes, seed).items():
            out[f"{pooling}:{name}"] = err
    return out
