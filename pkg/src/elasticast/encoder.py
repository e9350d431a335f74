"""Packed transformer encoder with masked self-attention and masked attention
pooling, implemented in numpy with hand-written backward passes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .packing import BLANK, PAD, PackedBatch, TokenSequence, build_attention_mask, build_pool_mask, pack, unpack

NEG_INF = -1e9
LN_EPS = 1e-6
_GELU_C = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    layers: int = 2
    patch_size: int = 16
    n_classes: int = 2
    f_max: int = 8
    t_max: int = 192
    mlp_ratio: int = 4
    pooling: str = "attention"  # or "cls"

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.pooling not in ("attention", "cls"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.n_classes < 1 or self.layers < 0:
            raise ValueError("n_classes must be >= 1 and layers >= 0")


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


def _layer_name(i: int, key: str) -> str:
    return f"layers.{i}.{key}"


class ModelParams:
    """Named parameter tensors in a fixed declaration order."""

    def __init__(self, config: ModelConfig, tensors: dict, seed: int | None = None):
        self.config = config
        self.tensors = dict(tensors)
        self.seed = seed

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    @property
    def dtype(self):
        return self["patch_w"].dtype

    def layer(self, i: int) -> dict:
        return {k: self[_layer_name(i, k)] for k in _LAYER_KEYS}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()}, self.seed)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.items()}, self.seed)

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    """Uniform ``+-1/sqrt(fan_in)`` for projections, N(0, 0.02) for
    positional tables, ones/zeros for layer norms."""
    rng = np.random.default_rng(seed)
    d, p2, k = config.dim, config.patch_size ** 2, config.n_classes
    hidden = config.mlp_ratio * d

    def uniform(fan_in, *shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t = {
        "patch_w": uniform(p2, p2, d),
        "patch_b": uniform(p2, d),
        "pos_freq": rng.normal(0.0, 0.02, size=(config.f_max, d)),
        "pos_time": rng.normal(0.0, 0.02, size=(config.t_max, d)),
    }
    for i in range(config.layers):
        layer = {
            "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
            "wq": uniform(d, d, d), "bq": uniform(d, d),
            "wk": uniform(d, d, d), "bk": uniform(d, d),
            "wv": uniform(d, d, d), "bv": uniform(d, d),
            "wo": uniform(d, d, d), "bo": uniform(d, d),
            "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
            "w1": uniform(d, d, hidden), "b1": uniform(d, hidden),
            "w2": uniform(hidden, hidden, d), "b2": uniform(hidden, d),
        }
        t.update({_layer_name(i, key): layer[key] for key in _LAYER_KEYS})
    t["lnf_g"], t["lnf_b"] = np.ones(d), np.zeros(d)
    if config.pooling == "attention":
        t.update({
            "pool_q": uniform(d, d),
            "pool_wk": uniform(d, d, d), "pool_bk": uniform(d, d),
            "pool_wv": uniform(d, d, d), "pool_bv": uniform(d, d),
            "pool_wo": uniform(d, d, d), "pool_bo": uniform(d, d),
        })
    else:
        t["cls_token"] = rng.normal(0.0, 0.02, size=d)
    t["head_w"] = uniform(d, d, k)
    t["head_b"] = uniform(d, k)
    return ModelParams(config, {n: np.asarray(v, dtype=dtype) for n, v in t.items()}, seed)


# --------------------------------------------------------------------------
# primitives


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def masked_softmax(scores, mask):
    """Softmax over the last axis with masked entries forced to ``-1e9``.
    Query rows with no allowed key come out as all zeros. ``scores`` is
    overwritten."""
    s = np.array(scores, copy=not isinstance(scores, np.ndarray) or not scores.flags.writeable)
    np.copyto(s, NEG_INF, where=~mask)
    s -= s.max(-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(-1, keepdims=True)
    s *= mask.any(-1, keepdims=True)
    return s


def softmax_backward(dp, p):
    """``dp`` is overwritten with the gradient w.r.t. the scores."""
    dp -= (dp * p).sum(-1, keepdims=True)
    dp *= p
    return dp


def _linear_grads(x, dy):
    """Weight and bias gradients of ``y = x @ w + b`` over leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return x2.T @ dy2, dy2.sum(0)


# --------------------------------------------------------------------------
# attention


def _split_heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _mhsa_forward(x, mask, w, heads):
    """``x``: (B, N, D); ``mask``: (B, N, N) boolean."""
    q = _split_heads(x @ w["wq"] + w["bq"], heads)
    k = _split_heads(x @ w["wk"] + w["bk"], heads)
    v = _split_heads(x @ w["wv"] + w["bv"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, mask[:, None])
    ctx = _merge_heads(p @ v)
    out = ctx @ w["wo"] + w["bo"]
    out = out * mask.any(-1)[..., None]
    return out, (x, q, k, v, p, ctx, scale, mask)


def _mhsa_backward(dout, cache, w, heads):
    x, q, k, v, p, ctx, scale, mask = cache
    dout = dout * mask.any(-1)[..., None]
    g = {}
    g["wo"], g["bo"] = _linear_grads(ctx, dout)
    dctx = _split_heads(dout @ w["wo"].T, heads)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    ds = softmax_backward(dctx @ v.transpose(0, 1, 3, 2), p) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dproj = _merge_heads(dproj)
        g["w" + name], g["b" + name] = _linear_grads(x, dproj)
        dx += dproj @ w["w" + name].T
    return dx, g


def _validate_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    if not np.array_equal(mask, np.swapaxes(mask, -1, -2)):
        raise ValueError("attention mask must be symmetric")
    diag = np.diagonal(mask, axis1=-2, axis2=-1)
    live = mask.any(-1)
    if np.any(live & ~diag):
        raise ValueError("a non-PAD query cannot attend to itself")
    return mask


def masked_self_attention(x, mask, weights: dict, heads: int, segment_ids=None):
    """Multi-head scaled dot-product attention restricted by ``mask``.

    ``x`` is ``(N, D)`` or ``(B, N, D)``; PAD rows (all-false in ``mask``)
    come out as zero vectors. When ``segment_ids`` is given, a non-PAD
    token with nothing to attend to is an error.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x, mask = x[None], np.asarray(mask)[None]
    mask = _validate_mask(mask)
    if segment_ids is not None:
        seg = np.asarray(segment_ids).reshape(mask.shape[:-1])
        if np.any((seg != PAD) & ~mask.any(-1)):
            raise ValueError("non-PAD token has an empty attention row")
    out, _ = _mhsa_forward(x, mask, weights, heads)
    return out[0] if squeeze else out


def _pool_forward(x, pool_mask, params):
    d = x.shape[-1]
    k = x @ params["pool_wk"] + params["pool_bk"]
    v = x @ params["pool_wv"] + params["pool_bv"]
    scale = 1.0 / math.sqrt(d)
    scores = (k @ params["pool_q"]) * scale                # (B, N)
    p = masked_softmax(np.broadcast_to(scores[:, None, :], pool_mask.shape), pool_mask)
    a = p @ v                                              # (B, n, D)
    live = pool_mask.any(-1)[..., None]
    out = (a @ params["pool_wo"] + params["pool_bo"]) * live
    return out, (x, k, v, p, a, scale, live)


def _pool_backward(dout, cache, params):
    x, k, v, p, a, scale, live = cache
    dout = dout * live
    g = {}
    g["pool_wo"], g["pool_bo"] = _linear_grads(a, dout)
    da = dout @ params["pool_wo"].T
    dv = p.transpose(0, 2, 1) @ da
    dscores = softmax_backward(da @ v.transpose(0, 2, 1), p).sum(1) * scale   # (B, N)
    g["pool_q"] = np.einsum("bn,bnd->d", dscores, k)
    dk = dscores[..., None] * params["pool_q"]
    g["pool_wk"], g["pool_bk"] = _linear_grads(x, dk)
    g["pool_wv"], g["pool_bv"] = _linear_grads(x, dv)
    dx = dk @ params["pool_wk"].T + dv @ params["pool_wv"].T
    return dx, g


def mask_attention_pool(x, pool_mask, params: ModelParams):
    """Per-slot readout, ``(B', N', D) -> (B', n, D)``; empty slots are zero."""
    out, _ = _pool_forward(np.asarray(x), np.asarray(pool_mask, dtype=bool), params)
    return out


def classify(pooled, params: ModelParams):
    return pooled @ params["head_w"] + params["head_b"]


# --------------------------------------------------------------------------
# embedding


def _check_coords(coords, config: ModelConfig):
    if not coords.size:
        return
    blank = (coords == BLANK).all(-1)
    live = coords[~blank]
    if live.size and (live[:, 0].max() >= config.f_max or live[:, 1].max() >= config.t_max
                      or live.min() < 0):
        raise ValueError(
            f"patch coordinate out of range: freq < {config.f_max} and time < {config.t_max} required")


def embed_tokens(patches, coords, params: ModelParams):
    """``patches @ P + b + pos_freq[a] + pos_time[b]`` for flattened patches.

    Tokens whose coordinates are ``(BLANK, BLANK)`` embed to exact zeros.
    """
    _check_coords(coords, params.config)
    blank = coords[..., 0] == BLANK
    safe = np.where(blank[..., None], 0, coords)
    out = (patches @ params["patch_w"] + params["patch_b"]
           + params["pos_freq"][safe[..., 0]] + params["pos_time"][safe[..., 1]])
    if blank.any():
        out = out * ~blank[..., None]
    return out


def embed(grid, params: ModelParams) -> TokenSequence:
    if grid.patch_size != params.config.patch_size:
        raise ValueError(
            f"patch size {grid.patch_size} does not match model patch size {params.config.patch_size}")
    flat = grid.flat().astype(params.dtype, copy=False)
    return TokenSequence(embed_tokens(flat, grid.coords, params), grid.coords, grid.sample_id)


# --------------------------------------------------------------------------
# full model


@dataclass
class ForwardTrace:
    logits: np.ndarray
    pooled: np.ndarray
    batch: PackedBatch
    caches: dict = field(default_factory=dict, repr=False)


def _prepare(batch: PackedBatch, params: ModelParams):
    cfg = params.config
    dtype = params.dtype
    valid = batch.segment_ids != PAD
    tokens = batch.tokens.astype(dtype, copy=False)
    if batch.embedded:
        x = tokens * valid[..., None]
    else:
        # embed_tokens already zeroes BLANK tokens
        x = embed_tokens(tokens, batch.coords, params) * valid[..., None]
    seg = batch.segment_ids
    if cfg.pooling == "cls":
        if batch.max_slots > 1:
            raise ValueError("cls pooling needs one sample per row")
        b = batch.n_rows
        cls = np.broadcast_to(params["cls_token"], (b, 1, cfg.dim))
        x = np.concatenate([cls, x], axis=1)
        seg = np.concatenate([np.zeros((b, 1), seg.dtype), seg], axis=1)
    return x, seg, valid


def encoder_forward(batch: PackedBatch, params: ModelParams) -> ForwardTrace:
    """Embed (unless pre-embedded), run pre-norm masked layers, pool, unpack
    and classify. Logits come back in the samples' input order."""
    cfg = params.config
    x, seg, valid = _prepare(batch, params)
    mask = build_attention_mask(seg)
    caches = {"valid": valid, "layers": []}
    for i in range(cfg.layers):
        w = params.layer(i)
        h, c_ln1 = layer_norm(x, w["ln1_g"], w["ln1_b"])
        a, c_att = _mhsa_forward(h, mask, w, cfg.heads)
        x = x + a
        h, c_ln2 = layer_norm(x, w["ln2_g"], w["ln2_b"])
        z = h @ w["w1"] + w["b1"]
        gz, t = gelu(z)
        x = x + gz @ w["w2"] + w["b2"]
        caches["layers"].append((c_ln1, c_att, c_ln2, h, z, gz, t))
    xf, caches["lnf"] = layer_norm(x, params["lnf_g"], params["lnf_b"])
    if cfg.pooling == "attention":
        pool_mask = build_pool_mask(batch.segment_ids, batch.max_slots)
        slots, caches["pool"] = _pool_forward(xf, pool_mask, params)
        pooled = unpack(slots, batch.placements)
    else:
        pooled = xf[:, 0]
        caches["xf_shape"] = xf.shape
    logits = classify(pooled, params)
    return ForwardTrace(logits, pooled, batch, caches)


def backward(trace: ForwardTrace, dlogits, params: ModelParams) -> dict:
    """Gradients of a scalar loss for every parameter, given ``dL/dlogits``."""
    cfg = params.config
    batch = trace.batch
    dlogits = np.asarray(dlogits, dtype=params.dtype)
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    grads["head_w"] = trace.pooled.T @ dlogits
    grads["head_b"] = dlogits.sum(0)
    dpooled = dlogits @ params["head_w"].T
    if cfg.pooling == "attention":
        dslots = np.zeros(trace.caches["pool"][4].shape, dtype=dpooled.dtype)
        for k, pl in enumerate(batch.placements):
            dslots[pl.row, pl.slot] += dpooled[k]
        dxf, g = _pool_backward(dslots, trace.caches["pool"], params)
        grads.update(g)
    else:
        dxf = np.zeros(trace.caches["xf_shape"], dtype=dpooled.dtype)
        dxf[:, 0] = dpooled
    dx, grads["lnf_g"], grads["lnf_b"] = layer_norm_backward(dxf, trace.caches["lnf"])
    for i in reversed(range(cfg.layers)):
        w = params.layer(i)
        c_ln1, c_att, c_ln2, h, z, gz, t = trace.caches["layers"][i]
        g = {}
        g["w2"], g["b2"] = _linear_grads(gz, dx)
        dz = gelu_backward(dx @ w["w2"].T, z, t)
        g["w1"], g["b1"] = _linear_grads(h, dz)
        dh, g["ln2_g"], g["ln2_b"] = layer_norm_backward(dz @ w["w1"].T, c_ln2)
        dx = dx + dh
        dh, g_att = _mhsa_backward(dx, c_att, w, cfg.heads)
        g.update(g_att)
        dh, g["ln1_g"], g["ln1_b"] = layer_norm_backward(dh, c_ln1)
        dx = dx + dh
        for key, val in g.items():
            grads[_layer_name(i, key)] = val
    if cfg.pooling == "cls":
        grads["cls_token"] = dx[:, 0].sum(0)
        dx = dx[:, 1:]
    dx = dx * trace.caches["valid"][..., None]
    if not batch.embedded:
        tokens = batch.tokens.astype(params.dtype, copy=False)
        blank = batch.coords[..., 0] == BLANK
        de = dx * ~blank[..., None] if blank.any() else dx
        grads["patch_w"], grads["patch_b"] = _linear_grads(tokens, de)
        keep = ~blank.reshape(-1)
        de2 = de.reshape(-1, dx.shape[-1])[keep]
        coords = batch.coords.reshape(-1, 2)[keep]
        np.add.at(grads["pos_freq"], coords[:, 0], de2)
        np.add.at(grads["pos_time"], coords[:, 1], de2)
    trace.caches["dtokens"] = dx
    return grads


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def forward_samples(samples, params: ModelParams, budget: int = 2048) -> np.ndarray:
    """Logits for a list of ``TokenSequence`` packed at ``budget``."""
    return encoder_forward(pack(samples, budget), params).logits


def forward_isolated(samples, params: ModelParams) -> np.ndarray:
    """Sample-at-a-time reference: every sample runs in its own row."""
    return np.concatenate([encoder_forward(pack([s], max(len(s), 1)), params).logits
                           for s in samples])


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    """Directory with ``manifest.json`` and little-endian ``tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(params.dtype).newbyteorder("<")
    entries, offset, chunks = [], 0, []
    for name, value in params.items():
        raw = np.ascontiguousarray(value, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "format": "elasticast-ckpt-1",
        "config": asdict(params.config),
        "seed": params.seed,
        "dtype": "f64" if dtype.itemsize == 8 else "f32",
        "tensors": entries,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / "tensors.bin").write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple:
    """Returns ``(params, extra)``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    dtype = np.dtype("<f8" if manifest["dtype"] == "f64" else "<f4")
    blob = (path / "tensors.bin").read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    params = ModelParams(ModelConfig(**manifest["config"]), tensors, manifest["seed"])
    return params, manifest.get("extra", {})
