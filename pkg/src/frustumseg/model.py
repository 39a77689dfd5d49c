"""The learnable network and its hand-derived backward pass.

Per scale the resized window gets a learnable channel embedding, then a
deep main encoder (local scale) or a lightweight sub encoder (context
scales) turns it into a feature map.  Context features are aligned by a
per-scale channel MLP, projected to a low token dimension, mixed into the
local tokens by a cascade of cross-attentions, expanded back, and added
to the local feature with learnable scalar weights.  A small decoder maps
the fused feature to per-class logits at the unified size; an auxiliary
head decodes the local feature directly.

Everything is float64 numpy; forward caches all intermediates so backward
can produce exact analytic gradients (verified against central finite
differences by gradient_check / the `gradcheck` CLI command).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import FrustumConfig


@dataclass(frozen=True)
class ModelConfig:
    n_scales: int
    n_classes: int
    in_channels: int = 3
    base_width: int = 16
    main_depth: int = 4
    sub_depth: int = 2
    attn_dim: int = 32

    def __post_init__(self):
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.main_depth < 1 or self.sub_depth < 1:
            raise ValueError("encoder depths must be >= 1")
        if self.sub_depth >= self.main_depth:
            raise ValueError("sub encoder must be shallower than the main encoder")
        if self.attn_dim < 4:
            raise ValueError("attention dimension must be >= 4")


def _conv_out(n: int) -> int:
    # 3x3 kernel, stride 2, padding 1
    return (n - 1) // 2 + 1


def encoder_spatial(unified_size: tuple[int, int], depth: int) -> tuple[int, int]:
    h, w = unified_size
    for _ in range(depth):
        h, w = _conv_out(h), _conv_out(w)
    return h, w


def pool_factor(config: ModelConfig, unified_size: tuple[int, int]) -> int:
    """Pooling that brings sub-encoder features to the main encoder's size."""
    hm, wm = encoder_spatial(unified_size, config.main_depth)
    hs, ws = encoder_spatial(unified_size, config.sub_depth)
    if hs % hm or ws % wm or hs // hm != ws // wm:
        raise ValueError(
            f"unified size {unified_size} gives sub features {hs}x{ws} that do not pool "
            f"evenly onto main features {hm}x{wm}"
        )
    return hs // hm


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in registration (= checkpoint) order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(c.n_scales):
        shapes[f"embed{i}"] = (c.in_channels,)
    for k in range(c.main_depth):
        cin = c.in_channels if k == 0 else c.base_width
        shapes[f"main{k}.w"] = (c.base_width, cin, 3, 3)
        shapes[f"main{k}.b"] = (c.base_width,)
    for i in range(1, c.n_scales):
        for k in range(c.sub_depth):
            cin = c.in_channels if k == 0 else c.base_width
            shapes[f"sub{i}.{k}.w"] = (c.base_width, cin, 3, 3)
            shapes[f"sub{i}.{k}.b"] = (c.base_width,)
    for i in range(1, c.n_scales):
        shapes[f"align{i}.w1"] = (c.base_width, c.base_width)
        shapes[f"align{i}.b1"] = (c.base_width,)
        shapes[f"align{i}.w2"] = (c.base_width, c.base_width)
        shapes[f"align{i}.b2"] = (c.base_width,)
    for i in range(c.n_scales):
        shapes[f"fdr{i}.w"] = (c.attn_dim, c.base_width)
        shapes[f"fdr{i}.b"] = (c.attn_dim,)
    for i in range(1, c.n_scales):
        shapes[f"fde{i}.w"] = (c.base_width, c.attn_dim)
        shapes[f"fde{i}.b"] = (c.base_width,)
    for i in range(1, c.n_scales):
        shapes[f"alpha{i}"] = ()
    shapes["dec.w1"] = (c.base_width, c.base_width, 3, 3)
    shapes["dec.b1"] = (c.base_width,)
    shapes["dec.w2"] = (c.n_classes, c.base_width)
    shapes["dec.b2"] = (c.n_classes,)
    shapes["aux.w"] = (c.n_classes, c.base_width)
    shapes["aux.b"] = (c.n_classes,)
    return shapes


class ModelParams:
    """Named parameter tensors with paired gradient buffers."""

    def __init__(self, config: ModelConfig, values: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(values) != list(expected):
            raise ValueError("parameter names do not match the model layout")
        for name, shape in expected.items():
            if values[name].shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {values[name].shape}, expected {shape}"
                )
        self.config = config
        self.values = values
        self.grads = {k: np.zeros_like(v) for k, v in values.items()}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Seeded init: weights uniform in +-1/sqrt(fan_in), the rest zero."""
        rng = np.random.default_rng(seed)
        values = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".w") or name.endswith(".w1") or name.endswith(".w2"):
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                values[name] = rng.uniform(-bound, bound, size=shape)
            else:
                values[name] = np.zeros(shape)
        return cls(config, values)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def snapshot(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.values.items()})


# ---------------------------------------------------------------------------
# primitives


def _relu(x):
    return np.maximum(x, 0.0)


def _to_chw(patch) -> np.ndarray:
    data = np.asarray(getattr(patch, "data", patch), dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"patch must be (H, W, C), got shape {data.shape}")
    return np.ascontiguousarray(np.moveaxis(data, 2, 0))


def _conv2d(x, w, b, stride, pad, edge_pad=False):
    """Returns (y, cols, in_hw); cols is the im2col matrix kept for backward.

    edge_pad replicates the border instead of zero-filling, which keeps a
    spatially constant input constant through the convolution.
    """
    cin, h, win = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ValueError(f"conv input has {cin} channels, kernel expects {cin2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (win + 2 * pad - kw) // stride + 1
    if pad:
        mode = "edge" if edge_pad else "constant"
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=mode)
    else:
        xp = x
    cols = np.empty((cin, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * (ho - 1) + 1 : stride,
                               j : j + stride * (wo - 1) + 1 : stride]
    mat = cols.reshape(cin * kh * kw, ho * wo)
    y = (w.reshape(cout, -1) @ mat).reshape(cout, ho, wo) + b[:, None, None]
    return y, mat, (h, win)


def _conv2d_backward(dy, mat, in_hw, w, stride, pad, edge_pad=False):
    cout, ho, wo = dy.shape
    _, cin, kh, kw = w.shape
    h, win = in_hw
    dy_mat = dy.reshape(cout, -1)
    dw = (dy_mat @ mat.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    dcols = (w.reshape(cout, -1).T @ dy_mat).reshape(cin, kh, kw, ho, wo)
    dxp = np.zeros((cin, h + 2 * pad, win + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
    if not pad:
        return dxp, dw, db
    dx = dxp[:, pad : pad + h, pad : pad + win].copy()
    if edge_pad:
        # adjoint of replication: padded-cell gradients fold onto the border
        if pad != 1:
            raise ValueError("edge padding is implemented for pad=1 only")
        dx[:, 0, :] += dxp[:, 0, 1 : win + 1]
        dx[:, h - 1, :] += dxp[:, h + 1, 1 : win + 1]
        dx[:, :, 0] += dxp[:, 1 : h + 1, 0]
        dx[:, :, win - 1] += dxp[:, 1 : h + 1, win + 1]
        dx[:, 0, 0] += dxp[:, 0, 0]
        dx[:, 0, win - 1] += dxp[:, 0, win + 1]
        dx[:, h - 1, 0] += dxp[:, h + 1, 0]
        dx[:, h - 1, win - 1] += dxp[:, h + 1, win + 1]
    return dx, dw, db


def _avg_pool(x, k):
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def _avg_pool_backward(dy, k):
    return np.repeat(np.repeat(dy, k, axis=1), k, axis=2) / (k * k)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix (pixel centers at i+0.5)."""
    u = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(u).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = u - i0
    r = np.zeros((n_out, n_in))
    r[np.arange(n_out), i0] += 1.0 - frac
    r[np.arange(n_out), i1] += frac
    return r


def _resize_chw(x, ry, rx):
    return np.einsum("ab,cbw,dw->cad", ry, x, rx, optimize=True)


def _resize_chw_backward(dy, ry, rx):
    return np.einsum("ab,cad,dw->cbw", ry, dy, rx, optimize=True)


def _to_tokens(f):
    """(C, h, w) -> (h*w, C), positions in row-major order."""
    return f.reshape(f.shape[0], -1).T


def _from_tokens(t, h, w):
    return t.T.reshape(-1, h, w)


def _softmax_rows(s):
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


def _check_finite(name, x):
    assert np.isfinite(x).all(), f"non-finite values in {name}"


# ---------------------------------------------------------------------------
# spec-level operations


def main_encode(patch, embedding, params: ModelParams) -> np.ndarray:
    x = _to_chw(patch) + np.asarray(embedding)[:, None, None]
    for k in range(params.config.main_depth):
        y, _, _ = _conv2d(x, params.values[f"main{k}.w"], params.values[f"main{k}.b"], 2, 1)
        x = _relu(y)
    return x


def sub_encode(patch, embedding, params: ModelParams, i: int) -> np.ndarray:
    if i < 1:
        raise ValueError("sub encoders exist for scale indices >= 1")
    x = _to_chw(patch) + np.asarray(embedding)[:, None, None]
    for k in range(params.config.sub_depth):
        y, _, _ = _conv2d(x, params.values[f"sub{i}.{k}.w"], params.values[f"sub{i}.{k}.b"], 2, 1)
        x = _relu(y)
    unified = np.asarray(getattr(patch, "data", patch)).shape[:2]
    return _avg_pool(x, pool_factor(params.config, unified))


def mlp_align(f, params: ModelParams, i: int) -> np.ndarray:
    """Per-position two-layer channel MLP for context scale i."""
    if i < 1:
        raise ValueError("alignment applies to scale indices >= 1")
    v = params.values
    x = _to_tokens(f)
    hidden = _relu(x @ v[f"align{i}.w1"].T + v[f"align{i}.b1"])
    y = hidden @ v[f"align{i}.w2"].T + v[f"align{i}.b2"]
    return _from_tokens(y, f.shape[1], f.shape[2])


def fdr(f, params: ModelParams, i: int) -> np.ndarray:
    """Project channels down and flatten positions to tokens (N, dim)."""
    v = params.values
    return _to_tokens(f) @ v[f"fdr{i}.w"].T + v[f"fdr{i}.b"]


def cross_attention(q: np.ndarray, kv: np.ndarray) -> np.ndarray:
    """Softmax(q kv^T / sqrt(dim)) kv, softmax per query row."""
    if q.shape[1] != kv.shape[1]:
        raise ValueError(f"token widths differ: {q.shape[1]} vs {kv.shape[1]}")
    scale = 1.0 / np.sqrt(q.shape[1])
    return _softmax_rows(q @ kv.T * scale) @ kv


def fde(tokens, params: ModelParams, i: int, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Expand tokens back to a (C, h, w) map; inverse layout of fdr."""
    v = params.values
    y = tokens @ v[f"fde{i}.w"].T + v[f"fde{i}.b"]
    if shape is None:
        side = int(round(np.sqrt(tokens.shape[0])))
        if side * side != tokens.shape[0]:
            raise ValueError(f"{tokens.shape[0]} tokens is not a square layout; pass shape=")
        shape = (side, side)
    return _from_tokens(y, shape[0], shape[1])


def ccsf_fuse(f_maps: list[np.ndarray], params: ModelParams) -> np.ndarray:
    """Cascaded cross-scale fusion of per-scale feature maps."""
    fusion, _ = _ccsf_forward(f_maps, params, cache=None)
    return fusion


def _ccsf_forward(f_maps, params: ModelParams, cache):
    v = params.values
    n = params.config.n_scales
    if len(f_maps) != n:
        raise ValueError(f"expected {n} feature maps, got {len(f_maps)}")
    shape0 = f_maps[0].shape
    for f in f_maps[1:]:
        if f.shape != shape0:
            raise ValueError(f"feature shapes differ across scales: {f.shape} vs {shape0}")
    h, w = shape0[1], shape0[2]
    tokens = [fdr(f_maps[0], params, 0)]
    aligned = [None]
    for i in range(1, n):
        a = mlp_align(f_maps[i], params, i)
        aligned.append(a)
        tokens.append(fdr(a, params, i))
    scale = 1.0 / np.sqrt(params.config.attn_dim)
    attn = [None]
    ca = [None]
    expanded = [None]
    fusion = f_maps[0].copy()
    for i in range(1, n):
        a_mat = _softmax_rows(tokens[i - 1] @ tokens[i].T * scale)
        out = a_mat @ tokens[i]
        e = fde(out, params, i, shape=(h, w))
        fusion += v[f"alpha{i}"] * e
        attn.append(a_mat)
        ca.append(out)
        expanded.append(e)
    if cache is not None:
        cache.update(
            tokens=tokens, aligned=aligned, attn=attn, ca=ca, expanded=expanded,
            feature_hw=(h, w),
        )
    return fusion, cache


def main_decode(f_fusion, params: ModelParams, unified_size: tuple[int, int]) -> np.ndarray:
    v = params.values
    y, _, _ = _conv2d(f_fusion, v["dec.w1"], v["dec.b1"], 1, 1, edge_pad=True)
    h1 = _relu(y)
    logits = _from_tokens(_to_tokens(h1) @ v["dec.w2"].T + v["dec.b2"], *f_fusion.shape[1:])
    ry = resize_matrix(f_fusion.shape[1], unified_size[0])
    rx = resize_matrix(f_fusion.shape[2], unified_size[1])
    return _resize_chw(logits, ry, rx)


def sub_decode(f_local, params: ModelParams, unified_size: tuple[int, int]) -> np.ndarray:
    v = params.values
    logits = _from_tokens(_to_tokens(f_local) @ v["aux.w"].T + v["aux.b"], *f_local.shape[1:])
    ry = resize_matrix(f_local.shape[1], unified_size[0])
    rx = resize_matrix(f_local.shape[2], unified_size[1])
    return _resize_chw(logits, ry, rx)


# ---------------------------------------------------------------------------
# composed forward / backward


@dataclass
class ForwardResult:
    main_logits: np.ndarray  # (n_classes, H_u, W_u)
    aux_logits: np.ndarray
    cache: dict | None = field(default=None, repr=False)


def _encode_cached(x, block_names, params, stride=2):
    """Conv+ReLU chain; returns output and per-block (cols, in_hw, post)."""
    blocks = []
    for wname, bname in block_names:
        y, cols, in_hw = _conv2d(x, params.values[wname], params.values[bname], stride, 1)
        x = _relu(y)
        blocks.append((cols, in_hw, x))
    return x, blocks


def forward(
    patches,
    params: ModelParams,
    *,
    local_only: bool = False,
    want_cache: bool = False,
) -> ForwardResult:
    """Run the full network on one frustum sample.

    patches: per-scale arrays (H_u, W_u, C), nearest scale first.  With
    local_only=True only the first patch is read and fusion is skipped
    entirely; with all fusion scalars at zero this path is bit-identical
    to the full one.
    """
    cfg = params.config
    v = params.values
    n = 1 if local_only else cfg.n_scales
    if len(patches) < n:
        raise ValueError(f"need {n} patches, got {len(patches)}")
    unified = np.asarray(getattr(patches[0], "data", patches[0])).shape[:2]
    cache: dict = {"unified": unified, "local_only": local_only}

    xs = []
    for i in range(n):
        x = _to_chw(patches[i])
        if x.shape[1:] != unified:
            raise ValueError("all patches must share the unified size")
        xs.append(x + v[f"embed{i}"][:, None, None])
    cache["inputs"] = xs

    main_names = [(f"main{k}.w", f"main{k}.b") for k in range(cfg.main_depth)]
    f0, main_blocks = _encode_cached(xs[0], main_names, params)
    _check_finite("local feature", f0)
    cache["main_blocks"] = main_blocks

    f_maps = [f0]
    sub_caches = [None]
    if not local_only and cfg.n_scales > 1:
        k_pool = pool_factor(cfg, unified)
        cache["pool_k"] = k_pool
        for i in range(1, cfg.n_scales):
            names = [(f"sub{i}.{k}.w", f"sub{i}.{k}.b") for k in range(cfg.sub_depth)]
            fs, blocks = _encode_cached(xs[i], names, params)
            f_maps.append(_avg_pool(fs, k_pool))
            _check_finite(f"scale {i} feature", f_maps[i])
            sub_caches.append(blocks)
    cache["sub_blocks"] = sub_caches
    cache["f_maps"] = f_maps

    if local_only or cfg.n_scales == 1:
        fusion = f0
    else:
        fusion, _ = _ccsf_forward(f_maps, params, cache)
        _check_finite("fused feature", fusion)
    cache["fusion"] = fusion

    y, dec_cols, dec_in_hw = _conv2d(fusion, v["dec.w1"], v["dec.b1"], 1, 1, edge_pad=True)
    h1 = _relu(y)
    cache["dec"] = (dec_cols, dec_in_hw, h1)
    fh, fw = fusion.shape[1], fusion.shape[2]
    logits_lo = _from_tokens(_to_tokens(h1) @ v["dec.w2"].T + v["dec.b2"], fh, fw)
    aux_lo = _from_tokens(_to_tokens(f0) @ v["aux.w"].T + v["aux.b"], fh, fw)
    cache["logits_lo"] = logits_lo
    cache["aux_lo"] = aux_lo

    ry = resize_matrix(fh, unified[0])
    rx = resize_matrix(fw, unified[1])
    cache["resize"] = (ry, rx)
    main_logits = _resize_chw(logits_lo, ry, rx)
    aux_logits = _resize_chw(aux_lo, ry, rx)
    _check_finite("main logits", main_logits)
    _check_finite("aux logits", aux_logits)
    return ForwardResult(main_logits, aux_logits, cache if want_cache else None)


def backward(grad_main: np.ndarray, grad_aux: np.ndarray, cache: dict, params: ModelParams) -> None:
    """Accumulate d(loss)/d(theta) into params.grads for one cached forward."""
    if cache is None:
        raise ValueError("backward needs the cache from forward(want_cache=True)")
    cfg = params.config
    v, g = params.values, params.grads
    ry, rx = cache["resize"]
    f_maps = cache["f_maps"]
    f0 = f_maps[0]
    fh, fw = f0.shape[1], f0.shape[2]

    # decoder heads
    d_logits_lo = _resize_chw_backward(grad_main, ry, rx)
    d_aux_lo = _resize_chw_backward(grad_aux, ry, rx)

    dec_cols, dec_in_hw, h1 = cache["dec"]
    dl_tok = _to_tokens(d_logits_lo)
    h1_tok = _to_tokens(h1)
    g["dec.w2"] += dl_tok.T @ h1_tok
    g["dec.b2"] += dl_tok.sum(axis=0)
    dh1 = _from_tokens(dl_tok @ v["dec.w2"], fh, fw) * (h1 > 0)
    d_fusion, dw1, db1 = _conv2d_backward(dh1, dec_cols, dec_in_hw, v["dec.w1"], 1, 1, edge_pad=True)
    g["dec.w1"] += dw1
    g["dec.b1"] += db1

    da_tok = _to_tokens(d_aux_lo)
    f0_tok = _to_tokens(f0)
    g["aux.w"] += da_tok.T @ f0_tok
    g["aux.b"] += da_tok.sum(axis=0)
    d_f0 = _from_tokens(da_tok @ v["aux.w"], fh, fw)

    local_only = cache["local_only"] or cfg.n_scales == 1
    d_f_maps = [np.zeros_like(f) for f in f_maps]
    d_f_maps[0] += d_f0

    if local_only:
        d_f_maps[0] += d_fusion
    else:
        tokens, attn, ca, expanded = cache["tokens"], cache["attn"], cache["ca"], cache["expanded"]
        aligned = cache["aligned"]
        d_tokens = [np.zeros_like(t) for t in tokens]
        d_f_maps[0] += d_fusion
        scale = 1.0 / np.sqrt(cfg.attn_dim)
        for i in range(1, cfg.n_scales):
            g[f"alpha{i}"] += np.sum(d_fusion * expanded[i])
            de_tok = _to_tokens(v[f"alpha{i}"] * d_fusion)
            g[f"fde{i}.w"] += de_tok.T @ ca[i]
            g[f"fde{i}.b"] += de_tok.sum(axis=0)
            d_ca = de_tok @ v[f"fde{i}.w"]
            # attention: out = A kv with A = softmax(q kv^T * scale)
            a_mat, q, kv = attn[i], tokens[i - 1], tokens[i]
            d_a = d_ca @ kv.T
            d_kv = a_mat.T @ d_ca
            d_s = a_mat * (d_a - (d_a * a_mat).sum(axis=1, keepdims=True))
            d_tokens[i - 1] += d_s @ kv * scale
            d_tokens[i] += d_kv + d_s.T @ q * scale
        # token projections back to feature maps
        d_t0 = d_tokens[0]
        g["fdr0.w"] += d_t0.T @ f0_tok
        g["fdr0.b"] += d_t0.sum(axis=0)
        d_f_maps[0] += _from_tokens(d_t0 @ v["fdr0.w"], fh, fw)
        for i in range(1, cfg.n_scales):
            a_tok = _to_tokens(aligned[i])
            d_ti = d_tokens[i]
            g[f"fdr{i}.w"] += d_ti.T @ a_tok
            g[f"fdr{i}.b"] += d_ti.sum(axis=0)
            d_a_map = d_ti @ v[f"fdr{i}.w"]
            # back through the two-layer channel MLP
            x_tok = _to_tokens(f_maps[i])
            hidden_pre = x_tok @ v[f"align{i}.w1"].T + v[f"align{i}.b1"]
            hidden = _relu(hidden_pre)
            g[f"align{i}.w2"] += d_a_map.T @ hidden
            g[f"align{i}.b2"] += d_a_map.sum(axis=0)
            d_hidden = (d_a_map @ v[f"align{i}.w2"]) * (hidden_pre > 0)
            g[f"align{i}.w1"] += d_hidden.T @ x_tok
            g[f"align{i}.b1"] += d_hidden.sum(axis=0)
            d_f_maps[i] += _from_tokens(d_hidden @ v[f"align{i}.w1"], fh, fw)

    # encoders
    d_x0 = _encode_backward(
        d_f_maps[0], cache["main_blocks"],
        [(f"main{k}.w", f"main{k}.b") for k in range(cfg.main_depth)], params, stride=2,
    )
    g["embed0"] += d_x0.sum(axis=(1, 2))
    if not local_only:
        k_pool = cache["pool_k"]
        for i in range(1, cfg.n_scales):
            d_fs = _avg_pool_backward(d_f_maps[i], k_pool)
            d_xi = _encode_backward(
                d_fs, cache["sub_blocks"][i],
                [(f"sub{i}.{k}.w", f"sub{i}.{k}.b") for k in range(cfg.sub_depth)], params, stride=2,
            )
            g[f"embed{i}"] += d_xi.sum(axis=(1, 2))


def _encode_backward(d_out, blocks, block_names, params, stride):
    g = params.grads
    d = d_out
    for k in range(len(blocks) - 1, -1, -1):
        cols, in_hw, post = blocks[k]
        d = d * (post > 0)
        wname, bname = block_names[k]
        d, dw, db = _conv2d_backward(d, cols, in_hw, params.values[wname], stride, 1)
        g[wname] += dw
        g[bname] += db
    return d


# ---------------------------------------------------------------------------
# shape audit


def audit_shapes(params: ModelParams, unified_size: tuple[int, int]) -> dict[str, tuple]:
    """Derive every intermediate shape and verify a dummy forward against it.

    Raises ValueError on the first mismatch; returns the derivation table.
    """
    cfg = params.config
    hu, wu = unified_size
    hm, wm = encoder_spatial(unified_size, cfg.main_depth)
    hs, ws = encoder_spatial(unified_size, cfg.sub_depth)
    k_pool = pool_factor(cfg, unified_size)  # raises if incompatible
    n_tok = hm * wm
    table = {
        "input": (cfg.in_channels, hu, wu),
        "main_feature": (cfg.base_width, hm, wm),
        "sub_feature_prepool": (cfg.base_width, hs, ws),
        "pool_factor": (k_pool,),
        "tokens": (n_tok, cfg.attn_dim),
        "attention": (n_tok, n_tok),
        "fusion": (cfg.base_width, hm, wm),
        "logits": (cfg.n_classes, hu, wu),
    }
    for name, shape in param_shapes(cfg).items():
        actual = params.values[name].shape
        if actual != shape:
            raise ValueError(f"parameter {name}: shape {actual}, derived {shape}")
    dummy = [np.zeros((hu, wu, cfg.in_channels)) for _ in range(cfg.n_scales)]
    res = forward(dummy, params, want_cache=True)
    checks = [
        ("main_feature", res.cache["f_maps"][0].shape),
        ("fusion", res.cache["fusion"].shape),
        ("logits", res.main_logits.shape),
        ("logits", res.aux_logits.shape),
    ]
    if cfg.n_scales > 1:
        checks.append(("tokens", res.cache["tokens"][0].shape))
        checks.append(("attention", res.cache["attn"][1].shape))
        checks.append(("main_feature", res.cache["f_maps"][1].shape))
    for key, actual in checks:
        if tuple(actual) != table[key]:
            raise ValueError(f"intermediate {key}: shape {tuple(actual)}, derived {table[key]}")
    return table


# ---------------------------------------------------------------------------
# checkpoint file

_MAGIC = b"FRUSTSEG"
_VERSION = 1


def save_checkpoint(path: str, params: ModelParams, frustum: FrustumConfig) -> None:
    """Versioned binary checkpoint; little-endian, float64 tensors."""
    cfg = params.config
    if cfg.n_scales != frustum.n_scales:
        raise ValueError("model and frustum configs disagree on the number of scales")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(
            struct.pack(
                "<9i",
                cfg.n_scales, cfg.n_classes, cfg.in_channels, cfg.base_width,
                cfg.main_depth, cfg.sub_depth, cfg.attn_dim,
                frustum.unified_size[0], frustum.unified_size[1],
            )
        )
        f.write(np.asarray(frustum.distances, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(params.values)))
        for name, tensor in params.values.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, FrustumConfig]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fields = struct.unpack_from("<9i", blob, 12)
    n_scales, n_classes, in_channels, base_width, main_depth, sub_depth, attn_dim, hu, wu = fields
    pos = 12 + 36
    distances = np.frombuffer(blob, dtype="<f8", count=n_scales, offset=pos)
    pos += 8 * n_scales
    config = ModelConfig(
        n_scales=n_scales, n_classes=n_classes, in_channels=in_channels,
        base_width=base_width, main_depth=main_depth, sub_depth=sub_depth, attn_dim=attn_dim,
    )
    frustum = FrustumConfig(distances=tuple(float(d) for d in distances), unified_size=(hu, wu))
    (n_tensors,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    values = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensor = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
        values[name] = tensor
    params = ModelParams(config, values)  # validates names and shapes
    return params, frustum


# ---------------------------------------------------------------------------
# finite-difference validation


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    worst_param: str
    passed: bool


def gradient_check(
    config: ModelConfig,
    unified_size: tuple[int, int],
    n_params: int = 200,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 0,
    perturb_gradients: bool = False,
) -> GradCheckResult:
    """Compare the analytic backward against central finite differences.

    Samples n_params coordinates across all tensors.  perturb_gradients
    corrupts the analytic gradient on purpose (negative control: the check
    must then fail).
    """
    from . import loss as loss_mod
    from .raster import LabelMap

    rng = np.random.default_rng(seed)
    params = ModelParams.initialize(config, seed)
    # break the zero-init symmetry so alpha/embedding gradients are generic
    for i in range(1, config.n_scales):
        params.values[f"alpha{i}"][...] = rng.uniform(0.2, 0.8)
        params.values[f"embed{i}"][...] = rng.uniform(-0.1, 0.1, config.in_channels)
    params.values["embed0"][...] = rng.uniform(-0.1, 0.1, config.in_channels)
    hu, wu = unified_size
    patches = [rng.uniform(0, 1, size=(hu, wu, config.in_channels)) for _ in range(config.n_scales)]
    labels = LabelMap(
        data=rng.integers(0, config.n_classes, size=(hu, wu)).astype(np.uint8),
        class_count=config.n_classes,
    )
    weights = loss_mod.LossWeights(5.0, 1.0, 1.0)

    def objective() -> float:
        res = forward(patches, params)
        return loss_mod.total_loss(res.main_logits, res.aux_logits, labels, weights).total

    params.zero_grads()
    res = forward(patches, params, want_cache=True)
    lt = loss_mod.total_loss(res.main_logits, res.aux_logits, labels, weights)
    backward(lt.grad_main, lt.grad_aux, res.cache, params)

    names = list(params.values)
    if n_params <= 0:
        return GradCheckResult(0.0, 0, "", True)
    max_rel, worst = 0.0, ""
    for _ in range(n_params):
        name = names[int(rng.integers(len(names)))]
        tensor = params.values[name]
        flat = int(rng.integers(tensor.size))
        orig = float(tensor.flat[flat])
        analytic = float(params.grads[name].flat[flat])
        if perturb_gradients:
            analytic = analytic * 1.5 + 0.01
        tensor.flat[flat] = orig + step
        up = objective()
        tensor.flat[flat] = orig - step
        down = objective()
        tensor.flat[flat] = orig
        fd = (up - down) / (2.0 * step)
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        if rel > max_rel:
            max_rel, worst = rel, f"{name}[{flat}]"
    return GradCheckResult(max_rel, n_params, worst, max_rel < tolerance)
