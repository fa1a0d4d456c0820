"""The step transformer: input projection, mask token, positional encodings,
pre-norm attention blocks, and output heads.

Everything runs in float64 with no dropout, so forward passes are exact
functions of (params, inputs) and the hand-written backward pass can be
checked against finite differences to tight tolerances. Each forward returns
a ForwardTrace caching every intermediate the backward pass needs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import erf

from .errors import (
    CapacityError,
    ConfigError,
    DimensionError,
    InvalidInput,
    ParseError,
    TraceError,
)

LN_EPS = 1e-5
INIT_STD = 0.02
FORECAST_SLOTS = 5
CHECKPOINT_MAGIC = b"VTFM"
CHECKPOINT_VERSION = 1

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class ModelConfig:
    d_in: int
    d: int
    layers: int
    heads: int
    max_positions: int
    s: int  # label-vocabulary size
    num_tasks: int = 1
    mlp_ratio: float = 4.0
    use_positional: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(f"hidden width {self.d} not divisible by {self.heads} heads")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_ratio too small")
        if min(self.d_in, self.max_positions, self.s, self.num_tasks) < 1:
            raise ConfigError("d_in, max_positions, s, num_tasks must be >= 1")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.d))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def desk_preset(d_in: int, s: int, num_tasks: int, max_positions: int = 16) -> ModelConfig:
    """Small default used for fast local experiments."""
    return ModelConfig(
        d_in=d_in, d=64, layers=2, heads=4, max_positions=max_positions,
        s=s, num_tasks=num_tasks,
    )


def full_preset(s: int, num_tasks: int) -> ModelConfig:
    """Full-size configuration: 2 layers, width 768, 12 heads, room for 12
    clip tokens plus the two reserved sequence tokens."""
    return ModelConfig(
        d_in=768, d=768, layers=2, heads=12, max_positions=14,
        s=s, num_tasks=num_tasks,
    )


@dataclass
class BlockParams:
    """One pre-norm block. The key projection carries no bias: a key bias
    shifts every attention score in a row by the same amount, which softmax
    cancels exactly, so the parameter would be functionally dead (and its
    identically-zero gradient direction breaks finite-difference checks)."""

    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w_up: np.ndarray
    b_up: np.ndarray
    w_down: np.ndarray
    b_down: np.ndarray


@dataclass
class TransformerParams:
    w_in: np.ndarray
    b_in: np.ndarray
    mask_token: np.ndarray
    cls_token: np.ndarray
    positional: np.ndarray
    blocks: list[BlockParams]
    head_w: np.ndarray
    head_b: np.ndarray
    task_head_w: np.ndarray
    task_head_b: np.ndarray
    order_head_w: np.ndarray
    order_head_b: np.ndarray
    mistake_head_w: np.ndarray
    mistake_head_b: np.ndarray
    forecast_w: list[np.ndarray]
    forecast_b: list[np.ndarray]


def named_arrays(params: TransformerParams):
    """(name, array) pairs in the fixed declaration order used everywhere:
    checkpoints, optimizer buffers, digests."""
    yield "w_in", params.w_in
    yield "b_in", params.b_in
    yield "mask_token", params.mask_token
    yield "cls_token", params.cls_token
    yield "positional", params.positional
    for i, blk in enumerate(params.blocks):
        for fname in (
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "wv", "bv",
            "wo", "bo", "ln2_gain", "ln2_bias", "w_up", "b_up", "w_down", "b_down",
        ):
            yield f"blocks.{i}.{fname}", getattr(blk, fname)
    yield "head_w", params.head_w
    yield "head_b", params.head_b
    yield "task_head_w", params.task_head_w
    yield "task_head_b", params.task_head_b
    yield "order_head_w", params.order_head_w
    yield "order_head_b", params.order_head_b
    yield "mistake_head_w", params.mistake_head_w
    yield "mistake_head_b", params.mistake_head_b
    for i in range(len(params.forecast_w)):
        yield f"forecast.{i}.w", params.forecast_w[i]
        yield f"forecast.{i}.b", params.forecast_b[i]


def get_array(params: TransformerParams, name: str) -> np.ndarray:
    if name.startswith("blocks."):
        _, idx, fname = name.split(".")
        return getattr(params.blocks[int(idx)], fname)
    if name.startswith("forecast."):
        _, idx, wb = name.split(".")
        return (params.forecast_w if wb == "w" else params.forecast_b)[int(idx)]
    return getattr(params, name)


def set_array(params: TransformerParams, name: str, value: np.ndarray):
    if name.startswith("blocks."):
        _, idx, fname = name.split(".")
        setattr(params.blocks[int(idx)], fname, value)
    elif name.startswith("forecast."):
        _, idx, wb = name.split(".")
        (params.forecast_w if wb == "w" else params.forecast_b)[int(idx)] = value
    else:
        setattr(params, name, value)


def zeros_like_params(params: TransformerParams) -> TransformerParams:
    blocks = [
        BlockParams(**{k: np.zeros_like(v) for k, v in vars(blk).items()})
        for blk in params.blocks
    ]
    return TransformerParams(
        w_in=np.zeros_like(params.w_in),
        b_in=np.zeros_like(params.b_in),
        mask_token=np.zeros_like(params.mask_token),
        cls_token=np.zeros_like(params.cls_token),
        positional=np.zeros_like(params.positional),
        blocks=blocks,
        head_w=np.zeros_like(params.head_w),
        head_b=np.zeros_like(params.head_b),
        task_head_w=np.zeros_like(params.task_head_w),
        task_head_b=np.zeros_like(params.task_head_b),
        order_head_w=np.zeros_like(params.order_head_w),
        order_head_b=np.zeros_like(params.order_head_b),
        mistake_head_w=np.zeros_like(params.mistake_head_w),
        mistake_head_b=np.zeros_like(params.mistake_head_b),
        forecast_w=[np.zeros_like(w) for w in params.forecast_w],
        forecast_b=[np.zeros_like(b) for b in params.forecast_b],
    )


def clone_params(params: TransformerParams) -> TransformerParams:
    out = zeros_like_params(params)
    for name, arr in named_arrays(params):
        set_array(out, name, arr.copy())
    return out


def params_digest(params: TransformerParams) -> str:
    h = hashlib.sha256()
    for name, arr in named_arrays(params):
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def init_params(cfg: ModelConfig, seed: int) -> TransformerParams:
    """Weights ~ N(0, 0.02^2), biases and layer-norm biases 0, layer-norm
    gains 1; mask/cls tokens drawn like weights. Deterministic in seed."""
    rng = np.random.default_rng([seed, 7])
    d, h = cfg.d, cfg.mlp_hidden

    def w(*shape):
        return rng.normal(0.0, INIT_STD, shape)

    def z(*shape):
        return np.zeros(shape, dtype=np.float64)

    blocks = []
    for _ in range(cfg.layers):
        blocks.append(
            BlockParams(
                ln1_gain=np.ones(d), ln1_bias=z(d),
                wq=w(d, d), bq=z(d), wk=w(d, d), wv=w(d, d), bv=z(d),
                wo=w(d, d), bo=z(d),
                ln2_gain=np.ones(d), ln2_bias=z(d),
                w_up=w(d, h), b_up=z(h), w_down=w(h, d), b_down=z(d),
            )
        )
    return TransformerParams(
        w_in=w(cfg.d_in, d),
        b_in=z(d),
        mask_token=w(d),
        cls_token=w(d),
        positional=w(cfg.max_positions, d),
        blocks=blocks,
        head_w=w(d, cfg.s),
        head_b=z(cfg.s),
        task_head_w=w(d, cfg.num_tasks),
        task_head_b=z(cfg.num_tasks),
        order_head_w=w(d, 2),
        order_head_b=z(2),
        mistake_head_w=w(d, 1),
        mistake_head_b=z(1),
        forecast_w=[w(d, cfg.s + 1) for _ in range(FORECAST_SLOTS)],
        forecast_b=[z(cfg.s + 1) for _ in range(FORECAST_SLOTS)],
    )


# --- forward ----------------------------------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax_logits(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _layer_norm(x, gain, bias):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _layer_norm_backward(dy, xhat, inv, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


@dataclass
class BlockCache:
    x_in: np.ndarray
    a: np.ndarray        # ln1 output
    xhat1: np.ndarray
    inv1: np.ndarray
    q: np.ndarray        # (heads, T, dh)
    k: np.ndarray
    v: np.ndarray
    att: np.ndarray      # (heads, T, T) attention weights
    concat: np.ndarray   # (T, D) merged head outputs
    x_mid: np.ndarray
    m: np.ndarray        # ln2 output
    xhat2: np.ndarray
    inv2: np.ndarray
    pre: np.ndarray      # (T, H) MLP pre-activation
    act: np.ndarray


@dataclass
class ForwardTrace:
    K: int
    T: int
    offset: int
    prepend_cls: bool
    has_task: bool
    mask: tuple[int, ...]
    clips_masked: np.ndarray          # (K, D_in), masked rows zeroed
    task_raw: np.ndarray | None
    block_caches: list[BlockCache] = field(repr=False, default_factory=list)
    hidden: np.ndarray | None = None  # (T, D)
    logits: np.ndarray | None = None  # (T, S)

    @property
    def clip_hidden(self) -> np.ndarray:
        """Hidden states of clip positions only (reserved tokens dropped)."""
        return self.hidden[self.offset :]

    @property
    def clip_logits(self) -> np.ndarray:
        return self.logits[self.offset :]


def forward(
    params: TransformerParams,
    cfg: ModelConfig,
    clip_features: np.ndarray,
    mask_set=(),
    prepend_cls: bool = False,
    task_token: np.ndarray | None = None,
) -> ForwardTrace:
    """Run the transformer over a (partially masked) clip sequence.

    Masked clip tokens are replaced by the learned mask token after input
    projection, so outputs depend on masked positions' indices but never on
    their features. Attention is full and bidirectional.
    """
    clip_features = np.asarray(clip_features, dtype=np.float64)
    if clip_features.ndim != 2 or clip_features.shape[1] != cfg.d_in:
        raise DimensionError(
            f"clip features must be (K, {cfg.d_in}), got {clip_features.shape}"
        )
    k_clips = clip_features.shape[0]
    mask = tuple(sorted(set(int(i) for i in mask_set)))
    if mask and (mask[0] < 0 or mask[-1] >= k_clips):
        raise InvalidInput(f"mask indices {mask} outside [0, {k_clips})")
    offset = int(prepend_cls) + int(task_token is not None)
    t_total = k_clips + offset
    if t_total > cfg.max_positions:
        raise CapacityError(
            f"{k_clips} clips + {offset} reserved tokens exceed capacity "
            f"{cfg.max_positions}"
        )

    clips_masked = clip_features.copy()
    x = clip_features @ params.w_in + params.b_in
    for i in mask:
        x[i] = params.mask_token
        clips_masked[i] = 0.0

    rows = []
    task_raw = None
    if prepend_cls:
        rows.append(params.cls_token[None, :])
    if task_token is not None:
        task_raw = np.asarray(task_token, dtype=np.float64)
        if task_raw.shape != (cfg.d_in,):
            raise DimensionError(f"task token must be ({cfg.d_in},), got {task_raw.shape}")
        rows.append((task_raw @ params.w_in + params.b_in)[None, :])
    rows.append(x)
    tokens = np.concatenate(rows, axis=0)
    if cfg.use_positional:
        tokens = tokens + params.positional[:t_total]

    trace = ForwardTrace(
        K=k_clips, T=t_total, offset=offset, prepend_cls=prepend_cls,
        has_task=task_token is not None, mask=mask,
        clips_masked=clips_masked, task_raw=task_raw,
    )

    scale = 1.0 / np.sqrt(cfg.d // cfg.heads)
    for li, blk in enumerate(params.blocks):
        x_in = tokens
        a, xhat1, inv1 = _layer_norm(x_in, blk.ln1_gain, blk.ln1_bias)
        q = _split_heads(a @ blk.wq + blk.bq, cfg.heads)
        kk = _split_heads(a @ blk.wk, cfg.heads)
        v = _split_heads(a @ blk.wv + blk.bv, cfg.heads)
        scores = (q @ kk.transpose(0, 2, 1)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        concat = _merge_heads(att @ v)
        x_mid = x_in + concat @ blk.wo + blk.bo
        m, xhat2, inv2 = _layer_norm(x_mid, blk.ln2_gain, blk.ln2_bias)
        pre = m @ blk.w_up + blk.b_up
        act = gelu(pre)
        tokens = x_mid + act @ blk.w_down + blk.b_down
        if not np.all(np.isfinite(tokens)):
            raise FloatingPointError(f"non-finite activations after block {li}")
        trace.block_caches.append(
            BlockCache(
                x_in=x_in, a=a, xhat1=xhat1, inv1=inv1, q=q, k=kk, v=v, att=att,
                concat=concat, x_mid=x_mid, m=m, xhat2=xhat2, inv2=inv2,
                pre=pre, act=act,
            )
        )

    trace.hidden = tokens
    trace.logits = tokens @ params.head_w + params.head_b
    return trace


# --- backward ---------------------------------------------------------------


def _block_backward(blk: BlockParams, cache: BlockCache, d_out, grads_blk, heads: int):
    d_act_out = d_out
    d_act = d_act_out @ blk.w_down.T
    grads_blk.w_down += cache.act.T @ d_act_out
    grads_blk.b_down += d_act_out.sum(axis=0)
    d_pre = d_act * gelu_grad(cache.pre)
    d_m = d_pre @ blk.w_up.T
    grads_blk.w_up += cache.m.T @ d_pre
    grads_blk.b_up += d_pre.sum(axis=0)

    dx_ln2, dg2, db2 = _layer_norm_backward(d_m, cache.xhat2, cache.inv2, blk.ln2_gain)
    grads_blk.ln2_gain += dg2
    grads_blk.ln2_bias += db2
    d_x_mid = d_out + dx_ln2

    d_attn_out = d_x_mid
    d_concat = d_attn_out @ blk.wo.T
    grads_blk.wo += cache.concat.T @ d_attn_out
    grads_blk.bo += d_attn_out.sum(axis=0)

    d_ctx = _split_heads(d_concat, heads)
    d_att = d_ctx @ cache.v.transpose(0, 2, 1)
    d_v = cache.att.transpose(0, 2, 1) @ d_ctx
    d_scores = (d_att - (d_att * cache.att).sum(axis=-1, keepdims=True)) * cache.att
    dh = cache.q.shape[-1]
    d_scores *= 1.0 / np.sqrt(dh)
    d_q = d_scores @ cache.k
    d_k = d_scores.transpose(0, 2, 1) @ cache.q

    d_qc = _merge_heads(d_q)
    d_kc = _merge_heads(d_k)
    d_vc = _merge_heads(d_v)
    a = cache.a
    grads_blk.wq += a.T @ d_qc
    grads_blk.bq += d_qc.sum(axis=0)
    grads_blk.wk += a.T @ d_kc
    grads_blk.wv += a.T @ d_vc
    grads_blk.bv += d_vc.sum(axis=0)
    d_a = d_qc @ blk.wq.T + d_kc @ blk.wk.T + d_vc @ blk.wv.T

    dx_ln1, dg1, db1 = _layer_norm_backward(d_a, cache.xhat1, cache.inv1, blk.ln1_gain)
    grads_blk.ln1_gain += dg1
    grads_blk.ln1_bias += db1
    return d_x_mid + dx_ln1


def backward(
    params: TransformerParams,
    cfg: ModelConfig,
    trace: ForwardTrace,
    d_logits: np.ndarray | None = None,
    d_hidden: np.ndarray | None = None,
    grads: TransformerParams | None = None,
) -> TransformerParams:
    """Exact reverse-mode pass from output-gradients to parameter gradients.

    d_logits is the loss gradient w.r.t. the main head's (T, S) logits;
    d_hidden adds a direct gradient on the (T, D) hidden states (used by the
    auxiliary heads). Gradients accumulate into `grads` when given.
    """
    if trace.hidden is None or len(trace.block_caches) != cfg.layers:
        raise TraceError("forward trace is missing or does not match the config")
    if grads is None:
        grads = zeros_like_params(params)

    dh = np.zeros((trace.T, cfg.d), dtype=np.float64)
    if d_logits is not None:
        grads.head_w += trace.hidden.T @ d_logits
        grads.head_b += d_logits.sum(axis=0)
        dh += d_logits @ params.head_w.T
    if d_hidden is not None:
        dh = dh + d_hidden

    for blk, cache, gblk in zip(
        reversed(params.blocks), reversed(trace.block_caches), reversed(grads.blocks)
    ):
        dh = _block_backward(blk, cache, dh, gblk, cfg.heads)

    if cfg.use_positional:
        grads.positional[: trace.T] += dh

    row = 0
    if trace.prepend_cls:
        grads.cls_token += dh[0]
        row += 1
    if trace.has_task:
        grads.w_in += np.outer(trace.task_raw, dh[row])
        grads.b_in += dh[row]
        row += 1

    d_clip_tokens = dh[row:].copy()
    for i in trace.mask:
        grads.mask_token += d_clip_tokens[i]
        d_clip_tokens[i] = 0.0
    grads.w_in += trace.clips_masked.T @ d_clip_tokens
    grads.b_in += d_clip_tokens.sum(axis=0)
    return grads


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path, params: TransformerParams, cfg: ModelConfig, provenance: dict | None = None):
    """Binary checkpoint plus a JSON sidecar (`<path>.json`) with config and
    provenance. The binary alone determines the checkpoint digest."""
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        for _, arr in named_arrays(params):
            dims = arr.shape if arr.ndim else (1,)
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    sidecar = {"config": cfg.to_dict(), "provenance": provenance or {}}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> tuple[TransformerParams, ModelConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, 8)
    cfg = ModelConfig.from_dict(json.loads(data[12 : 12 + cfg_len].decode("utf-8")))
    offset = 12 + cfg_len
    params = init_params(cfg, seed=0)
    for name, ref in named_arrays(params):
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        count = int(np.prod(dims))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
        offset += 8 * count
        shape = ref.shape if ref.ndim else dims
        if tuple(dims) != (ref.shape if ref.ndim else (1,)):
            raise ParseError(f"{path}: array {name} has shape {dims}, expected {ref.shape}")
        set_array(params, name, arr.reshape(shape))
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes")
    return params, cfg


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
