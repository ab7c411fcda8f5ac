"""Sequence encoders: pre-norm transformer ("bert") and Conformer.

Both map a (T, input_dim) feature matrix to per-layer (T, d_model) hidden
states on the autodiff engine. The bert kind uses sinusoidal absolute
positions; the conformer kind uses a learned relative position bias and a
depthwise convolution module per block. Every block ends with a learnable
residual gain stored as an offset from one (zero-initialized), so initial
forward passes are standard while gradients still reach every branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from melfm import tensor as tt
from melfm.tensor import Tensor

KIND_BERT = "bert"
KIND_CONFORMER = "conformer"

TOKEN_RATES = (25, 50, 75)
INPUT_SECONDS = (5, 30)


@dataclass
class EncoderConfig:
    kind: str = KIND_CONFORMER
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    ffn_mult: int = 4
    conv_kernel: int = 31
    token_rate: int = 25
    max_input_seconds: int = 5
    input_dim: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in (KIND_BERT, KIND_CONFORMER):
            raise ValueError(f"kind must be bert or conformer, got {self.kind!r}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.token_rate not in TOKEN_RATES:
            raise ValueError(f"token_rate must be one of {TOKEN_RATES}")
        if self.max_input_seconds not in INPUT_SECONDS:
            raise ValueError(f"max_input_seconds must be one of {INPUT_SECONDS}")
        for name in ("d_model", "layers", "heads", "ffn_mult", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def max_frames(self) -> int:
        return self.token_rate * self.max_input_seconds

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class HiddenStates:
    """Input projection state followed by one state per block."""

    states: list[Tensor] = field(default_factory=list)

    def __getitem__(self, i: int) -> Tensor:
        return self.states[i]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def last(self) -> Tensor:
        return self.states[-1]


def sinusoidal_positions(num_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(num_frames)[:, None]
    dim = np.arange(d_model // 2)[None, :]
    angles = pos / (10000.0 ** (2.0 * dim / d_model))
    table = np.zeros((num_frames, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_weights(cfg: EncoderConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Xavier-uniform linears, zero biases, zero per-block residual-gain offsets."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    dm = d * cfg.ffn_mult
    w: dict[str, np.ndarray] = {}

    def linear(name: str, fan_in: int, fan_out: int, bias: bool = True):
        w[f"{name}.w"] = _xavier(rng, fan_in, fan_out, (fan_in, fan_out))
        if bias:
            w[f"{name}.b"] = np.zeros(fan_out)

    def norm(name: str):
        w[f"{name}.g"] = np.ones(d)
        w[f"{name}.b"] = np.zeros(d)

    def attention(p: str):
        norm(f"{p}.ln")
        # no key bias: a row-constant score shift cancels exactly under
        # softmax, so its gradient is identically zero
        linear(f"{p}.wq", d, d)
        linear(f"{p}.wk", d, d, bias=False)
        linear(f"{p}.wv", d, d)
        linear(f"{p}.wo", d, d)

    linear("input_proj", cfg.input_dim, d)
    for i in range(cfg.layers):
        p = f"blocks.{i}"
        if cfg.kind == KIND_BERT:
            attention(f"{p}.attn")
            norm(f"{p}.ffn.ln")
            linear(f"{p}.ffn.lin1", d, dm)
            linear(f"{p}.ffn.lin2", dm, d)
        else:
            for ffn in ("ffn1", "ffn2"):
                norm(f"{p}.{ffn}.ln")
                linear(f"{p}.{ffn}.lin1", d, dm)
                linear(f"{p}.{ffn}.lin2", dm, d)
            attention(f"{p}.attn")
            w[f"{p}.attn.rel_bias"] = np.zeros((2 * cfg.max_frames - 1, cfg.heads))
            norm(f"{p}.conv.ln")
            linear(f"{p}.conv.pw1", d, 2 * d)
            w[f"{p}.conv.dw.w"] = _xavier(rng, cfg.conv_kernel, cfg.conv_kernel, (d, cfg.conv_kernel))
            w[f"{p}.conv.dw.b"] = np.zeros(d)
            linear(f"{p}.conv.pw2", d, d)
            norm(f"{p}.final_ln")
        w[f"{p}.out_gain"] = np.zeros(d)
    if cfg.kind == KIND_BERT:
        norm("final_ln")
    return {name: Tensor(arr.astype(dtype), requires_grad=True) for name, arr in w.items()}


def parameter_count(weights: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in weights.values())


def config_parameter_count(cfg: EncoderConfig) -> int:
    """Analytic parameter count; lets paper-scale configs be sized without allocation."""
    d, dm = cfg.d_model, cfg.d_model * cfg.ffn_mult
    attn = 2 * d + 4 * d * d + 3 * d  # ln + q/k/v/o weights + q/v/o biases
    ffn = 2 * d + d * dm + dm + dm * d + d
    if cfg.kind == KIND_BERT:
        block = attn + ffn + d  # + out_gain
        total = cfg.input_dim * d + d + cfg.layers * block + 2 * d
    else:
        rel = (2 * cfg.max_frames - 1) * cfg.heads
        conv = 2 * d + (d * 2 * d + 2 * d) + (d * cfg.conv_kernel + d) + (d * d + d)
        block = 2 * ffn + attn + rel + conv + 2 * d + d
        total = cfg.input_dim * d + d + cfg.layers * block
    return total


def _affine_norm(weights, prefix: str, x: Tensor) -> Tensor:
    normed = tt.layer_norm(x)
    return tt.add(tt.mul(normed, weights[f"{prefix}.g"]), weights[f"{prefix}.b"])


def _linear(weights, prefix: str, x: Tensor) -> Tensor:
    out = tt.matmul(x, weights[f"{prefix}.w"])
    bias = weights.get(f"{prefix}.b")
    return out if bias is None else tt.add(out, bias)


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    # (..., T, d) -> (..., H, T, dk)
    if len(x.shape) == 2:
        t = x.shape[0]
        return tt.transpose(tt.reshape(x, (t, heads, head_dim)), (1, 0, 2))
    b, t, _ = x.shape
    return tt.transpose(tt.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor, d_model: int) -> Tensor:
    if len(x.shape) == 3:
        h, t, dk = x.shape
        return tt.reshape(tt.transpose(x, (1, 0, 2)), (t, d_model))
    b, h, t, dk = x.shape
    return tt.reshape(tt.transpose(x, (0, 2, 1, 3)), (b, t, d_model))


def _attention(cfg: EncoderConfig, weights, prefix: str, x: Tensor, score_bias: np.ndarray | None, rel_bias: Tensor | None) -> Tensor:
    q = _split_heads(_linear(weights, f"{prefix}.wq", x), cfg.heads, cfg.head_dim)
    k = _split_heads(_linear(weights, f"{prefix}.wk", x), cfg.heads, cfg.head_dim)
    v = _split_heads(_linear(weights, f"{prefix}.wv", x), cfg.heads, cfg.head_dim)
    kt = tt.transpose(k, (0, 2, 1) if len(k.shape) == 3 else (0, 1, 3, 2))
    scores = tt.scale(tt.matmul(q, kt), 1.0 / math.sqrt(cfg.head_dim))
    if rel_bias is not None:
        scores = tt.add(scores, rel_bias)
    if score_bias is not None:
        scores = tt.add(scores, Tensor(score_bias.astype(scores.dtype)))
    probs = tt.softmax(scores, axis=-1)
    ctx = _merge_heads(tt.matmul(probs, v), cfg.d_model)
    return _linear(weights, f"{prefix}.wo", ctx)


def _relative_bias(cfg: EncoderConfig, weights, prefix: str, num_frames: int) -> Tensor:
    offsets = np.arange(num_frames)[None, :] - np.arange(num_frames)[:, None]
    idx = np.clip(offsets, -(cfg.max_frames - 1), cfg.max_frames - 1) + cfg.max_frames - 1
    table = weights[f"{prefix}.rel_bias"]  # (2*max_frames-1, heads)
    gathered = tt.embedding_lookup(table, idx)  # (T, T, heads)
    return tt.transpose(gathered, (2, 0, 1))  # (heads, T, T)


def _ffn(weights, prefix: str, x: Tensor) -> Tensor:
    hidden = tt.gelu(_linear(weights, f"{prefix}.lin1", x))
    return _linear(weights, f"{prefix}.lin2", hidden)


def conv_module(weights, prefix: str, x: Tensor) -> Tensor:
    """Conformer convolution branch: pointwise -> GLU -> depthwise -> swish -> pointwise."""
    gated = tt.glu(_linear(weights, f"{prefix}.pw1", x), axis=-1)
    conved = tt.add(tt.conv1d(gated, weights[f"{prefix}.dw.w"]), weights[f"{prefix}.dw.b"])
    return _linear(weights, f"{prefix}.pw2", tt.swish(conved))


def _residual_gain(weights, prefix: str, branch: Tensor) -> Tensor:
    # stored as an offset from 1 so zero init keeps the branch live
    return tt.add(branch, tt.mul(branch, weights[f"{prefix}.out_gain"]))


def encode(
    cfg: EncoderConfig,
    weights: dict[str, Tensor],
    frames: np.ndarray | Tensor,
    pad_mask: np.ndarray | None = None,
) -> HiddenStates:
    """Run the encoder, returning the input projection plus every block state.

    frames: (T, input_dim) or batched (B, T, input_dim). pad_mask (valid=True,
    2-D input only) excludes padded frames from attention and zeroes their
    rows so outputs equal the unpadded computation.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(frames)
    batched = len(x.shape) == 3
    num_frames = x.shape[-2]
    if num_frames > cfg.max_frames:
        raise ValueError(
            f"input of {num_frames} frames exceeds {cfg.max_frames} "
            f"({cfg.token_rate} Hz x {cfg.max_input_seconds} s)"
        )
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"frame dim {x.shape[-1]} != input_dim {cfg.input_dim}")
    if pad_mask is not None and batched:
        raise ValueError("pad_mask is supported for unbatched input only")

    mask_col = None
    score_bias = None
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        mask_col = pad_mask[:, None].astype(x.dtype)
        score_bias = np.where(pad_mask, 0.0, -1e9)[None, None, :]  # (1, 1, T) keys

    def masked(t: Tensor) -> Tensor:
        return t if mask_col is None else tt.mul(t, Tensor(mask_col))

    h = _linear(weights, "input_proj", x)
    if cfg.kind == KIND_BERT:
        pos = sinusoidal_positions(num_frames, cfg.d_model).astype(h.dtype)
        h = tt.add(h, Tensor(pos))
    h = masked(h)
    states = [h]

    for i in range(cfg.layers):
        p = f"blocks.{i}"
        if cfg.kind == KIND_BERT:
            attn_in = _affine_norm(weights, f"{p}.attn.ln", h)
            h = masked(tt.add(h, _attention(cfg, weights, f"{p}.attn", attn_in, score_bias, None)))
            ffn_out = _ffn(weights, f"{p}.ffn", _affine_norm(weights, f"{p}.ffn.ln", h))
            h = masked(tt.add(h, _residual_gain(weights, p, ffn_out)))
        else:
            h = masked(tt.add(h, tt.scale(_ffn(weights, f"{p}.ffn1", _affine_norm(weights, f"{p}.ffn1.ln", h)), 0.5)))
            rel = _relative_bias(cfg, weights, f"{p}.attn", num_frames)
            attn_in = _affine_norm(weights, f"{p}.attn.ln", h)
            h = masked(tt.add(h, _attention(cfg, weights, f"{p}.attn", attn_in, score_bias, rel)))
            conv_in = masked(_affine_norm(weights, f"{p}.conv.ln", h))
            h = masked(tt.add(h, conv_module(weights, f"{p}.conv", conv_in)))
            ffn2_out = tt.scale(_ffn(weights, f"{p}.ffn2", _affine_norm(weights, f"{p}.ffn2.ln", h)), 0.5)
            h = masked(tt.add(h, _residual_gain(weights, p, ffn2_out)))
            h = masked(_affine_norm(weights, f"{p}.final_ln", h))
        states.append(h)

    if cfg.kind == KIND_BERT:
        states[-1] = masked(_affine_norm(weights, "final_ln", states[-1]))
    return HiddenStates(states)
