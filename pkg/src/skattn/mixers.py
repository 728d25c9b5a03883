"""Token mixers with a common (B, N, D) -> (B, N, D) contract.

Four interchangeable units:

* ``mhsa``     -- multi-head self-attention: dynamic queries, keys, values.
* ``ska``      -- static key attention: the key projection is replaced by a
  trainable per-head matrix of shape [N, d_h]; logits are Q @ key^T, so the
  key is bound to token positions instead of being computed from the input.
* ``cska``     -- convolutional static key attention: the logits come from a
  grouped convolution over the query feature map laid out as an image
  [D, grid_h, grid_w], one channel group per head, N output channels per
  group (one logit per key position for every query position).
* ``sepconv``  -- depthwise-separable convolution: pointwise -> depthwise
  k x k -> pointwise, a purely convolutional mixer with no attention map.

Attention mixers share the same tail: optional 1/sqrt(d_h) logit scaling,
a row activation (softmax by default), attention times values, head concat,
and an output projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Module
from .errors import ConfigError, ShapeError
from .tensor import Rng, Tensor

KINDS = ("mhsa", "ska", "cska", "sepconv")
ACTIVATIONS = ("softmax", "gelu", "relu", "starrelu")

# StarReLU s * relu(x)^2 + b initial scalars: 1/sqrt(1.25) and -sqrt(0.2)
_STARRELU_SCALE = 0.8944
_STARRELU_BIAS = -0.4472


@dataclass
class MixerConfig:
    """Configuration shared by all four mixer kinds.

    ``tokens`` is the spatial token count (excluding any CLS token); for
    cska/sepconv it must equal grid_h * grid_w. ``qkv_bias`` toggles every
    bias in the mixer (projections and the cska key convolution); bias-free
    mode is what the closed-form parameter counts assume.
    """

    kind: str
    dim: int
    heads: int = 1
    tokens: int = 0
    grid: tuple[int, int] | None = None
    activation: str = "softmax"
    scaled: bool = True
    qkv_bias: bool = True
    cls_token: bool = False
    kernel: int = 3
    dropout: float = 0.0
    key_init: str = "normal"  # "normal" (unit std) or "trunc" (std 0.02, clipped at 2 sigma)
    allow_token_resize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown mixer kind {self.kind!r}; valid: {', '.join(KINDS)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}; valid: {', '.join(ACTIVATIONS)}")
        if self.dim <= 0 or self.heads <= 0:
            raise ConfigError(f"dim and heads must be positive, got {self.dim}, {self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.key_init not in ("normal", "trunc"):
            raise ConfigError(f"unknown key_init {self.key_init!r}")
        if self.grid is not None:
            self.grid = tuple(self.grid)
        if self.kind in ("ska", "cska") and self.tokens < 1 and self.grid is None:
            raise ConfigError(f"{self.kind} requires a fixed token count, got {self.tokens}")
        if self.kind in ("cska", "sepconv"):
            if self.grid is None:
                raise ConfigError(f"{self.kind} requires a (grid_h, grid_w) token grid")
            gh, gw = self.grid
            if self.tokens and gh * gw != self.tokens:
                raise ConfigError(f"grid {gh}x{gw} does not match {self.tokens} tokens")
            if self.tokens == 0:
                self.tokens = gh * gw
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ConfigError(f"{self.kind} kernel must be odd and positive, got {self.kernel}")
        if self.kind == "ska" and self.tokens == 0 and self.grid is not None:
            gh, gw = self.grid
            self.tokens = gh * gw
        if self.kind == "sepconv" and self.cls_token:
            raise ConfigError("sepconv cannot carry a CLS token (no attention path)")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def total_tokens(self) -> int:
        """Token count the mixer expects at its input (spatial + CLS)."""
        return self.tokens + (1 if self.cls_token else 0)


@dataclass(frozen=True)
class MixerProperties:
    """Structural descriptor: how weights are shared across positions and
    how many input-dependent weight applications the mixer performs."""

    kind: str
    weight_sharing: str  # "none" | "spatially-global"
    dynamic_weights: int


_PROPERTIES = {
    "sepconv": MixerProperties("sepconv", "spatially-global", 0),
    "mhsa": MixerProperties("mhsa", "none", 2),
    "ska": MixerProperties("ska", "none", 1),
    "cska": MixerProperties("cska", "spatially-global", 1),
}


def mixer_properties(kind: str) -> MixerProperties:
    if kind not in _PROPERTIES:
        raise ConfigError(f"unknown mixer kind {kind!r}")
    return _PROPERTIES[kind]


def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) * (1.0 / math.sqrt(fan_in)))


def _trunc_normal(rng: Rng, shape, std: float = 0.02, clip: float = 2.0) -> np.ndarray:
    z = rng.normal(shape)
    while True:
        bad = np.abs(z) > clip
        if not bad.any():
            break
        z[bad] = rng.normal((int(bad.sum()),))
    return z * std


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


class TokenMixer(Module):
    """Base: holds the config and the shared attention tail."""

    def __init__(self, cfg: MixerConfig, rng: Rng):
        super().__init__()
        self.cfg = cfg
        self._drop_rng = rng.split("dropout")
        self.act_scale = self.act_bias = None
        if cfg.activation == "starrelu":
            self.act_scale = self.register("act_scale", Tensor(np.full((1,), _STARRELU_SCALE)))
            self.act_bias = self.register("act_bias", Tensor(np.full((1,), _STARRELU_BIAS)))

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def _activate(self, logits: Tensor) -> Tensor:
        act = self.cfg.activation
        if act == "softmax":
            return T.softmax_rows(logits)
        if act == "relu":
            return T.relu(logits)
        if act == "gelu":
            return T.gelu(logits)
        r = T.relu(logits)
        return T.mul(T.mul(r, r), self.act_scale) + self.act_bias

    def _attend(self, logits: Tensor, v_heads: Tensor, attn_sink) -> Tensor:
        if self.cfg.scaled:
            logits = T.mul(logits, 1.0 / math.sqrt(self.cfg.head_dim))
        attn = self._activate(logits)
        if attn_sink is not None:
            attn_sink.append(np.copy(attn.data))
        return T.matmul(attn, v_heads)

    def _project_out(self, merged: Tensor) -> Tensor:
        out = T.matmul(merged, self.wo)
        if self.bo is not None:
            out = out + self.bo
        if self.training and self.cfg.dropout > 0.0:
            out = T.dropout(out, self.cfg.dropout, self._drop_rng)
        return out

    def forward(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        raise NotImplementedError


class SelfAttention(TokenMixer):
    """Standard multi-head self-attention; length-flexible.

    The key projection carries no bias even with qkv_bias on: a key bias
    shifts every logit in a row by the same amount, so softmax attention is
    exactly invariant to it and the parameter would be inert.
    """

    def __init__(self, cfg: MixerConfig, rng: Rng):
        super().__init__(cfg, rng)
        d = cfg.dim
        self.wq = self.register("wq", _linear_init(rng.split("wq"), d, d))
        self.wk = self.register("wk", _linear_init(rng.split("wk"), d, d))
        self.wv = self.register("wv", _linear_init(rng.split("wv"), d, d))
        self.wo = self.register("wo", _linear_init(rng.split("wo"), d, d))
        self.bq = self.bv = self.bo = None
        if cfg.qkv_bias:
            self.bq = self.register("bq", Tensor(np.zeros(d)))
            self.bv = self.register("bv", Tensor(np.zeros(d)))
            self.bo = self.register("bo", Tensor(np.zeros(d)))

    def forward(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        h = self.cfg.heads
        q = T.matmul(x, self.wq)
        k = T.matmul(x, self.wk)
        v = T.matmul(x, self.wv)
        if self.bq is not None:
            q, v = q + self.bq, v + self.bv
        q, k, v = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
        logits = T.matmul(q, k.transpose(0, 1, 3, 2))
        out = self._attend(logits, v, attn_sink)
        return self._project_out(_merge_heads(out))


class StaticKeyAttention(TokenMixer):
    """Attention whose key is a trainable [heads, N, d_h] parameter.

    Logits are Q @ key^T: each token's query is compared against N learned
    position-bound key vectors, so the token count is fixed at build time.
    With a CLS token the key simply has N+1 rows. The key carries no bias.
    """

    def __init__(self, cfg: MixerConfig, rng: Rng):
        super().__init__(cfg, rng)
        d = cfg.dim
        self.wq = self.register("wq", _linear_init(rng.split("wq"), d, d))
        self.wv = self.register("wv", _linear_init(rng.split("wv"), d, d))
        self.wo = self.register("wo", _linear_init(rng.split("wo"), d, d))
        self.bq = self.bv = self.bo = None
        if cfg.qkv_bias:
            self.bq = self.register("bq", Tensor(np.zeros(d)))
            self.bv = self.register("bv", Tensor(np.zeros(d)))
            self.bo = self.register("bo", Tensor(np.zeros(d)))
        shape = (cfg.heads, cfg.total_tokens, cfg.head_dim)
        key_rng = rng.split("key")
        if cfg.key_init == "trunc":
            self.key = self.register("key", Tensor(_trunc_normal(key_rng, shape)))
        else:
            self.key = self.register("key", T.rng_normal(key_rng, shape))

    def _key_for(self, n_tokens: int) -> Tensor:
        expected = self.cfg.total_tokens
        if n_tokens == expected:
            return self.key
        if not self.cfg.allow_token_resize:
            raise ShapeError(
                f"ska built for {expected} tokens but input carries {n_tokens}; "
                "enable allow_token_resize to interpolate the static key")
        # inference-time linear interpolation along the token axis (untracked)
        kd = self.key.data
        old = np.linspace(0.0, 1.0, expected)
        new = np.linspace(0.0, 1.0, n_tokens)
        resized = np.empty((kd.shape[0], n_tokens, kd.shape[2]))
        for h in range(kd.shape[0]):
            for c in range(kd.shape[2]):
                resized[h, :, c] = np.interp(new, old, kd[h, :, c])
        return Tensor(resized)

    def forward(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        key = self._key_for(x.shape[1])
        h = self.cfg.heads
        q = T.matmul(x, self.wq)
        v = T.matmul(x, self.wv)
        if self.bq is not None:
            q, v = q + self.bq, v + self.bv
        q, v = _split_heads(q, h), _split_heads(v, h)
        logits = T.matmul(q, key.transpose(0, 2, 1))
        out = self._attend(logits, v, attn_sink)
        return self._project_out(_merge_heads(out))


class ConvStaticKeyAttention(TokenMixer):
    """Attention whose logits come from a grouped conv over the query map.

    The query projection is reshaped to an image [B, D, grid_h, grid_w];
    a grouped convolution (groups = heads, N output channels per group,
    same-size padding) yields, at every query position, one logit per key
    position. With a CLS token: every query gains one extra key column from
    a trainable per-head key vector dotted with its query, and the CLS
    query's spatial-key logits are zero (it has no spatial position).
    """

    def __init__(self, cfg: MixerConfig, rng: Rng):
        super().__init__(cfg, rng)
        d, h, n, k = cfg.dim, cfg.heads, cfg.tokens, cfg.kernel
        dh = cfg.head_dim
        self.wq = self.register("wq", _linear_init(rng.split("wq"), d, d))
        self.wv = self.register("wv", _linear_init(rng.split("wv"), d, d))
        self.wo = self.register("wo", _linear_init(rng.split("wo"), d, d))
        self.bq = self.bv = self.bo = self.conv_b = self.cls_key = None
        if cfg.qkv_bias:
            self.bq = self.register("bq", Tensor(np.zeros(d)))
            self.bv = self.register("bv", Tensor(np.zeros(d)))
            self.bo = self.register("bo", Tensor(np.zeros(d)))
        conv_rng = rng.split("conv_key")
        self.conv_w = self.register(
            "conv_w", Tensor(conv_rng.normal((h * n, dh, k, k)) / math.sqrt(dh * k * k)))
        if cfg.qkv_bias:
            self.conv_b = self.register("conv_b", Tensor(np.zeros(h * n)))
        if cfg.cls_token:
            cls_rng = rng.split("cls_key")
            if cfg.key_init == "trunc":
                self.cls_key = self.register("cls_key", Tensor(_trunc_normal(cls_rng, (h, 1, dh))))
            else:
                self.cls_key = self.register("cls_key", T.rng_normal(cls_rng, (h, 1, dh)))

    def forward(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        cfg = self.cfg
        if x.shape[1] != cfg.total_tokens:
            raise ShapeError(
                f"cska built for {cfg.total_tokens} tokens but input carries {x.shape[1]}")
        b = x.shape[0]
        h, n = cfg.heads, cfg.tokens
        gh, gw = cfg.grid

        q = T.matmul(x, self.wq)
        v = T.matmul(x, self.wv)
        if self.bq is not None:
            q, v = q + self.bq, v + self.bv
        v = _split_heads(v, h)

        q_spatial = T.slice_axis(q, 1, 1, cfg.total_tokens) if cfg.cls_token else q
        q_img = q_spatial.transpose(0, 2, 1).reshape(b, cfg.dim, gh, gw)
        logit_img = T.conv2d_grouped(q_img, self.conv_w, self.conv_b,
                                     stride=1, padding=(cfg.kernel - 1) // 2, groups=h)
        # channel block h holds the N key logits of every query position in head h
        spatial = logit_img.reshape(b, h, n, gh * gw).transpose(0, 1, 3, 2)  # [B, H, Nq, Nk]

        if cfg.cls_token:
            q_heads = _split_heads(q, h)
            cls_col = T.matmul(q_heads, self.cls_key.transpose(0, 2, 1))  # [B, H, N+1, 1]
            cls_row = Tensor(np.zeros((b, h, 1, n)))
            rows = T.concat([cls_row, spatial], axis=2)                   # [B, H, N+1, N]
            logits = T.concat([cls_col, rows], axis=3)                    # [B, H, N+1, N+1]
        else:
            logits = spatial

        out = self._attend(logits, v, attn_sink)
        return self._project_out(_merge_heads(out))


class SepConv(TokenMixer):
    """Depthwise-separable convolution mixer: pointwise, depthwise, pointwise.

    Purely linear (the block's MLP supplies the nonlinearity), so a
    center-one depthwise kernel with identity pointwise maps is the
    identity.
    """

    def __init__(self, cfg: MixerConfig, rng: Rng):
        super().__init__(cfg, rng)
        d, k = cfg.dim, cfg.kernel
        self.pw1 = self.register("pw1", _linear_init(rng.split("pw1"), d, d))
        self.dw = self.register("dw", Tensor(rng.split("dw").normal((d, 1, k, k)) / k))
        self.pw2 = self.register("pw2", _linear_init(rng.split("pw2"), d, d))
        self.b1 = self.bdw = self.b2 = None
        if cfg.qkv_bias:
            self.b1 = self.register("b1", Tensor(np.zeros(d)))
            self.bdw = self.register("bdw", Tensor(np.zeros(d)))
            self.b2 = self.register("b2", Tensor(np.zeros(d)))

    def forward(self, x: Tensor, attn_sink: list | None = None) -> Tensor:
        cfg = self.cfg
        b, n, d = x.shape
        gh, gw = cfg.grid
        if n != gh * gw:
            raise ShapeError(f"sepconv built for a {gh}x{gw} grid but input carries {n} tokens")
        h = T.matmul(x, self.pw1)
        if self.b1 is not None:
            h = h + self.b1
        img = h.transpose(0, 2, 1).reshape(b, d, gh, gw)
        img = T.conv2d_grouped(img, self.dw, self.bdw,
                               stride=1, padding=(cfg.kernel - 1) // 2, groups=d)
        h = img.reshape(b, d, n).transpose(0, 2, 1)
        out = T.matmul(h, self.pw2)
        if self.b2 is not None:
            out = out + self.b2
        if self.training and cfg.dropout > 0.0:
            out = T.dropout(out, cfg.dropout, self._drop_rng)
        return out


_MIXER_CLASSES = {
    "mhsa": SelfAttention,
    "ska": StaticKeyAttention,
    "cska": ConvStaticKeyAttention,
    "sepconv": SepConv,
}


def build_mixer(cfg: MixerConfig, rng: Rng) -> TokenMixer:
    return _MIXER_CLASSES[cfg.kind](cfg, rng)


def attention_trace(mixer: TokenMixer, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Run a forward pass capturing the post-activation attention weights.

    Returns (attn [B, H, Nq, Nk], head_average [B, Nq, Nk]). The captured
    copy does not alter the forward result. Raises for sepconv, which has
    no attention map.
    """
    if mixer.kind == "sepconv":
        raise ConfigError("sepconv has no attention map")
    sink: list[np.ndarray] = []
    mixer.forward(x, attn_sink=sink)
    attn = sink[0]
    return attn, attn.mean(axis=1)
