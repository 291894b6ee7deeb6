"""Building blocks of the hybrid feature extractor.

DRDB: densely connected dilated convolutions with a residual fusion.
SGTB: pre-norm channel self-attention, structure-guided cross attention,
and a feed-forward network, each wrapped in a residual connection.
SAM: three-scale pyramid with learned per-channel fusion weights.

Attention is computed over per-head channel descriptors (transposed
attention), so the attention matrix is (C/heads)^2 regardless of image
size. Output projections and fusion layers are zero-initialized by
default, which makes every residual block start as the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imageops import bilinear_resize, conv2d
from .tensor import Tensor

L2_NORM_EPS = 1e-12


@dataclass
class BlockConfig:
    channels: int
    attention_heads: int = 1
    drdb_growth: int = 16
    drdb_layers: int = 3
    ffn_expansion: float = 2.0
    use_sgca: bool = True            # ablation: drop the cross-attention stage
    sgca_kv_from_image: bool = False  # ablation: literal reading, K/V from X
    sam_scales: int = 3               # fixed; kept for introspection

    def __post_init__(self):
        if self.channels % self.attention_heads:
            raise ValueError("channels must be divisible by attention_heads")
        if self.drdb_layers < 2:
            raise ValueError("drdb_layers must be >= 2")
        if self.ffn_expansion < 1:
            raise ValueError("ffn_expansion must be >= 1")
        if self.sam_scales != 3:
            raise ValueError("sam_scales is fixed at 3")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


class Conv2dLayer:
    """3x3/1x1 convolution wrapper holding weight and bias tensors."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 dilation: int = 1, zero_init: bool = False, bias: bool = True):
        w = (np.zeros((cout, cin, k, k)) if zero_init
             else kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2  # same-size output

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1,
                      padding=self.padding, dilation=self.dilation)

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class LinearLayer:
    """y = x @ W^T + b."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        w = np.zeros((cout, cin)) if zero_init else kaiming_uniform(rng, (cout, cin), cin)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        return y + self.bias if self.bias is not None else y

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class ChannelLayerNorm:
    """LayerNorm over the channel axis of [B,C,H,W]."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, axis=1, eps=self.eps)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "shift": self.shift}


def _collect(children: dict[str, object]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for name, child in children.items():
        if child is None:
            continue
        if isinstance(child, Tensor):
            out[name] = child
        else:
            for sub, t in child.params().items():
                out[f"{name}.{sub}"] = t
    return out


class DRDB:
    """Dilated residual dense block: dilations cycle 1,2,3,...

    Each dense layer sees the concatenation of the input and all previous
    layer outputs and emits `growth` channels through a ReLU; a 1x1 fusion
    maps back to C and is added to the input.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c, g = cfg.channels, cfg.drdb_growth
        self.layers = [
            Conv2dLayer(c + i * g, g, 3, rng, dilation=(i % 3) + 1)
            for i in range(cfg.drdb_layers)
        ]
        self.fuse = Conv2dLayer(c + cfg.drdb_layers * g, c, 1, rng,
                                zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else T.concat(feats, axis=1)
            feats.append(T.relu(layer(inp)))
        return x + self.fuse(T.concat(feats, axis=1))

    def params(self) -> dict[str, Tensor]:
        children = {f"dense{i}": l for i, l in enumerate(self.layers)}
        children["fuse"] = self.fuse
        return _collect(children)


def _to_heads(tokens: Tensor, heads: int) -> Tensor:
    """[B,HW,C] -> [B,heads,C/heads,HW] channel descriptors."""
    b, hw, c = tokens.shape
    t = T.reshape(tokens, (b, hw, heads, c // heads))
    return T.transpose(t, (0, 2, 3, 1))


def _from_heads(x: Tensor) -> Tensor:
    """[B,heads,C/heads,HW] -> [B,HW,C]."""
    b, h, cp, hw = x.shape
    return T.reshape(T.transpose(x, (0, 3, 1, 2)), (b, hw, h * cp))


def _l2_normalize_last(x: Tensor) -> Tensor:
    norm = T.sqrt(T.sum_axis(T.square(x), -1, keepdims=True) + L2_NORM_EPS)
    return x / norm


def _channel_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                       inv_lambda: Tensor) -> Tensor:
    """Transposed attention over channel descriptors; all args [B,HW,C]."""
    qh = _l2_normalize_last(_to_heads(q, heads))
    kh = _l2_normalize_last(_to_heads(k, heads))
    vh = _to_heads(v, heads)
    logits = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * inv_lambda
    attn = T.softmax(logits, axis=-1)  # [B,heads,C/h,C/h], rows sum to 1
    return _from_heads(T.matmul(attn, vh))


class ChannelSelfAttention:
    """CSA: queries, keys, and values all projected from the image stream."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c = cfg.channels
        self.heads = cfg.attention_heads
        self.q_proj = LinearLayer(c, c, rng, bias=False)
        self.k_proj = LinearLayer(c, c, rng, bias=False)
        self.v_proj = LinearLayer(c, c, rng, bias=False)
        self.out_proj = LinearLayer(c, c, rng, zero_init=zero_init_out)
        self.log_lambda = Tensor(0.0, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = T.flatten_hw(x)
        out = _channel_attention(self.q_proj(tokens), self.k_proj(tokens),
                                 self.v_proj(tokens), self.heads,
                                 T.exp(-self.log_lambda))
        return T.unflatten_hw(self.out_proj(out), h, w)

    def params(self) -> dict[str, Tensor]:
        return _collect({"q": self.q_proj, "k": self.k_proj, "v": self.v_proj,
                         "out": self.out_proj, "log_lambda": self.log_lambda})


class StructureGuidedCrossAttention:
    """SGCA: queries from the image stream, keys/values from prior features."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c = cfg.channels
        self.heads = cfg.attention_heads
        self.kv_from_image = cfg.sgca_kv_from_image
        self.q_proj = LinearLayer(c, c, rng, bias=False)
        self.k_proj = LinearLayer(c, c, rng, bias=False)
        self.v_proj = LinearLayer(c, c, rng, bias=False)
        self.out_proj = LinearLayer(c, c, rng, zero_init=zero_init_out)
        self.log_lambda = Tensor(0.0, requires_grad=True)

    def __call__(self, x: Tensor, prior_feat: Tensor) -> Tensor:
        if x.shape[2:] != prior_feat.shape[2:]:
            raise ValueError(
                f"spatial mismatch: image {x.shape[2:]} vs prior {prior_feat.shape[2:]}")
        b, c, h, w = x.shape
        tokens = T.flatten_hw(x)
        kv_src = tokens if self.kv_from_image else T.flatten_hw(prior_feat)
        out = _channel_attention(self.q_proj(tokens), self.k_proj(kv_src),
                                 self.v_proj(kv_src), self.heads,
                                 T.exp(-self.log_lambda))
        return T.unflatten_hw(self.out_proj(out), h, w)

    def params(self) -> dict[str, Tensor]:
        return _collect({"q": self.q_proj, "k": self.k_proj, "v": self.v_proj,
                         "out": self.out_proj, "log_lambda": self.log_lambda})


class FeedForward:
    """Two 1x1 convolutions with a GELU between."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c = cfg.channels
        hidden = int(round(c * cfg.ffn_expansion))
        self.expand = Conv2dLayer(c, hidden, 1, rng)
        self.project = Conv2dLayer(hidden, c, 1, rng, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(T.gelu(self.expand(x)))

    def params(self) -> dict[str, Tensor]:
        return _collect({"expand": self.expand, "project": self.project})


class SGTB:
    """Structure-guided transformer block with three residual stages."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c = cfg.channels
        self.use_sgca = cfg.use_sgca
        self.norm_csa = ChannelLayerNorm(c)
        self.csa = ChannelSelfAttention(cfg, rng, zero_init_out)
        self.norm_sgca = ChannelLayerNorm(c) if cfg.use_sgca else None
        self.sgca = (StructureGuidedCrossAttention(cfg, rng, zero_init_out)
                     if cfg.use_sgca else None)
        self.norm_ffn = ChannelLayerNorm(c)
        self.ffn = FeedForward(cfg, rng, zero_init_out)

    def __call__(self, x: Tensor, prior_feat: Tensor) -> Tensor:
        y = x + self.csa(self.norm_csa(x))
        if self.use_sgca:
            y = y + self.sgca(self.norm_sgca(y), prior_feat)
        return y + self.ffn(self.norm_ffn(y))

    def params(self) -> dict[str, Tensor]:
        return _collect({"norm_csa": self.norm_csa, "csa": self.csa,
                         "norm_sgca": self.norm_sgca, "sgca": self.sgca,
                         "norm_ffn": self.norm_ffn, "ffn": self.ffn})


class SAM:
    """Scale-aware fusion over a 1x / 0.5x / 0.25x pyramid.

    Per-scale 3x3 convolutions produce Y_i; pooled descriptors drive an
    MLP (hidden width 3C, GELU, sigmoid output) that emits per-channel
    fusion weights beta_i in (0,1). `beta_override` is a test hook that
    bypasses the MLP with a constant.
    """

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator,
                 zero_init_out: bool = True):
        c = cfg.channels
        self.convs = [Conv2dLayer(c, c, 3, rng) for _ in range(3)]
        self.mlp_hidden = LinearLayer(3 * c, 3 * c, rng)
        self.mlp_out = LinearLayer(3 * c, 3 * c, rng, zero_init=zero_init_out)
        self.beta_override: float | None = None

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if h % 4 or w % 4:
            raise ValueError("SAM needs H and W divisible by 4")
        pyr = [x, bilinear_resize(x, h // 2, w // 2), bilinear_resize(x, h // 4, w // 4)]
        ys = [conv(f) for conv, f in zip(self.convs, pyr)]
        pooled = T.concat([T.reshape(T.global_avg_pool(y), (b, c)) for y in ys], axis=1)
        betas = T.sigmoid(self.mlp_out(T.gelu(self.mlp_hidden(pooled))))
        if self.beta_override is not None:
            betas = Tensor(np.full((b, 3 * c), self.beta_override))
        ys = [ys[0], bilinear_resize(ys[1], h, w), bilinear_resize(ys[2], h, w)]
        out = x
        for i, y in enumerate(ys):
            beta_i = T.reshape(betas[:, i * c:(i + 1) * c], (b, c, 1, 1))
            out = out + beta_i * y
        return out

    def params(self) -> dict[str, Tensor]:
        children = {f"scale{i}": conv for i, conv in enumerate(self.convs)}
        children["mlp_hidden"] = self.mlp_hidden
        children["mlp_out"] = self.mlp_out
        return _collect(children)
