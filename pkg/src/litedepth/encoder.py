"""Hybrid convolution/attention depth encoder.

Three size variants share one layout: a three-conv stem at half resolution,
then three stages, each of [strided downsampling conv -> a run of dilated
depthwise residual blocks -> one channel-attention block]. Every downsampling
conv also sees the average-pooled RGB input, and the second and third ones
additionally re-see the previous downsampling output (a residual-style
cross-stage carry).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import Tensor, avg_pool, concat, gelu, softmax
from .nn import BatchNorm2d, Conv2d, ConvBnGelu, LayerNorm, Linear, Module

__all__ = [
    "AttentionBlock",
    "DepthEncoder",
    "DilatedConvBlock",
    "EncoderConfig",
    "FeaturePyramid",
    "count_flops",
    "count_params",
    "last_attention_buffer_elements",
    "spatial_attention_probe",
    "xca_attention",
]

_STAGE12_DILATIONS = [1, 2, 3]

_VARIANTS = {
    "tiny": dict(channels=(32, 32, 64, 128), cdc_repeats=(3, 3, 6),
                 stage3_dilations=[1, 2, 3, 2, 4, 6]),
    "small": dict(channels=(48, 48, 80, 128), cdc_repeats=(3, 3, 6),
                  stage3_dilations=[1, 2, 3, 2, 4, 6]),
    "base": dict(channels=(48, 48, 80, 128), cdc_repeats=(3, 3, 9),
                 stage3_dilations=[1, 2, 3, 1, 2, 3, 2, 4, 6]),
}


@dataclass
class EncoderConfig:
    """Per-variant widths, depths, dilation schedule and ablation toggles."""

    variant: str = "base"
    channels: Tuple[int, int, int, int] = (48, 48, 80, 128)
    cdc_repeats: Tuple[int, int, int] = (3, 3, 9)
    dilation_schedule: Tuple[List[int], ...] = ()
    heads: Tuple[int, int, int] = (4, 4, 8)
    expansion: int = 6
    use_lgfi: bool = True
    use_dilation: bool = True
    use_pooled_concat: bool = True
    use_cross_stage: bool = True
    normalized_attention: bool = True   # False runs the raw softmax(K^T Q) form
    zero_init_residual: bool = False

    @classmethod
    def variant_preset(cls, name: str, **overrides) -> "EncoderConfig":
        if name not in _VARIANTS:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(_VARIANTS)}")
        v = _VARIANTS[name]
        cfg = cls(variant=name, channels=v["channels"], cdc_repeats=v["cdc_repeats"],
                  dilation_schedule=(list(_STAGE12_DILATIONS),
                                     list(_STAGE12_DILATIONS),
                                     list(v["stage3_dilations"])))
        cfg = replace(cfg, **overrides)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if len(self.dilation_schedule) != 3:
            raise ValueError("dilation_schedule must cover the three stages")
        for s, (dils, reps) in enumerate(zip(self.dilation_schedule, self.cdc_repeats)):
            if len(dils) != reps:
                raise ValueError(
                    f"stage {s + 1}: {len(dils)} dilation rates for {reps} blocks")
            if any(d < 1 for d in dils):
                raise ValueError(f"stage {s + 1}: dilation rates must be >= 1")
        for s, (c, h) in enumerate(zip(self.channels[1:], self.heads)):
            if c % h != 0:
                raise ValueError(f"stage {s + 1}: channels {c} not divisible by heads {h}")

    def stage_dilations(self, stage: int) -> List[int]:
        dils = self.dilation_schedule[stage]
        return [1] * len(dils) if not self.use_dilation else list(dils)


@dataclass
class FeaturePyramid:
    """Encoder outputs: stem at H/2 plus the three stage outputs."""

    stem: Tensor      # (N, C1, H/2,  W/2)
    stage1: Tensor    # (N, C2, H/4,  W/4)
    stage2: Tensor    # (N, C3, H/8,  W/8)
    stage3: Tensor    # (N, C4, H/16, W/16)

    def stages(self) -> Tuple[Tensor, Tensor, Tensor]:
        return self.stage1, self.stage2, self.stage3


# ------------------------------------------------------------------ attention

_attention_probe = {"xca_elements": 0, "spatial_elements": 0}


def last_attention_buffer_elements() -> int:
    """Element count of the most recent attention matrix, per batch item."""
    return _attention_probe["xca_elements"]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)  # (B,h,N,dh)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def xca_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                  temperature: Optional[Tensor] = None,
                  normalized: bool = True) -> Tensor:
    """Cross-covariance (channel) attention.

    q, k, v are (N_tok, d) or batched (B, N_tok, d); d must divide by heads.
    Per head the mixing matrix is softmax over the K-channel index of
    K^T Q, a (d/h) x (d/h) array independent of N_tok, so each output
    channel is a convex mixture of input channels. When `normalized`, each
    channel of Q and K is first L2-normalized over tokens and the logits are
    scaled by a per-head temperature; otherwise the raw product is used.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    b, n, d = q.shape
    if d % heads != 0:
        raise ValueError(f"token dimension {d} not divisible by heads {heads}")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    if normalized:
        qh = qh / ((qh * qh).sum(axis=2, keepdims=True) + 1e-12).sqrt()
        kh = kh / ((kh * kh).sum(axis=2, keepdims=True) + 1e-12).sqrt()
    logits = kh.swap_last_axes() @ qh                      # (B, h, dh, dh)
    if normalized and temperature is not None:
        logits = logits * temperature.reshape(1, heads, 1, 1)
    attn = softmax(logits, axis=-2)                        # columns sum to 1
    _attention_probe["xca_elements"] = attn.size // b
    out = vh @ attn                                        # (B, h, N, dh)
    out = _merge_heads(out)
    return out.reshape(n, d) if squeeze else out


def spatial_attention_probe(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Reference token-by-token attention; its buffer grows as N_tok^2.

    Only used to demonstrate the memory gap against the channel form.
    """
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (t.reshape(1, *t.shape) for t in (q, k, v))
    b, n, d = q.shape
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    logits = (qh @ kh.swap_last_axes()) * (1.0 / np.sqrt(d // heads))  # (B,h,N,N)
    attn = softmax(logits, axis=-1)
    _attention_probe["spatial_elements"] = attn.size // b
    out = _merge_heads(attn @ vh)
    return out.reshape(n, d) if squeeze else out


# --------------------------------------------------------------------- blocks


class DilatedConvBlock(Module):
    """Residual block: depthwise dilated 3x3 conv, batch norm, pointwise
    expansion, GELU, pointwise projection back, add. Shape preserving for any
    dilation rate."""

    def __init__(self, channels: int, dilation: int, rng: np.random.Generator,
                 expansion: int = 6, zero_init: bool = False):
        super().__init__()
        self.dilation = dilation
        self.dwconv = Conv2d(channels, channels, 3, rng, dilation=dilation,
                             groups=channels, bias=False)
        self.norm = BatchNorm2d(channels)
        hidden = expansion * channels
        self.expand = Conv2d(channels, hidden, 1, rng, init="proj")
        self.project = Conv2d(hidden, channels, 1, rng,
                              init="zero" if zero_init else "proj")

    def __call__(self, x: Tensor) -> Tensor:
        z = self.norm(self.dwconv(x))
        z = self.project(gelu(self.expand(z)))
        return x + z


class AttentionBlock(Module):
    """Residual channel-attention block plus a pointwise feed-forward.

    Tokens are the row-major spatial flattening of the feature map; the
    attention mixes channels, so no positional encoding is used anywhere.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 expansion: int = 6, normalized: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.heads = heads
        self.normalized = normalized
        self.wq = Linear(channels, channels, rng, bias=False)
        self.wk = Linear(channels, channels, rng, bias=False)
        self.wv = Linear(channels, channels, rng, bias=False)
        self.temperature = Tensor(np.ones(heads, dtype=self.wq.weight.dtype),
                                  requires_grad=True)
        self.attn_proj = Linear(channels, channels, rng,
                                init="zero" if zero_init else "proj")
        self.norm = LayerNorm(channels)
        hidden = expansion * channels
        self.expand = Linear(channels, hidden, rng)
        self.project = Linear(hidden, channels, rng,
                              init="zero" if zero_init else "proj")

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = x.reshape(n, c, h * w).transpose(0, 2, 1)     # (N, HW, C)
        attn = xca_attention(self.wq(tokens), self.wk(tokens), self.wv(tokens),
                             self.heads, self.temperature, self.normalized)
        attended = tokens + self.attn_proj(attn)
        z = self.project(gelu(self.expand(self.norm(attended))))
        out = attended + z
        return out.transpose(0, 2, 1).reshape(n, c, h, w)


class ConvStem(Module):
    """One stride-2 3x3 conv then two stride-1 3x3 convs, each with
    normalization and GELU. Halves the spatial size."""

    def __init__(self, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = ConvBnGelu(3, cout, rng, stride=2)
        self.conv2 = ConvBnGelu(cout, cout, rng)
        self.conv3 = ConvBnGelu(cout, cout, rng)

    def __call__(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be divisible by 32")
        return self.conv3(self.conv2(self.conv1(image)))


class Downsample(Module):
    """Stride-2 3x3 conv over the concatenation of the stage features, the
    pooled RGB input and (stages 2-3) the previous downsampling output."""

    def __init__(self, cin_total: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.block = ConvBnGelu(cin_total, cout, rng, stride=2)

    def __call__(self, features: Tensor, pooled_rgb: Optional[Tensor] = None,
                 carry: Optional[Tensor] = None) -> Tensor:
        parts = [features]
        for extra, what in ((pooled_rgb, "pooled RGB"), (carry, "carried features")):
            if extra is None:
                continue
            if extra.shape[2:] != features.shape[2:]:
                raise ValueError(
                    f"{what} spatial size {extra.shape[2:]} does not match "
                    f"features {features.shape[2:]}")
            parts.append(extra)
        return self.block(concat(parts, axis=1))


class DepthEncoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = config.channels
        pooled = 3 if config.use_pooled_concat else 0

        self.stem = ConvStem(c1, rng)
        self.down = [
            Downsample(c1 + pooled, c2, rng),
            Downsample(c2 + pooled + (c2 if config.use_cross_stage else 0), c3, rng),
            Downsample(c3 + pooled + (c3 if config.use_cross_stage else 0), c4, rng),
        ]
        self.stages = []
        for s, c in enumerate((c2, c3, c4)):
            blocks: List[Module] = [
                DilatedConvBlock(c, r, rng, config.expansion,
                                 zero_init=config.zero_init_residual)
                for r in config.stage_dilations(s)
            ]
            if config.use_lgfi:
                blocks.append(AttentionBlock(
                    c, config.heads[s], rng, config.expansion,
                    normalized=config.normalized_attention,
                    zero_init=config.zero_init_residual))
            self.stages.append(blocks)

    def _children(self):
        yield from super()._children()
        for s, blocks in enumerate(self.stages):
            for i, b in enumerate(blocks):
                yield f"stages.{s}.{i}", b

    def __call__(self, image: Tensor) -> FeaturePyramid:
        cfg = self.config
        pooled = []
        if cfg.use_pooled_concat:
            p = image
            for _ in range(3):
                p = avg_pool(p, (2, 2))
                pooled.append(p)
        else:
            pooled = [None, None, None]

        stem_out = self.stem(image)
        x, carry = stem_out, None
        outputs = []
        for s in range(3):
            ds_out = self.down[s](x, pooled[s],
                                  carry if cfg.use_cross_stage and s > 0 else None)
            x = ds_out
            for block in self.stages[s]:
                x = block(x)
            carry = ds_out
            outputs.append(x)
        return FeaturePyramid(stem_out, *outputs)


# ----------------------------------------------------------------- accounting


def count_params(config: EncoderConfig) -> int:
    """Exact trainable scalar count of the encoder for this config."""
    return DepthEncoder(config, seed=0).num_params()


def _conv_macs(cin, cout, k, hout, wout, groups=1) -> int:
    return cout * (cin // groups) * k * k * hout * wout


def count_flops(config: EncoderConfig, input_size: Tuple[int, int],
                mac_factor: int = 1) -> int:
    """Analytic operation count of the encoder at the given (W, H) input.

    Counts the multiply-accumulates of convolutions and attention/feed-forward
    matrix products; elementwise work (norms, activations, residuals) is
    excluded. ``mac_factor=1`` reports one MAC as one FLOP, the convention the
    published complexity tables use; pass 2 to count multiply and add
    separately.
    """
    config.validate()
    w, h = input_size
    if h % 32 or w % 32:
        raise ValueError(f"input size {w}x{h} must be divisible by 32")
    c1, c2, c3, c4 = config.channels
    pooled = 3 if config.use_pooled_concat else 0
    macs = 0

    h2, w2 = h // 2, w // 2
    macs += _conv_macs(3, c1, 3, h2, w2)
    macs += 2 * _conv_macs(c1, c1, 3, h2, w2)

    sizes = [(h // 4, w // 4), (h // 8, w // 8), (h // 16, w // 16)]
    cins = [c1 + pooled,
            c2 + pooled + (c2 if config.use_cross_stage else 0),
            c3 + pooled + (c3 if config.use_cross_stage else 0)]
    couts = [c2, c3, c4]
    for s in range(3):
        hs, ws = sizes[s]
        c = couts[s]
        macs += _conv_macs(cins[s], c, 3, hs, ws)
        n_tok = hs * ws
        for _ in config.stage_dilations(s):
            macs += _conv_macs(c, c, 3, hs, ws, groups=c)       # depthwise
            macs += 2 * config.expansion * c * c * n_tok        # pointwise pair
        if config.use_lgfi:
            dh = c // config.heads[s]
            macs += 3 * c * c * n_tok                           # q, k, v
            macs += 2 * c * dh * n_tok                          # K^T Q and V A
            macs += c * c * n_tok                               # output proj
            macs += 2 * config.expansion * c * c * n_tok        # feed-forward
    return macs * mac_factor
