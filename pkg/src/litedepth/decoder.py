"""Depth decoder: upsampling refinement over the encoder pyramid with
sigmoid heads for inverse depth at full, half and quarter resolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .engine import Tensor, concat, elu, resize_bilinear, sigmoid
from .nn import Conv2d, Module
from .encoder import FeaturePyramid

__all__ = ["DepthDecoder", "DepthPyramid", "disp_to_depth"]


def disp_to_depth(disp: Tensor, min_depth: float, max_depth: float) -> Tensor:
    """Map a sigmoid output in (0, 1) to metric depth in [min_depth, max_depth].

    1/depth interpolates linearly between 1/max_depth (disp -> 0) and
    1/min_depth (disp -> 1), so depth decreases monotonically in disp.
    """
    if min_depth >= max_depth:
        raise ValueError(f"min_depth {min_depth} must be below max_depth {max_depth}")
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return 1.0 / (lo + (hi - lo) * disp)


def depth_to_disp(depth: np.ndarray, min_depth: float, max_depth: float) -> np.ndarray:
    """Inverse of disp_to_depth on plain arrays (used by tests and tooling)."""
    if min_depth >= max_depth:
        raise ValueError(f"min_depth {min_depth} must be below max_depth {max_depth}")
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return (1.0 / depth - lo) / (hi - lo)


@dataclass
class DepthPyramid:
    """Inverse-depth maps at scale levels 0 (full), 1 (half), 2 (quarter),
    each (N, 1, H/2^s, W/2^s) with values strictly inside (0, 1)."""

    disps: Tuple[Tensor, Tensor, Tensor]

    def disp(self, level: int) -> Tensor:
        return self.disps[level]

    def depth(self, level: int, min_depth: float, max_depth: float) -> Tensor:
        return disp_to_depth(self.disps[level], min_depth, max_depth)


class _ConvElu(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return elu(self.conv(x))


class DepthDecoder(Module):
    """Three refinement levels walking the pyramid coarse to fine.

    Each level: 3x3 conv + ELU, bilinear x2 upsample, concat the matching
    encoder skip (none at the finest level), 3x3 conv + ELU. Each level's
    prediction head is a 3x3 conv whose output is upsampled x2 and squashed
    by a sigmoid, emitting disp at 1/4, 1/2 and full resolution.
    """

    def __init__(self, enc_channels: Tuple[int, int, int],
                 dec_channels: Tuple[int, int, int] = (16, 32, 64),
                 seed: int = 0):
        super().__init__()
        self.enc_channels = tuple(enc_channels)
        self.dec_channels = tuple(dec_channels)
        rng = np.random.default_rng(seed)
        c2, c3, c4 = self.enc_channels
        d0, d1, d2 = self.dec_channels

        self.pre = [_ConvElu(c4, d2, rng), _ConvElu(d2, d1, rng), _ConvElu(d1, d0, rng)]
        self.post = [_ConvElu(d2 + c3, d2, rng), _ConvElu(d1 + c2, d1, rng),
                     _ConvElu(d0, d0, rng)]
        self.heads = [Conv2d(d2, 1, 3, rng), Conv2d(d1, 1, 3, rng),
                      Conv2d(d0, 1, 3, rng)]

    def __call__(self, pyramid: FeaturePyramid) -> DepthPyramid:
        skips = pyramid.stages()
        for s, (feat, c) in enumerate(zip(skips, self.enc_channels)):
            if feat.shape[1] != c:
                raise ValueError(
                    f"stage {s + 1} features have {feat.shape[1]} channels, "
                    f"decoder was built for {c}")
        x = skips[2]
        disps = [None, None, None]
        for step, level in enumerate((2, 1, 0)):
            x = resize_bilinear(self.pre[step](x), scale=2.0)
            if level > 0:
                x = concat([x, skips[level - 1]], axis=1)
            x = self.post[step](x)
            disps[level] = sigmoid(resize_bilinear(self.heads[step](x), scale=2.0))
        return DepthPyramid(tuple(disps))
