"""Self-supervised objective: photometric reconstruction with per-pixel
minimum over source frames, auto-masking of camera-speed movers, and
edge-aware smoothness on mean-normalized inverse depth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import (
    Tensor, as_tensor, avg_pool, concat, maximum, minimum, resize_bilinear,
)
from .decoder import DepthPyramid, disp_to_depth
from .warp import CameraIntrinsics, synthesize

__all__ = [
    "LossConfig", "auto_mask", "min_reprojection", "photometric_loss",
    "smoothness", "ssim", "total_loss",
]

SSIM_C1 = 0.01 ** 2   # for images in [0, 1]
SSIM_C2 = 0.03 ** 2


@dataclass
class LossConfig:
    alpha: float = 0.85               # SSIM weight in the photometric mix
    lambda_smooth: float = 1e-3
    scales: Tuple[int, ...] = (0, 1, 2)   # scale levels: full, 1/2, 1/4
    automask: bool = True
    min_reprojection: bool = True
    min_depth: float = 0.1
    max_depth: float = 100.0
    # reproduce the printed formulas instead of the corrected objective
    literal_reconstruction: bool = False
    literal_smoothness: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_smooth < 0:
            raise ValueError(f"lambda_smooth must be >= 0, got {self.lambda_smooth}")


def _reflect_pad1(x: Tensor) -> Tensor:
    top, bottom = x[:, :, 1:2, :], x[:, :, -2:-1, :]
    x = concat([top, x, bottom], axis=2)
    left, right = x[:, :, :, 1:2], x[:, :, :, -2:-1]
    return concat([left, x, right], axis=3)


def _mean3(x: Tensor) -> Tensor:
    return avg_pool(_reflect_pad1(x), (3, 3), stride=(1, 1))


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity with 3x3 mean filters and reflection
    padding; values in [-1, 1], exactly 1 where the inputs agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    mu_a, mu_b = _mean3(a), _mean3(b)
    var_a = _mean3(a * a) - mu_a * mu_a
    var_b = _mean3(b * b) - mu_b * mu_b
    cov = _mean3(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def photometric_loss(pred: Tensor, target: Tensor, alpha: float = 0.85) -> Tensor:
    """alpha * (1 - SSIM)/2 + (1 - alpha) * L1, channel-averaged to a
    per-pixel (N, 1, H, W) map; zero iff the images agree."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"photometric shape mismatch: {pred.shape} vs {target.shape}")
    l1 = (pred - target).abs().mean(axis=1, keepdims=True)
    if alpha == 0.0:
        return l1
    # rounding can push SSIM a hair past 1; clamp keeps the map nonnegative
    # and exact ties exactly zero
    dssim = maximum((1.0 - ssim(pred, target)) * 0.5, 0.0)
    return alpha * dssim.mean(axis=1, keepdims=True) + (1.0 - alpha) * l1


def min_reprojection(loss_maps: Sequence[Tensor]) -> Tensor:
    """Pointwise minimum over per-source photometric maps."""
    maps = list(loss_maps)
    if not maps:
        raise ValueError("min_reprojection needs at least one loss map")
    out = maps[0]
    for m in maps[1:]:
        out = minimum(out, m)
    return out


def auto_mask(unwarped_losses: Sequence[Tensor],
              warped_losses: Sequence[Tensor]) -> np.ndarray:
    """Binary keep-mask: 1 where the best warped source beats the best
    unwarped source strictly, 0 elsewhere (ties mask out). Static scenes and
    objects moving with the camera fail the strict inequality and drop out."""
    unwarped = np.minimum.reduce([m.data for m in unwarped_losses])
    warped = np.minimum.reduce([m.data for m in warped_losses])
    return (unwarped > warped).astype(warped.dtype)


def _x_grad(x: Tensor) -> Tensor:
    return (x[:, :, :, 1:] - x[:, :, :, :-1]).abs()


def _y_grad(x: Tensor) -> Tensor:
    return (x[:, :, 1:, :] - x[:, :, :-1, :]).abs()


def smoothness(disp: Tensor, image: Tensor, literal: bool = False) -> Tensor:
    """Edge-aware smoothness on mean-normalized inverse depth.

    Disparity gradients are damped where the image has strong gradients
    (channel-averaged, exponentiated). Mean normalization makes the loss
    exactly invariant to positive rescaling of disp. The literal flag keeps
    the x-gradient of disparity in the y term as printed in the source
    formulation; the default pairs each axis with its own gradient.
    """
    disp, image = as_tensor(disp), as_tensor(image)
    if disp.shape[1] != 1:
        raise ValueError(f"disp must be single-channel, got {disp.shape}")
    if disp.shape[2:] != image.shape[2:]:
        raise ValueError(
            f"disp {disp.shape[2:]} and image {image.shape[2:]} sizes differ")
    mean = disp.mean(axis=(2, 3), keepdims=True)
    if np.any(mean.data == 0):
        raise ValueError("disp has zero mean; cannot normalize")
    d = disp / mean
    ix = _x_grad(image).mean(axis=1, keepdims=True)
    iy = _y_grad(image).mean(axis=1, keepdims=True)
    dx = _x_grad(d)
    term_x = dx * (-ix).exp()
    if literal:
        dy_term = dx[:, :, : dx.shape[2] - 1, :] * (-iy[:, :, :, : iy.shape[3] - 1]).exp()
    else:
        dy_term = _y_grad(d) * (-iy).exp()
    return term_x.mean() + dy_term.mean()


def _masked_mean(m: Tensor, mask: np.ndarray) -> Tensor:
    count = float(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=m.dtype))
    return (m * Tensor(mask.astype(m.dtype))).sum() * (1.0 / count)


def _reconstruction_term(best_warped: Tensor, best_unwarped: Tensor,
                         valid_any: np.ndarray, automask: bool) -> Tensor:
    """Reduce the per-pixel reconstruction objective to a scalar.

    With auto-masking the per-pixel value is min(unwarped, warped) averaged
    over every pixel: exactly the masked objective mu * min(warped) plus the
    parameter-free identity floor where mu = 0. Keeping the floor (instead
    of averaging only kept pixels) removes the degenerate optimum where the
    model silences pixels by matching the identity warp, since the loss can
    then only drop below the floor through genuine parallax. Ties select the
    identity branch, honoring the strict inequality of the mask definition.
    Fully-invalid pixels contribute their identity floor as well.
    """
    if automask:
        combined = minimum(best_unwarped, best_warped)
        keep = Tensor(valid_any)
        return (combined * keep + best_unwarped * (1.0 - keep)).mean()
    count = float(valid_any.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=best_warped.dtype))
    return (best_warped * Tensor(valid_any)).sum() * (1.0 / count)


def total_loss(pyramid: DepthPyramid, target: Tensor, sources: Sequence[Tensor],
               transforms: Sequence[Tensor], intr: CameraIntrinsics,
               config: LossConfig) -> Tuple[Tensor, Dict]:
    """Full objective over the scale set, averaged 1/3 over scales.

    `transforms` carries one source-camera-from-target-camera matrix per
    source frame (typically previous and next). Lower-scale disparities are
    upsampled to full resolution before synthesis; the smoothness term runs
    at each scale's native resolution with its weight divided by 2^scale.
    Returns the scalar loss and a diagnostics dict of intermediate maps.
    """
    if len(sources) != len(transforms):
        raise ValueError(f"{len(sources)} sources but {len(transforms)} transforms")
    if not sources:
        raise ValueError("total_loss needs at least one source frame")
    target = as_tensor(target)
    n, _, h, w = target.shape

    unwarped = [photometric_loss(as_tensor(s), target, config.alpha)
                for s in sources]
    diagnostics: Dict = {"scales": {}}
    scale_losses: List[Tensor] = []
    for level in config.scales:
        disp = pyramid.disp(level)
        disp_full = resize_bilinear(disp, size=(h, w))
        depth_full = disp_to_depth(disp_full, config.min_depth, config.max_depth)

        warped_maps, valid_masks, warped_imgs = [], [], []
        for src, tf in zip(sources, transforms):
            synth, valid = synthesize(as_tensor(src), depth_full, tf, intr)
            warped_maps.append(photometric_loss(synth, target, config.alpha))
            valid_masks.append(valid)
            warped_imgs.append(synth)

        if config.min_reprojection:
            best_warped = min_reprojection(warped_maps)
        else:
            best_warped = warped_maps[0]
            for m in warped_maps[1:]:
                best_warped = best_warped + m
            best_warped = best_warped * (1.0 / len(warped_maps))

        mu = auto_mask(unwarped, warped_maps)
        valid_any = np.logical_or.reduce(valid_masks).astype(best_warped.dtype)

        best_unwarped = min_reprojection(unwarped)
        if config.literal_reconstruction:
            # the printed form reduces mu-gated unwarped losses
            mask = mu * valid_any if config.automask else valid_any
            reconstruction = _masked_mean(best_unwarped, mask)
        else:
            reconstruction = _reconstruction_term(best_warped, best_unwarped,
                                                  valid_any, config.automask)

        img_scaled = (target if level == 0
                      else resize_bilinear(target, size=disp.shape[2:]))
        smooth = smoothness(disp, img_scaled, literal=config.literal_smoothness)
        weight = config.lambda_smooth / (2.0 ** level)
        scale_losses.append(reconstruction + weight * smooth)

        diagnostics["scales"][level] = {
            "reconstruction": float(reconstruction.data),
            "smoothness": float(smooth.data),
            "automask": mu.copy(),
            "valid": valid_any.copy(),
            "min_reprojection": best_warped.data.copy(),
            "warped": [wi.data.copy() for wi in warped_imgs],
            "disp": disp.data.copy(),
        }

    total = scale_losses[0]
    for sl in scale_losses[1:]:
        total = total + sl
    total = total * (1.0 / len(scale_losses))
    diagnostics["total"] = float(total.data)
    diagnostics["per_scale"] = [float(sl.data) for sl in scale_losses]
    return total, diagnostics
