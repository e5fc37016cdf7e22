"""Hybrid depth + deblurring losses on the autodiff tape.

The total training loss couples a depth term and an image-restoration term:

    total = depth_term + lam * deblur_term

Five named variants select the ingredients of each term:

    l1+charb            L1 depth; Charbonnier image
    l1+l1               L1 depth; L1 image
    l1grad+charb        L1 + gradient-smoothing depth; Charbonnier image
    l1+charb_ssim       L1 depth; Charbonnier + SSIM image
    l1grad+charb_ssim   full hybrid (default)

Weights: mu scales the gradient-smoothing term inside the depth loss, psi
scales the SSIM term inside the deblur loss, lam couples the two heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor

__all__ = [
    "LossWeights",
    "SsimConfig",
    "VARIANTS",
    "DEFAULT_VARIANT",
    "mean_abs_error",
    "l1_depth",
    "grad_smooth",
    "depth_loss",
    "charbonnier",
    "ssim_map",
    "ssim_loss",
    "deblur_loss",
    "depth_term",
    "deblur_term",
    "total_loss",
]

VARIANTS = (
    "l1+charb",
    "l1+l1",
    "l1grad+charb",
    "l1+charb_ssim",
    "l1grad+charb_ssim",
)
DEFAULT_VARIANT = "l1grad+charb_ssim"


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the hybrid loss; all must be positive."""

    mu: float = 1e-3
    psi: float = 4.0
    lam: float = 1e-2
    eps_charb: float = 1e-3

    def __post_init__(self):
        for name in ("mu", "psi", "lam", "eps_charb"):
            value = getattr(self, name)
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class SsimConfig:
    """Gaussian-window SSIM constants."""

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and positive, got {self.window_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError(f"k1 and k2 must be positive, got {self.k1}, {self.k2}")
        if self.data_range <= 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


def _check_pair(pred: Tensor, gt: Tensor, op: str, channels: int | None = None) -> None:
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"{op}: shapes differ, {pred.shape} vs {gt.shape}")
    if len(pred.shape) != 4:
        raise ShapeMismatchError(f"{op}: expected rank-4 NCHW tensors, got {pred.shape}")
    if channels is not None and pred.shape[1] != channels:
        raise ShapeMismatchError(
            f"{op}: expected {channels} channel(s), got {pred.shape[1]}"
        )


def mean_abs_error(pred: Tensor, gt: Tensor) -> Tensor:
    _check_pair(pred, gt, "mean_abs_error")
    return ad.reduce_mean(ad.absolute(ad.sub(pred, gt)))


def l1_depth(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute depth error over an [N,1,H,W] pair."""
    _check_pair(pred, gt, "l1_depth", channels=1)
    return mean_abs_error(pred, gt)


def grad_smooth(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute spatial gradient of the residual.

    Sums |d/dx| and |d/dy| of (pred - gt) and divides by the residual's
    pixel count, matching both difference maps sharing one normalizer.
    """
    _check_pair(pred, gt, "grad_smooth", channels=1)
    residual = ad.sub(pred, gt)
    dx, dy = ad.spatial_diff(residual)
    total = ad.add(ad.reduce_sum(ad.absolute(dx)), ad.reduce_sum(ad.absolute(dy)))
    return ad.scale(total, 1.0 / residual.data.size)


def depth_loss(pred: Tensor, gt: Tensor, weights: LossWeights) -> Tensor:
    """L1 plus mu-weighted gradient smoothing."""
    return ad.add(l1_depth(pred, gt), ad.scale(grad_smooth(pred, gt), weights.mu))


def charbonnier(pred: Tensor, gt: Tensor, eps: float = 1e-3) -> Tensor:
    """Smooth L1: mean of sqrt(diff^2 + eps^2); equals eps at zero error."""
    _check_pair(pred, gt, "charbonnier")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    diff = ad.sub(pred, gt)
    return ad.reduce_mean(ad.sqrt_shifted(ad.square(diff), eps * eps))


def _window_tensor(cfg: SsimConfig, dtype) -> Tensor:
    radius = (cfg.window_size - 1) // 2
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * cfg.sigma**2))
    g /= g.sum()
    window = np.outer(g, g).astype(dtype)
    return Tensor(window.reshape(1, 1, cfg.window_size, cfg.window_size))


def _window_filter(t: Tensor, window: Tensor) -> Tensor:
    """Depthwise valid convolution of every channel with the shared window."""
    n, c, h, w = t.shape
    s = window.shape[-1]
    flat = ad.reshape(t, (n * c, 1, h, w))
    filtered = ad.conv2d(flat, window, None, stride=1, padding=0)
    return ad.reshape(filtered, (n, c, h - s + 1, w - s + 1))


def ssim_map(pred: Tensor, gt: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """Per-pixel structural similarity over the valid window interior.

    Gaussian-weighted means and covariances, no sample-covariance
    correction. Output is [N,C,H-s+1,W-s+1] for window size s.
    """
    cfg = cfg or SsimConfig()
    _check_pair(pred, gt, "ssim_map")
    n, c, h, w = pred.shape
    if h < cfg.window_size or w < cfg.window_size:
        raise ShapeMismatchError(
            f"ssim_map: image plane {h}x{w} is smaller than the "
            f"{cfg.window_size}x{cfg.window_size} window"
        )
    window = _window_tensor(cfg, pred.dtype)

    mu1 = _window_filter(pred, window)
    mu2 = _window_filter(gt, window)
    mu11 = ad.mul(mu1, mu1)
    mu22 = ad.mul(mu2, mu2)
    mu12 = ad.mul(mu1, mu2)
    s11 = ad.sub(_window_filter(ad.mul(pred, pred), window), mu11)
    s22 = ad.sub(_window_filter(ad.mul(gt, gt), window), mu22)
    s12 = ad.sub(_window_filter(ad.mul(pred, gt), window), mu12)

    num = ad.mul(
        ad.shift(ad.scale(mu12, 2.0), cfg.c1),
        ad.shift(ad.scale(s12, 2.0), cfg.c2),
    )
    den = ad.mul(
        ad.shift(ad.add(mu11, mu22), cfg.c1),
        ad.shift(ad.add(s11, s22), cfg.c2),
    )
    return ad.div(num, den)


def ssim_loss(pred: Tensor, gt: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """1 - mean SSIM; exactly zero when pred and gt are identical."""
    mean = ad.reduce_mean(ssim_map(pred, gt, cfg))
    return ad.shift(ad.scale(mean, -1.0), 1.0)


def deblur_loss(
    pred: Tensor,
    gt: Tensor,
    weights: LossWeights | None = None,
    ssim_cfg: SsimConfig | None = None,
) -> Tensor:
    """Charbonnier plus psi-weighted SSIM loss."""
    weights = weights or LossWeights()
    charb = charbonnier(pred, gt, weights.eps_charb)
    return ad.add(charb, ad.scale(ssim_loss(pred, gt, ssim_cfg), weights.psi))


def _parse_variant(variant: str) -> tuple[str, str]:
    if variant not in VARIANTS:
        raise ValueError(
            f"unknown loss variant {variant!r}; expected one of {', '.join(VARIANTS)}"
        )
    depth_kind, deblur_kind = variant.split("+", 1)
    return depth_kind, deblur_kind


def depth_term(
    pred: Tensor,
    gt: Tensor,
    weights: LossWeights,
    variant: str = DEFAULT_VARIANT,
) -> tuple[Tensor, dict[str, float]]:
    """Depth part of a variant, with the scalar pieces it was built from."""
    depth_kind, _ = _parse_variant(variant)
    l1 = l1_depth(pred, gt)
    parts = {"depth_l1": l1.item()}
    if depth_kind == "l1grad":
        grad = grad_smooth(pred, gt)
        parts["depth_grad"] = grad.item()
        term = ad.add(l1, ad.scale(grad, weights.mu))
    else:
        term = l1
    parts["depth"] = term.item()
    return term, parts


def deblur_term(
    pred: Tensor,
    gt: Tensor,
    weights: LossWeights,
    variant: str = DEFAULT_VARIANT,
    ssim_cfg: SsimConfig | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Image-restoration part of a variant, with its scalar pieces."""
    _, deblur_kind = _parse_variant(variant)
    parts: dict[str, float] = {}
    if deblur_kind.startswith("charb"):
        base = charbonnier(pred, gt, weights.eps_charb)
        parts["deblur_charb"] = base.item()
    else:
        base = mean_abs_error(pred, gt)
        parts["deblur_l1"] = base.item()
    if deblur_kind.endswith("_ssim"):
        sl = ssim_loss(pred, gt, ssim_cfg)
        parts["deblur_ssim"] = sl.item()
        term = ad.add(base, ad.scale(sl, weights.psi))
    else:
        term = base
    parts["deblur"] = term.item()
    return term, parts


def total_loss(
    depth_pred: Tensor,
    depth_gt: Tensor,
    aif_pred: Tensor,
    aif_gt: Tensor,
    weights: LossWeights | None = None,
    variant: str = DEFAULT_VARIANT,
    ssim_cfg: SsimConfig | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Coupled loss: depth term plus lam-weighted deblur term.

    Returns the scalar loss tensor and a dict of its float components.
    """
    weights = weights or LossWeights()
    d_term, parts = depth_term(depth_pred, depth_gt, weights, variant)
    b_term, b_parts = deblur_term(aif_pred, aif_gt, weights, variant, ssim_cfg)
    parts.update(b_parts)
    total = ad.add(d_term, ad.scale(b_term, weights.lam))
    parts["total"] = total.item()
    return total, parts
