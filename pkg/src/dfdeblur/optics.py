"""Thin-lens defocus model and layered synthetic blur.

The circle of confusion (CoC) of a point at depth x, for a lens focused at
S with focal length f and aperture diameter D, has diameter

    coc(x) = alpha * |x - S| / x,   alpha = (f / S) * D   [meters]

on the sensor. A camera-specific meters-to-pixels factor converts that to a
pixel-space blur diameter, and the point-spread function is approximated by
an isotropic Gaussian whose standard deviation is a quarter of the pixel
diameter. `defocus_image` applies a spatially varying blur by quantizing
the sigma map to a small number of levels, blurring the whole image once
per level, and gathering per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ThinLensCamera",
    "DepthDomainError",
    "coc_diameter",
    "coc_map",
    "coc_sigma_px",
    "gaussian_kernel",
    "defocus_image",
    "RHO_MIN",
]

# Below this sigma (in pixels) a Gaussian is narrower than the pixel grid
# resolves; the kernel degenerates to the identity.
RHO_MIN = 0.25


class DepthDomainError(ValueError):
    """A depth value outside (0, inf) was passed to the lens model."""


@dataclass(frozen=True)
class ThinLensCamera:
    """Thin-lens parameters, all metric, plus a sensor scale.

    `coc_to_pixel` converts a CoC diameter in meters on the sensor to a
    diameter in pixels (pixels per meter of blur).
    """

    focal_length_m: float = 0.07
    aperture_m: float = 0.0448
    focus_distance_m: float = 1.0
    coc_to_pixel: float = 1000.0

    def __post_init__(self):
        if self.focal_length_m <= 0:
            raise ValueError(f"focal_length_m must be positive, got {self.focal_length_m}")
        if self.aperture_m <= 0:
            raise ValueError(f"aperture_m must be positive, got {self.aperture_m}")
        if self.focus_distance_m <= self.focal_length_m:
            raise ValueError(
                f"focus_distance_m ({self.focus_distance_m}) must exceed "
                f"focal_length_m ({self.focal_length_m}); nearer scenes cannot focus"
            )
        if self.coc_to_pixel <= 0:
            raise ValueError(f"coc_to_pixel must be positive, got {self.coc_to_pixel}")

    @property
    def alpha(self) -> float:
        """CoC scale (f / S) * D in meters."""
        return (self.focal_length_m / self.focus_distance_m) * self.aperture_m


def coc_diameter(camera: ThinLensCamera, depth_m: float) -> float:
    """CoC diameter in meters for a single depth; zero exactly at focus."""
    if depth_m <= 0:
        raise DepthDomainError(f"depth must be positive, got {depth_m}")
    s = camera.focus_distance_m
    return camera.alpha * abs(depth_m - s) / depth_m


def coc_map(camera: ThinLensCamera, depth_m: np.ndarray) -> np.ndarray:
    """Per-pixel CoC diameter in meters for a depth map of any shape."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    bad = depth_m <= 0
    if bad.any():
        raise DepthDomainError(
            f"depth map contains {int(bad.sum())} non-positive value(s), "
            f"minimum {depth_m.min()}"
        )
    s = camera.focus_distance_m
    return camera.alpha * np.abs(depth_m - s) / depth_m


def coc_sigma_px(camera: ThinLensCamera, depth_m: np.ndarray) -> np.ndarray:
    """Gaussian sigma in pixels: a quarter of the CoC diameter in pixels."""
    return coc_map(camera, depth_m) * camera.coc_to_pixel / 4.0


def gaussian_kernel(rho: float, truncate: float = 3.0) -> np.ndarray:
    """Normalized 2-d isotropic Gaussian, radius ceil(truncate * rho).

    Sigmas below RHO_MIN return the 1x1 identity kernel.
    """
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    if rho < RHO_MIN:
        return np.ones((1, 1), dtype=np.float64)
    radius = int(np.ceil(truncate * rho))
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    grid = coords[:, None] ** 2 + coords[None, :] ** 2
    kernel = np.exp(-grid / (2.0 * rho * rho))
    return kernel / kernel.sum()


def _blur_channel(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Reflect-padded valid convolution of one 2-d channel."""
    k = kernel.shape[0]
    if k == 1:
        return img * kernel[0, 0]
    r = k // 2
    padded = np.pad(img, r, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def blur_image(image: np.ndarray, rho: float, truncate: float = 3.0) -> np.ndarray:
    """Uniform Gaussian blur of a [C,H,W] image with reflect padding."""
    kernel = gaussian_kernel(rho, truncate)
    return np.stack([_blur_channel(ch, kernel) for ch in image])


def defocus_image(
    aif: np.ndarray,
    depth_m: np.ndarray,
    camera: ThinLensCamera,
    levels: int = 16,
    truncate: float = 3.0,
) -> np.ndarray:
    """Spatially varying defocus of an all-in-focus [C,H,W] image.

    The per-pixel sigma map is quantized to at most `levels` evenly spaced
    values between its minimum and maximum; each level blurs the full image
    once and pixels gather from their level. Pixels at the focus distance
    keep their exact input values because their kernel is the identity.
    """
    aif = np.asarray(aif, dtype=np.float64)
    if aif.ndim != 3:
        raise ValueError(f"expected a [C,H,W] image, got shape {aif.shape}")
    if depth_m.shape != aif.shape[1:]:
        raise ValueError(
            f"depth shape {depth_m.shape} does not match image plane {aif.shape[1:]}"
        )
    if levels < 1:
        raise ValueError(f"levels must be at least 1, got {levels}")

    sigma = coc_sigma_px(camera, depth_m)
    smin, smax = float(sigma.min()), float(sigma.max())
    if smax - smin < 1e-9:
        return blur_image(aif, smin, truncate)

    level_sigmas = np.linspace(smin, smax, levels)
    assign = np.rint((sigma - smin) / (smax - smin) * (levels - 1)).astype(np.intp)
    out = np.empty_like(aif)
    for idx in np.unique(assign):
        blurred = blur_image(aif, float(level_sigmas[idx]), truncate)
        mask = assign == idx
        out[:, mask] = blurred[:, mask]
    return out
