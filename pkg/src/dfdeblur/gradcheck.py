"""Finite-difference verification of every backward rule.

Each check builds a small float64 problem, computes analytic gradients
with one backward pass, and compares them element by element against
central differences. Inputs are sampled away from the relu and
absolute-value kinks so the subgradient convention cannot produce false
alarms. The comparison accepts a relative error up to `rel_tol` except
for element pairs whose magnitudes sum below `tiny`, which are compared
absolutely.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor

__all__ = ["CheckResult", "run_all_checks", "format_report", "finite_diff_grad"]

REL_TOL = 1e-4
ABS_TOL = 1e-8
TINY = 1e-8
FD_STEP = 1e-4
KINK_MARGIN = 0.05


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def finite_diff_grad(fn, t: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar fn() with respect to t."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        grad_flat[i] = (fp - fm) / (2.0 * h)
    return grad


def _compare(analytic: np.ndarray, numeric: np.ndarray) -> tuple[bool, float]:
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    mag = np.maximum(np.abs(a), np.abs(n))
    small = (np.abs(a) + np.abs(n)) < TINY
    rel = np.where(small, 0.0, np.abs(a - n) / np.where(mag == 0, 1.0, mag))
    abs_err = np.abs(a - n)
    ok = bool(np.all(rel <= REL_TOL) and np.all(abs_err[small] <= ABS_TOL))
    return ok, float(rel.max(initial=0.0))


def _away_from_zero(rng, shape, margin=KINK_MARGIN, scale=1.0):
    """Values with |v| >= margin, both signs, float64."""
    mag = rng.uniform(margin, scale, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign

def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _pair_with_margin(rng, shape, margin=KINK_MARGIN):
    """(pred, gt) whose residual and its spatial diffs stay off the kinks.

    Residual magnitudes are at least `margin` and neighboring residuals
    have opposite signs (checkerboard), so along any axis the forward
    differences are at least 2 * margin in magnitude.
    """
    gt = rng.random(shape)
    mag = rng.uniform(margin, 0.5, shape)
    parity = np.indices(shape).sum(axis=0) % 2
    residual = mag * np.where(parity == 0, 1.0, -1.0)
    return gt + residual, gt


def _grad_tensors(params, fn):
    ad.zero_grads(params)
    ad.backward(fn())
    return [p.grad for p in params]


# Builders return (list of requires_grad tensors, scalar-producing fn).


def _build_add(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    c = _weights(rng, (3, 4))
    return [a, b], lambda: ad.reduce_mean(ad.mul(ad.add(a, b), c))


def _build_sub(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    c = _weights(rng, (3, 4))
    return [a, b], lambda: ad.reduce_mean(ad.mul(ad.sub(a, b), c))


def _build_mul(rng):
    a = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    c = _weights(rng, (2, 5))
    return [a, b], lambda: ad.reduce_mean(ad.mul(ad.mul(a, b), c))


def _build_div(rng):
    a = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    b = Tensor(_away_from_zero(rng, (2, 5), 0.3, 1.5), requires_grad=True)
    c = _weights(rng, (2, 5))
    return [a, b], lambda: ad.reduce_mean(ad.mul(ad.div(a, b), c))


def _build_scale(rng):
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    s = float(rng.uniform(-2, 2))
    c = _weights(rng, (4, 3))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.scale(x, s), c))


def _build_shift(rng):
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    s = float(rng.uniform(-2, 2))
    c = _weights(rng, (4, 3))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.shift(x, s), c))


def _build_relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    c = _weights(rng, (4, 5))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.relu(x), c))


def _build_absolute(rng):
    x = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    c = _weights(rng, (4, 5))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.absolute(x), c))


def _build_square(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    c = _weights(rng, (4, 5))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.square(x), c))


def _build_sqrt_shifted(rng):
    x = Tensor(rng.uniform(0.1, 2.0, (4, 5)), requires_grad=True)
    c = _weights(rng, (4, 5))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.sqrt_shifted(x, 1e-2), c))


def _build_reduce_sum(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return [x], lambda: ad.reduce_sum(ad.square(x))


def _build_reduce_mean(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return [x], lambda: ad.reduce_mean(ad.square(x))


def _build_reshape(rng):
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    c = _weights(rng, (6, 4))
    return [x], lambda: ad.reduce_mean(ad.mul(ad.reshape(x, (6, 4)), c))


def _build_concat_channels(rng):
    a = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True)
    c = _weights(rng, (2, 5, 3, 3))
    return [a, b], lambda: ad.reduce_mean(ad.mul(ad.concat_channels(a, b), c))


def _build_spatial_diff(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 6)), requires_grad=True)
    cx = _weights(rng, (2, 1, 5, 5))
    cy = _weights(rng, (2, 1, 4, 6))

    def fn():
        dx, dy = ad.spatial_diff(x)
        return ad.add(
            ad.reduce_mean(ad.mul(dx, cx)), ad.reduce_mean(ad.mul(dy, cy))
        )

    return [x], fn


def _build_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    return [x, w, b], lambda: ad.reduce_mean(
        ad.square(ad.conv2d(x, w, b, stride=stride, padding=padding))
    )


def _build_conv_transpose2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    y = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 4, 4)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    return [y, w, b], lambda: ad.reduce_mean(
        ad.square(ad.conv_transpose2d(y, w, b, stride=stride, padding=padding))
    )


def _build_batch_norm_train(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    c = _weights(rng, (3, 2, 4, 4))

    def fn():
        stats = ad.BatchNormStats(2, dtype=np.float64)
        out = ad.batch_norm2d(x, gamma, beta, True, stats)
        return ad.reduce_mean(ad.mul(out, c))

    return [x, gamma, beta], fn


def _build_batch_norm_eval(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    stats = ad.BatchNormStats(2, dtype=np.float64)
    stats.mean = rng.standard_normal(2)
    stats.var = rng.uniform(0.5, 2.0, 2)
    c = _weights(rng, (3, 2, 4, 4))
    return [x, gamma, beta], lambda: ad.reduce_mean(
        ad.mul(ad.batch_norm2d(x, gamma, beta, False, stats), c)
    )


def _build_l1_depth(rng):
    p_data, g_data = _pair_with_margin(rng, (1, 1, 6, 6))
    pred = Tensor(p_data, requires_grad=True)
    gt = Tensor(g_data)
    return [pred], lambda: losses.l1_depth(pred, gt)


def _build_grad_smooth(rng):
    p_data, g_data = _pair_with_margin(rng, (1, 1, 6, 6))
    pred = Tensor(p_data, requires_grad=True)
    gt = Tensor(g_data)
    return [pred], lambda: losses.grad_smooth(pred, gt)


def _build_depth_loss(rng):
    p_data, g_data = _pair_with_margin(rng, (1, 1, 6, 6))
    pred = Tensor(p_data, requires_grad=True)
    gt = Tensor(g_data)
    weights = losses.LossWeights()
    return [pred], lambda: losses.depth_loss(pred, gt, weights)


def _build_charbonnier(rng):
    # A margin much larger than eps keeps the third derivative small, so
    # the central-difference estimate stays accurate at the fixed step.
    p_data, g_data = _pair_with_margin(rng, (1, 3, 5, 5))
    pred = Tensor(p_data, requires_grad=True)
    gt = Tensor(g_data)
    return [pred], lambda: losses.charbonnier(pred, gt, 1e-3)


def _build_ssim_loss(rng):
    pred = Tensor(rng.random((1, 2, 13, 13)), requires_grad=True)
    gt = Tensor(rng.random((1, 2, 13, 13)))
    return [pred], lambda: losses.ssim_loss(pred, gt)


def _build_deblur_loss(rng):
    p_data, g_data = _pair_with_margin(rng, (1, 3, 12, 12))
    pred = Tensor(p_data, requires_grad=True)
    gt = Tensor(g_data)
    weights = losses.LossWeights()
    return [pred], lambda: losses.deblur_loss(pred, gt, weights)


def _make_total_loss_builder(variant):
    def build(rng):
        dp_data, dg_data = _pair_with_margin(rng, (1, 1, 6, 6))
        depth_pred = Tensor(dp_data, requires_grad=True)
        depth_gt = Tensor(dg_data)
        ap_data, ag_data = _pair_with_margin(rng, (1, 3, 12, 12))
        aif_pred = Tensor(ap_data, requires_grad=True)
        aif_gt = Tensor(ag_data)
        weights = losses.LossWeights()

        def fn():
            loss, _ = losses.total_loss(
                depth_pred, depth_gt, aif_pred, aif_gt, weights, variant
            )
            return loss

        return [depth_pred, aif_pred], fn

    return build


_CHECKS = [
    ("add", _build_add),
    ("sub", _build_sub),
    ("mul", _build_mul),
    ("div", _build_div),
    ("scale", _build_scale),
    ("shift", _build_shift),
    ("relu", _build_relu),
    ("absolute", _build_absolute),
    ("square", _build_square),
    ("sqrt_shifted", _build_sqrt_shifted),
    ("reduce_sum", _build_reduce_sum),
    ("reduce_mean", _build_reduce_mean),
    ("reshape", _build_reshape),
    ("concat_channels", _build_concat_channels),
    ("spatial_diff", _build_spatial_diff),
    ("conv2d", _build_conv2d),
    ("conv_transpose2d", _build_conv_transpose2d),
    ("batch_norm2d_train", _build_batch_norm_train),
    ("batch_norm2d_eval", _build_batch_norm_eval),
    ("l1_depth", _build_l1_depth),
    ("grad_smooth", _build_grad_smooth),
    ("depth_loss", _build_depth_loss),
    ("charbonnier", _build_charbonnier),
    ("ssim_loss", _build_ssim_loss),
    ("deblur_loss", _build_deblur_loss),
] + [
    (f"total_loss[{v}]", _make_total_loss_builder(v)) for v in losses.VARIANTS
]


def check_names() -> list[str]:
    return [name for name, _ in _CHECKS]


def run_all_checks(
    seed: int = 0,
    instances: int = 5,
    inject_bug: str | None = None,
) -> list[CheckResult]:
    """Run every registered check `instances` times with fresh inputs.

    `inject_bug` perturbs the named backward rule for the duration of the
    run, to demonstrate that a wrong derivative is actually caught.
    """
    if instances < 1:
        raise ValueError(f"instances must be positive, got {instances}")
    results = []
    ad.set_backward_bug(inject_bug)
    try:
        for name, build in _CHECKS:
            worst = 0.0
            passed = True
            for trial in range(instances):
                rng = np.random.default_rng([seed, trial, zlib.crc32(name.encode())])
                params, fn = build(rng)
                analytic = _grad_tensors(params, fn)
                for p, a in zip(params, analytic):
                    numeric = finite_diff_grad(fn, p)
                    ok, rel = _compare(a, numeric)
                    worst = max(worst, rel)
                    passed = passed and ok
            results.append(CheckResult(name, worst, passed))
    finally:
        ad.set_backward_bug(None)
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = []
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}")
    failed = sum(1 for r in results if not r.passed)
    lines.append(
        f"{len(results) - failed}/{len(results)} gradient checks passed"
    )
    return "\n".join(lines)
