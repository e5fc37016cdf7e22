"""Depth and image-restoration metrics plus split-level evaluation.

Depth metrics (RMSE, absolute relative error, threshold accuracies) are
computed in meters over valid pixels. Image metrics are PSNR with an
exact-match cap and the same Gaussian-window SSIM the loss uses. Ranged
variants restrict depth metrics to near (C1) and far (C2) caps with
explicit pixel counts instead of NaN for empty ranges.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses

__all__ = [
    "MetricConfig",
    "EmptyMaskError",
    "DepthMetrics",
    "PsnrResult",
    "RangedMetrics",
    "MetricReport",
    "depth_metrics",
    "psnr",
    "ssim_metric",
    "ranged_depth_metrics",
    "CSV_COLUMNS",
    "csv_header",
    "csv_row",
    "evaluate_split",
]

# Fixed report column order for every CSV this package writes.
CSV_COLUMNS = ("rmse", "abs_rel", "delta1", "delta2", "delta3", "psnr", "ssim")


class EmptyMaskError(ValueError):
    """No valid pixels (or samples) were available for a metric."""


@dataclass(frozen=True)
class MetricConfig:
    """Knobs of the metric suite; defaults follow common depth protocols."""

    delta_base: float = 1.25
    psnr_peak: float = 1.0
    psnr_cap_db: float = 100.0
    c1_cap_m: float = 70.0
    c2_cap_m: float = 80.0
    min_valid_depth_m: float = 1e-3

    def __post_init__(self):
        if self.delta_base <= 1:
            raise ValueError(f"delta_base must exceed 1, got {self.delta_base}")
        if self.psnr_peak <= 0:
            raise ValueError(f"psnr_peak must be positive, got {self.psnr_peak}")
        if self.psnr_cap_db <= 0:
            raise ValueError(f"psnr_cap_db must be positive, got {self.psnr_cap_db}")
        if self.c1_cap_m <= 0 or self.c2_cap_m <= self.c1_cap_m:
            raise ValueError(
                f"range caps must satisfy 0 < c1 < c2, got "
                f"{self.c1_cap_m}, {self.c2_cap_m}"
            )
        if self.min_valid_depth_m <= 0:
            raise ValueError(
                f"min_valid_depth_m must be positive, got {self.min_valid_depth_m}"
            )


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    abs_rel: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int


@dataclass(frozen=True)
class PsnrResult:
    value_db: float
    exact: bool


@dataclass(frozen=True)
class RangedMetrics:
    metrics: DepthMetrics | None
    pixel_count: int
    valid: bool


def depth_metrics(
    pred_m: np.ndarray,
    gt_m: np.ndarray,
    config: MetricConfig | None = None,
    mask: np.ndarray | None = None,
) -> DepthMetrics:
    """Masked depth metrics in meters.

    Pixels with gt below the validity floor are always excluded; an extra
    boolean mask may exclude more. Raises EmptyMaskError when nothing
    remains.
    """
    config = config or MetricConfig()
    pred_m = np.asarray(pred_m, dtype=np.float64)
    gt_m = np.asarray(gt_m, dtype=np.float64)
    if pred_m.shape != gt_m.shape:
        raise ValueError(f"shape mismatch: {pred_m.shape} vs {gt_m.shape}")
    valid = gt_m >= config.min_valid_depth_m
    if mask is not None:
        valid &= mask
    count = int(valid.sum())
    if count == 0:
        raise EmptyMaskError("no valid pixels for depth metrics")
    p = pred_m[valid]
    g = gt_m[valid]
    diff = p - g
    rmse = float(np.sqrt(np.mean(diff * diff)))
    abs_rel = float(np.mean(np.abs(diff) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    base = config.delta_base
    d1 = float(np.mean(ratio < base))
    d2 = float(np.mean(ratio < base**2))
    d3 = float(np.mean(ratio < base**3))
    return DepthMetrics(rmse, abs_rel, d1, d2, d3, count)


def psnr(
    pred: np.ndarray,
    gt: np.ndarray,
    peak: float = 1.0,
    cap_db: float = 100.0,
) -> PsnrResult:
    """Peak signal-to-noise ratio in dB, capped; exact match hits the cap."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PsnrResult(float(cap_db), True)
    value = 10.0 * np.log10(peak * peak / mse)
    return PsnrResult(float(min(value, cap_db)), False)


def ssim_metric(
    pred: np.ndarray,
    gt: np.ndarray,
    cfg: losses.SsimConfig | None = None,
) -> float:
    """Mean SSIM of [C,H,W] or [N,C,H,W] arrays; 1 - the SSIM loss."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[None]
        gt = gt[None]
    with ad.no_grad():
        loss = losses.ssim_loss(ad.Tensor(pred), ad.Tensor(gt), cfg)
    return 1.0 - loss.item()


def ranged_depth_metrics(
    pred_m: np.ndarray,
    gt_m: np.ndarray,
    config: MetricConfig | None = None,
) -> dict[str, RangedMetrics]:
    """Depth metrics within the near (C1) and far (C2) ground-truth caps."""
    config = config or MetricConfig()
    gt_arr = np.asarray(gt_m, dtype=np.float64)
    out: dict[str, RangedMetrics] = {}
    for name, cap in (("C1", config.c1_cap_m), ("C2", config.c2_cap_m)):
        mask = gt_arr <= cap
        try:
            m = depth_metrics(pred_m, gt_m, config, mask)
            out[name] = RangedMetrics(m, m.pixel_count, True)
        except EmptyMaskError:
            out[name] = RangedMetrics(None, 0, False)
    return out


@dataclass
class MetricReport:
    """Aggregated evaluation of one split; missing heads leave fields None."""

    rmse: float | None = None
    abs_rel: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    psnr: float | None = None
    ssim: float | None = None
    c1: RangedMetrics | None = None
    c2: RangedMetrics | None = None
    sample_count: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def ranged(r: RangedMetrics | None):
            if r is None:
                return None
            m = None if r.metrics is None else dataclasses.asdict(r.metrics)
            return {"metrics": m, "pixel_count": r.pixel_count, "valid": r.valid}

        return {
            "rmse": self.rmse,
            "abs_rel": self.abs_rel,
            "delta1": self.delta1,
            "delta2": self.delta2,
            "delta3": self.delta3,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "c1": ranged(self.c1),
            "c2": ranged(self.c2),
            "sample_count": self.sample_count,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_values(self) -> list[str]:
        values = [self.rmse, self.abs_rel, self.delta1, self.delta2, self.delta3,
                  self.psnr, self.ssim]
        return ["" if v is None else repr(float(v)) for v in values]


def csv_header(extra_left: tuple[str, ...] = ()) -> list[str]:
    return list(extra_left) + list(CSV_COLUMNS)


def csv_row(report: MetricReport, extra_left: tuple[str, ...] = ()) -> list[str]:
    return list(extra_left) + report.csv_values()


def write_csv(path, rows: list[list[str]]) -> None:
    """Write rows as CSV; single-cell rows starting with "#" stay raw.

    Comment footers must survive as literal `# ...` lines, so they bypass
    the csv writer (which would quote any comma they contain).
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        if len(row) == 1 and row[0].startswith("#"):
            buf.write(row[0] + "\n")
        else:
            writer.writerow(row)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def evaluate_split(
    model,
    manifest,
    split: str,
    metric_cfg: MetricConfig | None = None,
    ssim_cfg: losses.SsimConfig | None = None,
    sample_loader=None,
) -> MetricReport:
    """Run the model over a split and average per-sample metrics.

    Depth predictions are mapped from the normalized unit interval back to
    meters using the manifest depth range before any depth metric. Ranged
    metrics aggregate pixels across the whole split.
    """
    from . import network
    from .data import batch_arrays, load_sample

    metric_cfg = metric_cfg or MetricConfig()
    ids = manifest.ids(split)
    if not ids:
        raise EmptyMaskError(f"split {split!r} has no samples")
    loader = sample_loader or (lambda sid: load_sample(manifest, sid))

    has_depth = "depth" in model.heads
    has_aif = "aif" in model.heads
    depth_vals: list[DepthMetrics] = []
    psnr_vals: list[float] = []
    ssim_vals: list[float] = []
    all_pred: list[np.ndarray] = []
    all_gt: list[np.ndarray] = []

    for sid in ids:
        sample = loader(sid)
        x, depth_gt_n, aif_gt = batch_arrays([sample], manifest)
        with ad.no_grad():
            out = network.forward(model, ad.Tensor(x), training=False)
        if has_depth:
            pred_n = out["depth"].data[0, 0]
            pred_m = manifest.denormalize_depth(pred_n)
            gt_m = sample.depth_m.astype(np.float64)
            depth_vals.append(depth_metrics(pred_m, gt_m, metric_cfg))
            all_pred.append(pred_m.reshape(-1))
            all_gt.append(gt_m.reshape(-1))
        if has_aif:
            pred_img = np.clip(out["aif"].data[0], 0.0, 1.0)
            gt_img = aif_gt[0]
            psnr_vals.append(
                psnr(pred_img, gt_img, metric_cfg.psnr_peak, metric_cfg.psnr_cap_db).value_db
            )
            ssim_vals.append(ssim_metric(pred_img, gt_img, ssim_cfg))

    report = MetricReport(sample_count=len(ids), config={
        "split": split,
        "delta_base": metric_cfg.delta_base,
        "psnr_peak": metric_cfg.psnr_peak,
        "psnr_cap_db": metric_cfg.psnr_cap_db,
        "c1_cap_m": metric_cfg.c1_cap_m,
        "c2_cap_m": metric_cfg.c2_cap_m,
        "min_valid_depth_m": metric_cfg.min_valid_depth_m,
    })
    if depth_vals:
        report.rmse = float(np.mean([m.rmse for m in depth_vals]))
        report.abs_rel = float(np.mean([m.abs_rel for m in depth_vals]))
        report.delta1 = float(np.mean([m.delta1 for m in depth_vals]))
        report.delta2 = float(np.mean([m.delta2 for m in depth_vals]))
        report.delta3 = float(np.mean([m.delta3 for m in depth_vals]))
        ranged = ranged_depth_metrics(
            np.concatenate(all_pred), np.concatenate(all_gt), metric_cfg
        )
        report.c1 = ranged["C1"]
        report.c2 = ranged["C2"]
    if psnr_vals:
        report.psnr = float(np.mean(psnr_vals))
        report.ssim = float(np.mean(ssim_vals))
    return report
