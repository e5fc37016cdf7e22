"""Training loop, head-ablation suite, loss-variant grid, and inference.

A run is fully determined by (seed, config): batch order, augmentation,
and weight initialization all derive from the config seed, and the run
log contains no wall-clock values (timing goes to a separate file), so
identical runs produce bit-identical logs. The learning rate steps down
once, by `decay_factor`, at 60% of the scheduled epochs unless an
explicit decay epoch is given.

Ablation modes retrain from scratch with the surviving head only:
`depth_only` builds a model without the restoration decoder and trains
on the depth term of the configured variant; `deblur_only` does the
mirror image.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import losses, metrics, network, optim
from .autodiff import Tensor

__all__ = [
    "TrainConfig",
    "TrainResult",
    "RunLog",
    "DivergenceError",
    "train",
    "ablation_suite",
    "loss_grid",
    "infer",
    "ABLATION_MODES",
]

ABLATION_MODES = ("both", "depth_only", "deblur_only")

# Published full-scale results, shown in report footers for context only;
# micro-scale runs are not expected to approach them.
REFERENCE_ABLATION = {
    "both_psnr": 34.849,
    "without_depth_head_psnr": 31.941,
    "both_rmse": 0.24,
    "without_deblur_head_rmse": 0.29,
}
REFERENCE_FULL_LOSS = {"rmse": 0.241, "psnr": 34.84}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    """Everything a run needs; every field round-trips through flat text."""

    manifest: str
    out_dir: str
    epochs: int = 500
    batch_size: int = 4
    learning_rate: float = 2e-4
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_epoch: int = -1  # -1 selects round(decay_fraction * epochs)
    decay_fraction: float = 0.6
    loss_variant: str = losses.DEFAULT_VARIANT
    mu: float = 1e-3
    psi: float = 4.0
    lam: float = 1e-2
    eps_charb: float = 1e-3
    width_scale: float = 1.0
    dense_block_layers: int = 2
    use_skips: bool = True
    ablation: str = "both"
    seed: int = 0
    eval_every: int = 0
    eval_split: str = "test"
    augment_flip: bool = True
    max_steps: int = 0  # 0 = no step cap

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(
                f"unknown ablation mode {self.ablation!r}; expected one of "
                f"{ABLATION_MODES}"
            )
        if self.loss_variant not in losses.VARIANTS:
            raise ValueError(
                f"unknown loss variant {self.loss_variant!r}; expected one of "
                f"{', '.join(losses.VARIANTS)}"
            )
        if not 0 < self.decay_fraction <= 1:
            raise ValueError(
                f"decay_fraction must lie in (0, 1], got {self.decay_fraction}"
            )
        if self.eval_every < 0 or self.max_steps < 0:
            raise ValueError("eval_every and max_steps must be non-negative")
        if self.eval_split not in data_mod.SPLITS:
            raise ValueError(
                f"unknown eval_split {self.eval_split!r}; expected one of "
                f"{data_mod.SPLITS}"
            )

    def resolved_decay_epoch(self) -> int:
        if self.decay_epoch >= 0:
            return self.decay_epoch
        return round(self.decay_fraction * self.epochs)

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            mu=self.mu, psi=self.psi, lam=self.lam, eps_charb=self.eps_charb
        )

    def model_config(self) -> network.ModelConfig:
        return network.ModelConfig(
            width_scale=self.width_scale,
            dense_block_layers=self.dense_block_layers,
            use_skips=self.use_skips,
        )

    def heads(self) -> tuple[str, ...]:
        if self.ablation == "depth_only":
            return ("depth",)
        if self.ablation == "deblur_only":
            return ("aif",)
        return ("depth", "aif")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def run_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


class RunLog:
    """Append-only line-delimited JSON log; deterministic byte for byte."""

    def __init__(self, path):
        self.path = Path(path)
        self.records: list[dict] = []
        self.path.write_text("")

    def log(self, **record) -> dict:
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    @staticmethod
    def load(path) -> list[dict]:
        out = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(json.loads(line))
        return out


@dataclass
class TrainResult:
    run_id: str
    out_dir: Path
    checkpoint_path: Path
    runlog_path: Path
    steps: int
    first_epoch_loss: float
    final_epoch_loss: float
    final_report: metrics.MetricReport | None
    wall_seconds: float


def _batch_tensors(samples, manifest):
    x, depth, aif = data_mod.batch_arrays(samples, manifest)
    return Tensor(x), Tensor(depth), Tensor(aif)


def _compute_loss(config, weights, out, depth_gt, aif_gt):
    if config.ablation == "depth_only":
        return losses.depth_term(out["depth"], depth_gt, weights, config.loss_variant)
    if config.ablation == "deblur_only":
        return losses.deblur_term(out["aif"], aif_gt, weights, config.loss_variant)
    return losses.total_loss(
        out["depth"], depth_gt, out["aif"], aif_gt, weights, config.loss_variant
    )


def _sidecar_payload(config: TrainConfig, manifest) -> dict:
    return {
        "model_config": config.model_config().to_dict(),
        "heads": list(config.heads()),
        "seed": config.seed,
        "loss_variant": config.loss_variant,
        "depth_min_m": manifest.depth_min_m,
        "depth_max_m": manifest.depth_max_m,
        "rgb_mean": list(manifest.rgb_mean),
        "rgb_std": list(manifest.rgb_std),
        "run_id": config.run_id(),
    }


def _save_checkpoint_with_sidecar(model, path, payload) -> None:
    network.save_checkpoint(model, path)
    sidecar = Path(str(path) + ".config.json")
    sidecar.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def train(config: TrainConfig) -> TrainResult:
    """Run the configured schedule; returns paths and summary numbers.

    Writes `runlog.jsonl`, `model.ckpt` (+ `.config.json` sidecar), a
    final `report.json` when the eval split is populated, and
    `timing.json` (the only file with wall-clock content).
    """
    started = time.monotonic()
    manifest = data_mod.DatasetManifest.load(config.manifest)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out_dir / "runlog.jsonl")
    run_id = config.run_id()
    runlog.log(event="config", run_id=run_id, config=config.to_dict())

    model = network.build_model(config.model_config(), config.seed, config.heads())
    weights = config.loss_weights()
    state = optim.OptimState(
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        decay_epoch=config.resolved_decay_epoch(),
        decay_factor=config.decay_factor,
    )
    params = model.parameters()
    runlog.log(
        event="model",
        parameter_count=network.count_params(model),
        heads=list(config.heads()),
        channels=list(config.model_config().scaled_channels()),
        decay_epoch=state.decay_epoch,
    )

    cache: dict[str, data_mod.Sample] = {}

    def loader(sid):
        if sid not in cache:
            cache[sid] = data_mod.load_sample(manifest, sid)
        return cache[sid]

    aug_rng = np.random.default_rng([config.seed, 0xA06])
    flip_prob = 0.5 if config.augment_flip else 0.0

    step = 0
    stop = False
    first_epoch_loss = math.nan
    epoch_loss = math.nan
    sidecar = _sidecar_payload(config, manifest)

    def maybe_eval(epoch):
        if not manifest.ids(config.eval_split):
            return None
        report = metrics.evaluate_split(
            model, manifest, config.eval_split, sample_loader=loader
        )
        runlog.log(event="eval", epoch=epoch, report=report.to_dict())
        return report

    final_report = None
    for epoch in range(config.epochs):
        lr = state.effective_lr(epoch)
        totals = []
        for batch in data_mod.batches(
            manifest, "train", config.batch_size, config.seed, epoch, loader
        ):
            batch = [data_mod.augment(s, aug_rng, flip_prob) for s in batch]
            x, depth_gt, aif_gt = _batch_tensors(batch, manifest)
            out = network.forward(model, x, training=True)
            loss, parts = _compute_loss(config, weights, out, depth_gt, aif_gt)
            value = loss.item()
            if not math.isfinite(value):
                runlog.log(event="divergence", step=step, epoch=epoch, parts=parts)
                raise DivergenceError(
                    f"non-finite loss at step {step} (epoch {epoch}): {parts}"
                )
            ad.zero_grads(params.values())
            ad.backward(loss)
            optim.sgd_step(params, state, epoch)
            totals.append(value)
            runlog.log(event="step", step=step, epoch=epoch, lr=lr, loss=value,
                       parts=parts)
            step += 1
            if config.max_steps and step >= config.max_steps:
                stop = True
                break
        if totals:
            epoch_loss = float(np.mean(totals))
            if epoch == 0:
                first_epoch_loss = epoch_loss
            runlog.log(event="epoch", epoch=epoch, lr=lr, mean_loss=epoch_loss,
                       batches=len(totals))
        if config.eval_every and (epoch + 1) % config.eval_every == 0 and not stop:
            maybe_eval(epoch)
            _save_checkpoint_with_sidecar(
                model, out_dir / f"ckpt_epoch{epoch + 1}.ckpt", sidecar
            )
        if stop:
            break

    checkpoint_path = out_dir / "model.ckpt"
    _save_checkpoint_with_sidecar(model, checkpoint_path, sidecar)
    final_report = maybe_eval(epoch)
    if final_report is not None:
        (out_dir / "report.json").write_text(final_report.to_json() + "\n")
    runlog.log(event="end", steps=step, final_epoch_loss=epoch_loss)

    wall = time.monotonic() - started
    (out_dir / "timing.json").write_text(
        json.dumps({"run_id": run_id, "wall_seconds": wall}) + "\n"
    )
    return TrainResult(
        run_id=run_id,
        out_dir=out_dir,
        checkpoint_path=checkpoint_path,
        runlog_path=runlog.path,
        steps=step,
        first_epoch_loss=first_epoch_loss,
        final_epoch_loss=epoch_loss,
        final_report=final_report,
        wall_seconds=wall,
    )


# ---------------------------------------------------------------------------
# experiment suites


@dataclass
class SuiteResult:
    csv_path: Path
    results: dict[str, TrainResult]
    rows: list[list[str]]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _report_cells(report: metrics.MetricReport | None) -> dict[str, float | None]:
    if report is None:
        return {k: None for k in metrics.CSV_COLUMNS}
    return {
        "rmse": report.rmse,
        "abs_rel": report.abs_rel,
        "delta1": report.delta1,
        "delta2": report.delta2,
        "delta3": report.delta3,
        "psnr": report.psnr,
        "ssim": report.ssim,
    }


def ablation_suite(base: TrainConfig) -> SuiteResult:
    """Retrain under each ablation mode with shared seed and data.

    Emits `ablation.csv`: one row per mode, then gain rows formed by
    exact differences against the both-heads row (sign chosen so that a
    positive gain means the extra head helped), then reference footer
    rows quoting published full-scale numbers for context.
    """
    out_dir = Path(base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, TrainResult] = {}
    cells: dict[str, dict[str, float | None]] = {}
    for mode in ABLATION_MODES:
        cfg = dataclasses.replace(
            base, ablation=mode, out_dir=str(out_dir / mode)
        )
        results[mode] = train(cfg)
        cells[mode] = _report_cells(results[mode].final_report)

    rows: list[list[str]] = [metrics.csv_header(("mode",))]
    for mode in ABLATION_MODES:
        rows.append([mode] + [_fmt(cells[mode][c]) for c in metrics.CSV_COLUMNS])

    both = cells["both"]
    depth_only = cells["depth_only"]
    deblur_only = cells["deblur_only"]

    def diff(a, b):
        if a is None or b is None:
            return None
        return a - b

    # Adding the restoration head should reduce depth errors and raise
    # delta accuracies relative to depth-only training.
    gain_depth = {
        "rmse": diff(depth_only["rmse"], both["rmse"]),
        "abs_rel": diff(depth_only["abs_rel"], both["abs_rel"]),
        "delta1": diff(both["delta1"], depth_only["delta1"]),
        "delta2": diff(both["delta2"], depth_only["delta2"]),
        "delta3": diff(both["delta3"], depth_only["delta3"]),
        "psnr": None,
        "ssim": None,
    }
    # Adding the depth head should raise restoration quality relative to
    # deblur-only training.
    gain_deblur = {
        "rmse": None,
        "abs_rel": None,
        "delta1": None,
        "delta2": None,
        "delta3": None,
        "psnr": diff(both["psnr"], deblur_only["psnr"]),
        "ssim": diff(both["ssim"], deblur_only["ssim"]),
    }
    rows.append(["gain_vs_depth_only"] + [_fmt(gain_depth[c]) for c in metrics.CSV_COLUMNS])
    rows.append(["gain_vs_deblur_only"] + [_fmt(gain_deblur[c]) for c in metrics.CSV_COLUMNS])
    rows.append([
        "# reference (full-scale): both-heads PSNR "
        f"{REFERENCE_ABLATION['both_psnr']} vs without-depth-head "
        f"{REFERENCE_ABLATION['without_depth_head_psnr']}; RMSE "
        f"{REFERENCE_ABLATION['both_rmse']} vs without-restoration-head "
        f"{REFERENCE_ABLATION['without_deblur_head_rmse']}"
    ])
    trend = None
    if both["psnr"] is not None and deblur_only["psnr"] is not None:
        trend = both["psnr"] > deblur_only["psnr"]
    rows.append([
        "# expected trend: both heads together beat single-head runs; "
        f"observed both>deblur_only on psnr: {trend}"
    ])
    csv_path = out_dir / "ablation.csv"
    metrics.write_csv(csv_path, rows)
    return SuiteResult(csv_path, results, rows)


def loss_grid(base: TrainConfig) -> SuiteResult:
    """Train one run per loss variant, in the canonical variant order."""
    out_dir = Path(base.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, TrainResult] = {}
    rows: list[list[str]] = [metrics.csv_header(("variant",))]
    for variant in losses.VARIANTS:
        sub = variant.replace("+", "_")
        cfg = dataclasses.replace(
            base, loss_variant=variant, ablation="both",
            out_dir=str(out_dir / sub)
        )
        results[variant] = train(cfg)
        cells = _report_cells(results[variant].final_report)
        rows.append([variant] + [_fmt(cells[c]) for c in metrics.CSV_COLUMNS])
    rows.append([
        "# reference (full-scale, full loss variant): RMSE "
        f"{REFERENCE_FULL_LOSS['rmse']}, PSNR {REFERENCE_FULL_LOSS['psnr']}"
    ])
    csv_path = out_dir / "loss_grid.csv"
    metrics.write_csv(csv_path, rows)
    return SuiteResult(csv_path, results, rows)


# ---------------------------------------------------------------------------
# inference


def load_checkpoint_bundle(checkpoint_path) -> tuple[network.Model, dict]:
    """Rebuild the model a checkpoint was saved from, using its sidecar."""
    checkpoint_path = Path(checkpoint_path)
    sidecar_path = Path(str(checkpoint_path) + ".config.json")
    if not sidecar_path.exists():
        raise network.BadCheckpointError(
            f"missing sidecar {sidecar_path}; cannot rebuild the architecture"
        )
    try:
        payload = json.loads(sidecar_path.read_text())
        model_cfg = network.ModelConfig.from_dict(payload["model_config"])
        heads = tuple(payload["heads"])
    except (KeyError, ValueError, TypeError) as exc:
        raise network.BadCheckpointError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    model = network.build_model(model_cfg, int(payload.get("seed", 0)), heads)
    network.load_checkpoint(model, checkpoint_path)
    return model, payload


def infer(checkpoint_path, image_paths, out_dir) -> list[Path]:
    """Run a trained model on images; writes depth and deblurred files.

    Per input: `<stem>_depth.pfm` (meters) and `<stem>_depth.png`
    (normalized visualization) when the depth head is present, and
    `<stem>_deblurred.png` when the restoration head is present.
    """
    model, payload = load_checkpoint_bundle(checkpoint_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mean = np.asarray(payload["rgb_mean"], dtype=np.float32)[:, None, None]
    std = np.asarray(payload["rgb_std"], dtype=np.float32)[:, None, None]
    d_min = float(payload["depth_min_m"])
    d_max = float(payload["depth_max_m"])

    written: list[Path] = []
    for image_path in image_paths:
        image_path = Path(image_path)
        img = data_mod.read_image_png(image_path)
        x = ((img - mean) / std)[None].astype(np.float32)
        with ad.no_grad():
            out = network.forward(model, Tensor(x), training=False)
        stem = image_path.stem
        if "depth" in out:
            unit = np.clip(out["depth"].data[0, 0].astype(np.float64), 0.0, 1.0)
            depth_m = (unit * (d_max - d_min) + d_min).astype(np.float32)
            pfm_path = out_dir / f"{stem}_depth.pfm"
            data_mod.write_pfm(pfm_path, depth_m)
            viz_path = out_dir / f"{stem}_depth.png"
            data_mod.write_image_png(viz_path, np.repeat(unit[None], 3, axis=0))
            written += [pfm_path, viz_path]
        if "aif" in out:
            aif = np.clip(out["aif"].data[0], 0.0, 1.0)
            png_path = out_dir / f"{stem}_deblurred.png"
            data_mod.write_image_png(png_path, aif)
            written.append(png_path)
    return written
