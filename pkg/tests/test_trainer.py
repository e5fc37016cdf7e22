"""Training loop, run logging, suites, and inference plumbing.

Runs here are deliberately tiny (2 scenes at 32x32, a few steps) so the
whole file stays fast; the larger convergence experiment lives in the
acceptance suite.
"""

import json

import numpy as np
import pytest

from dfdeblur import data, network, optics, trainer


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    cfg = data.SceneConfig(height=32, width=32)
    manifest = data.synth_dataset(root / "train", 2, cfg, seed=4)
    return manifest


def micro_config(dataset, out_dir, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 2)
    kw.setdefault("width_scale", 0.0625)
    kw.setdefault("eval_split", "train")
    kw.setdefault("augment_flip", False)
    return trainer.TrainConfig(manifest=str(dataset.root), out_dir=str(out_dir), **kw)


class TestConfig:
    def test_validation(self, dataset, tmp_path):
        with pytest.raises(ValueError):
            micro_config(dataset, tmp_path, epochs=0)
        with pytest.raises(ValueError):
            micro_config(dataset, tmp_path, ablation="half")
        with pytest.raises(ValueError):
            micro_config(dataset, tmp_path, loss_variant="l2")

    def test_decay_epoch_resolution(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path, epochs=500)
        assert cfg.resolved_decay_epoch() == 300
        cfg = micro_config(dataset, tmp_path, epochs=10, decay_epoch=7)
        assert cfg.resolved_decay_epoch() == 7

    def test_heads_follow_ablation(self, dataset, tmp_path):
        assert micro_config(dataset, tmp_path).heads() == ("depth", "aif")
        assert micro_config(dataset, tmp_path, ablation="depth_only").heads() == ("depth",)
        assert micro_config(dataset, tmp_path, ablation="deblur_only").heads() == ("aif",)

    def test_run_id_depends_on_config(self, dataset, tmp_path):
        a = micro_config(dataset, tmp_path)
        b = micro_config(dataset, tmp_path)
        c = micro_config(dataset, tmp_path, seed=1)
        assert a.run_id() == b.run_id()
        assert a.run_id() != c.run_id()
        assert len(a.run_id()) == 12


class TestTrainLoop:
    def test_artifacts_and_log_structure(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", eval_every=1)
        result = trainer.train(cfg)
        assert result.checkpoint_path.exists()
        assert (result.out_dir / "report.json").exists()
        assert (result.out_dir / "timing.json").exists()

        records = trainer.RunLog.load(result.runlog_path)
        events = [r["event"] for r in records]
        assert events[0] == "config"
        assert events.count("step") == result.steps
        assert events.count("epoch") == cfg.epochs
        assert "eval" in events
        assert events[-1] == "end"
        step = next(r for r in records if r["event"] == "step")
        assert {"epoch", "loss", "lr", "parts", "step"} <= step.keys()

    def test_lr_decays_tenfold_at_configured_epoch(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", epochs=4, decay_epoch=2,
                           learning_rate=0.01)
        result = trainer.train(cfg)
        lrs = [r["lr"] for r in trainer.RunLog.load(result.runlog_path)
               if r["event"] == "step"]
        assert lrs[0] == pytest.approx(0.01)
        assert lrs[-1] == pytest.approx(0.001)

    def test_single_head_training_skips_other_params(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", ablation="depth_only")
        result = trainer.train(cfg)
        state = network.read_checkpoint(result.checkpoint_path)
        assert not any(k.startswith("aif") for k in state)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", learning_rate=1e12, epochs=30)
        with pytest.raises(trainer.DivergenceError):
            trainer.train(cfg)

    def test_runs_are_bit_deterministic(self, dataset, tmp_path):
        # Two output dirs: the config echo differs by out_dir, but every
        # numeric record and the checkpoint must match exactly.
        ra = trainer.train(micro_config(dataset, tmp_path / "a", eval_every=2))
        rb = trainer.train(micro_config(dataset, tmp_path / "b", eval_every=2))

        def trajectory(path):
            return [r for r in trainer.RunLog.load(path)
                    if r["event"] in ("step", "epoch", "eval")]

        assert trajectory(ra.runlog_path) == trajectory(rb.runlog_path)
        assert ra.checkpoint_path.read_bytes() == rb.checkpoint_path.read_bytes()

    def test_rerun_overwrites_identically(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run")
        first = trainer.train(cfg)
        log1 = first.runlog_path.read_bytes()
        ckpt1 = first.checkpoint_path.read_bytes()
        second = trainer.train(cfg)
        assert second.runlog_path.read_bytes() == log1
        assert second.checkpoint_path.read_bytes() == ckpt1


class TestCheckpointBundle:
    def test_bundle_rebuilds_model(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", width_scale=0.125,
                           dense_block_layers=1)
        result = trainer.train(cfg)
        model, payload = trainer.load_checkpoint_bundle(result.checkpoint_path)
        assert model.config.width_scale == 0.125
        assert payload["loss_variant"] == cfg.loss_variant
        assert payload["depth_min_m"] == dataset.depth_min_m

    def test_missing_sidecar_rejected(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run")
        result = trainer.train(cfg)
        sidecar = result.checkpoint_path.with_suffix(
            result.checkpoint_path.suffix + ".config.json")
        assert sidecar.exists()
        sidecar.unlink()
        with pytest.raises((network.BadCheckpointError, FileNotFoundError)):
            trainer.load_checkpoint_bundle(result.checkpoint_path)


@pytest.fixture(scope="module")
def ablation(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("abl")
    cfg = micro_config(dataset, out)
    return trainer.ablation_suite(cfg)


class TestSuites:
    def test_three_modes_run(self, ablation):
        assert set(ablation.results) == set(trainer.ABLATION_MODES)

    def test_table_rows_and_gain_rows(self, ablation):
        text = ablation.csv_path.read_text()
        lines = text.strip().splitlines()
        assert lines[0].startswith("mode,")
        modes = [ln.split(",")[0] for ln in lines]
        for mode in trainer.ABLATION_MODES:
            assert mode in modes
        assert "gain_vs_depth_only" in modes
        assert "gain_vs_deblur_only" in modes

    def test_gain_rows_are_exact_differences(self, ablation):
        header, *rows = [ln.split(",") for ln in
                         ablation.csv_path.read_text().strip().splitlines()]
        table = {r[0]: r for r in rows}
        psnr_col = header.index("psnr")
        both = float(table["both"][psnr_col])
        single = float(table["deblur_only"][psnr_col])
        gain = float(table["gain_vs_deblur_only"][psnr_col])
        assert gain == both - single
        rmse_col = header.index("rmse")
        rmse_gain = float(table["gain_vs_depth_only"][rmse_col])
        assert rmse_gain == float(table["depth_only"][rmse_col]) - float(
            table["both"][rmse_col])

    def test_reference_footer_present(self, ablation):
        text = ablation.csv_path.read_text()
        assert "# reference" in text
        assert "34.849" in text and "31.941" in text
        assert "# expected trend" in text

    def test_loss_grid_runs_variants_in_order(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "grid", epochs=1)
        suite = trainer.loss_grid(cfg)
        lines = suite.csv_path.read_text().strip().splitlines()
        variant_cells = [ln.split(",")[0] for ln in lines[1:1 + 5]]
        assert variant_cells == list(trainer.losses.VARIANTS)
        assert "# reference" in lines[-1] or "# reference" in "\n".join(lines)


class TestInfer:
    def test_outputs_and_idempotence(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run")
        result = trainer.train(cfg)
        sid = dataset.ids("train")[0]
        image = dataset.root / dataset.entry(sid).image
        out = tmp_path / "infer"
        written = trainer.infer(result.checkpoint_path, [image], out)
        names = {p.name for p in written}
        stem = image.stem
        assert names == {f"{stem}_depth.pfm", f"{stem}_depth.png",
                         f"{stem}_deblurred.png"}
        before = {p: p.read_bytes() for p in written}
        trainer.infer(result.checkpoint_path, [image], out)
        assert {p: p.read_bytes() for p in written} == before

    def test_depth_output_in_metric_range(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run")
        result = trainer.train(cfg)
        sid = dataset.ids("train")[0]
        image = dataset.root / dataset.entry(sid).image
        written = trainer.infer(result.checkpoint_path, [image], tmp_path / "o")
        pfm = next(p for p in written if p.suffix == ".pfm")
        depth = data.read_pfm(pfm)
        assert depth.shape == (32, 32)
        assert np.isfinite(depth).all()

    def test_ablated_checkpoint_serves_surviving_head(self, dataset, tmp_path):
        cfg = micro_config(dataset, tmp_path / "run", ablation="deblur_only")
        result = trainer.train(cfg)
        sid = dataset.ids("train")[0]
        image = dataset.root / dataset.entry(sid).image
        written = trainer.infer(result.checkpoint_path, [image], tmp_path / "o")
        names = {p.name for p in written}
        assert names == {f"{image.stem}_deblurred.png"}
