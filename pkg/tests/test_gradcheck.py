"""Self-check harness tests: the checker must pass on correct code and
fail loudly when a backward rule is deliberately perturbed."""

import numpy as np

from dfdeblur import autodiff as ad
from dfdeblur import gradcheck


def test_finite_diff_matches_analytic_on_square():
    x = ad.Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    numeric = gradcheck.finite_diff_grad(lambda: ad.reduce_sum(ad.square(x)), x)
    np.testing.assert_allclose(numeric, 2.0 * x.data, rtol=1e-7, atol=1e-9)


def test_check_names_cover_ops_and_losses():
    names = gradcheck.check_names()
    for expected in ("conv2d", "conv_transpose2d", "batch_norm2d_train",
                     "ssim_loss", "charbonnier", "total_loss[l1grad+charb_ssim]"):
        assert expected in names


def test_all_checks_pass_quickly():
    results = gradcheck.run_all_checks(seed=0, instances=1)
    failed = [r.name for r in results if not r.passed]
    assert failed == []
    assert max(r.max_rel_err for r in results) <= gradcheck.REL_TOL


def test_injected_bug_is_caught():
    results = gradcheck.run_all_checks(seed=0, instances=1, inject_bug="relu")
    failed = {r.name for r in results if not r.passed}
    assert failed, "perturbed backward rule went undetected"
    assert any("relu" in name or "total_loss" in name or "conv" in name
               for name in failed)
    # The hook must not leak into later runs.
    clean = gradcheck.run_all_checks(seed=0, instances=1)
    assert all(r.passed for r in clean)


def test_report_lists_every_check():
    results = gradcheck.run_all_checks(seed=0, instances=1)
    report = gradcheck.format_report(results)
    for r in results:
        assert r.name in report
    assert "max rel err" in report or "max_rel_err" in report
