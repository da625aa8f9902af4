import math

import numpy as np
import pytest

from ufnet.metrics import auroc
from ufnet.uncertainty import (
    NON_PD,
    PD,
    AbstainDecision,
    ConformalCalibrator,
    Reason,
    abstain_by_ci,
    brier,
    ci_half_width,
    ci_of_mean,
    conformal_predict_set,
    conformal_sets,
    ece,
    fit_conformal,
    fit_platt,
    logit,
)


# -- confidence intervals --------------------------------------------------------


def test_identical_rounds_give_point_interval():
    assert ci_of_mean([0.7] * 30) == (0.7, 0.7)


def test_single_round_is_degenerate():
    assert ci_of_mean([0.3]) == (0.3, 0.3)


def test_half_width_closed_form():
    # 400 values with sample std exactly 0.2 around 0.5
    r = np.full(400, 0.5)
    r[:200] += 0.2 * math.sqrt(399 / 400)
    r[200:] -= 0.2 * math.sqrt(399 / 400)
    lo, hi = ci_of_mean(r)
    assert (hi - lo) / 2 == pytest.approx(1.959963984540054 * 0.2 / 20, abs=1e-12)


def test_interval_is_clipped():
    lo, hi = ci_of_mean([0.0, 0.0, 0.0, 1.0])
    assert lo == 0.0 and hi <= 1.0


def test_monte_carlo_coverage():
    rng = np.random.default_rng(0)
    samples = rng.normal(0.6, 0.1, size=(10_000, 100))
    hits = 0
    for row in samples:
        lo, hi = ci_of_mean(row)
        hits += lo <= 0.6 <= hi
    assert abs(hits / 10_000 - 0.95) <= 0.01


def test_width_shrinks_with_root_n():
    widths = [float(ci_half_width(0.15, n)) for n in (25, 100, 400)]
    assert widths[0] / widths[1] == pytest.approx(2.0, rel=1e-14)
    assert widths[1] / widths[2] == pytest.approx(2.0, rel=1e-14)


# -- CI withholding --------------------------------------------------------------


def test_interval_above_threshold_predicts_pd():
    assert abstain_by_ci(0.6, 0.8, 0.7) == AbstainDecision(PD)


def test_straddling_interval_withholds():
    d = abstain_by_ci(0.45, 0.55, 0.5)
    assert d.withheld and d.reason is Reason.CI_STRADDLES


def test_boundary_touch_withholds():
    assert abstain_by_ci(0.2, 0.5, 0.35).withheld


def test_withhold_requires_reason():
    with pytest.raises(ValueError):
        AbstainDecision(None)
    with pytest.raises(ValueError):
        AbstainDecision(PD, Reason.CI_STRADDLES)


# -- conformal -------------------------------------------------------------------


def test_constant_scores_threshold():
    cal = fit_conformal(np.full(20, 0.8), np.ones(20), alpha=0.5)
    assert cal.qhat == pytest.approx(0.2)


def test_quantile_rank_for_99_points():
    rng = np.random.default_rng(1)
    p = rng.uniform(size=99)
    y = rng.integers(0, 2, size=99)
    scores = np.sort(1 - np.where(y == 1, p, 1 - p))
    assert fit_conformal(p, y, 0.05).qhat == scores[94]


def test_small_calibration_rejected():
    with pytest.raises(ValueError):
        fit_conformal(np.full(9, 0.5), np.ones(9))


def _cal(qhat):
    return ConformalCalibrator(alpha=0.05, qhat=qhat, scores=())


def test_confident_pd_is_singleton():
    members, decision = conformal_predict_set(_cal(0.2), 0.99)
    assert members == {PD} and decision == AbstainDecision(PD)


def test_both_classes_withhold():
    members, decision = conformal_predict_set(_cal(0.6), 0.5)
    assert members == {PD, NON_PD}
    assert decision.reason is Reason.CONFORMAL_AMBIGUOUS


def test_empty_set_withholds_with_its_own_reason():
    members, decision = conformal_predict_set(_cal(0.3), 0.5)
    assert members == frozenset()
    assert decision.reason is Reason.CONFORMAL_EMPTY


def test_vectorised_sets_match_scalar():
    cal = _cal(0.35)
    p = np.linspace(0, 1, 41)
    has_pd, has_non = conformal_sets(cal, p)
    for pi, a, b in zip(p, has_pd, has_non):
        members, _ = conformal_predict_set(cal, pi)
        assert (PD in members, NON_PD in members) == (a, b)


def test_marginal_coverage_on_exchangeable_data():
    rng = np.random.default_rng(2)
    covered = []
    for _ in range(1000):
        p = rng.uniform(size=300)
        y = (rng.uniform(size=300) < p).astype(int)
        cal = fit_conformal(p[:200], y[:200], 0.05)
        has_pd, has_non = conformal_sets(cal, p[200:])
        covered.append(np.where(y[200:] == 1, has_pd, has_non).mean())
    assert np.mean(covered) >= 0.95 - 0.02


# -- Platt -----------------------------------------------------------------------


def test_calibrated_logits_give_identity_map():
    rng = np.random.default_rng(3)
    z = rng.normal(0, 2, size=10_000)
    y = (rng.uniform(size=z.size) < 1 / (1 + np.exp(-z))).astype(int)
    s = fit_platt(z, y)
    assert abs(s.a - 1) < 0.05 and abs(s.b) < 0.05


def test_overconfident_logits_halve_the_slope():
    rng = np.random.default_rng(4)
    z = rng.normal(0, 3, size=10_000)
    y = (rng.uniform(size=z.size) < 1 / (1 + np.exp(-z / 2))).astype(int)
    assert abs(fit_platt(z, y).a - 0.5) < 0.05


def test_flipped_labels_give_negative_slope(caplog):
    rng = np.random.default_rng(5)
    z = rng.normal(0, 2, size=500)
    y = (z < 0).astype(int)
    with caplog.at_level("WARNING"):
        s = fit_platt(z, y)
    assert s.a < 0 and s.a >= -50
    assert caplog.text


def test_separable_input_is_capped():
    z = np.concatenate([np.linspace(-3, -1, 50), np.linspace(1, 3, 50)])
    y = np.array([0] * 50 + [1] * 50)
    s = fit_platt(z, y)
    assert s.capped and s.a == 50.0


def test_platt_gradient_vanishes_at_solution():
    rng = np.random.default_rng(6)
    z = rng.normal(size=400)
    y = (rng.uniform(size=400) < 1 / (1 + np.exp(-(0.7 * z + 0.3)))).astype(int)
    s = fit_platt(z, y)
    p = 1 / (1 + np.exp(-(s.a * z + s.b)))
    grad = np.array([np.mean((p - y) * z), np.mean(p - y)])
    assert np.linalg.norm(grad) < 1e-8


def test_platt_keeps_auroc():
    rng = np.random.default_rng(7)
    p = rng.uniform(0.01, 0.99, size=300)
    y = (rng.uniform(size=300) < p).astype(int)
    s = fit_platt(logit(p), y)
    assert s.a > 0
    assert auroc(s.transform(p), y) == auroc(p, y)


def test_platt_needs_both_classes():
    with pytest.raises(ValueError):
        fit_platt(np.zeros(5), np.ones(5))


# -- calibration metrics ---------------------------------------------------------


def hand_binned_ece(p, y, bins=10):
    total = 0.0
    n = len(p)
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = []
        for pi, yi in zip(p, y):
            conf = max(pi, 1 - pi)
            if (lo < conf <= hi) or (b == 0 and conf == 0):
                members.append((conf, int(pi > 0.5) == yi))
        if members:
            acc = sum(m[1] for m in members) / len(members)
            avg = sum(m[0] for m in members) / len(members)
            total += len(members) / n * abs(acc - avg)
    return total


def test_perfect_predictions():
    p = np.array([0.0, 1.0, 1.0, 0.0])
    y = np.array([0, 1, 1, 0])
    assert ece(p, y) == 0.0 and brier(p, y) == 0.0


def test_coin_flip_brier():
    assert brier(np.full(10, 0.5), np.array([0, 1] * 5)) == 0.25


def test_metrics_match_hand_binned_oracle():
    rng = np.random.default_rng(8)
    p = rng.uniform(size=200)
    y = rng.integers(0, 2, size=200)
    assert abs(ece(p, y) - hand_binned_ece(list(p), list(y))) < 1e-12
    assert abs(brier(p, y) - sum((a - b) ** 2 for a, b in zip(p, y)) / 200) < 1e-12


def test_empty_and_invalid_inputs():
    with pytest.raises(ValueError):
        ece([], [])
    with pytest.raises(ValueError):
        brier([1.2], [1])


def test_too_few_calibration_points_admit_both_classes(caplog):
    rng = np.random.default_rng(9)
    with caplog.at_level("WARNING"):
        cal = fit_conformal(rng.uniform(size=18), rng.integers(0, 2, size=18), alpha=0.05)
    assert cal.qhat == 1.0 and "too few" in caplog.text
    assert conformal_predict_set(cal, 0.99)[0] == {PD, NON_PD}
