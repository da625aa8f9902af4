import json
import math

import numpy as np
import pytest

from ufnet import fusion as fu
from ufnet import numerics as nx
from ufnet import presets
from ufnet.experiment import MajorityVote, train_fusion
from ufnet.fusion import (
    FrozenModelError,
    FusionData,
    UfnetConfig,
    UfnetModel,
    baseline_early,
    baseline_hybrid,
    baseline_inputs,
    baseline_late,
    baseline_majority,
    calibrated_attention,
    dot_product_attention,
    majority_predict,
    restrict,
    train_ufnet,
)
from ufnet.metrics import auroc
from ufnet.task_model import TaskModelConfig, train_task_model

DIMS = {"tapping": 7, "smile": 5, "speech": 9}


def fusion_data(n=120, seed=0, signal=1.0, prefix="s"):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    feats = {t: rng.normal(size=(n, d)) + signal * y[:, None] * (np.arange(d) < 2) for t, d in DIMS.items()}
    mu = np.clip(0.5 + 0.3 * (y[:, None] - 0.5) + 0.15 * rng.normal(size=(n, 3)), 0.01, 0.99)
    sigma = rng.uniform(0.01, 0.2, size=(n, 3))
    subjects = np.array([f"{prefix}{i}" for i in range(n)], dtype=object)
    return FusionData(tuple(DIMS), feats, mu, sigma, y, subjects, subjects.copy())


def small_config(**kw):
    base = dict(projection_dim=8, qkv_dim=4, hidden_width=6, dropout=0.2, eta=5.0, epochs=15,
                batch_size=32, learning_rate=0.05, mc_rounds=10, seed=1)
    base.update(kw)
    return UfnetConfig(**base)


def random_qkv(rng, d=6, q=4, batch=None):
    shape = (3, d) if batch is None else (batch, 3, d)
    return rng.normal(size=shape), rng.normal(size=(d, q)), rng.normal(size=(d, q)), rng.normal(size=(d, q))


# -- attention -----------------------------------------------------------------------


def test_eta_zero_reduces_to_dot_product():
    rng = np.random.default_rng(0)
    for _ in range(200):
        xp, wq, wk, wv = random_qkv(rng)
        sigma = rng.uniform(0, 1, size=3)
        tr = calibrated_attention(xp, sigma, wq, wk, wv, 0.0)
        np.testing.assert_allclose(tr.weights, dot_product_attention(xp, wq, wk, wv), rtol=0, atol=1e-12)


def test_zero_sigma_reduces_to_dot_product():
    rng = np.random.default_rng(1)
    xp, wq, wk, wv = random_qkv(rng)
    tr = calibrated_attention(xp, np.zeros(3), wq, wk, wv, 50.0)
    np.testing.assert_allclose(tr.weights, dot_product_attention(xp, wq, wk, wv), rtol=0, atol=1e-12)


def test_closed_form_penalty_row():
    xp = np.zeros((3, 4))
    w = np.zeros((4, 2))
    tr = calibrated_attention(xp, np.array([0.0, 0.0, math.log(2)]), w, w, w, 1.0)
    for row in tr.weights:
        np.testing.assert_allclose(row, [0.4, 0.4, 0.2], rtol=0, atol=1e-12)


def test_trace_contents():
    rng = np.random.default_rng(2)
    xp, wq, wk, wv = random_qkv(rng)
    sigma = np.array([0.1, 0.2, 0.3])
    tr = calibrated_attention(xp, sigma, wq, wk, wv, 2.0)
    q, k, v = xp @ wq, xp @ wk, xp @ wv
    np.testing.assert_allclose(tr.scores, q @ k.T / math.sqrt(4))
    np.testing.assert_allclose(tr.penalty, np.tile(2.0 * sigma, (3, 1)))
    assert np.all(tr.weights >= 0)
    np.testing.assert_allclose(tr.weights.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(tr.context, tr.weights @ v)


def test_context_is_a_convex_combination_of_values():
    rng = np.random.default_rng(3)
    xp, wq, wk, wv = random_qkv(rng, d=5, q=3)
    tr = calibrated_attention(xp, rng.uniform(size=3), wq, wk, wv, 3.0)
    v = xp @ wv
    for z in tr.context:
        # barycentric coordinates of z with respect to the three value vectors
        coeffs = np.linalg.solve(v @ v.T, v @ z)
        np.testing.assert_allclose(v.T @ coeffs, z, atol=1e-8)
        assert abs(coeffs.sum() - 1) < 1e-8 and np.all(coeffs >= -1e-8)


def test_raising_a_task_sigma_lowers_its_column_mass():
    rng = np.random.default_rng(4)
    xp, wq, wk, wv = random_qkv(rng)
    base = np.array([0.1, 0.2, 0.1])
    masses = []
    for s in np.linspace(0.0, 1.0, 11):
        sigma = base.copy()
        sigma[1] = s
        masses.append(calibrated_attention(xp, sigma, wq, wk, wv, 2.0).weights[:, 1].sum())
    assert np.all(np.diff(masses) < 0)


def test_negative_sigma_rejected():
    rng = np.random.default_rng(5)
    xp, wq, wk, wv = random_qkv(rng)
    with pytest.raises(ValueError):
        calibrated_attention(xp, np.array([0.1, -0.1, 0.0]), wq, wk, wv, 1.0)


def test_batched_attention_matches_unbatched():
    rng = np.random.default_rng(6)
    xp, wq, wk, wv = random_qkv(rng, batch=4)
    sigma = rng.uniform(size=(4, 3))
    batched = calibrated_attention(xp, sigma, wq, wk, wv, 1.5)
    for b in range(4):
        single = calibrated_attention(xp[b], sigma[b], wq, wk, wv, 1.5)
        np.testing.assert_allclose(batched.weights[b], single.weights, atol=1e-14)


# -- projection and forward ------------------------------------------------------------


def test_projection_without_dropout_is_deterministic():
    model = UfnetModel(small_config(dropout=0.0), DIMS, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(3, 7))
    a = model.project("tapping", x, np.random.default_rng(2), mc=True).data
    b = model.project("tapping", x, np.random.default_rng(3), mc=True).data
    np.testing.assert_array_equal(a, b)


def test_projection_of_zero_input_is_the_shift():
    model = UfnetModel(small_config(), DIMS, np.random.default_rng(0))
    shift = model.proj["smile"][3]
    shift.data = np.linspace(-1, 1, 8)
    out = model.project("smile", np.zeros((2, 5))).data
    np.testing.assert_allclose(out, np.tile(shift.data, (2, 1)), atol=1e-12)


def test_projection_gradient():
    rng = np.random.default_rng(7)
    model = UfnetModel(small_config(), DIMS, rng)
    x = rng.normal(size=(4, 9))
    target = rng.normal(size=(8, 1))

    def f():
        h = model.project("speech", x, np.random.default_rng(0), mc=True)
        return nx.matmul(nx.reshape(h, (1, 32)), np.tile(target, (4, 1)))

    assert nx.grad_check(f, list(model.proj["speech"])) < 1e-4


def test_projection_dimension_mismatch():
    model = UfnetModel(small_config(), DIMS, np.random.default_rng(0))
    with pytest.raises(ValueError, match="expected 7"):
        model.project("tapping", np.zeros((1, 6)))


@pytest.mark.parametrize("mode,extra", [("hybrid", 3), ("early", 0)])
def test_head_input_width(mode, extra):
    cfg = small_config(fusion_mode=mode)
    model = UfnetModel(cfg, DIMS, np.random.default_rng(0))
    assert cfg.head_input_dim == 3 * cfg.qkv_dim + extra
    assert model.head[0][0].shape[0] == 3 * cfg.qkv_dim + extra


def test_no_dropout_gives_zero_sigma():
    data = fusion_data(20)
    model = train_ufnet(data, small_config(dropout=0.0, epochs=2))
    batch = model.predict(data, 30, np.random.default_rng(0))
    assert np.all(batch.sigma == 0)
    single = model.predict(data, 1, np.random.default_rng(0))
    # a mean over identical rounds can differ from one round in the last bit
    np.testing.assert_allclose(batch.mu, single.mu, rtol=0, atol=1e-15)


def test_missing_task_is_rejected():
    data = fusion_data(20)
    model = UfnetModel(small_config(), DIMS, np.random.default_rng(0))
    with pytest.raises(ValueError):
        model.predict(restrict(data, ("smile", "speech")), 2, np.random.default_rng(0))
    with pytest.raises(ValueError, match="missing"):
        FusionData(("tapping", "smile"), {"tapping": np.zeros((2, 7))}, np.zeros((2, 2)), np.zeros((2, 2)),
                   np.zeros(2), np.array(["a", "b"]), np.array(["a", "b"]))


def test_invalid_config():
    with pytest.raises(nx.ConfigError):
        UfnetConfig(eta=-1.0)
    with pytest.raises(nx.ConfigError):
        UfnetConfig(fusion_mode="late")
    with pytest.raises(nx.ConfigError):
        UfnetConfig(tasks=("smile",))


# -- training ------------------------------------------------------------------------


def test_full_preset_loads_and_trains():
    cfg = presets.get("ufnet-all")
    assert (cfg["projection_dim"], cfg["qkv_dim"], cfg["hidden_width"]) == (512, 64, 128)
    assert (cfg["dropout"], cfg["eta"], cfg["mc_rounds"]) == (0.4959892, 81.8179035, 30)
    assert (cfg["learning_rate"], cfg["momentum"], cfg["epochs"]) == (0.020724, 0.689782158, 164)
    assert (cfg["batch_size"], cfg["seed"]) == (1024, 242)
    data = fusion_data(60)
    model = train_ufnet(data, UfnetConfig.from_dict(cfg))
    assert len(model.history["train_loss"]) == 164
    batch = model.predict(data, None, np.random.default_rng(0))
    assert batch.n == 30 and np.all(np.isfinite(batch.mu))


def test_training_is_deterministic():
    data = fusion_data(80)
    a = train_ufnet(data, small_config(oversample="smote"))
    b = train_ufnet(data, small_config(oversample="smote"))
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_model_roundtrip():
    data = fusion_data(40)
    model = train_ufnet(data, small_config(epochs=3))
    again = UfnetModel.from_dict(json.loads(json.dumps(model.to_dict())))
    np.testing.assert_array_equal(again.predict(data, 5, np.random.default_rng(1)).mu,
                                  model.predict(data, 5, np.random.default_rng(1)).mu)


def test_ufnet_learns_the_signal():
    train, test = fusion_data(300, seed=1), fusion_data(200, seed=2, prefix="t")
    model = train_ufnet(train, small_config(epochs=40))
    assert auroc(model.predict(test, 20, np.random.default_rng(0)).mu, test.labels) > 0.85


def test_two_task_configuration_ignores_missing_task():
    data = fusion_data(80)
    two = restrict(data, ("smile", "speech"))
    two.features.pop("tapping", None)
    model = train_ufnet(two, small_config(tasks=("smile", "speech"), epochs=3))
    assert model.config.head_input_dim == 2 * 4 + 2
    assert model.predict(two, 3, np.random.default_rng(0)).mu.shape == (80,)


def test_overlapping_train_and_val_subjects_rejected():
    data = fusion_data(40)
    with pytest.raises(ValueError, match="share subjects"):
        train_ufnet(data, small_config(), val=data)


def _task_models():
    rng = np.random.default_rng(0)
    out = {}
    for t, d in DIMS.items():
        X, y = rng.normal(size=(40, d)), rng.integers(0, 2, size=40)
        out[t] = train_task_model(X, y, None, None, TaskModelConfig(task=t, epochs=2))
    return out


def test_task_models_stay_frozen():
    models = _task_models()
    before = {t: m.fingerprint() for t, m in models.items()}
    model = train_ufnet(fusion_data(40), small_config(epochs=2), task_models=models)
    assert {t: m.fingerprint() for t, m in models.items()} == before
    assert model.task_fingerprints == before


def test_mutated_task_model_is_detected(monkeypatch):
    models = _task_models()
    original = fu.train_network

    def mutating(*args, **kwargs):
        models["smile"].net.layers[0][0].data[0, 0] += 1.0
        return original(*args, **kwargs)

    monkeypatch.setattr(fu, "train_network", mutating)
    with pytest.raises(FrozenModelError):
        train_ufnet(fusion_data(40), small_config(epochs=1), task_models=models)


def test_eta_sweep_moves_attention_off_the_noisy_task():
    data = fusion_data(60)
    data.sigma[:, 2] = data.sigma[:, :2].max(axis=1) + 0.1
    model = train_ufnet(data, small_config(epochs=5))
    mass = [model.attention_weights(data, eta)[:, :, 2].sum(axis=1).mean() for eta in (0, 0.1, 1, 10, 100)]
    assert np.all(np.diff(mass) < 0)


# -- baselines -----------------------------------------------------------------------


@pytest.mark.parametrize("votes,expected", [((1, 1, 0), 1), ((0, 0, 0), 0), ((1, 0, 1), 1)])
def test_majority(votes, expected):
    assert baseline_majority(votes) == expected


def test_majority_needs_three_votes():
    with pytest.raises(ValueError):
        baseline_majority([1, 0])


def test_majority_predict_matches_scalar_rule():
    data = fusion_data(50)
    preds = majority_predict(data)
    for row, p in zip(data.mu, preds):
        assert baseline_majority(row > 0.5) == p
    share = MajorityVote().predict(data)
    np.testing.assert_array_equal(share.mu > 0.5, preds.astype(bool))


def test_baseline_input_widths():
    data = fusion_data(10)
    assert baseline_inputs(data, "late").shape == (10, 3)
    assert baseline_inputs(data, "early").shape == (10, sum(DIMS.values()))
    assert baseline_inputs(data, "hybrid").shape == (10, sum(DIMS.values()) + 3)
    np.testing.assert_allclose(baseline_inputs(data, "late"), np.log(data.mu / (1 - data.mu)))


@pytest.mark.parametrize("builder", [baseline_late, baseline_early, baseline_hybrid])
def test_baselines_train(builder):
    train, val = fusion_data(80), fusion_data(30, seed=3, prefix="v")
    cfg = TaskModelConfig(hidden_layers=1, hidden_width=8, dropout=0.2, mc_rounds=5, epochs=5)
    model = builder(train, val, cfg)
    batch = model.predict(val, None, np.random.default_rng(0))
    assert batch.mu.shape == (30,) and batch.n == 5
    again = fu.BaselineModel.from_dict(json.loads(json.dumps(model.to_dict())))
    np.testing.assert_array_equal(again.predict(val, 3, np.random.default_rng(1)).mu,
                                  model.predict(val, 3, np.random.default_rng(1)).mu)


def test_train_fusion_holds_out_calibration_subjects():
    data = fusion_data(100)
    run = train_fusion(data, None, {}, "ufnet", small_config(epochs=2), seed=4, calibration_fraction=0.2)
    assert run.calibration is not None and len(run.calibration) == pytest.approx(20, abs=2)
    assert run.model.config.seed == 4
