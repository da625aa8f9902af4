"""Glue between cohorts, frozen task models, fusion models and withholding."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import presets
from .data import SplitPlan, check_disjoint, fold_sessions
from .fusion import (
    BaselineModel,
    FusionData,
    UfnetConfig,
    UfnetModel,
    majority_predict,
    train_baseline,
    train_ufnet,
)
from .metrics import EvalReport, evaluate
from .task_model import McBatch, TaskModel, TaskModelConfig, train_task_model
from .uncertainty import (
    NON_PD,
    PD,
    ConformalCalibrator,
    PlattScaler,
    Reason,
    conformal_sets,
    fit_conformal,
    fit_platt,
    logit,
)

logger = logging.getLogger(__name__)

WITHHOLD_POLICIES = ("none", "mc-ci", "conformal")


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, *keys)``."""
    words = [int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little") for k in keys]
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(words)))


def task_config(preset_or_dict, **overrides) -> TaskModelConfig:
    d = presets.get(preset_or_dict) if isinstance(preset_or_dict, str) else dict(preset_or_dict)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return TaskModelConfig.from_dict(d)


def ufnet_config(preset_or_dict, **overrides) -> UfnetConfig:
    d = presets.get(preset_or_dict, "ufnet") if isinstance(preset_or_dict, str) else dict(preset_or_dict)
    d.update({k: v for k, v in overrides.items() if v is not None})
    return UfnetConfig.from_dict(d)


def task_arrays(sessions, task: str):
    rows = [s for s in sessions if task in s.features]
    if not rows:
        return np.zeros((0, 0)), np.zeros(0, dtype=int), np.array([], dtype=object)
    X = np.vstack([s.features[task] for s in rows])
    y = np.array([s.label for s in rows], dtype=int)
    subjects = np.array([s.subject_id for s in rows], dtype=object)
    return X, y, subjects


def train_on_split(sessions, plan: SplitPlan, config: TaskModelConfig, task: str | None = None) -> TaskModel:
    """Train one task model on every training-fold session that has the task."""
    task = task or config.task
    check_disjoint(plan, sessions)
    Xtr, ytr, str_ = task_arrays(fold_sessions(sessions, plan, "train"), task)
    Xva, yva, sva = task_arrays(fold_sessions(sessions, plan, "val"), task)
    if Xtr.shape[0] == 0:
        raise ValueError(f"no training sessions carry task {task!r}")
    return train_task_model(Xtr, ytr, Xva if len(yva) else None, yva if len(yva) else None, config,
                            train_subjects=str_, val_subjects=sva)


def train_task_models(sessions, plan: SplitPlan, configs: dict[str, TaskModelConfig]) -> dict[str, TaskModel]:
    return {task: train_on_split(sessions, plan, cfg, task) for task, cfg in configs.items()}


def fusion_data(sessions, task_models: dict[str, TaskModel], tasks, stream: str,
                mc_rounds: int | None = None) -> FusionData:
    """Complete sessions with the frozen task models' MC mean/std attached."""
    tasks = tuple(tasks)
    rows = [s for s in sessions if s.has(tasks)]
    if not rows:
        raise ValueError(f"no sessions carry all of {tasks}")
    features = {t: np.vstack([s.features[t] for s in rows]) for t in tasks}
    mu = np.empty((len(rows), len(tasks)))
    sigma = np.empty_like(mu)
    for j, t in enumerate(tasks):
        model = task_models[t]
        batch = model.predict_batch(features[t], mc_rounds, substream(model.config.seed, "mc", stream, t))
        mu[:, j], sigma[:, j] = batch.mu, batch.sigma
    return FusionData(
        tasks, features, mu, sigma,
        np.array([s.label for s in rows], dtype=int),
        np.array([s.subject_id for s in rows], dtype=object),
        np.array([s.session_id for s in rows], dtype=object),
    )


def split_fusion(sessions, plan: SplitPlan, task_models, tasks, mc_rounds: int | None = None) -> dict[str, FusionData]:
    check_disjoint(plan, sessions)
    return {fold: fusion_data(fold_sessions(sessions, plan, fold, tasks), task_models, tasks, fold, mc_rounds)
            for fold in ("train", "val", "test")}


def calibration_split(data: FusionData, fraction: float = 0.2, seed: int = 0) -> tuple[FusionData, FusionData]:
    """Subject-level stratified split of training rows into (fit, calibration)."""
    rng = np.random.default_rng(seed)
    subjects = {}
    for sid, y in zip(data.subjects, data.labels):
        subjects[sid] = int(y)
    cal: set = set()
    for cls in (0, 1):
        members = sorted(s for s, y in subjects.items() if y == cls)
        order = [members[i] for i in rng.permutation(len(members))]
        cal.update(order[: round(fraction * len(members))])
    is_cal = np.array([s in cal for s in data.subjects])
    return data.subset(np.flatnonzero(~is_cal)), data.subset(np.flatnonzero(is_cal))


@dataclass
class WithholdResult:
    report: EvalReport
    probs: np.ndarray
    withheld: np.ndarray
    reasons: list[str | None]
    predicted: np.ndarray


def platt_on(val_probs, val_labels) -> PlattScaler:
    return fit_platt(logit(val_probs), val_labels)


def apply_withholding(
    batch: McBatch,
    labels,
    policy: str = "none",
    calibrator: ConformalCalibrator | None = None,
    platt: PlattScaler | None = None,
    threshold: float = 0.5,
) -> WithholdResult:
    """Evaluate predictions under an abstention policy.

    ``mc-ci`` withholds when the MC confidence interval contains the
    threshold. ``conformal`` withholds when the split-conformal set is not
    a singleton; the score used is the (optionally Platt-calibrated) MC mean.
    """
    if policy not in WITHHOLD_POLICIES:
        raise ValueError(f"unknown withholding policy {policy!r}; expected one of {WITHHOLD_POLICIES}")
    probs = batch.mu if platt is None else platt.transform(batch.mu)
    n = probs.size
    reasons: list[str | None] = [None] * n
    withheld = np.zeros(n, dtype=bool)
    predicted = (probs > threshold).astype(int)
    if policy == "mc-ci":
        lo, hi = batch.ci_low, batch.ci_high
        if platt is not None:
            lo, hi = platt.transform(lo), platt.transform(hi)
        withheld = (lo <= threshold) & (threshold <= hi)
        reasons = [Reason.CI_STRADDLES.value if w else None for w in withheld]
    elif policy == "conformal":
        if calibrator is None:
            raise ValueError("conformal withholding needs a fitted calibrator")
        has_pd, has_non = conformal_sets(calibrator, probs)
        size = has_pd.astype(int) + has_non.astype(int)
        withheld = size != 1
        predicted = np.where(size == 1, np.where(has_pd, PD, NON_PD), predicted)
        reasons = [None if s == 1 else (Reason.CONFORMAL_AMBIGUOUS.value if s == 2 else Reason.CONFORMAL_EMPTY.value)
                   for s in size]
    report = evaluate(probs, labels, withheld, threshold)
    return WithholdResult(report, probs, withheld, reasons, predicted)


def conformal_from(batch_cal: McBatch, cal_labels, alpha: float, platt: PlattScaler | None = None) -> ConformalCalibrator:
    probs = batch_cal.mu if platt is None else platt.transform(batch_cal.mu)
    return fit_conformal(probs, cal_labels, alpha)


def with_seed(config, seed: int):
    return replace(config, seed=seed)


# -- seed-level fusion runs -----------------------------------------------------------

FUSION_KINDS = ("ufnet", "majority", "late", "early", "hybrid")


class MajorityVote:
    """Untrained majority-of-three baseline; its "probability" is the PD vote share."""

    kind = "majority"

    def predict(self, data: FusionData, n: int | None = None, rng=None) -> McBatch:
        votes = (data.mu > 0.5).astype(float)
        majority_predict(data)  # validates the three-task shape
        share = votes.mean(axis=1)
        return McBatch(share, np.zeros_like(share), 1, share.copy(), share.copy())

    def to_dict(self) -> dict:
        return {"kind": "baseline-majority"}


@dataclass
class FusionRun:
    """One trained fusion model plus the training subjects it held out for calibration."""

    kind: str
    seed: int
    model: UfnetModel | BaselineModel | MajorityVote
    calibration: FusionData | None = None

    def predict(self, data: FusionData, fold: str, mc_rounds: int | None = None) -> McBatch:
        return self.model.predict(data, mc_rounds, substream(self.seed, "eval", fold))


def train_fusion(
    train: FusionData,
    val: FusionData | None,
    task_models: dict[str, TaskModel],
    kind: str,
    config,
    seed: int,
    calibration_fraction: float = 0.0,
) -> FusionRun:
    """Train UFNet or a baseline for one seed.

    With ``calibration_fraction > 0`` that share of training subjects
    (stratified) is held out and kept on the run for split conformal.
    """
    if kind not in FUSION_KINDS:
        raise ValueError(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")
    calibration = None
    if calibration_fraction > 0:
        train, calibration = calibration_split(train, calibration_fraction, seed)
    if kind == "majority":
        return FusionRun(kind, seed, MajorityVote(), calibration)
    config = replace(config, seed=seed)
    if kind == "ufnet":
        model = train_ufnet(train, config, val, task_models)
    else:
        model = train_baseline(kind, train, val, config, task_models)
    return FusionRun(kind, seed, model, calibration)


def evaluate_run(
    run: FusionRun,
    test: FusionData,
    val: FusionData | None = None,
    policy: str = "none",
    alpha: float = 0.05,
    use_platt: bool = False,
    mc_rounds: int | None = None,
) -> WithholdResult:
    """Test-set evaluation of a run under a withholding policy.

    Platt parameters are fitted on the validation fold; conformal scores
    come from the run's held-out calibration subjects.
    """
    platt = None
    if use_platt:
        if val is None:
            raise ValueError("Platt scaling needs the validation fold")
        platt = platt_on(run.predict(val, "val", mc_rounds).mu, val.labels)
    calibrator = None
    if policy == "conformal":
        if run.calibration is None:
            raise ValueError("conformal withholding needs a model trained with a calibration fraction")
        calibrator = conformal_from(run.predict(run.calibration, "calibration", mc_rounds),
                                    run.calibration.labels, alpha, platt)
    return apply_withholding(run.predict(test, "test", mc_rounds), test.labels, policy, calibrator, platt)
