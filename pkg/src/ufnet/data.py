"""Session tables, subject-separated splits and synthetic multimodal cohorts."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

TASK_WIDTHS = {"tapping": 130, "smile": 42, "speech": 1024}
TASKS = tuple(TASK_WIDTHS)
ID_COLUMNS = ("subject_id", "session_id", "label")
DEMOGRAPHIC_COLUMNS = ("sex", "age", "ethnicity", "cohort", "disease_duration")
UNKNOWN = {"", "unknown", "na", "nan", "none", "null"}
FOLDS = ("train", "val", "test")


class DataContractError(ValueError):
    """Input data violates the CSV or split contract."""


def parse_label(value: str) -> int:
    v = str(value).strip().lower().replace("_", "-")
    if v in ("1", "pd", "1.0", "true"):
        return 1
    if v in ("0", "non-pd", "nonpd", "0.0", "false", "non pd", "control"):
        return 0
    raise DataContractError(f"unrecognised label {value!r}")


def _demographic(value: str):
    v = value.strip()
    return None if v.lower() in UNKNOWN else v


@dataclass
class Session:
    """One participant-session: available task features, label, demographics."""

    subject_id: str
    session_id: str
    label: int
    features: dict[str, np.ndarray] = field(default_factory=dict)
    demographics: dict[str, str | None] = field(default_factory=dict)

    def has(self, tasks) -> bool:
        return all(t in self.features for t in tasks)

    @property
    def key(self) -> tuple[str, str]:
        return self.subject_id, self.session_id


@dataclass
class Fragment:
    subject_id: str
    session_id: str
    task: str
    label: int
    features: np.ndarray
    demographics: dict[str, str | None]


def load_column_map(path: str | Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def load_task_csv(path: str | Path, task: str, width: int | None = None, column_map: dict | None = None) -> list[Fragment]:
    """Read one task's feature table.

    The header holds ``subject_id, session_id, label``, any demographic
    columns, then the feature columns. ``column_map`` may rename source
    columns (``{"columns": {"src": "subject_id"}}``), restrict features to
    a prefix (``{"feature_prefix": {"smile": "f_"}}``) or declare widths
    (``{"widths": {"smile": 42}}``).
    """
    column_map = column_map or {}
    rename = column_map.get("columns", {})
    prefix = column_map.get("feature_prefix", {}).get(task)
    if width is None:
        width = column_map.get("widths", {}).get(task, TASK_WIDTHS.get(task))
    path = Path(path)
    fragments: list[Fragment] = []
    seen: set[tuple[str, str]] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [rename.get(h.strip(), h.strip()) for h in next(reader)]
        except StopIteration:
            raise DataContractError(f"{path}: empty file") from None
        missing = [c for c in ID_COLUMNS if c not in header]
        if missing:
            raise DataContractError(f"{path}: header lacks required column(s) {missing}")
        index = {name: i for i, name in enumerate(header)}
        demo_cols = [c for c in DEMOGRAPHIC_COLUMNS if c in index]
        reserved = set(ID_COLUMNS) | set(DEMOGRAPHIC_COLUMNS)
        feat_idx = [i for i, name in enumerate(header)
                    if name not in reserved and (prefix is None or name.startswith(prefix))]
        if width is not None and len(feat_idx) != width:
            raise DataContractError(
                f"{path}: header declares {len(feat_idx)} {task} feature columns, expected {width}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                n_feat = len(row) - (len(header) - len(feat_idx))
                raise DataContractError(
                    f"{path}:{line_no}: expected {len(feat_idx)} {task} features, got {n_feat}"
                )
            try:
                values = np.array([float(row[i]) for i in feat_idx], dtype=np.float64)
            except ValueError as exc:
                raise DataContractError(f"{path}:{line_no}: unparseable feature value ({exc})") from None
            if not np.all(np.isfinite(values)):
                raise DataContractError(f"{path}:{line_no}: non-finite feature value")
            sid, sess = row[index["subject_id"]].strip(), row[index["session_id"]].strip()
            if (sid, sess) in seen:
                raise DataContractError(f"{path}:{line_no}: duplicate session ({sid}, {sess}) for task {task}")
            seen.add((sid, sess))
            try:
                label = parse_label(row[index["label"]])
            except DataContractError as exc:
                raise DataContractError(f"{path}:{line_no}: {exc}") from None
            demo = {c: _demographic(row[index[c]]) for c in demo_cols}
            fragments.append(Fragment(sid, sess, task, label, values, demo))
    return fragments


def join_fragments(fragments) -> list[Session]:
    """Merge per-task fragments into sessions keyed by (subject, session)."""
    sessions: dict[tuple[str, str], Session] = {}
    for f in fragments:
        key = (f.subject_id, f.session_id)
        s = sessions.get(key)
        if s is None:
            s = sessions[key] = Session(f.subject_id, f.session_id, f.label)
        elif s.label != f.label:
            raise DataContractError(f"session {key} has conflicting labels across tasks")
        if f.task in s.features:
            raise DataContractError(f"session {key} has duplicate {f.task} rows")
        s.features[f.task] = f.features
        for k, v in f.demographics.items():
            if s.demographics.get(k) is None:
                s.demographics[k] = v
    return sorted(sessions.values(), key=lambda s: s.key)


def load_cohort(paths: dict[str, str | Path], column_map: dict | None = None,
                widths: dict[str, int] | None = None) -> list[Session]:
    frags: list[Fragment] = []
    for task, p in paths.items():
        frags.extend(load_task_csv(p, task, (widths or {}).get(task), column_map))
    return join_fragments(frags)


def write_task_csv(sessions, task: str, path: str | Path) -> int:
    """Write the sessions that have ``task`` in the canonical layout; returns rows written."""
    rows = [s for s in sessions if task in s.features]
    if not rows:
        raise DataContractError(f"no sessions carry task {task!r}")
    width = rows[0].features[task].size
    demo_cols = [c for c in DEMOGRAPHIC_COLUMNS if any(c in s.demographics for s in rows)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*ID_COLUMNS, *demo_cols, *[f"{task}_{i}" for i in range(width)]])
        for s in rows:
            demo = ["unknown" if s.demographics.get(c) is None else s.demographics[c] for c in demo_cols]
            w.writerow([s.subject_id, s.session_id, "PD" if s.label else "non-PD", *demo,
                        *[repr(float(v)) for v in s.features[task]]])
    return len(rows)


def subject_table(sessions) -> dict[str, dict]:
    """Per-subject label and demographics (first known value wins)."""
    out: dict[str, dict] = {}
    for s in sessions:
        entry = out.setdefault(s.subject_id, {"label": s.label, **{c: None for c in DEMOGRAPHIC_COLUMNS}})
        if entry["label"] != s.label:
            raise DataContractError(f"subject {s.subject_id!r} has sessions with different labels")
        for k, v in s.demographics.items():
            if entry.get(k) is None:
                entry[k] = v
    return out


def write_subjects_csv(sessions, path: str | Path) -> None:
    table = subject_table(sessions)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label", *DEMOGRAPHIC_COLUMNS])
        for sid in sorted(table):
            e = table[sid]
            w.writerow([sid, "PD" if e["label"] else "non-PD",
                        *["unknown" if e[c] is None else e[c] for c in DEMOGRAPHIC_COLUMNS]])


def read_subjects_csv(path: str | Path) -> dict[str, dict]:
    out: dict[str, dict] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                label = parse_label(row["label"])
            except (KeyError, DataContractError) as exc:
                raise DataContractError(f"{path}:{line_no}: {exc}") from None
            out[row["subject_id"]] = {"label": label,
                                      **{c: _demographic(row.get(c) or "") for c in DEMOGRAPHIC_COLUMNS}}
    return out


# -- splits ---------------------------------------------------------------------


@dataclass
class SplitPlan:
    assignment: dict[str, str]
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def fold_of(self, subject_id: str) -> str:
        try:
            return self.assignment[subject_id]
        except KeyError:
            raise DataContractError(f"subject {subject_id!r} is not in the split plan") from None

    def subjects(self, fold: str) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "seed": self.seed,
                "assignment": dict(sorted(self.assignment.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        plan = cls(dict(d["assignment"]), tuple(d["ratios"]), d["seed"])
        bad = {f for f in plan.assignment.values()} - set(FOLDS)
        if bad:
            raise DataContractError(f"split plan has unknown fold names {sorted(bad)}")
        return plan

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def make_split(subject_labels: dict[str, int], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitPlan:
    """Stratified subject-level train/val/test assignment.

    Subjects of each class are shuffled with a seeded generator and cut
    by ``ratios`` (rounded), so every session of a subject shares a fold.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DataContractError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for cls in (0, 1):
        members = sorted(s for s, y in subject_labels.items() if int(y) == cls)
        if len(members) < 5:
            raise DataContractError(f"class {cls} has {len(members)} subjects; need at least 5")
        order = [members[i] for i in rng.permutation(len(members))]
        n_train = round(ratios[0] * len(members))
        n_val = round(ratios[1] * len(members))
        for i, sid in enumerate(order):
            assignment[sid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return SplitPlan(assignment, tuple(ratios), seed)


def check_disjoint(plan: SplitPlan, sessions) -> None:
    """Every session's subject must map to exactly one fold."""
    for s in sessions:
        plan.fold_of(s.subject_id)
    folds: dict[str, set] = {f: set() for f in FOLDS}
    for sid, f in plan.assignment.items():
        folds[f].add(sid)
    for a in FOLDS:
        for b in FOLDS:
            if a < b and folds[a] & folds[b]:
                raise DataContractError(f"subjects shared between {a} and {b}")


def fold_sessions(sessions, plan: SplitPlan, fold: str, tasks=None) -> list[Session]:
    return [s for s in sessions if plan.fold_of(s.subject_id) == fold and (tasks is None or s.has(tasks))]


# -- synthetic cohorts ----------------------------------------------------------


def effect_for_auroc(auroc: float, informative: int, variance: float = 1.0) -> float:
    """Per-dimension mean shift giving a Gaussian Bayes AUROC of ``auroc``."""
    separation = math.sqrt(2.0) * norm.ppf(auroc)
    return separation * math.sqrt(variance) / math.sqrt(informative)


@dataclass
class SyntheticCohortSpec:
    """Class-conditional Gaussian cohort.

    For task ``t`` the first ``informative[t]`` dimensions of a PD session
    are shifted by ``effect[t]``; the rest are pure noise. Informative
    dimensions carry a subject-level random effect (std ``subject_noise``,
    correlated across tasks by ``inter_task_correlation``) plus session
    noise (std ``noise``).

    Uninformative dimensions of a task listed in ``noise_rank`` are drawn
    from ``noise_rank[t]`` shared latent factors plus an isotropic residual
    of std ``residual_noise``, mimicking the low effective rank of learned
    embeddings; the other tasks get independent unit-variance noise.
    """

    n_subjects: int = 1000
    prevalence: float = 0.322
    session_probs: tuple[float, ...] = (0.75, 0.2, 0.05)
    widths: dict[str, int] = field(default_factory=lambda: dict(TASK_WIDTHS))
    informative: dict[str, int] = field(default_factory=lambda: {"tapping": 12, "smile": 8, "speech": 24})
    effect: dict[str, float] = field(default_factory=dict)
    target_auroc: dict[str, float] = field(default_factory=lambda: {"tapping": 0.75, "smile": 0.83, "speech": 0.87})
    inter_task_correlation: float = 0.0
    subject_noise: float = 0.6
    noise: float = 0.8
    missing_rate: dict[str, float] = field(default_factory=lambda: {"tapping": 0.12, "smile": 0.05, "speech": 0.06})
    female_signal_scale: float = 1.0
    noise_rank: dict[str, int] = field(default_factory=lambda: {"tapping": 4, "smile": 4, "speech": 8})
    residual_noise: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError(f"prevalence must be in (0, 1), got {self.prevalence}")
        if self.n_subjects < 10:
            raise ValueError("a cohort needs at least 10 subjects")
        if abs(sum(self.session_probs) - 1.0) > 1e-9:
            raise ValueError("session_probs must sum to 1")
        if not 0.0 <= self.inter_task_correlation <= 1.0:
            raise ValueError("inter_task_correlation must be in [0, 1]")
        for t, w in self.widths.items():
            if self.informative.get(t, 0) > w:
                raise ValueError(f"task {t!r}: more informative dims than its width")
        for t in self.widths:
            if t not in self.effect:
                auc = self.target_auroc.get(t, 0.5)
                self.effect[t] = effect_for_auroc(auc, max(self.informative.get(t, 1), 1), self.variance)
        self.session_probs = tuple(self.session_probs)

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.widths)

    @property
    def variance(self) -> float:
        return self.subject_noise**2 + self.noise**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["session_probs"] = list(self.session_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCohortSpec":
        return cls(**d)

    def class_means(self, task: str) -> tuple[np.ndarray, np.ndarray]:
        w = self.widths[task]
        m1 = np.zeros(w)
        m1[: self.informative.get(task, 0)] = self.effect[task]
        return np.zeros(w), m1

    def informative_covariance(self, tasks) -> np.ndarray:
        """Per-session covariance of the stacked informative dims of ``tasks``."""
        tasks = list(tasks)
        sizes = [self.informative.get(t, 0) for t in tasks]
        n = sum(sizes)
        cov = np.zeros((n, n))
        offsets = np.cumsum([0] + sizes)
        shared = self.inter_task_correlation * self.subject_noise**2
        for a, ta in enumerate(tasks):
            for b, tb in enumerate(tasks):
                k = min(sizes[a], sizes[b])
                block = np.zeros((sizes[a], sizes[b]))
                if a == b:
                    block = np.eye(k) * self.variance
                else:
                    block[:k, :k] = np.eye(k) * shared
                cov[offsets[a]:offsets[a + 1], offsets[b]:offsets[b + 1]] = block
        return cov

    def bayes_separation(self, tasks) -> float:
        tasks = list(tasks)
        delta = np.concatenate([np.full(self.informative.get(t, 0), self.effect[t]) for t in tasks])
        if delta.size == 0:
            return 0.0
        cov = self.informative_covariance(tasks)
        return float(math.sqrt(delta @ np.linalg.solve(cov, delta)))

    def bayes_auroc(self, tasks) -> float:
        """Closed-form AUROC of the optimal classifier on ``tasks``."""
        return float(norm.cdf(self.bayes_separation(tasks) / math.sqrt(2.0)))


def gen_synthetic_cohort(spec: SyntheticCohortSpec) -> list[Session]:
    """Sample sessions from ``spec``; fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_subjects
    n_pd = int(round(spec.prevalence * n))
    labels = np.zeros(n, dtype=int)
    labels[rng.permutation(n)[:n_pd]] = 1
    tasks = spec.tasks
    max_inf = max([spec.informative.get(t, 0) for t in tasks] + [1])
    rho = spec.inter_task_correlation
    loadings = {}
    for t in tasks:
        r = spec.noise_rank.get(t, 0)
        if r:
            loadings[t] = rng.standard_normal((r, spec.widths[t] - spec.informative.get(t, 0))) / math.sqrt(r)
    sessions: list[Session] = []
    digits = len(str(n - 1))
    for i in range(n):
        y = int(labels[i])
        sid = f"S{i:0{digits}d}"
        demo = _sample_demographics(rng, y)
        scale = spec.female_signal_scale if demo["sex"] == "F" else 1.0
        shared = rng.standard_normal(max_inf)
        subject_effect = {}
        for t in tasks:
            k = spec.informative.get(t, 0)
            own = rng.standard_normal(k)
            subject_effect[t] = spec.subject_noise * (math.sqrt(rho) * shared[:k] + math.sqrt(1.0 - rho) * own)
        n_sessions = 1 + int(rng.choice(len(spec.session_probs), p=spec.session_probs))
        for j in range(n_sessions):
            present = [t for t in tasks if rng.random() >= spec.missing_rate.get(t, 0.0)]
            if not present:
                present = [tasks[int(rng.integers(len(tasks)))]]
            feats = {}
            for t in tasks:
                x = rng.standard_normal(spec.widths[t])
                k = spec.informative.get(t, 0)
                x[:k] = x[:k] * spec.noise + subject_effect[t] + y * spec.effect[t] * scale
                if t in loadings:
                    factors = rng.standard_normal(loadings[t].shape[0])
                    x[k:] = factors @ loadings[t] + spec.residual_noise * x[k:]
                if t in present:
                    feats[t] = x
            sessions.append(Session(sid, f"{sid}-{j}", y, feats, dict(demo)))
    return sessions


def _sample_demographics(rng: np.random.Generator, y: int) -> dict[str, str | None]:
    sex = "F" if rng.random() < 0.527 else "M"
    age = None if rng.random() < 0.117 else str(int(np.clip(round(rng.normal(61.9, 12.5)), 18, 93)))
    ethnicity = None if rng.random() < 0.17 else ("white" if rng.random() < 0.89 else "non-white")
    cohort = ("home", "clinic", "wellness")[int(rng.choice(3, p=(0.52, 0.23, 0.25)))]
    duration = None
    if y == 1 and rng.random() < 0.375:
        duration = str(int(rng.integers(1, 25)))
    return {"sex": sex, "age": age, "ethnicity": ethnicity, "cohort": cohort, "disease_duration": duration}
