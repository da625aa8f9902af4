"""Command-line experiment driver.

Every command writes its outputs plus a ``manifest.json`` (arguments, seeds,
code version, input hashes) into an output directory; ``ufnet rerun`` replays
a manifest. Exit codes: 0 success, 2 configuration or usage error, 3 data
contract violation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, data, experiment as ex, fusion, metrics, presets, search
from .numerics import ConfigError, NumericalError
from .task_model import TaskModel, TaskModelConfig

logger = logging.getLogger("ufnet")

OUTPUT_ENV = "UFNET_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
AGE_BUCKETS = ((18, 30), (30, 50), (50, 65), (65, 80), (80, 200))
DEFAULT_SMOOTHING = 0.1


class UsageError(Exception):
    """Bad combination of arguments or inputs; maps to exit code 2."""


# -- small helpers ---------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def subject_hash(subject_id: str) -> str:
    return hashlib.sha256(str(subject_id).encode()).hexdigest()[:16]


def code_version() -> str:
    """Package version plus a digest of the installed sources and presets."""
    h = hashlib.sha256()
    root = resources.files("ufnet")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".py")):
        h.update(name.encode())
        h.update(root.joinpath(name).read_bytes())
    h.update(root.joinpath("resources").joinpath("presets.json").read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise data.DataContractError(f"{path}: invalid JSON ({exc})") from None


def parse_seeds(args, default: int) -> list[int]:
    if args.seed_list:
        return [int(s) for s in args.seed_list.split(",")]
    if args.seeds:
        if args.seeds < 1:
            raise UsageError("--seeds must be at least 1")
        return list(range(args.seeds))
    return [default]


def parse_overrides(items) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def parse_pairs(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} expects task=path, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Run:
    """Output directory, input hashes and manifest of one command invocation."""

    def __init__(self, args, argv: list[str]):
        out = args.out or os.environ.get(OUTPUT_ENV) or os.path.join("runs", args.command)
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = args.command
        self.argv = argv
        self.inputs: dict[str, str] = {}
        self.seeds: list[int] = []

    def track(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"input file not found: {p}")
        self.inputs[str(p.resolve())] = sha256_file(p)
        return p

    def finish(self, config: dict) -> None:
        write_json(self.out / "manifest.json", {
            "command": self.command,
            "argv": self.argv,
            "config": config,
            "seeds": self.seeds,
            "code_version": code_version(),
            "inputs": dict(sorted(self.inputs.items())),
        })


def portable_argv(argv: list[str]) -> list[str]:
    """Drop ``--out`` and make file arguments absolute so a manifest can be replayed anywhere."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--out":
            skip = True
            continue
        if tok.startswith("--out="):
            continue
        if "=" in tok and not tok.startswith("-"):
            k, v = tok.split("=", 1)
            if os.path.exists(v):
                tok = f"{k}={os.path.abspath(v)}"
        elif not tok.startswith("-") and os.path.exists(tok):
            tok = os.path.abspath(tok)
        out.append(tok)
    return out


# -- data loading --------------------------------------------------------------------


def load_sessions(run: Run, items, tasks, column_map_path=None) -> list[data.Session]:
    """Load ``task=path`` items, or every ``<task>.csv`` from a single directory item."""
    column_map = data.load_column_map(run.track(column_map_path)) if column_map_path else None
    paths: dict[str, str] = {}
    for item in items or []:
        if "=" in item:
            paths.update(parse_pairs([item], "--data"))
        elif Path(item).is_dir():
            for t in tasks:
                p = Path(item) / f"{t}.csv"
                if p.is_file():
                    paths[t] = str(p)
        else:
            raise UsageError(f"--data expects task=path or a directory, got {item!r}")
    paths = {t: p for t, p in paths.items() if t in tasks}
    missing = [t for t in tasks if t not in paths]
    if missing:
        raise UsageError(f"no data file for task(s) {missing}")
    for p in paths.values():
        run.track(p)
    return data.load_cohort(paths, column_map)


def resolve_split(run: Run, sessions, split_path, split_seed: int) -> data.SplitPlan:
    if split_path:
        plan = data.SplitPlan.from_dict(read_json(run.track(split_path)))
    else:
        labels = {k: v["label"] for k, v in data.subject_table(sessions).items()}
        plan = data.make_split(labels, seed=split_seed)
        write_json(run.out / "split.json", plan.to_dict())
    data.check_disjoint(plan, sessions)
    return plan


def load_task_bundles(run: Run, items, tasks) -> tuple[dict[str, TaskModel], data.SplitPlan, dict[str, dict]]:
    """Load frozen task bundles and insist they were trained on one identical split."""
    paths = parse_pairs(items, "--task-bundles")
    missing = [t for t in tasks if t not in paths]
    if missing:
        raise UsageError(f"missing --task-bundles for task(s) {missing}")
    models, bundles, digests = {}, {}, set()
    for t in tasks:
        b = read_json(run.track(paths[t]))
        if b.get("kind") != "task-bundle":
            raise UsageError(f"{paths[t]} is not a task bundle")
        models[t] = TaskModel.from_dict(b["model"])
        bundles[t] = b
        digests.add(b["split_digest"])
    if len(digests) != 1:
        raise data.DataContractError("task bundles were trained on different data splits; refusing to fuse them")
    plan = data.SplitPlan.from_dict(bundles[tasks[0]]["split"])
    return models, plan, bundles


# -- reports ---------------------------------------------------------------------------


def report_table(title: str, rows: dict[str, dict]) -> str:
    cols = ["accuracy", "balanced_accuracy", "auroc", "auprc", "f1", "sensitivity", "specificity",
            "coverage", "ece", "brier"]
    width = max([len(k) for k in rows] + [10])
    cell = 15 if any(isinstance(v, dict) for r in rows.values() for v in r.values()) else 9
    lines = [title, " " * width + "  " + "  ".join(f"{c[:cell]:>{cell}}" for c in cols)]
    for name, r in rows.items():
        cells = []
        for c in cols:
            v = r.get(c)
            if isinstance(v, dict):
                cells.append(f"{v['mean']:.4f}±{v['half_width']:.4f}".rjust(cell))
            else:
                cells.append("n/a".rjust(cell) if v is None else f"{v:{cell}.4f}")
        lines.append(f"{name:<{width}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def summarize(reports: list[dict]) -> dict:
    if len(reports) == 1:
        return dict(reports[0])
    agg = metrics.aggregate_seeds(reports)
    return {m: {"mean": agg.mean[m], "half_width": agg.half_width[m]} for m in agg.mean}


# -- gen-synth / split -----------------------------------------------------------------


def cmd_gen_synth(args, run: Run) -> dict:
    spec_dict = read_json(run.track(args.spec)) if args.spec else {}
    for key in ("n_subjects", "seed", "prevalence"):
        value = getattr(args, key)
        if value is not None:
            spec_dict[key] = value
    try:
        spec = data.SyntheticCohortSpec.from_dict(spec_dict)
    except TypeError as exc:
        raise UsageError(f"invalid cohort spec: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"invalid cohort spec: {exc}") from None
    sessions = data.gen_synthetic_cohort(spec)
    rows = {t: data.write_task_csv(sessions, t, run.out / f"{t}.csv") for t in spec.tasks}
    data.write_subjects_csv(sessions, run.out / "subjects.csv")
    write_json(run.out / "cohort_spec.json", spec.to_dict())
    run.seeds = [spec.seed]
    summary = {
        "subjects": spec.n_subjects,
        "sessions": len(sessions),
        "complete_sessions": sum(s.has(spec.tasks) for s in sessions),
        "rows": rows,
        "bayes_auroc": {**{t: spec.bayes_auroc([t]) for t in spec.tasks}, "all": spec.bayes_auroc(spec.tasks)},
    }
    write_json(run.out / "report.json", summary)
    return spec.to_dict()


def cmd_split(args, run: Run) -> dict:
    if args.subjects:
        table = data.read_subjects_csv(run.track(args.subjects))
    else:
        table = data.subject_table(load_sessions(run, args.data, args.tasks.split(","), args.column_map))
    ratios = tuple(float(r) for r in args.ratios.split(","))
    plan = data.make_split({k: v["label"] for k, v in table.items()}, ratios, args.seed)
    write_json(run.out / "split.json", plan.to_dict())
    counts = {f: len(plan.subjects(f)) for f in data.FOLDS}
    write_json(run.out / "report.json", {"digest": plan.digest(), "subjects": counts})
    run.seeds = [args.seed]
    return {"ratios": list(ratios), "seed": args.seed}


# -- train-task ------------------------------------------------------------------------


def _task_seed_job(job):
    sessions, plan_dict, config_dict, task = job
    plan = data.SplitPlan.from_dict(plan_dict)
    config = TaskModelConfig.from_dict(config_dict)
    model = ex.train_on_split(sessions, plan, config, task)
    reports = {}
    for fold in ("val", "test"):
        X, y, _ = ex.task_arrays(data.fold_sessions(sessions, plan, fold), task)
        if len(y) and np.unique(y).size == 2:
            batch = model.predict_batch(X, None, ex.substream(config.seed, "eval", fold, task))
            reports[fold] = metrics.evaluate(batch.mu, y).to_dict()
    return model.to_dict(), reports


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_train_task(args, run: Run) -> dict:
    base = presets.get(args.preset, "task") if args.preset else {}
    base.update(parse_overrides(args.set))
    task = args.task or base.get("task")
    if not task:
        raise UsageError("--task is required when the preset does not name one")
    base["task"] = task
    if args.smoothing is not None:
        base["label_smoothing"] = args.smoothing
    if args.mc_rounds is not None:
        base["mc_rounds"] = args.mc_rounds
    config = TaskModelConfig.from_dict(base)
    sessions = load_sessions(run, args.data, [task], args.column_map)
    plan = resolve_split(run, sessions, args.split, args.split_seed)
    seeds = parse_seeds(args, config.seed)
    run.seeds = seeds
    jobs = [(sessions, plan.to_dict(), {**config.to_dict(), "seed": s}, task) for s in seeds]
    results = _map(_task_seed_job, jobs, args.workers)
    train_hashes = sorted(subject_hash(s) for s in plan.subjects("train"))
    per_seed = []
    for seed, (model_dict, reports) in zip(seeds, results):
        bundle = {"kind": "task-bundle", "task": task, "model": model_dict, "split": plan.to_dict(),
                  "split_digest": plan.digest(), "train_subject_hashes": train_hashes}
        name = "bundle.json" if len(seeds) == 1 else f"bundle_seed{seed}.json"
        write_json(run.out / name, bundle)
        per_seed.append({"seed": seed, "bundle": name, **reports})
    report = {"task": task, "config": config.to_dict(), "split_digest": plan.digest(), "seeds": per_seed}
    if len(seeds) > 1 and all("test" in r for r in per_seed):
        report["aggregate"] = metrics.aggregate_seeds([r["test"] for r in per_seed]).to_dict()
    write_json(run.out / "report.json", report)
    test_rows = {f"seed {r['seed']}": r["test"] for r in per_seed if "test" in r}
    if test_rows:
        (run.out / "report.txt").write_text(report_table(f"{task} test", test_rows), encoding="utf-8")
    return {"config": config.to_dict(), "task": task}


# -- fusion ----------------------------------------------------------------------------


def _fusion_config(kind: str, preset: str | None, tasks, overrides: dict, fusion_mode=None, smoothing=None):
    if kind == "ufnet":
        d = presets.get(preset or "ufnet-all", "ufnet")
        d["tasks"] = list(tasks)
        if fusion_mode:
            d["fusion_mode"] = fusion_mode
    elif kind == "majority":
        return None
    else:
        d = presets.get(preset or f"baseline-{kind}", "baseline")
    d.update(overrides)
    if smoothing is not None:
        d["label_smoothing"] = smoothing
    return fusion.UfnetConfig.from_dict(d) if kind == "ufnet" else TaskModelConfig.from_dict(d)


def _fusion_inputs(run: Run, args, tasks):
    models, plan, bundles = load_task_bundles(run, args.task_bundles, tasks)
    sessions = load_sessions(run, args.data, tasks, args.column_map)
    data.check_disjoint(plan, sessions)
    folds = ex.split_fusion(sessions, plan, models, tasks, args.task_mc_rounds)
    return models, plan, bundles, folds, sessions


def _fusion_bundle(run_: ex.FusionRun, config, plan: data.SplitPlan, train: fusion.FusionData,
                   task_bundles: dict[str, dict]) -> dict:
    model = run_.model.to_dict()
    held_out = set() if run_.calibration is None else set(run_.calibration.subjects)
    return {
        "kind": "fusion-bundle",
        "fusion": run_.kind,
        "tasks": list(train.tasks),
        "seed": run_.seed,
        "config": None if config is None else config.to_dict(),
        "model": model,
        "split": plan.to_dict(),
        "split_digest": plan.digest(),
        "task_bundle_fingerprints": {t: fusion.model_fingerprint(b["model"]) for t, b in task_bundles.items()},
        "calibration_subjects": sorted(held_out),
        "train_subject_hashes": sorted(subject_hash(s) for s in set(train.subjects) - held_out),
    }


def _fusion_seed_job(job):
    folds, models, kind, config, seed, calibration_fraction, policy, alpha, use_platt = job
    r = ex.train_fusion(folds["train"], folds["val"], models, kind, config, seed, calibration_fraction)
    result = ex.evaluate_run(r, folds["test"], folds["val"], policy, alpha, use_platt)
    return r, result


def cmd_train_fuse(args, run: Run) -> dict:
    kind = args.baseline or "ufnet"
    preset_tasks = presets.get(args.preset, "ufnet").get("tasks") if (args.preset and kind == "ufnet") else None
    tasks = tuple(args.tasks.split(",")) if args.tasks else tuple(preset_tasks or data.TASKS)
    if kind == "majority" and len(tasks) != 3:
        raise UsageError("the majority baseline needs exactly three tasks")
    config = _fusion_config(kind, args.preset, tasks, parse_overrides(args.set), args.fusion_mode, args.smoothing)
    models, plan, bundles, folds, _ = _fusion_inputs(run, args, tasks)
    seeds = parse_seeds(args, getattr(config, "seed", 0))
    run.seeds = seeds
    jobs = [(folds, models, kind, config, s, args.calibration_fraction, "none", 0.05, False) for s in seeds]
    outcomes = _map(_fusion_seed_job, jobs, args.workers)
    per_seed = []
    for seed, (r, result) in zip(seeds, outcomes):
        name = "bundle.json" if len(seeds) == 1 else f"bundle_seed{seed}.json"
        write_json(run.out / name, _fusion_bundle(r, config, plan, folds["train"], bundles))
        per_seed.append({"seed": seed, "bundle": name, "test": result.report.to_dict()})
    report = {"fusion": kind, "tasks": list(tasks), "config": None if config is None else config.to_dict(),
              "split_digest": plan.digest(), "seeds": per_seed}
    rows = {f"{kind} seed {r['seed']}": r["test"] for r in per_seed}
    if len(seeds) > 1:
        report["aggregate"] = metrics.aggregate_seeds([r["test"] for r in per_seed]).to_dict()
        rows = {f"{kind} ({len(seeds)} seeds)": summarize([r["test"] for r in per_seed])}
    if args.compare_singletask:
        test = folds["test"]
        single = {}
        for j, t in enumerate(tasks):
            single[t] = metrics.evaluate(test.mu[:, j], test.labels).to_dict()
            rows[f"{t} alone"] = single[t]
        report["single_task"] = single
    write_json(run.out / "report.json", report)
    (run.out / "report.txt").write_text(report_table("test set", rows), encoding="utf-8")
    return {"fusion": kind, "tasks": list(tasks), "config": None if config is None else config.to_dict()}


def _bundle_run(bundle: dict, folds) -> tuple[ex.FusionRun, object]:
    kind = bundle["fusion"]
    if kind == "majority":
        model = ex.MajorityVote()
        config = None
    elif kind == "ufnet":
        model = fusion.UfnetModel.from_dict(bundle["model"])
        config = model.config
    else:
        model = fusion.BaselineModel.from_dict(bundle["model"])
        config = model.model.config
    calibration = None
    if bundle["calibration_subjects"]:
        held = set(bundle["calibration_subjects"])
        calibration = folds["train"].subset(np.flatnonzero([s in held for s in folds["train"].subjects]))
    return ex.FusionRun(kind, bundle["seed"], model, calibration), config


def _prediction_rows(seed: int, test: fusion.FusionData, result: ex.WithholdResult) -> list[list]:
    rows = []
    for i in range(len(test)):
        rows.append([seed, test.subjects[i], test.sessions[i], int(test.labels[i]),
                     repr(float(result.probs[i])), int(result.predicted[i]),
                     int(result.withheld[i]), result.reasons[i] or ""])
    return rows


def cmd_eval(args, run: Run) -> dict:
    if args.withhold not in ex.WITHHOLD_POLICIES:
        raise UsageError(f"--withhold must be one of {ex.WITHHOLD_POLICIES}")
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must be in (0, 1)")
    if args.bundle:
        bundle = read_json(run.track(args.bundle))
        if bundle.get("kind") != "fusion-bundle":
            raise UsageError(f"{args.bundle} is not a fusion bundle")
        tasks = tuple(bundle["tasks"])
        models, plan, bundles, folds, _ = _fusion_inputs(run, args, tasks)
        if plan.digest() != bundle["split_digest"]:
            raise data.DataContractError("fusion bundle and task bundles were trained on different splits")
        trained = set(bundle["train_subject_hashes"])
        overlap = trained & {subject_hash(s) for s in folds["test"].subjects}
        if overlap:
            raise data.DataContractError(f"{len(overlap)} test subject(s) were used to train the fusion model")
        r, config = _bundle_run(bundle, folds)
        smoothing = getattr(config, "label_smoothing", 0.0) if config is not None else 0.0
        if args.smoothing is not None and abs(args.smoothing - smoothing) > 1e-12:
            raise UsageError(f"bundle was trained with label smoothing {smoothing}; retrain with "
                             f"train-fuse --smoothing {args.smoothing} or evaluate without --smoothing")
        if args.withhold == "conformal" and r.calibration is None:
            raise UsageError("bundle has no calibration subjects; train it with --calibration-fraction")
        runs = [r]
        results = [ex.evaluate_run(r, folds["test"], folds["val"], args.withhold, args.alpha, args.platt)]
        run.seeds = [r.seed]
        described = {"bundle": bundle["fusion"], "seed": r.seed}
    else:
        kind = args.baseline or "ufnet"
        tasks = tuple(args.tasks.split(",")) if args.tasks else data.TASKS
        config = _fusion_config(kind, args.preset, tasks, parse_overrides(args.set), args.fusion_mode, args.smoothing)
        models, plan, bundles, folds, _ = _fusion_inputs(run, args, tasks)
        fraction = args.calibration_fraction
        if fraction is None:
            fraction = 0.2 if args.withhold == "conformal" else 0.0
        seeds = parse_seeds(args, getattr(config, "seed", 0))
        run.seeds = seeds
        jobs = [(folds, models, kind, config, s, fraction, args.withhold, args.alpha, args.platt) for s in seeds]
        outcomes = _map(_fusion_seed_job, jobs, args.workers)
        runs = [o[0] for o in outcomes]
        results = [o[1] for o in outcomes]
        described = {"fusion": kind, "config": None if config is None else config.to_dict(),
                     "calibration_fraction": fraction}
    test = folds["test"]
    reports = [res.report.to_dict() for res in results]
    report = {"withhold": args.withhold, "alpha": args.alpha if args.withhold == "conformal" else None,
              "platt": args.platt, "split_digest": plan.digest(), **described,
              "seeds": [{"seed": r.seed, "test": rep} for r, rep in zip(runs, reports)]}
    if len(reports) > 1:
        report["aggregate"] = metrics.aggregate_seeds(reports).to_dict()
    write_json(run.out / "report.json", report)
    label = f"withhold={args.withhold}{' +platt' if args.platt else ''}"
    (run.out / "report.txt").write_text(report_table("test set", {label: summarize(reports)}), encoding="utf-8")
    with (run.out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "subject_id", "session_id", "label", "prob_pd", "predicted", "withheld", "reason"])
        for r, res in zip(runs, results):
            w.writerows(_prediction_rows(r.seed, test, res))
    return {"withhold": args.withhold, "alpha": args.alpha, "platt": args.platt, **described}


# -- subgroup --------------------------------------------------------------------------


def _age_bucket(age: str | None) -> str | None:
    if age is None:
        return None
    try:
        a = float(age)
    except ValueError:
        return None
    for lo, hi in AGE_BUCKETS:
        if lo <= a < hi:
            return f"{lo}-{hi - 1}" if hi < 200 else f"{lo}+"
    return None


def _rate_row(errors: int, n: int) -> dict:
    rate, lo, hi = metrics.proportion_ci(errors, n)
    return {"errors": errors, "n": n, "error_rate": rate, "ci": [lo, hi]}


def cmd_subgroup(args, run: Run) -> dict:
    demo = data.read_subjects_csv(run.track(args.subjects))
    rows = []
    with run.track(args.predictions).open(newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append(r)
    if not rows:
        raise data.DataContractError(f"{args.predictions}: no predictions")
    seeds = sorted({int(r["seed"]) for r in rows})
    seed = args.seed if args.seed is not None else seeds[0]
    if seed not in seeds:
        raise UsageError(f"seed {seed} not in predictions (have {seeds})")
    run.seeds = [seed]
    kept = [r for r in rows if int(r["seed"]) == seed and r["withheld"] == "0"]
    records = []
    for r in kept:
        d = demo.get(r["subject_id"])
        if d is None:
            raise data.DataContractError(f"subject {r['subject_id']!r} missing from {args.subjects}")
        records.append({"error": int(r["predicted"]) != int(r["label"]), "label": int(r["label"]), **d})

    def groups(key, mapper=lambda v: v):
        out: dict[str, list[bool]] = {}
        unknown = 0
        for rec in records:
            g = mapper(rec.get(key))
            if g is None:
                unknown += 1
                continue
            out.setdefault(g, []).append(rec["error"])
        return out, unknown

    report: dict = {"seed": seed, "sessions": len(records), "notices": []}
    sex, sex_unknown = groups("sex")
    report["sex"] = {"groups": {g: _rate_row(sum(v), len(v)) for g, v in sorted(sex.items())}, "unknown": sex_unknown}
    if len(sex) == 2:
        (g1, e1), (g2, e2) = sorted(sex.items())
        z, p = metrics.two_proportion_ztest(sum(e1), len(e1), sum(e2), len(e2))
        report["sex"]["z_test"] = {"groups": [g1, g2], "z": z, "p_value": p}
    eth, eth_unknown = groups("ethnicity")
    report["ethnicity"] = {"groups": {g: _rate_row(sum(v), len(v)) for g, v in sorted(eth.items())},
                           "unknown": eth_unknown}
    if len(eth) == 2:
        (g1, e1), (g2, e2) = sorted(eth.items())
        table = [[sum(e1), len(e1) - sum(e1)], [sum(e2), len(e2) - sum(e2)]]
        try:
            odds, p = metrics.fisher_exact_2x2(table)
            report["ethnicity"]["fisher"] = {"groups": [g1, g2], "table": table, "odds_ratio": odds, "p_value": p}
        except ValueError as exc:
            report["notices"].append(f"Fisher test skipped: {exc}")
    ages, age_unknown = groups("age", _age_bucket)
    buckets = {}
    for lo, hi in AGE_BUCKETS:
        name = f"{lo}-{hi - 1}" if hi < 200 else f"{lo}+"
        if name in ages:
            buckets[name] = _rate_row(sum(ages[name]), len(ages[name]))
        else:
            report["notices"].append(f"age group {name} has no members; omitted")
    report["age"] = {"groups": buckets, "unknown": age_unknown}
    durations: dict[float, list[bool]] = {}
    for rec in records:
        if rec["label"] == 1 and rec.get("disease_duration") is not None:
            try:
                durations.setdefault(float(rec["disease_duration"]), []).append(rec["error"])
            except ValueError:
                continue
    if durations:
        xs = sorted(durations)
        rates = [float(np.mean(durations[x])) for x in xs]
        entry = {"values": len(xs), "sessions": sum(len(v) for v in durations.values())}
        if len(xs) >= 2 and len(set(rates)) >= 2:
            tau, p = metrics.kendall_tau(xs, rates)
            entry.update({"tau": tau, "p_value": p})
        else:
            report["notices"].append("Kendall's tau skipped: need two distinct durations and error rates")
        report["disease_duration"] = entry
    write_json(run.out / "report.json", report)
    lines = [f"subgroup error rates (seed {seed}, {len(records)} retained sessions)"]
    for key in ("sex", "ethnicity", "age"):
        for g, r in report[key]["groups"].items():
            lines.append(f"  {key:<10} {g:<10} {r['errors']:>4}/{r['n']:<5} {100 * r['error_rate']:6.2f}%")
    (run.out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"seed": seed}


# -- search ----------------------------------------------------------------------------


def cmd_search(args, run: Run) -> dict:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    run.seeds = [args.seed]
    if args.space in ("task", "task-mc"):
        if not args.task:
            raise UsageError("--task is required for task search spaces")
        sessions = load_sessions(run, args.data, [args.task], args.column_map)
        plan = resolve_split(run, sessions, args.split, args.split_seed)
        Xv, yv, _ = ex.task_arrays(data.fold_sessions(sessions, plan, "val"), args.task)
        space = dict(search.SPACES[args.space])
        if args.space == "task":
            space["dropout"] = search.categorical(0.0)
            space["mc_rounds"] = search.categorical(1)

        def objective(cfg):
            model = ex.train_on_split(sessions, plan, TaskModelConfig.from_dict(cfg), args.task)
            batch = model.predict_batch(Xv, None, ex.substream(cfg["seed"], "val", args.task))
            return metrics.auroc(batch.mu, yv)

        result = search.random_search(space, objective, args.trials, args.seed, base={"task": args.task})
    else:
        tasks = tuple(args.tasks.split(",")) if args.tasks else data.TASKS
        models, plan, _, folds, _ = _fusion_inputs(run, args, tasks)

        def objective(cfg):
            config = fusion.UfnetConfig.from_dict({**cfg, "tasks": list(tasks)})
            model = fusion.train_ufnet(folds["train"], config, folds["val"], models)
            batch = model.predict(folds["val"], None, ex.substream(config.seed, "val"))
            return metrics.auroc(batch.mu, folds["val"].labels)

        result = search.random_search(search.UFNET_SPACE, objective, args.trials, args.seed)
    write_json(run.out / "best.json", result.best)
    write_json(run.out / "trials.json", result.to_dict())
    write_json(run.out / "report.json", {"best_val_auroc": result.best_score, "best": result.best,
                                         "trials": len(result.trials)})
    return {"space": args.space, "trials": args.trials, "seed": args.seed}


# -- rerun -----------------------------------------------------------------------------


def cmd_rerun(args, run: Run) -> dict:
    manifest = read_json(args.manifest)
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).is_file():
            raise data.DataContractError(f"manifest input {path} is missing")
        if sha256_file(path) != digest:
            raise data.DataContractError(f"manifest input {path} changed since the original run")
    if manifest.get("code_version") != code_version():
        logger.warning("code version differs from the manifest (%s vs %s)", manifest.get("code_version"), code_version())
    return {"argv": manifest["argv"]}


# -- parser ----------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or runs/<command>)")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", action="append", metavar="TASK=CSV|DIR",
                   help="task feature CSV (repeatable) or a directory holding <task>.csv files")
    p.add_argument("--column-map", help="JSON column mapping for external feature files")


def _seed_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seeds", type=int, help="train seeds 0..N-1")
    p.add_argument("--seed-list", help="comma-separated explicit seeds")
    p.add_argument("--workers", type=int, default=1, help="worker processes for seed sweeps")


def _fusion_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", help="comma-separated tasks (default: the preset's or all three)")
    p.add_argument("--task-bundles", action="append", metavar="TASK=JSON", help="frozen task bundle per task")
    p.add_argument("--preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--fusion-mode", choices=("hybrid", "early"))
    p.add_argument("--baseline", choices=("majority", "late", "early", "hybrid"))
    p.add_argument("--smoothing", type=float, help="label smoothing used in fusion training")
    p.add_argument("--task-mc-rounds", type=int, help="override the task models' MC rounds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ufnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic three-task cohort")
    _common(p)
    p.add_argument("--spec", help="JSON cohort spec (fields of SyntheticCohortSpec)")
    p.add_argument("--n-subjects", dest="n_subjects", type=int)
    p.add_argument("--prevalence", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("split", help="stratified subject-level train/val/test split")
    _common(p)
    _data_args(p)
    p.add_argument("--subjects", help="subjects.csv (alternative to --data)")
    p.add_argument("--tasks", default=",".join(data.TASKS))
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-task", help="train a task-specific model")
    _common(p)
    _data_args(p)
    _seed_args(p)
    p.add_argument("--task")
    p.add_argument("--preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--split")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--smoothing", type=float)
    p.add_argument("--mc-rounds", type=int)

    p = sub.add_parser("train-fuse", help="train UFNet or a fusion baseline on frozen task models")
    _common(p)
    _data_args(p)
    _seed_args(p)
    _fusion_args(p)
    p.add_argument("--compare-singletask", action="store_true")
    p.add_argument("--calibration-fraction", type=float, default=0.0,
                   help="share of training subjects held out for split conformal")

    p = sub.add_parser("eval", help="evaluate a fusion model with optional withholding")
    _common(p)
    _data_args(p)
    _seed_args(p)
    _fusion_args(p)
    p.add_argument("--bundle", help="trained fusion bundle; without it the model is trained here")
    p.add_argument("--withhold", default="none", choices=ex.WITHHOLD_POLICIES)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--platt", action="store_true")
    p.add_argument("--calibration-fraction", type=float)

    p = sub.add_parser("subgroup", help="error rates and tests across demographic subgroups")
    _common(p)
    p.add_argument("--predictions", required=True, help="predictions.csv written by eval")
    p.add_argument("--subjects", required=True, help="subjects.csv with demographics")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("search", help="random hyper-parameter search on validation AUROC")
    _common(p)
    _data_args(p)
    p.add_argument("--space", choices=tuple(search.SPACES), default="ufnet")
    p.add_argument("--task")
    p.add_argument("--tasks")
    p.add_argument("--task-bundles", action="append", metavar="TASK=JSON")
    p.add_argument("--task-mc-rounds", type=int)
    p.add_argument("--split")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    return parser


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "train-task": cmd_train_task,
    "train-fuse": cmd_train_fuse,
    "eval": cmd_eval,
    "subgroup": cmd_subgroup,
    "search": cmd_search,
}


def _dispatch(args, argv: list[str]) -> int:
    if args.command == "rerun":
        manifest = read_json(args.manifest)
        replay = list(manifest["argv"])
        check = Run(args, argv)
        cmd_rerun(args, check)
        return _dispatch(build_parser().parse_args(replay + ["--out", str(check.out)]), replay)
    run = Run(args, portable_argv(argv))
    config = COMMANDS[args.command](args, run)
    run.finish(config)
    logger.info("wrote %s", run.out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args, argv)
    except presets.UnknownPreset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except data.DataContractError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
