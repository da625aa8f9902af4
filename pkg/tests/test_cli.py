import csv
import json

import numpy as np
import pytest

from ufnet import cli, data

TASK_SET = ["--set", "epochs=20", "--mc-rounds", "20"]
FUSE_SET = ["--set", "epochs=3", "--set", "projection_dim=16", "--set", "qkv_dim=8", "--set", "hidden_width=8",
            "--set", "mc_rounds=10", "--task-mc-rounds", "10"]


def run_ok(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"exit {code} for {argv}"


def read(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cohort = root / "cohort"
    run_ok("gen-synth", "--n-subjects", 400, "--seed", 3, "--out", cohort)
    split = root / "split"
    run_ok("split", "--data", cohort, "--seed", 0, "--out", split)
    bundles = []
    for task in data.TASKS:
        out = root / f"task_{task}"
        run_ok("train-task", "--task", task, "--preset", f"{task}-mc", "--data", cohort,
               "--split", split / "split.json", *TASK_SET, "--out", out)
        bundles += ["--task-bundles", f"{task}={out / 'bundle.json'}"]
    fuse = root / "fuse"
    run_ok("train-fuse", "--preset", "ufnet-all", "--data", cohort, *bundles, *FUSE_SET, "--set", "epochs=40",
           "--set", "batch_size=32",
           "--calibration-fraction", "0.2", "--compare-singletask", "--out", fuse)
    return {"root": root, "cohort": cohort, "split": split, "bundles": bundles, "fuse": fuse}


def test_gen_synth_writes_the_cohort(pipeline):
    cohort = pipeline["cohort"]
    for name in ("tapping.csv", "smile.csv", "speech.csv", "subjects.csv", "manifest.json", "report.json"):
        assert (cohort / name).is_file()
    assert read(cohort / "report.json")["subjects"] == 400


def test_invalid_cohort_spec_exits_2(tmp_path):
    assert cli.main(["gen-synth", "--prevalence", "1.5", "--out", str(tmp_path)]) == 2


def test_manifest_records_inputs_and_seeds(pipeline):
    manifest = read(pipeline["fuse"] / "manifest.json")
    assert manifest["command"] == "train-fuse"
    assert manifest["seeds"] == [242]
    assert all(len(h) == 64 for h in manifest["inputs"].values())
    assert "--out" not in manifest["argv"]


def test_train_fuse_reports_single_task_comparison(pipeline):
    report = read(pipeline["fuse"] / "report.json")
    assert set(report["single_task"]) == set(data.TASKS)
    assert "auroc" in report["seeds"][0]["test"]
    assert "tapping alone" in (pipeline["fuse"] / "report.txt").read_text()


def test_unknown_preset_exits_2_and_lists_presets(pipeline, tmp_path, capsys):
    code = cli.main(["train-task", "--task", "smile", "--preset", "nope", "--data", str(pipeline["cohort"]),
                     "--out", str(tmp_path)])
    assert code == 2
    assert "smile-mc" in capsys.readouterr().err


def test_bad_csv_exits_3(tmp_path):
    bad = tmp_path / "smile.csv"
    bad.write_text("subject_id,session_id,label,f0\na,s1,1,0.5\nb,s2,2,0.1\n")
    assert cli.main(["train-task", "--task", "smile", "--data", f"smile={bad}", "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_features_exit_4(tmp_path):
    # every feature sits near the float64 ceiling, so the first forward pass overflows
    header = "subject_id,session_id,label," + ",".join(f"f{i}" for i in range(42))
    signs = np.random.default_rng(0).choice(["1.7e308", "-1.7e308"], size=(60, 42))
    rows = [f"s{i},x{i},{i % 2}," + ",".join(signs[i]) for i in range(60)]
    path = tmp_path / "smile.csv"
    path.write_text("\n".join([header, *rows]) + "\n")
    code = cli.main(["train-task", "--task", "smile", "--data", f"smile={path}", "--set", "scaling=\"none\"",
                     "--set", "epochs=2", "--out", str(tmp_path / "o")])
    assert code == 4


def test_seed_sweep_aggregates(pipeline, tmp_path):
    run_ok("train-task", "--task", "smile", "--data", pipeline["cohort"], "--split", pipeline["split"] / "split.json",
           "--seeds", 3, *TASK_SET, "--out", tmp_path)
    report = read(tmp_path / "report.json")
    aucs = [s["test"]["auroc"] for s in report["seeds"]]
    assert len(aucs) == 3 and sorted(p.name for p in tmp_path.glob("bundle_seed*.json")) == [
        "bundle_seed0.json", "bundle_seed1.json", "bundle_seed2.json"]
    assert report["aggregate"]["mean"]["auroc"] == pytest.approx(sum(aucs) / 3, abs=1e-12)


def test_mismatched_task_splits_refused(pipeline, tmp_path):
    other = tmp_path / "other_task"
    run_ok("train-task", "--task", "smile", "--data", pipeline["cohort"], "--split-seed", 7, *TASK_SET, "--out", other)
    bundles = list(pipeline["bundles"])
    bundles[bundles.index(next(b for b in bundles if b.startswith("smile=")))] = f"smile={other / 'bundle.json'}"
    code = cli.main(["train-fuse", "--data", str(pipeline["cohort"]), *bundles, *FUSE_SET, "--out", str(tmp_path / "f")])
    assert code == 3


def test_fusion_modes_change_head_width(pipeline, tmp_path):
    widths = {}
    for mode in ("early", "hybrid"):
        out = tmp_path / mode
        run_ok("train-fuse", "--data", pipeline["cohort"], *pipeline["bundles"], *FUSE_SET, "--fusion-mode", mode,
               "--out", out)
        weight, _ = read(out / "bundle.json")["model"]["head"][0]
        widths[mode] = len(weight)
    assert widths["hybrid"] - widths["early"] == 3


def test_majority_baseline_needs_no_training(pipeline, tmp_path):
    run_ok("train-fuse", "--baseline", "majority", "--data", pipeline["cohort"], *pipeline["bundles"],
           "--task-mc-rounds", 10, "--out", tmp_path)
    assert "accuracy" in read(tmp_path / "report.json")["seeds"][0]["test"]


def test_eval_without_withholding_has_full_coverage(pipeline, tmp_path):
    run_ok("eval", "--bundle", pipeline["fuse"] / "bundle.json", "--data", pipeline["cohort"], *pipeline["bundles"],
           "--task-mc-rounds", 10, "--out", tmp_path)
    assert read(tmp_path / "report.json")["seeds"][0]["test"]["coverage"] == 1.0


def test_eval_mc_ci_without_dropout_keeps_everything(pipeline, tmp_path):
    run_ok("eval", "--data", pipeline["cohort"], *pipeline["bundles"], *FUSE_SET, "--set", "dropout=0.0",
           "--withhold", "mc-ci", "--out", tmp_path)
    assert read(tmp_path / "report.json")["seeds"][0]["test"]["coverage"] == 1.0


def test_eval_conformal_records_reasons(pipeline, tmp_path):
    run_ok("eval", "--bundle", pipeline["fuse"] / "bundle.json", "--data", pipeline["cohort"], *pipeline["bundles"],
           "--task-mc-rounds", 10, "--withhold", "conformal", "--alpha", "0.05", "--platt", "--out", tmp_path)
    rows = list(csv.DictReader((tmp_path / "predictions.csv").open()))
    for r in rows:
        assert (r["withheld"] == "1") == bool(r["reason"])
    report = read(tmp_path / "report.json")["seeds"][0]["test"]
    assert report["coverage"] == pytest.approx(sum(r["withheld"] == "0" for r in rows) / len(rows))


def test_eval_refuses_test_subjects_used_in_training(pipeline, tmp_path):
    bundle = read(pipeline["fuse"] / "bundle.json")
    plan = data.SplitPlan.from_dict(bundle["split"])
    bundle["train_subject_hashes"] += [cli.subject_hash(s) for s in plan.subjects("test")]
    leaked = tmp_path / "leaked.json"
    leaked.write_text(json.dumps(bundle))
    code = cli.main(["eval", "--bundle", str(leaked), "--data", str(pipeline["cohort"]), *pipeline["bundles"],
                     "--task-mc-rounds", "10", "--out", str(tmp_path / "o")])
    assert code == 3


def test_subgroup_report(pipeline, tmp_path):
    ev = tmp_path / "eval"
    run_ok("eval", "--bundle", pipeline["fuse"] / "bundle.json", "--data", pipeline["cohort"], *pipeline["bundles"],
           "--task-mc-rounds", 10, "--out", ev)
    out = tmp_path / "sub"
    run_ok("subgroup", "--predictions", ev / "predictions.csv", "--subjects", pipeline["cohort"] / "subjects.csv",
           "--out", out)
    report = read(out / "report.json")
    assert "z_test" in report["sex"]
    assert "disease_duration" in report
    total = sum(g["n"] for g in report["sex"]["groups"].values()) + report["sex"]["unknown"]
    assert total == report["sessions"]


def test_subgroup_single_group_gives_rates_only(pipeline, tmp_path):
    ev = tmp_path / "eval"
    run_ok("eval", "--bundle", pipeline["fuse"] / "bundle.json", "--data", pipeline["cohort"], *pipeline["bundles"],
           "--task-mc-rounds", 10, "--out", ev)
    src = pipeline["cohort"] / "subjects.csv"
    rows = list(csv.DictReader(src.open()))
    for r in rows:
        r["sex"] = "F"
    one = tmp_path / "subjects.csv"
    with one.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    run_ok("subgroup", "--predictions", ev / "predictions.csv", "--subjects", one, "--out", tmp_path / "sub")
    report = read(tmp_path / "sub" / "report.json")
    assert list(report["sex"]["groups"]) == ["F"] and "z_test" not in report["sex"]


def test_search_writes_best_config(pipeline, tmp_path):
    run_ok("search", "--space", "task-mc", "--task", "smile", "--data", pipeline["cohort"], "--trials", 2,
           "--seed", 1, "--out", tmp_path)
    trials = read(tmp_path / "trials.json")
    assert len(trials["trials"]) == 2
    assert read(tmp_path / "best.json") == trials["best"]


def test_search_with_zero_trials_exits_2(pipeline, tmp_path):
    assert cli.main(["search", "--space", "task", "--task", "smile", "--data", str(pipeline["cohort"]),
                     "--trials", "0", "--out", str(tmp_path)]) == 2


@pytest.mark.parametrize("name", ["task_smile", "fuse"])
def test_rerun_is_byte_identical(pipeline, tmp_path, name):
    original = pipeline["root"] / name
    run_ok("rerun", "--manifest", original / "manifest.json", "--out", tmp_path)
    for f in original.iterdir():
        if f.name != "manifest.json":
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name
    assert read(tmp_path / "manifest.json") == read(original / "manifest.json")


def test_rerun_refuses_changed_inputs(pipeline, tmp_path):
    copy = tmp_path / "cohort"
    run_ok("gen-synth", "--n-subjects", 40, "--seed", 1, "--out", copy)
    run_ok("split", "--data", copy, "--out", tmp_path / "split")
    with (copy / "smile.csv").open("a") as fh:
        fh.write("")
    (copy / "subjects.csv").write_text((copy / "subjects.csv").read_text() + "\n")
    (copy / "smile.csv").write_text((copy / "smile.csv").read_text().replace("\n", "\r\n", 1))
    assert cli.main(["rerun", "--manifest", str(tmp_path / "split" / "manifest.json"),
                     "--out", str(tmp_path / "again")]) == 3


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    run_ok("gen-synth", "--n-subjects", 30)
    assert (tmp_path / "env" / "report.json").is_file()


def test_subgroup_detects_a_planted_sex_effect(pipeline, tmp_path):
    subjects = list(csv.DictReader((pipeline["cohort"] / "subjects.csv").open()))
    preds = tmp_path / "predictions.csv"
    with preds.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "subject_id", "session_id", "label", "prob_pd", "predicted", "withheld", "reason"])
        for i, s in enumerate(subjects):
            # males are misclassified one time in two, everyone else one time in ten
            wrong = i % 2 == 0 if s["sex"] == "M" else i % 10 == 0
            label = int(s["label"] == "PD")
            w.writerow([0, s["subject_id"], f"x{i}", label, 0.5, 1 - label if wrong else label, 0, ""])
    run_ok("subgroup", "--predictions", preds, "--subjects", pipeline["cohort"] / "subjects.csv", "--out", tmp_path / "o")
    assert read(tmp_path / "o" / "report.json")["sex"]["z_test"]["p_value"] < 0.05
