import fcntl
import json
import shutil

import numpy as np
import pytest

from conftest import run_cli
from phytosense import GENERATOR_VERSION
from phytosense import analysis as A
from phytosense import cli
from phytosense import features as F
from phytosense import ingest
from phytosense import synth as S
from phytosense.config import ConfigError, dumps, from_mapping, load_config
from phytosense.model import load_model


def stderr_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


# --------------------------------------------------------------------------- error contract


def test_train_without_extract_is_missing_prerequisite(tmp_path, capsys):
    assert run_cli("train", "--workdir", tmp_path) == 2
    doc = stderr_json(capsys)
    assert doc["error"] == "missing_prerequisite" and doc["exit_code"] == 2
    assert doc["missing"] == "features.csv" and doc["run"] == "extract" and doc["stage"] == "train"


def test_ingest_without_corpus_points_to_synth(tmp_path, capsys):
    assert run_cli("ingest", "--workdir", tmp_path) == 2
    assert stderr_json(capsys)["run"] == "synth"


@pytest.mark.parametrize("args", [("--horizon", "2min"), ("--jobs", "0"), ("--frac", "1.5"),
                                  ("--n-trees", "0"), ("--max-bins", "300")])
def test_invalid_flags_are_config_errors(tmp_path, capsys, args):
    assert run_cli("window", "--workdir", tmp_path, *args) == 1
    assert stderr_json(capsys)["error"] == "config_error"


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("labeling:\n  tl: [0, 1]\n")
    assert run_cli("window", "--workdir", tmp_path / "w", "--config", bad) == 1
    assert "tl" in stderr_json(capsys)["message"]
    bad.write_text("seed: [unclosed\n")
    assert run_cli("window", "--workdir", tmp_path / "w", "--config", bad) == 1
    assert run_cli("window", "--workdir", tmp_path / "w", "--config", tmp_path / "nope.yaml") == 1


def test_missing_input_file_is_data_error(tmp_path, capsys):
    assert run_cli("ingest", "--workdir", tmp_path, "--input", tmp_path / "none.csv") == 3
    assert "does not exist" in stderr_json(capsys)["message"]


def test_malformed_input_is_data_error(tmp_path, capsys):
    src = tmp_path / "in.csv"
    src.write_text("plant_id,group,timestamp,edp_mv\nP01,saturated,0,1.0\nP01,saturated,1,oops\n")
    assert run_cli("ingest", "--workdir", tmp_path / "w", "--input", src) == 3
    assert stderr_json(capsys)["exit_code"] == 3


def test_locked_workdir(tmp_path, capsys):
    with open(tmp_path / cli.LOCK_NAME, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        assert run_cli("synth", "--workdir", tmp_path) == 4
    assert stderr_json(capsys)["error"] == "workdir_locked"
    assert not (tmp_path / "corpus.csv").exists()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.strip() == GENERATOR_VERSION


# --------------------------------------------------------------------------- artifacts


def test_every_stage_artifact_present(small_workdir):
    expected = set(cli.PRODUCER) - {"sbs_trajectory.csv", "search.json"}
    assert expected <= {p.name for p in small_workdir.iterdir()}


def test_artifacts_carry_generator_version_and_no_paths(small_workdir):
    for p in sorted(small_workdir.iterdir()):
        if p.suffix == ".json":
            doc = json.loads(p.read_text())
            assert doc["generator_version"] == GENERATOR_VERSION, p.name
        elif p.suffix == ".csv":
            with open(p) as fh:
                first = fh.readline()
            assert first.startswith("# ") and json.loads(first[2:])["generator_version"] == GENERATOR_VERSION
        if p.suffix in (".json", ".csv"):
            with open(p, errors="replace") as fh:
                head = fh.read(1 << 20)
            assert str(small_workdir) not in head, p.name


def test_eval_printout_matches_accuracy(small_workdir, capsys):
    assert run_cli("eval", "--workdir", small_workdir) == 0
    printed = {ln.split()[0]: float(ln.split()[2]) for ln in capsys.readouterr().out.splitlines()}
    model = load_model(small_workdir / "model_calibrated.json")
    fm = F.read_matrix_csv(small_workdir / "features.csv")
    windows = cli.Workspace(from_mapping({"paths": {"workdir": str(small_workdir)}})).load_windows()
    for part in ("train", "validation", "test"):
        ids = [w["window_id"] for w in windows if w["partition"] == part]
        truth = np.array([w["label"] for w in windows if w["partition"] == part])
        pred = model.predict(fm.rows(ids).columns(model.feature_manifest).values)
        assert printed[part] == A.accuracy(pred, truth)
    doc = json.loads((small_workdir / "eval.json").read_text())
    assert doc["partitions"]["test"]["accuracy"] == printed["test"]


def test_split_holds_out_requested_plants(small_workdir):
    rows = cli.Workspace(from_mapping({"paths": {"workdir": str(small_workdir)}})).load_windows()
    test_plants = {w["plant_id"] for w in rows if w["partition"] == "test"}
    # P03/P04 are control plants: unlabeled in the binary scheme, so they never enter a partition
    assert test_plants == {"P07"}
    assert {w["partition"] for w in rows if w["group"] == "ml400"} == {"none"}
    train_plants = {w["plant_id"] for w in rows if w["partition"] in ("train", "validation")}
    assert not {"P03", "P04", "P07"} & train_plants


def test_calibrated_model_only_changes_temperature(small_workdir):
    a = load_model(small_workdir / "model.json")
    b = load_model(small_workdir / "model_calibrated.json")
    rep = json.loads((small_workdir / "calibration_report.json").read_text())
    assert b.temperature == rep["temperature"] and a.temperature == 1.0
    probe = np.random.default_rng(1).uniform(size=(50, len(a.feature_manifest)))
    np.testing.assert_array_equal(a.predict_logit(probe), b.predict_logit(probe))
    assert rep["accuracy_before"] == rep["accuracy_after"]


def test_transitions_document(small_workdir):
    doc = json.loads((small_workdir / "transitions.json").read_text())
    assert set(doc["groups"]) == set(ingest.GROUPS)
    assert doc["groups"]["ml400"]["onset"] is None
    for entry in doc["plants"].values():
        assert 0.0 <= entry["max_certainty"] <= 1.0


def test_rerunning_a_stage_is_idempotent(small_workdir):
    before = (small_workdir / "pr_summary.json").read_bytes()
    assert run_cli("pr", "--workdir", small_workdir) == 0
    assert (small_workdir / "pr_summary.json").read_bytes() == before


def test_search_budget_and_sbs(small_workdir, tmp_path):
    wd = tmp_path / "copy"
    shutil.copytree(small_workdir, wd)
    assert run_cli("select", "--workdir", wd, "--sbs", "--top-k", 4) == 0
    sel = json.loads((wd / "selection.json").read_text())
    assert sel["sbs"]["removal_evaluations"] == 4 * 5 // 2 - 1
    assert (wd / "sbs_trajectory.csv").exists()
    assert set(sel["selected"]) <= set(sel["ranked"]) and len(sel["ranked"]) == 4
    assert run_cli("train", "--workdir", wd, "--search-budget", 2) == 0
    search = json.loads((wd / "search.json").read_text())
    assert len(search["evaluations"]) == 4
    report = json.loads((wd / "train_report.json").read_text())
    assert report["params"] == search["chosen_hgb"]
    assert run_cli("train", "--workdir", wd) == 0
    assert not (wd / "search.json").exists()


def test_external_input_source_recorded(tmp_path):
    series, _ = S.generate(S.SynthConfig(plants_per_group=1, days=2))
    src = tmp_path / "recording.csv"
    ingest.write_csv(series, src)
    assert run_cli("ingest", "--workdir", tmp_path / "w", "--input", src) == 0
    doc = json.loads((tmp_path / "w" / "series.json").read_text())
    assert doc["source"] == "recording.csv" and len(doc["plants"]) == 4


# --------------------------------------------------------------------------- config


def test_config_precedence_flags_over_file(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("seed: 5\nanalysis:\n  frac: 0.1\ntrain:\n  n_trees: 7\n")
    args = cli.build_parser().parse_args(["window", "--config", str(cfg_file), "--seed", "6"])
    cfg = cli._flag_overrides(args, load_config(args.config)).validate()
    assert cfg.seed == 6 and cfg.analysis.frac == 0.1 and cfg.train_params().n_trees == 7


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="unknown config key"):
        from_mapping({"seeds": 1})
    with pytest.raises(ConfigError, match="train_ovr"):
        from_mapping({"labeling": {"scheme": "multiclass"}}).validate()
    with pytest.raises(ConfigError, match="class_map"):
        from_mapping({"labeling": {"class_map": {"ml999": "healthy"}}}).validate()
    with pytest.raises(ConfigError, match="t1"):
        from_mapping({"labeling": {"t1": [10, 5]}}).validate()


def test_config_dump_roundtrip():
    cfg = from_mapping({"seed": 3, "selection": {"top_k": 12}, "paths": {"workdir": "w"}})
    again = from_mapping(json.loads(dumps(cfg)))
    assert again.to_dict() == cfg.to_dict()
