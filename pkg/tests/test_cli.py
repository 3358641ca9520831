import json
import subprocess
import sys

import pytest

from geoshare import autodiff as ad
from geoshare import harness as hx
from geoshare.cli import EXIT_OK, EXIT_ORACLE, EXIT_USAGE, main

FAST = {"t_sweep": [1, 8], "beta_sweep": [0.05]}

REPORTS = {
    "train": "train.json",
    "share": "share.json",
    "oracle": "oracle.json",
    "ablate": "ablation.json",
    "report": "report.json",
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(FAST))
    return path


@pytest.mark.parametrize("command", ["train", "share", "ablate", "report"])
def test_reruns_are_byte_identical(command, tmp_path, config_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([command, "--config", str(config_file), "--out", str(a), "--seed", "4"]) == EXIT_OK
    assert main([command, "--config", str(config_file), "--out", str(b), "--seed", "4"]) == EXIT_OK
    name = REPORTS[command]
    assert (a / name).read_bytes() == (b / name).read_bytes()
    timing = json.loads((a / "timing.json").read_text())
    assert timing and all(isinstance(k, str) for k in timing)


def test_seed_changes_report(tmp_path, config_file):
    main(["train", "--config", str(config_file), "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["train", "--config", str(config_file), "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "train.json").read_bytes() != (tmp_path / "b" / "train.json").read_bytes()


def test_oracle_passes_and_reports(tmp_path):
    assert main(["oracle", "--out", str(tmp_path), "--csv"]) == EXIT_OK
    report = json.loads((tmp_path / "oracle.json").read_text())
    assert report["passed"]
    assert (tmp_path / "oracle.csv").read_text().startswith("suite,passed")


def test_oracle_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(hx, "run_oracles", lambda config: {"passed": False, "suites": {"hvp": {"passed": False}}})
    assert main(["oracle", "--out", str(tmp_path)]) == EXIT_ORACLE


def test_share_from_checkpoint_matches_fresh_training(tmp_path, config_file):
    cfg = ["--config", str(config_file)]
    assert main(["train", *cfg, "--out", str(tmp_path / "t")]) == EXIT_OK
    assert main(["share", *cfg, "--out", str(tmp_path / "s1")]) == EXIT_OK
    assert main(["share", *cfg, "--out", str(tmp_path / "s2"), "--checkpoint", str(tmp_path / "t" / "checkpoint")]) == EXIT_OK
    one = json.loads((tmp_path / "s1" / "share.json").read_text())
    two = json.loads((tmp_path / "s2" / "share.json").read_text())
    assert one["alignment"] == two["alignment"]
    coloring = json.loads((tmp_path / "s1" / "coloring.json").read_text())
    assert coloring["assignment"] == one["alignment"]["coloring"]


def test_checkpoint_for_other_model_is_rejected(tmp_path):
    spec = ad.ModelSpec((3, 3))
    ad.save_checkpoint(tmp_path / "ck", spec, ad.init_params(spec, 0), 0)
    assert main(["share", "--out", str(tmp_path / "s"), "--checkpoint", str(tmp_path / "ck")]) == EXIT_USAGE


def test_csv_tables(tmp_path, config_file):
    assert main(["report", "--config", str(config_file), "--out", str(tmp_path), "--csv"]) == EXIT_OK
    names = {p.name for p in tmp_path.iterdir()}
    assert {"methods.csv", "ablation_t.csv", "ablation_beta.csv"} <= names
    header = (tmp_path / "methods.csv").read_text().splitlines()[0]
    assert header.startswith("method,loss_before")


def test_ablate_flags_override_config(tmp_path):
    assert main(["ablate", "--out", str(tmp_path), "--beta", "0.01", "1.0", "--mode", "strict-sharing"]) == EXIT_OK
    report = json.loads((tmp_path / "ablation.json").read_text())
    assert list(report["ablation"]) == ["beta"]
    assert [r["beta"] for r in report["ablation"]["beta"]] == [0.01, 1.0]
    assert report["config"]["ablation_mode"] == "strict-sharing"


def test_report_omits_wall_times(tmp_path, config_file):
    main(["report", "--config", str(config_file), "--out", str(tmp_path)])
    text = (tmp_path / "report.json").read_text()
    assert "_s\"" not in text and "NaN" not in text


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["bogus", "--out", "x"],
        ["train"],
        ["share", "--out", "x", "--mode", "loose"],
        ["ablate", "--out", "x", "--t", "two"],
    ],
)
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == EXIT_USAGE


@pytest.mark.parametrize("content", ["{not json", "[1, 2]", '{"unknown": 1}', '{"training": {"grad_tol": -1}}'])
def test_bad_config_exits_one(tmp_path, content):
    path = tmp_path / "c.json"
    path.write_text(content)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_missing_config_and_empty_sweep(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["ablate", "--out", str(tmp_path)]) == EXIT_USAGE


def test_module_entry_point(tmp_path, config_file):
    out = subprocess.run(
        [sys.executable, "-m", "geoshare.cli", "train", "--config", str(config_file), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "checkpoint" / "manifest.json").exists()
