import json

import pytest

from msrpsf.cli import build_parser, main

TINY = ["--image-side", "32", "--depth-count", "5", "--source-count", "3", "--sources-per-material", "1",
        "--margin", "5", "--max-inner", "20", "--min-inner", "5"]


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("simulate", "solve", "pipeline", "sweep", "score"):
        assert cmd in out


def test_every_config_field_has_a_flag():
    from msrpsf.harness import ExperimentConfig

    sub = build_parser()._subparsers._group_actions[0].choices["pipeline"]
    flags = {s for a in sub._actions for s in a.option_strings}
    import dataclasses

    for f in dataclasses.fields(ExperimentConfig):
        if f.name != "solver":
            assert "--" + f.name.replace("_", "-") in flags
    assert "--mu" in flags and "--epsilon" in flags


def test_simulate_solve_score(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--out", str(tmp_path / "sim"), "--trial", "1", *TINY)
    assert code == 0 and json.loads(out)["sources"] == 3
    code, out, _ = _run(capsys, "solve", "--stack", str(tmp_path / "sim" / "stack"), "--out",
                        str(tmp_path / "solve"), *TINY)
    assert code == 0
    summary = json.loads(out)
    assert summary["stage1_iterations"] >= 5
    for name in ("stage1_diagnostics.csv", "stage1_detections.csv", "detections.csv", "fluxes.csv"):
        assert (tmp_path / "solve" / name).exists()
    args = ["score", "--scene", str(tmp_path / "sim" / "scene.json"), "--detections",
            str(tmp_path / "solve" / "detections.csv"), "--out", str(tmp_path / "score.json"), *TINY]
    if (tmp_path / "solve" / "classification.csv").exists():
        args += ["--classification", str(tmp_path / "solve" / "classification.csv")]
    code, out, _ = _run(capsys, *args)
    report = json.loads(out)
    assert code == 0 and report["truths"] == 3 and 0 <= report["recall"] <= 1
    assert json.loads((tmp_path / "score.json").read_text()) == report


def test_pipeline_and_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.toml"
    cfg.write_text("gamma = 0.3\ntrials = 5\n[solver]\nmax_inner = 20\nmin_inner = 5\n")
    code, out, _ = _run(capsys, "pipeline", "--config", str(cfg), "--trials", "1", "--out", str(tmp_path / "p"),
                        *TINY)
    assert code == 0 and json.loads(out)["trials"] == 1
    summary = json.loads((tmp_path / "p" / "summary.json").read_text())
    assert summary["config"]["gamma"] == 0.3 and summary["config"]["trials"] == 1
    assert summary["config"]["solver"]["max_inner"] == 20
    assert (tmp_path / "p" / "trial_000.json").exists()


def test_sweep_command(tmp_path, capsys):
    code, out, _ = _run(capsys, "sweep", "gamma", "--values", "0.2", "0.4", "--trials", "1", "--out",
                        str(tmp_path / "s"), *TINY)
    assert code == 0 and [p["gamma"] for p in json.loads(out)["points"]] == [0.2, 0.4]
    assert (tmp_path / "s" / "sweep_gamma.csv").exists()


def test_error_is_json(tmp_path, capsys):
    code, out, err = _run(capsys, "solve", "--stack", str(tmp_path / "nope"), "--out", str(tmp_path / "o"))
    assert code == 2 and out == ""
    e = json.loads(err)
    assert e["command"] == "solve" and e["error"] == "FileNotFoundError"


def test_invalid_config_is_json(capsys):
    code, _, err = _run(capsys, "pipeline", "--gamma", "1.5", "--trials", "1")
    assert code == 2 and "gamma" in json.loads(err)["message"]


def test_gaussian_preset(tmp_path, capsys):
    code, out, _ = _run(capsys, "simulate", "--preset", "gaussian", "--out", str(tmp_path / "g"), *TINY)
    assert code == 0
    manifest = json.loads((tmp_path / "g" / "stack" / "manifest.json").read_text())
    assert manifest["noise_model"] == "gaussian" and manifest["bands_nm"][0] == 1530.0
