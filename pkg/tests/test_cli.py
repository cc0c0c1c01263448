import json
import subprocess
import sys

import pytest

from et3.cli import main

from test_harness import small_doc


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(small_doc(tmp_path, scatter={"attack": "pgd"})))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def without_timing(path):
    doc = json.loads(path.read_text())
    doc.pop("runtime_ms", None)
    return doc


def test_pipeline_end_to_end(tmp_path, spec_file, capsys):
    assert run(capsys, "gen-data", "--spec", spec_file, "--out", tmp_path / "data")[0] == 0
    assert (tmp_path / "data" / "data.csv").exists() and (tmp_path / "data" / "meta.json").exists()
    assert run(capsys, "train", "--spec", spec_file, "--out", tmp_path / "model.json")[0] == 0
    assert (tmp_path / "model.log.csv").read_text().startswith("epoch,loss,clean_acc\n")
    assert run(capsys, "attack", "--model", tmp_path / "model.json", "--data", tmp_path / "data",
               "--spec", spec_file, "--out", tmp_path / "adv")[0] == 0
    summary = json.loads((tmp_path / "adv" / "summary.json").read_text())
    assert set(summary) == {"pgd", "bpda", "worst"} and all(s["within_budget"] for s in summary.values())
    assert (tmp_path / "adv" / "pgd" / "data.csv").exists()

    code, out, _ = run(capsys, "defend", "--model", tmp_path / "model.json", "--input",
                       tmp_path / "adv" / "pgd" / "data.csv", "--epsilon", 1, "--alpha", 2, "--steps", 3,
                       "--norm", "linf")
    lines = out.splitlines()
    assert code == 0 and len(lines) == 301
    assert lines[0].split(",")[-4:] == ["energy_0", "energy_1", "energy_2", "energy_3"]

    assert run(capsys, "eval", "--spec", spec_file)[0] == 0
    for name in ("report.json", "per_sample.csv", "scatter.csv"):
        assert (tmp_path / "out" / name).exists()
    code, out, _ = run(capsys, "compare", "--a", tmp_path / "out" / "report.json",
                       "--b", tmp_path / "out" / "report.json")
    last = out.splitlines()[-1].split(",")
    assert code == 0 and last[0] == "average" and last[1] == last[2] and last[3] == "0.0"


def test_every_command_is_deterministic(tmp_path, spec_file, capsys):
    outs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        run(capsys, "gen-data", "--spec", spec_file, "--out", d / "data")
        run(capsys, "train", "--spec", spec_file, "--out", d / "model.json")
        run(capsys, "attack", "--model", d / "model.json", "--data", d / "data", "--spec", spec_file,
            "--out", d / "adv")
        run(capsys, "defend", "--model", d / "model.json", "--input", d / "data" / "data.csv",
            "--epsilon", 0.5, "--alpha", 1, "--steps", 2, "--norm", "l2", "--out", d / "defended.csv")
        doc = json.loads(spec_file.read_text())
        doc["cache"] = str(d / "cache")
        own_spec = tmp_path / f"spec_{rep}.json"
        own_spec.write_text(json.dumps(doc))
        run(capsys, "eval", "--spec", own_spec, "--out", d / "eval")
        run(capsys, "verify-theorem", "--spec", "bundled:theorem_random_linear", "--out", d / "th")
        run(capsys, "compare", "--a", d / "eval" / "report.json", "--b", d / "eval" / "report.json",
            "--out", d / "cmp.csv")
        files = {}
        for p in sorted(d.rglob("*")):
            if p.is_file() and "cache" not in p.parts:
                rel = p.relative_to(d).as_posix()
                files[rel] = without_timing(p) if p.name == "report.json" else p.read_bytes()
        outs.append(files)
    assert outs[0].keys() == outs[1].keys()
    for k in outs[0]:
        assert outs[0][k] == outs[1][k], k
    assert "th/theorem_reports.jsonl" in outs[0] and "cmp.csv" in outs[0]


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "datset": {}}))
    code, _, err = run(capsys, "eval", "--spec", bad)
    assert code == 2 and "datset" in err
    assert run(capsys, "eval", "--spec", tmp_path / "missing.json")[0] == 2
    assert run(capsys, "eval", "--spec", "bundled:nope")[0] == 2
    (tmp_path / "broken.json").write_text("{")
    assert run(capsys, "train", "--spec", tmp_path / "broken.json", "--out", tmp_path / "m.json")[0] == 2


def test_compare_mismatch_exit_code(tmp_path, spec_file, capsys):
    run(capsys, "eval", "--spec", spec_file)
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    doc["robust_acc"].pop("pgd")
    (tmp_path / "other.json").write_text(json.dumps(doc))
    assert run(capsys, "compare", "--a", tmp_path / "out" / "report.json", "--b", tmp_path / "other.json")[0] == 2


def test_theorem_audit_exit_codes(tmp_path, capsys):
    code, out, _ = run(capsys, "verify-theorem", "--spec", "bundled:theorem_audit", "--out", tmp_path / "th")
    assert code == 0 and "0 violations" in out
    # the random linear audit finds hypothesis-satisfying instances that end misclassified
    code, _, err = run(capsys, "verify-theorem", "--spec", "bundled:theorem_random_linear",
                       "--out", tmp_path / "rl")
    assert code == 3 and "theorem audit failed" in err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "et3", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify-theorem" in res.stdout
    res = subprocess.run([sys.executable, "-m", "et3", "eval"], capture_output=True, text=True)
    assert res.returncode == 2
