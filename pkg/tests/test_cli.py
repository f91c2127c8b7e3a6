import json
import subprocess
import sys

import pytest

from apcascade.catalog import dump_catalog
from apcascade.cli import load_config, main, parse_range
from apcascade.errors import ArgumentError, ConfigError

from conftest import TOY, grid_catalog, grid_seeds


def write_grid(tmp_path, n_pc=5, n_sa=3, m=2):
    cat = grid_catalog(n_pc, n_sa)
    dump_catalog(cat, tmp_path / "catalog.jsonl")
    with (tmp_path / "seeds.jsonl").open("w", encoding="utf-8") as fh:
        for s in grid_seeds(cat, m).instructions:
            fh.write(json.dumps({"pc_id": s.pc_id, "sa_id": s.sa_id, "text": s.text}) + "\n")
    return tmp_path / "catalog.jsonl", tmp_path / "seeds.jsonl"


def run_json(capsys, argv):
    code = main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip().startswith("{") else out


def test_generate_grid(tmp_path, capsys):
    catalog, seeds = write_grid(tmp_path)
    argv = ["generate", "--catalog", str(catalog), "--seeds", str(seeds), "--run-dir", str(tmp_path / "run"), "-T", "2", "-M", "2"]
    code, summary = run_json(capsys, argv)
    assert code == 0
    assert summary["generation_calls"] == 21 and summary["instructions"] == 15 and summary["coverage"] == 1.0

    # rerun: everything is resumed from the store, no model traffic
    code, summary = run_json(capsys, argv)
    assert code == 0 and summary["network_calls"] == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert [r["command"] for r in manifest["runs"]] == ["generate", "generate"]


def test_missing_seeds_is_config_error(tmp_path, capsys):
    catalog, _ = write_grid(tmp_path)
    code = main(["generate", "--catalog", str(catalog), "--seeds", str(tmp_path / "nope.jsonl"), "--run-dir", str(tmp_path / "r")])
    assert code == 2
    assert "seed file not found" in capsys.readouterr().err


def test_bad_catalog_is_config_error(tmp_path, capsys):
    (tmp_path / "c.jsonl").write_text("{broken\n", encoding="utf-8")
    code = main(["classify", "--catalog", str(tmp_path / "c.jsonl"), "--run-dir", str(tmp_path / "r"), "--mode", "cot"])
    assert code == 2
    assert "ParseError" in capsys.readouterr().err


def test_apc_without_instructions_is_config_error(tmp_path, capsys):
    code = main(["classify", "--catalog", str(TOY / "catalog.jsonl"), "--run-dir", str(tmp_path / "r"), "--mode", "apc"])
    assert code == 2


def test_toy_pipeline(tmp_path, capsys):
    cfg = ["-c", str(TOY / "config.ini"), "--run-dir", str(tmp_path / "run")]
    assert main(["generate", *cfg]) == 0
    for mode in ("baseline", "apc"):
        assert main(["classify", *cfg, "--mode", mode]) == 0
    capsys.readouterr()
    preds = tmp_path / "run" / "predictions"
    catalog = str(TOY / "catalog.jsonl")

    assert main(["evaluate", str(preds / "apc-correctness.jsonl"), "--catalog", catalog, "--out-dir", str(tmp_path / "rep")]) == 0
    assert "Incorrect" in capsys.readouterr().out
    report = json.loads((tmp_path / "rep" / "apc-correctness.eval.json").read_text())
    assert report["metrics"]["Incorrect"]["precision"] == 1.0

    code, same = run_json(capsys, ["compare", str(preds / "apc-correctness.jsonl"), str(preds / "apc-correctness.jsonl"), "--catalog", catalog, "-B", "200", "--out-dir", str(tmp_path / "rep")])
    assert code == 0 and same["p_value"] == 1.0
    code, diff = run_json(capsys, ["compare", str(preds / "apc-correctness.jsonl"), str(preds / "baseline-correctness.jsonl"), "--catalog", catalog, "-B", "200", "--out-dir", str(tmp_path / "rep")])
    assert code == 0 and diff["mean_delta_f1"] > 0

    code, cost = run_json(capsys, ["cost", str(tmp_path / "run" / "ledger.jsonl"), "--prices", str(TOY / "prices.json"), "--purpose", "instruction_gen"])
    assert code == 0 and cost["calls"] == 12


def test_empty_predictions_is_config_error(tmp_path, capsys):
    (tmp_path / "empty.jsonl").write_text("", encoding="utf-8")
    code = main(["evaluate", str(tmp_path / "empty.jsonl"), "--catalog", str(TOY / "catalog.jsonl"), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "empty" in capsys.readouterr().err


def test_unreachable_backend_is_runtime_error(tmp_path, capsys):
    catalog, seeds = write_grid(tmp_path, 2, 1, 1)
    code = main(["generate", "--catalog", str(catalog), "--seeds", str(seeds), "--run-dir", str(tmp_path / "r"),
                 "-M", "1", "--backend", "replay"])
    assert code == 1
    assert "offline" in capsys.readouterr().err


def test_cost_unknown_model(tmp_path, capsys):
    (tmp_path / "ledger.jsonl").write_text(json.dumps({"model_id": "x", "purpose": "classification", "input_tokens": 1, "output_tokens": 1, "estimated": False, "backend": "http", "cache_key": "k"}) + "\n")
    (tmp_path / "prices.json").write_text("{}")
    assert main(["cost", str(tmp_path / "ledger.jsonl"), "--prices", str(tmp_path / "prices.json")]) == 2


def test_load_config(tmp_path):
    cfg = load_config(TOY / "config.ini")
    assert (cfg.cascade.T, cfg.cascade.M) == (2, 2)
    assert cfg.catalog == TOY / "catalog.jsonl"
    assert load_config(None).cascade.M == 6
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    (tmp_path / "bad.ini").write_text("[cascade]\nT = two\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")


def test_parse_range():
    assert parse_range("0-6") == list(range(7))
    assert parse_range("2,4, 6") == [2, 4, 6]
    with pytest.raises(ArgumentError):
        parse_range("a-b")


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "apcascade.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("generate", "classify", "evaluate", "compare", "sweep", "cost"):
        assert command in out.stdout


def test_sweep_command(tmp_path, capsys):
    cfg = ["-c", str(TOY / "config.ini"), "--run-dir", str(tmp_path / "run")]
    code, report = run_json(capsys, ["sweep", *cfg, "--T-range", "0-2", "--M-range", "1,2"])
    assert code == 0
    f1 = {(row["T"], row["M"]): row["negative_f1"] for row in report["grid"]}
    # the toy mock keys instructions on the target pair, so T=1 already ties with T=2
    assert f1[(0, 2)] < f1[(1, 2)] == f1[(2, 2)]
    assert report["best_T"] == 1 and report["chosen"] == {"T": 1, "M": 1}
    assert (tmp_path / "run" / "reports" / "sweep.json").exists()
