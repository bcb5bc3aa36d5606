import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ahc import cli
from ahc import compressor as cmp
from ahc.memory import serialize

TINY = """\
experiment:
  num_tasks: 2
  classes_per_task: 2
  samples_per_class: 10
  epochs: 2
  batch_size: 10
  eval_samples: 40
  fisher_samples: 20
  maml:
    inner_steps: 2
output:
  format: all
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_run_writes_two_by_two_report(tiny, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("run", "--config", tiny, "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert np.array(rep["accuracy"], dtype=float).shape == (2, 2)
    assert rep["accuracy"][1][0] is None
    text = (out / "report.txt").read_text()
    assert "forgetting =" in text and "accuracy[eval task, after task]" in text
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert {r["metric"] for r in rows} >= {"forgetting", "final_accuracy", "acc_after_1"}
    assert (out / "memory.csv").read_text().startswith("step,bytes\n")
    assert "forgetting=" in capsys.readouterr().out


def test_run_refuses_to_overwrite(tiny, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("run", "--config", tiny, "--out", out) == 0
    before = (out / "report.json").read_text()
    assert run("run", "--config", tiny, "--out", out, "--seed", "3") == 2
    assert "--force" in capsys.readouterr().err
    assert (out / "report.json").read_text() == before
    assert run("run", "--config", tiny, "--out", out, "--seed", "3", "--force") == 0
    assert (out / "report.json").read_text() != before


def test_run_is_deterministic(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run", "--config", tiny, "--out", a) == 0
    assert run("run", "--config", tiny, "--out", b) == 0
    for name in ("report.json", "report.txt", "metrics.csv", "memory.csv", "bank.ahcm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_flag_overrides_config(tiny, tmp_path):
    assert run("run", "--config", tiny, "--out", tmp_path / "s", "--seed", "11") == 0
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    assert rep["config"]["seed"] == 11


@pytest.mark.parametrize("body,needle", [
    ("experiment:\n  num_tasks: 2\n  bogus_key: 1\n", "bogus_key"),
    ("experiment:\n  maml:\n    inner_stepz: 1\n", "inner_stepz"),
    ("extra: 1\n", "extra"),
    ("output:\n  colour: red\n", "colour"),
])
def test_unknown_key_exits_2_naming_it(tmp_path, capsys, body, needle):
    path = tmp_path / "bad.yaml"
    path.write_text(body)
    assert run("run", "--config", path, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert needle in err and "line" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("body,needle", [
    ("experiment:\n  epochs: many\n", "line 2"),
    ("experiment:\n  epochs: 0\n", "epochs"),
    ("experiment: [1, 2\n", "line"),
    ("output:\n  format: xml\n", "format"),
])
def test_malformed_config_exits_2(tmp_path, capsys, body, needle):
    path = tmp_path / "bad.yaml"
    path.write_text(body)
    assert run("run", "--config", path) == 2
    assert needle in capsys.readouterr().err


def test_missing_config_and_bad_usage(tmp_path):
    assert run("run", "--config", tmp_path / "nope.yaml") == 2
    assert run() == 2
    assert run("frobnicate") == 2


def test_sweep_budget_axis(tiny, tmp_path, capsys):
    out = tmp_path / "sw"
    code = run("sweep", "--config", tiny, "--out", out, "--axis", "budget_bytes",
               "--values", "10240,51200,102400")
    assert code == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [int(r["value"]) for r in rows] == [10240, 51200, 102400]
    assert all(float(r["forgetting"]) >= 0 for r in rows)
    for r in rows:
        assert int(r["max_memory_bytes"]) <= int(r["value"])
        assert (out / f"budget_bytes={r['value']}" / f"seed{r['seed']}" / "report.txt").exists()
    assert "combined results" in capsys.readouterr().out


def test_sweep_inner_steps_from_config(tmp_path):
    path = tmp_path / "k.yaml"
    path.write_text(TINY + "sweep:\n  axis: maml.inner_steps\n  values: [1, 3]\n"
                           "  seeds: [0, 1]\n")
    out = tmp_path / "k"
    assert run("sweep", "--config", path, "--out", out) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert [(r["value"], r["seed"]) for r in rows] == [("1", "0"), ("1", "1"),
                                                       ("3", "0"), ("3", "1")]
    rep = json.loads((out / "maml.inner_steps=3" / "seed1" / "report.json").read_text())
    assert rep["config"]["maml"]["inner_steps"] == 3 and rep["config"]["seed"] == 1


@pytest.mark.parametrize("extra", [
    ["--axis", "budget_bytes", "--values", ""],
    ["--axis", "no_such_field", "--values", "1"],
    ["--axis", "epochs", "--values", "1.5"],
    [],
])
def test_sweep_usage_errors(tiny, tmp_path, extra):
    assert run("sweep", "--config", tiny, "--out", tmp_path / "x", *extra) == 2


def test_sweep_refuses_to_overwrite(tiny, tmp_path):
    args = ["sweep", "--config", tiny, "--out", tmp_path / "w", "--axis", "epochs",
            "--values", "1"]
    assert run(*args) == 0
    assert run(*args) == 2
    assert run(*args, "--force") == 0


def test_gradcheck_passes_and_lists_checks(capsys):
    assert run("gradcheck") == 0
    out = capsys.readouterr().out
    assert "recon_grad[depth=1]" in out and "meta_gradient[second-order]" in out
    assert "ewc_penalty" in out and "FAIL" not in out


def test_gradcheck_catches_injected_sign_error(monkeypatch, capsys):
    real = cmp.recon_loss_and_grad

    def flipped(params, F):
        loss, g = real(params, F)
        g = dict(g)
        g["dec.0.bias"] = -g["dec.0.bias"]
        return loss, g

    monkeypatch.setattr(cmp, "recon_loss_and_grad", flipped)
    assert run("gradcheck") == 1
    out = capsys.readouterr().out
    assert "FAILED" in out and "recon_grad" in out


def test_memcheck_synthetic_default_bank(capsys):
    assert run("memcheck") == 0
    out = capsys.readouterr().out
    assert "88 bytes" in out
    assert "1163" in out and "102,344" in out
    assert out.strip().endswith("PASS")


def write_bank(tmp_path, **kw):
    from ahc.continual import ExperimentConfig
    bank = cli.synthetic_bank(ExperimentConfig(**kw), n_inserts=50)
    path = tmp_path / "bank.ahcm"
    path.write_bytes(serialize(bank))
    return path


def test_memcheck_file_roundtrip(tmp_path, capsys):
    path = write_bank(tmp_path)
    assert run("memcheck", path) == 0
    assert "PASS" in capsys.readouterr().out


def test_memcheck_truncated_file_names_offset(tmp_path, capsys):
    path = write_bank(tmp_path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-30])
    assert run("memcheck", path) == 1
    assert f"byte offset {len(blob) - 30}" in capsys.readouterr().out
    path.write_bytes(b"JUNK" + blob[4:])
    assert run("memcheck", path) == 1
    assert "byte offset 0" in capsys.readouterr().out


def test_memcheck_budget_violation_names_record(tmp_path, capsys):
    path = write_bank(tmp_path)
    cfg = tmp_path / "small.yaml"
    cfg.write_text("experiment:\n  budget_bytes: 880\n")
    assert run("memcheck", path, "--config", cfg) == 1
    assert "record 10" in capsys.readouterr().out


def test_dump_prints_every_record(tmp_path, capsys):
    path = write_bank(tmp_path)
    assert run("dump", path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("# ") and "d=10" in lines[0]
    assert len(lines) == 2 + 50
    assert len(lines[2].split(",")[-1].split()) == 10


def test_dump_corrupt_file(tmp_path):
    path = tmp_path / "bad.ahcm"
    path.write_bytes(b"AHCM")
    assert run("dump", path) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ahc.cli", "memcheck"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "PASS" in proc.stdout
