import json
import subprocess
import sys

import pytest

from qdaed import checkpoint as ckpt_io
from qdaed.cli import main, parse_config_text
from qdaed.errors import ConfigError
from qdaed.quantization import PackedIntTensor

from conftest import tree_bytes


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--seed", 1, "--out", d / "data", "--train", 60, "--val", 30, "--test", 30, "--seconds", 0.5) == 0
    assert run("teacher", "--manifest", d / "data" / "manifest.tsv", "--seed", 1, "--out-logits", d / "t.tsv") == 0
    return d


def test_account_default(capsys):
    assert run("account") == 0
    out = capsys.readouterr().out
    assert "0.33" in out and "1.26" in out and "329475" in out


def test_account_bits(capsys):
    assert run("account", "--bits", 8, 4) == 0
    out = capsys.readouterr().out
    assert "8-bit" in out and "4-bit" in out and "0.0029" in out


def test_missing_out_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        run("synth", "--seed", 0)
    assert e.value.code == 2


def test_synth_idempotent(tmp_path, workdir):
    assert run("synth", "--seed", 1, "--out", tmp_path / "again", "--train", 60, "--val", 30, "--test", 30, "--seconds", 0.5) == 0
    assert tree_bytes(tmp_path / "again") == tree_bytes(workdir / "data")


def test_synth_rejects_mixed_sizes(tmp_path):
    assert run("synth", "--seed", 0, "--out", tmp_path, "--clips", 10, "--train", 5) == 2


def test_validate_only(workdir, capsys):
    assert run("eval", "--manifest", workdir / "data" / "manifest.tsv", "--validate-only") == 0
    assert "120 records" in capsys.readouterr().out


def test_train_eval_report(workdir, capsys):
    m = workdir / "data" / "manifest.tsv"
    out = workdir / "kd.qdck"
    rc = run("train", "--manifest", m, "--distill", "--teacher-logits", workdir / "t.tsv", "--hidden", 8,
             "--max-epochs", 2, "--out", out, "--out-train", workdir / "kd.train.qdck", "--quiet")
    assert rc == 0
    capsys.readouterr()
    report = workdir / "reports" / "kd.txt"
    assert run("eval", "--checkpoint", out, "--manifest", m, "--report", report) == 0
    printed = capsys.readouterr().out
    assert report.read_text() == printed
    assert (workdir / "reports" / "kd.curves.csv").read_text().startswith("class,threshold,fpr,tpr,fnr")
    assert json.loads((workdir / "reports" / "kd.json").read_text())["split"] == "test"
    # evaluating twice gives the same report
    assert run("eval", "--checkpoint", out, "--manifest", m) == 0
    assert capsys.readouterr().out == printed
    # post-training quantization at evaluation time
    assert run("eval", "--checkpoint", out, "--manifest", m, "--mode", "pm:4") == 0
    assert "mode=pm:4" in capsys.readouterr().out
    assert run("account", "--checkpoint", out, "--seq-len", 46) == 0


def test_train_pm_exports_packed(workdir):
    out = workdir / "pm8.qdck"
    assert run("train", "--manifest", workdir / "data" / "manifest.tsv", "--quant", "pm:8", "--hidden", 8,
               "--max-epochs", 1, "--out", out, "--quiet") == 0
    ck = ckpt_io.load(out)
    assert isinstance(ck.tensors["W_i"], PackedIntTensor) and ck.meta["quant"]["mode"] == "pm"


def test_train_config_errors(workdir):
    m = workdir / "data" / "manifest.tsv"
    assert run("train", "--manifest", m, "--quant", "qat:3", "--out", workdir / "x.qdck") == 2
    assert run("train", "--manifest", m, "--teacher-logits", workdir / "t.tsv", "--out", workdir / "x.qdck") == 2
    assert run("train", "--manifest", m, "--distill", "--out", workdir / "x.qdck") == 2
    assert run("train", "--manifest", m, "--temperature", 3, "--out", workdir / "x.qdck") == 2
    assert run("train", "--manifest", m) == 2
    assert not (workdir / "x.qdck").exists()


def test_config_file_and_override(workdir, capsys):
    m = workdir / "data" / "manifest.tsv"
    cfg = workdir / "run.cfg"
    cfg.write_text(f"# small run\nmanifest = {m}\nhidden = 6\nmax_epochs = 1\nquant = qat:8\nout = {workdir / 'cfg.qdck'}\n")
    assert run("train", "--config", cfg, "--quiet") == 0
    ck = ckpt_io.load(workdir / "cfg.qdck")
    assert ck.meta["model"]["hidden"] == 6 and ck.meta["quant"]["mode"] == "qat"
    assert run("train", "--config", cfg, "--hidden", 5, "--quant", "none", "--quiet") == 0
    ck = ckpt_io.load(workdir / "cfg.qdck")
    assert ck.meta["model"]["hidden"] == 5 and ck.meta["quant"]["mode"] == "none"
    bad = workdir / "bad.cfg"
    bad.write_text("hidden = 4\nlayers = 2\n")
    assert run("train", "--config", bad) == 2
    assert "unknown key" in capsys.readouterr().err


def test_parse_config_text():
    cfg = parse_config_text("lr = 0.01  # faster\ndistill = yes\n\nseed=3")
    assert cfg == {"lr": 0.01, "distill": True, "seed": 3}
    for text in ("hidden 4", "hidden = four", "seed = 1\nseed = 2", "= 3"):
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_runtime_error_exit_code(workdir, capsys):
    assert run("eval", "--checkpoint", workdir / "missing.qdck", "--manifest", workdir / "data" / "manifest.tsv") == 1
    assert "error" in capsys.readouterr().err


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "qdaed.cli", "train", "--quant", "qat:3", "--manifest", "m", "--out", "o"],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "unsupported bit-width" in res.stderr
