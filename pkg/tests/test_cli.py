import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from fdlab import cli
from fdlab.model import LmConfig, LmModel, save_checkpoint

ROOT = Path(__file__).resolve().parents[1]


def tiny_corpus(root: Path) -> Path:
    d = root / "corpus"
    d.mkdir()
    words = "the cat sat on the mat and the dog sat on the log".split()
    lines = [" ".join(words[(i * 3) % 7:] + words[: (i * 3) % 7]) for i in range(60)]
    (d / "train.txt").write_text("\n".join(lines) + "\n")
    (d / "valid.txt").write_text("\n".join(lines[:8]) + "\n")
    (d / "test.txt").write_text("\n".join(lines[8:16]) + "\n")
    return d


def tiny_config(root: Path, extra: str = "") -> Path:
    tiny_corpus(root)
    p = root / "tiny.toml"
    p.write_text(f"""
[data]
path = "corpus"

[model]
embed_dim = 6
hidden_dim = 6

[regularizer]
kinds = ["FD"]
kappa = 0.1

[run]
batch_size = 4
bptt = 10
epochs = 2
eval_batch_size = 2
{extra}""")
    return p


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_missing_config_names_path(tmp_path, capsys):
    code, _, err = run(["train", tmp_path / "absent.toml", "--out", tmp_path / "o"], capsys)
    assert code != 0 and "absent.toml" in err
    assert not (tmp_path / "o").exists()


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tiny_config(tmp_path, "epoks = 3\n")
    code, _, err = run(["train", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "epoks" in err


def test_train_writes_artifacts(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    code, out, _ = run(["train", cfg, "--out", tmp_path / "o", "--seed", "3"], capsys)
    assert code == 0
    assert {p.name for p in (tmp_path / "o").iterdir()} == {"metrics.csv", "timing.csv", "config.toml", "best.ckpt"}
    assert out.strip().splitlines()[-1].startswith("best_val_ppl=")
    assert "seed = 3" in (tmp_path / "o" / "config.toml").read_text()


def test_resolved_config_reproduces_run(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    run(["train", cfg, "--out", tmp_path / "a"], capsys)
    run(["train", tmp_path / "a" / "config.toml", "--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_same_seed_identical_csv(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    run(["train", cfg, "--out", tmp_path / "a"], capsys)
    run(["train", cfg, "--out", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_smoke_config_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "fdlab.cli", "train", str(ROOT / "configs" / "smoke.toml"),
                           "--out", str(tmp_path / "s")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert time.perf_counter() - t0 < 60


def test_eval_last_line_and_rate_zero_mc(tmp_path, capsys):
    cfg = tiny_config(tmp_path, "")
    text = cfg.read_text().replace("hidden_dim = 6", "hidden_dim = 6\ndropout_embedding = 0.0\n"
                                   "dropout_input = 0.0\ndropout_hidden = 0.0\ndropout_output = 0.0\n"
                                   "dropout_weight = 0.0")
    cfg.write_text(text)
    assert run(["train", cfg, "--out", tmp_path / "o"], capsys)[0] == 0
    ckpt, data = tmp_path / "o" / "best.ckpt", tmp_path / "corpus"
    code, plain, _ = run(["eval", ckpt, data], capsys)
    assert code == 0
    code, mc, _ = run(["eval", ckpt, data, "--mc", "1"], capsys)
    assert code == 0
    a = float(plain.strip().splitlines()[-1].removeprefix("ppl="))
    b = float(mc.strip().splitlines()[-1].removeprefix("ppl="))
    assert a == pytest.approx(b, rel=1e-12)


def test_eval_data_from_env(tmp_path, capsys, monkeypatch):
    cfg = tiny_config(tmp_path)
    run(["train", cfg, "--out", tmp_path / "o"], capsys)
    monkeypatch.setenv("FDLAB_DATA", str(tmp_path / "corpus"))
    code, out, _ = run(["eval", tmp_path / "o" / "best.ckpt", "--split", "valid"], capsys)
    assert code == 0 and out.strip().splitlines()[-1].startswith("ppl=")


def test_eval_corrupted_checkpoint(tmp_path, capsys):
    d = tiny_corpus(tmp_path)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, LmModel(LmConfig(vocab_size=12, embed_dim=2, hidden_dim=2)))
    p.write_bytes(p.read_bytes()[:-7])
    code, _, err = run(["eval", p, d], capsys)
    assert code == 2 and err.startswith("error:") and "Traceback" not in err


def test_eval_vocab_mismatch(tmp_path, capsys):
    d = tiny_corpus(tmp_path)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, LmModel(LmConfig(vocab_size=5, embed_dim=2, hidden_dim=2)))
    code, _, err = run(["eval", p, d], capsys)
    assert code == 2 and "vocabulary" in err


def test_verify_default_passes(capsys):
    code, out, _ = run(["verify"], capsys)
    report = json.loads(out)
    assert code == 0 and report["passed"] and report["bits"] == 12 and report["trials"] == 100
    for claim in report["claims"].values():
        assert {"worst_deviation", "worst_config", "passed"} <= set(claim)


def test_verify_refuses_large_budget(capsys):
    code, out, err = run(["verify", "--bits", "30"], capsys)
    assert code == 2 and "budget" in err and out == ""


def read_grid(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_grid_of_one_equals_train(tmp_path, capsys):
    cfg = tiny_config(tmp_path, "seed = 4\n")
    run(["train", cfg, "--out", tmp_path / "t"], capsys)
    assert run(["grid", cfg, "--out", tmp_path / "g"], capsys)[0] == 0
    assert (tmp_path / "t" / "metrics.csv").read_bytes() == (tmp_path / "g" / "run_000" / "metrics.csv").read_bytes()
    rows = read_grid(tmp_path / "g" / "grid.csv")
    assert len(rows) == 1 and rows[0]["seed"] == "4"


def test_grid_summary_and_parallel(tmp_path, capsys):
    cfg = tiny_config(tmp_path, """
[grid]
runs = 3
baseline = 1000.0

[grid.params]
"regularizer.kappa" = { uniform = [0.0, 0.3] }
"optimizer.nonmono" = [5, 10]
""")
    code, out, _ = run(["grid", cfg, "--out", tmp_path / "g", "--parallel", "2"], capsys)
    assert code == 0 and "top5_mean" in out
    summary = json.loads((tmp_path / "g" / "summary.json").read_text())
    assert {"best", "top5_mean", "top10_mean", "beating_baseline"} <= set(summary)
    assert summary["runs"] == 3 and summary["beating_baseline"] == 3
    rows = read_grid(tmp_path / "g" / "grid.csv")
    assert [r["seed"] for r in rows] == ["0", "1", "2"]
    assert float(summary["best"]) == min(float(r["best_val_ppl"]) for r in rows)
    # serial execution gives the same numbers
    run(["grid", cfg, "--out", tmp_path / "s"], capsys)
    assert (tmp_path / "s" / "grid.csv").read_bytes() == (tmp_path / "g" / "grid.csv").read_bytes()


def test_summarize():
    s = cli.summarize([3.0, float("inf"), 1.0, 2.0], baseline=2.5)
    assert s == {"runs": 4, "finished": 3, "best": 1.0, "top5_mean": 2.0, "top10_mean": 2.0,
                 "beating_baseline": 2, "baseline": 2.5}
    assert cli.summarize([1.0], None)["beating_baseline"] is None
