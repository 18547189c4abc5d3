import csv
import subprocess
import sys

import pytest

from modasr.cli import EXIT_CODES, main

TINY = """\
world.n_families = 2
world.langs_per_family = 2
model.n_blocks = 2
model.d_model = 16
model.d_ff = 32
model.n_heads = 2
trainer.iterations = 200
trainer.eval_interval = 100
trainer.gamma = 50
trainer.lr = 0.005
data.train_utts = 48
data.eval_utts = 16
adapt.iterations = 20
ft.iterations = 10
analysis.n_parts = 2
analysis.permutations = 50
"""


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    common = ["--config", cfg, "--out", root / "run", "--quiet"]
    assert run("gen-data", *common) == 0
    assert run("train", *common) == 0
    return root, common


def test_train_outputs(pipeline, capsys):
    root, _ = pipeline
    run_dir = root / "run"
    for name in ("metrics.csv", "final_cer.csv", "t_history.csv", "checkpoint/manifest.txt", "checkpoint/payload.bin"):
        assert (run_dir / name).is_file(), name
    assert {r["language"] for r in read_csv(run_dir / "final_cer.csv")} == {"f0l0", "f0l1", "f1l0", "f1l1"}


def test_paths_are_echoed(pipeline, capsys):
    root, common = pipeline
    out = root / "echo"
    assert run("eval", *common[:2], "--out", out, "--data", root / "run" / "data", "--checkpoint", root / "run" / "checkpoint", "--quiet") == 0
    assert f"wrote {out / 'eval_eval.csv'}" in capsys.readouterr().out


def test_train_split_beats_disjoint_language(pipeline):
    root, common = pipeline
    ck = root / "run" / "checkpoint"
    assert run("eval", *common, "--checkpoint", ck, "--language", "f0l0", "--split", "train") == 0
    own = float(read_csv(root / "run" / "eval_train.csv")[0]["cer"])
    assert run("eval", *common, "--checkpoint", ck, "--language", "f0l0", "--corpus", "new1_fresh", "--split", "train") == 0
    other = float(read_csv(root / "run" / "eval_train.csv")[0]["cer"])
    assert own < other


def test_adapt_and_analyze(pipeline):
    root, common = pipeline
    ck = root / "run" / "checkpoint"
    assert run("adapt", *common, "--checkpoint", ck, "--language", "new1_fresh", "--further-ft") == 0
    for stage in ("adapt", "ft"):
        assert (root / "run" / f"{stage}_new1_fresh" / "checkpoint" / "manifest.txt").is_file()
    assert run("eval", *common, "--checkpoint", root / "run" / "ft_new1_fresh" / "checkpoint", "--language", "new1_fresh") == 0
    assert run("analyze", *common, "--checkpoint", ck) == 0
    rows = read_csv(root / "run" / "family_contrast.csv")
    assert [r["part"] for r in rows] == ["0", "1", "all"]
    assert len(read_csv(root / "run" / "collapse.csv")) == 200 // 50 + 1
    assert len(read_csv(root / "run" / "similarity_part0.csv")) == 4


def test_error_codes(pipeline, tmp_path, capsys):
    root, common = pipeline
    ck = root / "run" / "checkpoint"
    assert run("eval", *common, "--checkpoint", ck, "--language", "zz") == EXIT_CODES["unknown-language"]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: unknown-language: ")
    bad = tmp_path / "bad.cfg"
    bad.write_text("trainer.bogus = 1\n")
    assert run("train", "--config", bad, "--out", tmp_path) == EXIT_CODES["config"]
    assert run("train", "--config", tmp_path / "absent.cfg") == EXIT_CODES["missing-file"]
    assert run("train", *common[:2], "--out", tmp_path / "empty") == EXIT_CODES["missing-file"]
    assert run("eval", "--checkpoint", tmp_path) == EXIT_CODES["missing-file"]
    (tmp_path / "manifest.txt").write_text("format_version = 9\n[model]\n[languages]\n[heads]\n[frozen_rows]\n[params]\n")
    (tmp_path / "payload.bin").write_bytes(b"")
    assert run("eval", "--checkpoint", tmp_path) == EXIT_CODES["checkpoint"]
    assert run("ablate", *common, "--axis", "depth", "--grid", "1") == EXIT_CODES["config"]
    lines = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("error: ") and line.count(": ") >= 2 for line in lines)


def test_divergence_exit_code(pipeline, tmp_path):
    root, common = pipeline
    cfg = tmp_path / "hot.cfg"
    cfg.write_text(TINY + "trainer.lr = 1e300\ntrainer.iterations = 20\n")
    code = run("train", "--config", cfg, "--data", root / "run" / "data", "--out", tmp_path, "--quiet")
    assert code == EXIT_CODES["divergence"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "modasr.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert all(c in res.stdout for c in ("gen-data", "train", "adapt", "eval", "ablate", "analyze"))
