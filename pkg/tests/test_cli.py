import subprocess
import sys

import numpy as np
import pytest

from crm.cli import TRAIN_KEYS, UsageError, build_parser, main, read_config_file, resolve_seed, resolve_settings
from crm.data import MANIFEST, read_mask_png, write_mask_png
from crm.training import load_checkpoint

SUBCOMMANDS = ["synth", "perturb", "train", "refine", "eval", "bench", "reproduce"]
TINY_FLAGS = ["--base-channels", "4", "--latent-channels", "8", "--depth", "1", "--hidden", "8,8,8,8"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--n", "4", "--res", "64", "--out", str(d), "--seed", "5"]) == 0
    assert main(["perturb", "--corpus", str(d), "--seed", "1"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["train", "--corpus", str(corpus), "--out", str(out), "--total-steps", "3", "--patch-size", "32",
            "--batch-size", "2", "--log-every", "0", *TINY_FLAGS]
    assert main(argv) == 0
    return out / "final.crm"


def test_synth_100_items(tmp_path):
    assert main(["synth", "--n", "100", "--res", "128", "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*.img.png"))) == 100
    assert len(list(tmp_path.glob("*.gt.png"))) == 100
    assert len((tmp_path / MANIFEST).read_text().splitlines()) == 101


def test_unknown_flag_exits_2(capsys):
    assert main(["refine", "--unknown-flag"]) == 2
    assert "usage:" in capsys.readouterr().err
    full = ["refine", "--image", "a", "--mask", "b", "--ckpt", "c", "--out", "d", "--unknown-flag"]
    assert main(full) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--unknown-flag" in err


def test_missing_subcommand_exits_2():
    assert main([]) == 2


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_0_and_lists_flags(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    out = capsys.readouterr().out
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "crm", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "synth" in r.stdout


def test_perturb_writes_coarse(corpus):
    coarse = sorted(corpus.glob("*.coarse.png"))
    assert len(coarse) == 4
    assert "needs_perturbation" in (corpus / MANIFEST).read_text()


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\npatch_size = 48\nlr = 1e-3  # trailing\nhidden = 8,8,8,8\n")
    vals = read_config_file(cfg)
    s = resolve_settings(TRAIN_KEYS, vals, {"lr": 5e-4})
    assert s["patch_size"] == 48  # file over default
    assert s["lr"] == 5e-4  # flag over file
    assert s["batch_size"] == 8  # default
    assert s["hidden"] == (8, 8, 8, 8)


def test_unknown_config_key(tmp_path, corpus):
    cfg = tmp_path / "c.txt"
    cfg.write_text("patch_size = 32\nlearning_rate = 1\n")
    with pytest.raises(UsageError):
        resolve_settings(TRAIN_KEYS, read_config_file(cfg), {})
    assert main(["train", "--corpus", str(corpus), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_bad_config_line(tmp_path, corpus):
    cfg = tmp_path / "c.txt"
    cfg.write_text("just words\n")
    assert main(["train", "--corpus", str(corpus), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("CRM_SEED", raising=False)
    assert resolve_seed(None) == 0
    monkeypatch.setenv("CRM_SEED", "42")
    assert resolve_seed(None) == 42
    assert resolve_seed(None, 7) == 7
    assert resolve_seed(3, 7) == 3
    monkeypatch.setenv("CRM_SEED", "x")
    with pytest.raises(UsageError):
        resolve_seed(None)


def test_crm_seed_env_drives_synth(tmp_path, monkeypatch):
    monkeypatch.setenv("CRM_SEED", "9")
    assert main(["synth", "--n", "1", "--res", "32", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "s000009.img.png").exists()


def test_train_outputs(ckpt):
    ck = load_checkpoint(ckpt)
    assert ck.step == 3
    assert ck.config["model"]["base_channels"] == 4
    assert ck.config["train"]["patch_size"] == 32
    assert (ckpt.parent / "loss.tsv").read_text().count("\n") == 4


def test_refine_eval_bench(corpus, ckpt, tmp_path, capsys):
    img, msk = corpus / "s000005.img.png", corpus / "s000005.coarse.png"
    out = tmp_path / "r.png"
    argv = ["refine", "--image", str(img), "--mask", str(msk), "--ckpt", str(ckpt),
            "--schedule", "0.125,0.25,0.5,1.0", "--out", str(out), "--trace-dir", str(tmp_path / "tr")]
    assert main(argv) == 0
    assert read_mask_png(out).shape == (1, 64, 64)
    # 64 px input: ratios below 0.5 fall under the 32 px floor
    assert sorted(p.name for p in (tmp_path / "tr").iterdir()) == ["stage0_r0.5.png", "stage1_r1.png"]
    assert main(argv[:-2] + ["--binary"]) == 0
    assert set(np.unique(read_mask_png(out))) <= {0.0, 1.0}

    rep = tmp_path / "rep.tsv"
    assert main(["eval", "--corpus", str(corpus), "--ckpt", str(ckpt), "--schedule", "uniform:2", "--report", str(rep)]) == 0
    text = rep.read_text()
    assert text.startswith("# schedule\t0.5,1") and "sha256=" in text
    assert len([l for l in text.splitlines() if l.startswith("s0")]) == 4

    capsys.readouterr()
    assert main(["bench", "--ckpt", str(ckpt), "--res", "64", "--schedule", "uniform:2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["stage", "ratio", "input", "seconds", "gmacs"]
    assert [l.split("\t")[2] for l in lines[1:3]] == ["32x32", "64x64"]
    assert lines[-1].startswith("total")


def test_refine_is_deterministic(corpus, ckpt, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"{k}.png"
        assert main(["refine", "--image", str(corpus / "s000006.img.png"), "--mask", str(corpus / "s000006.coarse.png"),
                     "--ckpt", str(ckpt), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_bench_without_checkpoint(capsys):
    assert main(["bench", "--res", "64", "--schedule", "1"]) == 0
    assert "total" in capsys.readouterr().out


def test_bad_schedule_exits_2(corpus, ckpt, tmp_path):
    argv = ["refine", "--image", str(corpus / "s000005.img.png"), "--mask", str(corpus / "s000005.coarse.png"),
            "--ckpt", str(ckpt), "--out", str(tmp_path / "x.png"), "--schedule", "0.5,0.25"]
    assert main(argv) == 2


def test_bad_png_exits_3(corpus, ckpt, tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    argv = ["refine", "--image", str(bad), "--mask", str(corpus / "s000005.coarse.png"),
            "--ckpt", str(ckpt), "--out", str(tmp_path / "x.png")]
    assert main(argv) == 3
    rgb_as_mask = ["refine", "--image", str(corpus / "s000005.img.png"), "--mask", str(corpus / "s000005.img.png"),
                   "--ckpt", str(ckpt), "--out", str(tmp_path / "x.png")]
    assert main(rgb_as_mask) == 3


def test_missing_files_exit_3(corpus, tmp_path):
    assert main(["eval", "--corpus", str(corpus), "--ckpt", str(tmp_path / "nope.crm"), "--report", str(tmp_path / "r")]) == 3
    assert main(["perturb", "--corpus", str(tmp_path / "nowhere")]) == 3


def test_corrupt_checkpoint_exits_3(corpus, tmp_path):
    bad = tmp_path / "bad.crm"
    bad.write_bytes(b"CRM0" + bytes(40))
    assert main(["eval", "--corpus", str(corpus), "--ckpt", str(bad), "--report", str(tmp_path / "r")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_4(corpus, tmp_path):
    argv = ["train", "--corpus", str(corpus), "--out", str(tmp_path), "--total-steps", "2", "--patch-size", "32",
            "--batch-size", "1", "--lr", "1e30", "--log-every", "0", *TINY_FLAGS]
    assert main(argv) == 4
    assert (tmp_path / "last_good.crm").exists()


def test_invalid_training_settings_exit_2(corpus, tmp_path):
    argv = ["train", "--corpus", str(corpus), "--out", str(tmp_path), "--hidden", "8,8", *TINY_FLAGS[:-2]]
    assert main(argv) == 2


def test_reproduce_missing_checkpoint_exits_3(tmp_path):
    assert main(["reproduce", "--preset", "stage-table", "--out", str(tmp_path)]) == 3


@pytest.mark.parametrize("preset,rows", [("stage-table", 5), ("schedule-sweep", 4), ("ablate-cam", 4)])
def test_reproduce_presets_tiny(tmp_path_factory, preset, rows):
    base = tmp_path_factory.getbasetemp() / "repro"
    argv = ["reproduce", "--preset", preset, "--out", str(base / preset), "--ckpt-dir", str(base / "models"),
            "--data-dir", str(base / "heldout"), "--train", "--n-train", "4", "--train-res", "64",
            "--n-test", "2", "--test-res", "256", "--steps", "2"]
    assert main(argv) == 0
    tsv = (base / preset / f"{preset}.tsv").read_text().splitlines()
    body = [l for l in tsv if not l.startswith("#")]
    assert len(body) == rows + 1
    assert (base / preset / f"{preset}.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    if preset == "stage-table":
        assert [l.split("\t")[0] for l in body[1:]] == ["coarse", "0.125", "0.25", "0.5", "1"]
    if preset == "schedule-sweep":
        assert [l.split("\t")[0] for l in body[1:]] == ["1", "2", "4", "8"]
    if preset == "ablate-cam":
        grid = {tuple(l.split("\t")[1:3]) for l in body[1:]}
        assert grid == {("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")}
