import numpy as np
import pytest

from stealthpatch.cli import main
from stealthpatch.fileio import ImageFile, load_metrics, save_image

TINY = """\
n_train=8
n_test=4
det_epochs=1
env_size=32
palette_colors=4
run.epochs=1
run.batch_size=4
run.patch_size=8
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(run_dir, config):
    common = ["--run-dir", run_dir, "--config", config]
    for cmd in (["gen-data"], ["palette"], ["train-detector"], ["train-teacher"],
                ["train-student", "--distill", "--beta", "1"], ["train-student", "--no-distill"], ["eval"]):
        assert run(*cmd, *common) == 0, cmd


def test_missing_prerequisite_is_a_dependency_error(tmp_path, capsys):
    assert run("train-student", "--run-dir", tmp_path / "r") == 2
    err = capsys.readouterr().err
    assert "gen-data" in err and "error" in err


def test_missing_teacher_is_reported(tmp_path, tiny_config, capsys):
    d = tmp_path / "r"
    for cmd in ("gen-data", "palette", "train-detector"):
        assert run(cmd, "--run-dir", d, "--config", tiny_config) == 0
    assert run("train-student", "--distill", "--run-dir", d) == 2
    assert "train-teacher" in capsys.readouterr().err


def test_palette_command(tmp_path, capsys):
    rng = np.random.default_rng(0)
    save_image(ImageFile(rng.integers(0, 256, size=(20, 20, 3)).astype(np.uint8)), tmp_path / "env.ppm")
    out = tmp_path / "pal.txt"
    assert run("palette", "--colors", 8, tmp_path / "env.ppm", "-o", out, "--run-dir", tmp_path / "r") == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 8 and all(len(ln) == 7 and ln.startswith("#") for ln in lines)


def test_bad_config_fails_cleanly(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("nonsense=1\n")
    assert run("gen-data", "--run-dir", tmp_path / "r", "--config", cfg) == 2
    assert "unknown key" in capsys.readouterr().err


@pytest.mark.slow
def test_tiny_pipeline_is_reproducible(tmp_path, tiny_config):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a, tiny_config)
    pipeline(b, tiny_config)
    m = load_metrics(a / "metrics_distill.txt")
    for key in ("asr", "ssim", "final_l_adv"):
        assert key in m
    assert "gray_asr" in load_metrics(a / "metrics_teacher.txt")
    for name in ("metrics_detector.txt", "metrics_teacher.txt", "metrics_distill.txt", "metrics_plain.txt",
                 "config.txt", "palette.txt", "detector.npz", "teacher.npz", "student_distill.npz",
                 "curves.csv", "teacher_loss.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name

    assert run("report", "--run-dir", a) == 0
    first = (a / "report.txt").read_bytes()
    assert run("report", "--run-dir", a) == 0
    assert (a / "report.txt").read_bytes() == first
    assert b"distill" in first and b"plain" in first


@pytest.mark.slow
def test_seed_flag_changes_outputs(tmp_path, tiny_config):
    for seed, d in ((0, tmp_path / "s0"), (1, tmp_path / "s1")):
        assert run("gen-data", "--run-dir", d, "--config", tiny_config, "--seed", seed) == 0
    assert (tmp_path / "s0" / "env.ppm").read_bytes() != (tmp_path / "s1" / "env.ppm").read_bytes()
    assert "seed=1" in (tmp_path / "s1" / "config.txt").read_text().splitlines()


@pytest.mark.slow
def test_paired_command_emits_table(tmp_path, tiny_config):
    d = tmp_path / "p"
    for cmd in ("gen-data", "palette", "train-detector"):
        assert run(cmd, "--run-dir", d, "--config", tiny_config) == 0
    assert run("paired", "--run-dir", d, "--seeds", "0,1") == 0
    text = (d / "paired.txt").read_text()
    assert len((d / "paired.csv").read_text().splitlines()) == 3
    assert "seed" in text
