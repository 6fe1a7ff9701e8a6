import numpy as np
import pytest

from stealthpatch import trainer as trainer_mod
from stealthpatch.colorspace import Palette
from stealthpatch.detector import DetectorConfig, DetectorWeights
from stealthpatch.patchgen import render_hard
from stealthpatch.scene import make_dataset
from stealthpatch.trainer import (
    CheckpointError,
    PatchTrainer,
    RunConfig,
    TeacherPatch,
    load_checkpoint,
    save_checkpoint,
    train_student,
    train_teacher,
)


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    w = DetectorWeights.init(DetectorConfig(), 0)
    # an untrained detector with lively heads is enough to exercise the loop
    w.params["obj.w"] = rng.normal(0, 0.3, w.params["obj.w"].shape)
    w.params["cls.w"] = rng.normal(0, 0.3, w.params["cls.w"].shape)
    w.params["obj.b"][:] = 0.0
    data = make_dataset(6, 11)
    pal = Palette(np.array([[30, 60, 30], [150, 120, 80], [200, 200, 180], [90, 90, 140]], dtype=np.uint8))
    teacher = TeacherPatch(np.random.default_rng(1).random((3, 8, 8)))
    return w, data, pal, teacher


def cfg(**kw):
    base = dict(epochs=2, batch_size=4, patch_size=8, seed=3)
    base.update(kw)
    return RunConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(epochs=0)
    with pytest.raises(ValueError):
        RunConfig(batch_size=0)
    with pytest.raises(ValueError):
        RunConfig(beta=-1)
    with pytest.raises(ValueError):
        RunConfig(teacher_init="noise")


def test_zero_learning_rate_keeps_initialization(setup):
    w, data, _, _ = setup
    res = train_teacher(cfg(epochs=1, lr_teacher=0.0), data, w)
    np.testing.assert_array_equal(res.patch.pixels, np.random.default_rng(3).random((3, 8, 8)))
    gray = train_teacher(cfg(epochs=1, lr_teacher=0.0, teacher_init="gray"), data, w)
    assert np.all(gray.patch.pixels == 0.5)


def test_teacher_is_deterministic_and_bounded(setup):
    w, data, _, _ = setup
    a = train_teacher(cfg(), data, w)
    b = train_teacher(cfg(), data, w)
    np.testing.assert_array_equal(a.patch.pixels, b.patch.pixels)
    assert a.log.rows == b.log.rows
    assert a.patch.pixels.min() >= 0 and a.patch.pixels.max() <= 1
    assert len(a.log.rows) == 4 and len(a.log.epoch_l_adv) == 2


def test_teacher_stays_in_unit_range_every_step(setup):
    w, data, _, _ = setup
    tr = PatchTrainer("teacher", cfg(lr_teacher=5.0), data, w)
    for _ in range(3):
        tr.train_step(data[:2])
        assert tr.param.data.min() >= 0 and tr.param.data.max() <= 1


def test_best_epoch_is_returned(setup):
    w, data, _, _ = setup
    tr = PatchTrainer("teacher", cfg(epochs=3), data, w)
    snaps = []
    for _ in range(3):
        tr.run_epoch()
        snaps.append(tr.param.data.copy())
    best = int(np.argmin(tr.log.epoch_l_adv))
    np.testing.assert_array_equal(tr.result_patch().pixels, snaps[best])


def test_student_is_deterministic(setup):
    w, data, pal, teacher = setup
    a = train_student(cfg(), data, w, teacher, pal, distill=True)
    b = train_student(cfg(), data, w, teacher, pal, distill=True)
    np.testing.assert_array_equal(a.patch.logits.data, b.patch.logits.data)
    assert all(r[2] >= 0 for r in a.log.rows)
    assert any(r[2] > 0 for r in a.log.rows)


def test_zero_beta_matches_plain_training(setup):
    w, data, pal, teacher = setup
    plain = PatchTrainer("student", cfg(beta=0.0), data, w, pal, teacher, distill=False)
    dist = PatchTrainer("student", cfg(beta=0.0), data, w, pal, teacher, distill=True)
    for _ in range(2):
        plain.run_epoch()
        dist.run_epoch()
        np.testing.assert_array_equal(plain.param.data, dist.param.data)
    assert [r[1] for r in plain.log.rows] == [r[1] for r in dist.log.rows]


def test_distillation_changes_trajectory(setup):
    w, data, pal, teacher = setup
    a = train_student(cfg(), data, w, teacher, pal, distill=False)
    b = train_student(cfg(beta=1.0), data, w, teacher, pal, distill=True)
    assert not np.array_equal(a.patch.logits.data, b.patch.logits.data)


def test_hard_student_is_in_palette(setup):
    w, data, pal, teacher = setup
    res = train_student(cfg(), data, w, teacher, pal, distill=True)
    img = render_hard(res.patch).data
    members = {tuple(c) for c in pal.as_unit()}
    assert all(tuple(px) in members for px in img.reshape(3, -1).T)


def test_student_prerequisites(setup, caplog):
    w, data, pal, teacher = setup
    with pytest.raises(ValueError):
        PatchTrainer("student", cfg(), data, w, None)
    with pytest.raises(ValueError):
        PatchTrainer("student", cfg(), data, w, pal, None, distill=True)
    with pytest.raises(ValueError):
        PatchTrainer("teacher", cfg(), [], w)
    with pytest.raises(ValueError):
        PatchTrainer("other", cfg(), data, w)
    PatchTrainer("student", cfg(), data, w, Palette(np.array([[1, 2, 3]])), teacher, distill=True)
    assert "single color" in caplog.text


def test_non_finite_loss_aborts(setup, monkeypatch):
    w, data, _, _ = setup
    from stealthpatch import tensor as T

    monkeypatch.setattr(trainer_mod, "adversarial_loss", lambda *a, **k: T.constant(np.array(np.inf)))
    with pytest.raises(FloatingPointError, match="step 0"):
        train_teacher(cfg(), data, w)


@pytest.mark.parametrize("kind", ["teacher", "student"])
def test_resume_matches_uninterrupted_run(kind, setup, tmp_path):
    w, data, pal, teacher = setup
    args = (pal, teacher, True) if kind == "student" else ()
    full = PatchTrainer(kind, cfg(epochs=3), data, w, *args).fit()
    first = PatchTrainer(kind, cfg(epochs=3), data, w, *args)
    first.fit(until_epoch=1, checkpoint_path=tmp_path / "ck.npz")
    resumed = PatchTrainer(kind, cfg(epochs=3), data, w, *args)
    resumed.resume(tmp_path / "ck.npz")
    assert resumed.epoch == 1
    rest = resumed.fit()
    got = rest.patch.pixels if kind == "teacher" else rest.patch.logits.data
    want = full.patch.pixels if kind == "teacher" else full.patch.logits.data
    np.testing.assert_array_equal(got, want)
    assert rest.log.rows == full.log.rows


def test_checkpoint_round_trip(setup, tmp_path):
    w, data, pal, teacher = setup
    tr = PatchTrainer("student", cfg(), data, w, pal, teacher, True)
    tr.run_epoch()
    path = tmp_path / "s.npz"
    tr.save(path)
    state = load_checkpoint(path)
    np.testing.assert_array_equal(state["param"], tr.param.data)
    assert state["rng"] == tr.rng.bit_generator.state
    assert state["epoch"] == 1 and state["step"] == tr.step
    other = PatchTrainer("student", cfg(), data, w, pal, teacher, True)
    other.resume(path)
    np.testing.assert_array_equal(other.param.data, tr.param.data)
    with pytest.raises(ValueError):
        PatchTrainer("teacher", cfg(), data, w).resume(path)


def test_truncated_checkpoint_is_rejected(setup, tmp_path):
    w, data, _, _ = setup
    tr = PatchTrainer("teacher", cfg(), data, w)
    path = tmp_path / "t.npz"
    tr.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")


def test_checkpoint_version_mismatch(setup, tmp_path, monkeypatch):
    w, data, _, _ = setup
    state = PatchTrainer("teacher", cfg(), data, w).state_dict()
    monkeypatch.setattr(trainer_mod, "CHECKPOINT_VERSION", 99)
    save_checkpoint(state, tmp_path / "v.npz")
    monkeypatch.setattr(trainer_mod, "CHECKPOINT_VERSION", 1)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.npz")


def test_log_csv_format(setup):
    w, data, _, _ = setup
    log = train_teacher(cfg(epochs=1), data, w).log
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,l_adv,l_distill,l_total,mean_obj"
    assert len(lines) == 3 and lines[1].startswith("1,")
