import numpy as np
import pytest

from stealthpatch.detector import DetectorConfig, DetectorWeights, Detection
from stealthpatch.metrics import (
    AsrResult,
    SsimParams,
    attack_success_rate,
    confidence_curve,
    curves_to_csv,
    frame_attacked,
    gray_patch,
    luminance,
    patch_ssim,
    read_loss_csv,
    ssim,
)
from stealthpatch.scene import Scene, make_dataset


def ref_ssim(x, y, k1=0.01, k2=0.03, big_l=255.0):
    """Textbook single-window SSIM with explicit loops for the moments."""
    xs, ys = list(np.ravel(x)), list(np.ravel(y))
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((a - mx) ** 2 for a in xs) / n
    vy = sum((b - my) ** 2 for b in ys) / n
    cxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
    c1, c2 = (k1 * big_l) ** 2, (k2 * big_l) ** 2
    return (2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_self_similarity_is_exactly_one(rng):
    x = rng.integers(0, 256, size=(16, 16)).astype(np.float64)
    assert ssim(x, x) == 1.0
    c = rng.integers(0, 256, size=(3, 8, 8)).astype(np.float64)
    assert ssim(c, c) == 1.0


def test_constant_images():
    a, b = 40.0, 200.0
    c1 = (0.01 * 255) ** 2
    got = ssim(np.full((4, 4), a), np.full((4, 4), b))
    assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_random_images_match_direct_formula(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, size=(16, 16)).astype(np.float64)
    y = rng.integers(0, 256, size=(16, 16)).astype(np.float64)
    assert abs(ssim(x, y) - ref_ssim(x, y)) < 1e-10
    assert abs(ssim(x, y) - ssim(y, x)) < 1e-12


def test_bounded(rng):
    for _ in range(50):
        x = rng.integers(0, 256, size=(8, 8)).astype(np.float64)
        y = 255 - x if rng.random() < 0.5 else rng.integers(0, 256, size=(8, 8)).astype(np.float64)
        assert abs(ssim(x, y)) <= 1


def test_color_inputs_use_bt601(rng):
    x = rng.random((3, 6, 6)) * 255
    y = rng.random((3, 6, 6)) * 255
    lx = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    ly = 0.299 * y[0] + 0.587 * y[1] + 0.114 * y[2]
    assert ssim(x, y) == pytest.approx(ref_ssim(lx, ly), abs=1e-10)
    np.testing.assert_allclose(luminance(x), lx, rtol=1e-14)


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        luminance(np.zeros((2, 4, 4)))
    p = SsimParams(dynamic_range=1.0)
    assert p.c1 == pytest.approx(1e-4) and p.c2 == pytest.approx(9e-4)


def test_patch_ssim_quantizes_unit_images(rng):
    a = rng.random((3, 8, 8))
    b = rng.random((3, 8, 8))
    q = lambda im: np.rint(im * 255)  # noqa: E731
    assert patch_ssim(a, b) == pytest.approx(ref_ssim(luminance(q(a)), luminance(q(b))), abs=1e-10)


# ---------------------------------------------------------------- ASR


def test_asr_ratio():
    r = AsrResult(10, 9)
    assert r.asr == 0.9
    assert AsrResult(0, 0).asr == 0.0


def test_frame_attacked_rules():
    sc = Scene(np.zeros((3, 64, 64)), [[10, 10, 30, 50]], [0])
    hit = Detection((10.0, 10.0, 30.0, 50.0), 0, 0.9)
    assert not frame_attacked(sc, [hit], 0.5)
    assert frame_attacked(sc, [Detection(hit.box, 1, 0.9)], 0.5)
    assert frame_attacked(sc, [Detection(hit.box, 0, 0.4)], 0.5)
    assert frame_attacked(sc, [Detection((40.0, 10.0, 60.0, 50.0), 0, 0.9)], 0.5)
    assert frame_attacked(sc, [], 0.5)


@pytest.fixture(scope="module")
def scenes():
    return make_dataset(6, 21)


def test_forced_silent_detector_gives_full_asr(scenes):
    w = DetectorWeights.init(DetectorConfig(), 0)
    w.params["obj.w"][:] = 0.0
    w.params["obj.b"][:] = -50.0
    res = attack_success_rate(scenes, gray_patch(8), w)
    assert res.total_frames == 6 and res.attacked_frames == 6 and res.asr == 1.0


def test_asr_order_invariant(scenes, rng):
    w = DetectorWeights.init(DetectorConfig(), 2)
    w.params["obj.w"] = rng.normal(0, 0.5, w.params["obj.w"].shape)
    w.params["obj.b"][:] = 1.0
    w.params["cls.b"][:] = 2.0
    patch = rng.random((3, 8, 8))
    a = attack_success_rate(scenes, patch, w)
    b = attack_success_rate(scenes[::-1], patch, w, batch=4)
    assert a == b
    with pytest.raises(ValueError):
        attack_success_rate([], patch, w)


# ---------------------------------------------------------------- curves

CSV = "step,l_adv,l_distill,l_total,mean_obj\n1,2.0,0.0,2.0,0.8\n2,1.5,0.0,1.5,0.6\n3,1.0,0.0,1.0,0.4\n4,0.5,0.0,0.5,0.2\n"


def test_single_row_gives_one_point():
    text = "step,l_adv,l_distill,l_total,mean_obj\n1,1.0,0.5,1.5,0.7\n"
    assert confidence_curve(text) == [(1, 0.7)]


def test_curve_averages_steps_per_epoch(tmp_path):
    path = tmp_path / "loss.csv"
    path.write_text(CSV)
    assert confidence_curve(path, 2) == [(1, pytest.approx(0.7)), (2, pytest.approx(0.3))]
    assert confidence_curve(CSV) == confidence_curve(CSV)
    with pytest.raises(ValueError):
        confidence_curve(CSV, 0)


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("a,b\n1,2\n", 1),
    ("step,l_adv,l_distill,l_total,mean_obj\n1,2,3,4,5\n1,2,3\n", 3),
    ("step,l_adv,l_distill,l_total,mean_obj\n1,2,x,4,5\n", 2),
])
def test_malformed_csv_names_line(text, line):
    with pytest.raises(ValueError, match=f"line {line}"):
        read_loss_csv(text)


def test_curves_csv():
    out = curves_to_csv({1.0: [(1, 0.5)], 0.0: [(1, 0.75), (2, 0.25)]})
    assert out == "beta,epoch,mean_obj\n0.0,1,0.75\n0.0,2,0.25\n1.0,1,0.5\n"
