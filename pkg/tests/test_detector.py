import numpy as np
import pytest

from conftest import central_difference
from stealthpatch import tensor as T
from stealthpatch.detector import (
    DetectorConfig,
    DetectorOutput,
    DetectorWeights,
    assign_anchors,
    decode,
    decode_boxes,
    detection_loss,
    forward,
    iou_np,
    train_toy,
)
from stealthpatch.scene import SceneConfig, make_dataset

CFG = DetectorConfig()


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(input_size=60)
    with pytest.raises(ValueError):
        DetectorConfig(channels=(8, 8, 8))
    with pytest.raises(ValueError):
        DetectorConfig(input_size=64, grid=4)


def test_zero_weights_give_bias_objectness():
    w = DetectorWeights.init(CFG, 0)
    w.params = {k: np.zeros_like(v) for k, v in w.params.items()}
    w.params["obj.b"][:] = [-1.5, 0.25]
    out = forward(np.zeros((3, 64, 64)), w)
    want = 1 / (1 + np.exp(-np.array([-1.5, 0.25])))
    np.testing.assert_allclose(out.obj.data, np.broadcast_to(want[:, None, None], (2, 8, 8)), rtol=1e-15)
    np.testing.assert_allclose(out.cls.data, 0.5)


def test_output_shapes_and_ranges(rng):
    out = forward(rng.random((3, 64, 64)), DetectorWeights.init(CFG, 1))
    assert out.pos.shape == (8, 8, 8) and out.cls.shape == (4, 8, 8) and out.obj.shape == (2, 8, 8)
    assert out.feat.shape == (32, 8, 8)
    assert np.all((out.cls.data > 0) & (out.cls.data < 1)) and np.all((out.obj.data > 0) & (out.obj.data < 1))
    batched = forward(rng.random((2, 3, 64, 64)), DetectorWeights.init(CFG, 1))
    assert batched.batched and batched.obj.shape == (2, 2, 8, 8)


def test_objectness_gradient_wrt_image(rng):
    w = DetectorWeights.init(CFG, 3)
    # lift the heads so objectness is not saturated near zero
    w.params["obj.w"] = rng.normal(0, 0.3, w.params["obj.w"].shape)
    img = rng.random((3, 64, 64))
    x = T.tensor(img, requires_grad=True)
    T.backward(T.sum(forward(x, w).obj))

    def f(a):
        with T.no_grad():
            return float(forward(a, w).obj.data.sum())

    for _ in range(10):
        idx = tuple(int(rng.integers(0, n)) for n in img.shape)
        num = central_difference(f, [img], 0, idx)
        ana = x.grad[idx]
        assert abs(ana - num) / max(abs(ana), abs(num), 1e-7) < 1e-4


def test_forward_is_deterministic(rng):
    w = DetectorWeights.init(CFG, 0)
    img = rng.random((3, 64, 64))
    a, b = forward(img, w), forward(img.copy(), w)
    for name in ("pos", "cls", "obj", "feat"):
        np.testing.assert_array_equal(getattr(a, name).data, getattr(b, name).data)


def test_wrong_input_size_raises():
    with pytest.raises(ValueError):
        forward(np.zeros((3, 32, 32)), DetectorWeights.init(CFG, 0))


def manual_output(obj, cls=None, pos=None):
    a, g = CFG.anchors_per_cell, CFG.grid
    obj = np.asarray(obj, dtype=np.float64)
    cls = np.ones((a * CFG.num_classes, g, g)) if cls is None else cls
    pos = np.zeros((a * 4, g, g)) if pos is None else pos
    return DetectorOutput(T.constant(pos), T.constant(cls), T.constant(obj), T.constant(np.zeros((1, g, g))), CFG)


def test_decode_below_threshold_is_empty():
    assert decode(manual_output(np.full((2, 8, 8), 0.3))) == []


def test_decode_single_dominant_anchor():
    obj = np.full((2, 8, 8), 0.01)
    obj[1, 3, 5] = 0.9
    dets = decode(manual_output(obj))
    assert len(dets) == 1
    d = dets[0]
    # zero offsets: center of cell (5, 3), second anchor shape
    aw, ah = CFG.anchors[1]
    cx, cy = 5.5 * CFG.cell, 3.5 * CFG.cell
    assert d.box == pytest.approx((cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2))
    assert d.score == pytest.approx(0.9) and d.class_id == 0


def test_decode_nms_suppresses_lower_overlap():
    obj = np.full((2, 8, 8), 0.01)
    obj[0, 3, 3] = 0.9
    obj[1, 3, 3] = 0.8
    pos = np.zeros((8, 8, 8))
    # reshape the second anchor to 0.95 times the first one's size
    (w0, h0), (w1, h1) = CFG.anchors
    pos[6, 3, 3] = np.log(0.95 * w0 / w1)
    pos[7, 3, 3] = np.log(0.95 * h0 / h1)
    out = manual_output(obj, pos=pos)
    with T.no_grad():
        corners = np.stack([t.data[:, 3, 3] for t in decode_boxes(out)], -1)
    assert iou_np(corners[0], corners[1]) == pytest.approx(0.9025)
    dets = decode(out, 0.5, 0.5)
    assert len(dets) == 1 and dets[0].score == pytest.approx(0.9)
    assert len(decode(out, 0.5, 0.95)) == 2


def test_decode_sorted_and_idempotent(rng):
    out = forward(rng.random((3, 64, 64)), DetectorWeights.init(CFG, 0))
    obj = rng.random((2, 8, 8))
    o = manual_output(obj, cls=rng.random((4, 8, 8)), pos=rng.normal(size=(8, 8, 8)))
    dets = decode(o, 0.2)
    assert dets == decode(o, 0.2)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64 and 0 < d.score < 1
    with pytest.raises(ValueError):
        decode(out, 1.5)


def test_decode_score_is_obj_times_max_class():
    obj = np.full((2, 8, 8), 0.01)
    obj[0, 2, 2] = 0.8
    cls = np.full((4, 8, 8), 0.1)
    cls[1, 2, 2] = 0.9  # anchor 0, class 1
    dets = decode(manual_output(obj, cls=cls), 0.5)
    assert len(dets) == 1 and dets[0].class_id == 1 and dets[0].score == pytest.approx(0.72)


def test_assign_anchors_center_cell_and_shape():
    boxes = np.array([[10, 5, 20, 27], [30, 10, 48, 48]])
    an, gy, gx = assign_anchors(boxes, CFG)
    assert list(gx) == [1, 4] and list(gy) == [2, 3] and list(an) == [0, 1]


def test_detection_loss_gradient(rng):
    w = DetectorWeights.init(CFG, 0)
    img = rng.random((2, 3, 64, 64))
    targets = [(np.array([[10, 10, 26, 40]]), np.array([0])), (np.array([[30, 20, 50, 58]]), np.array([1]))]
    p = {k: T.tensor(v, requires_grad=True) for k, v in w.params.items()}
    T.backward(detection_loss(forward(img, w, p), targets))

    def f(bias):
        q = {k: T.constant(v) for k, v in w.params.items()}
        q["obj.b"] = T.constant(bias)
        with T.no_grad():
            return float(detection_loss(forward(img, w, q), targets).data)

    for i in range(2):
        num = central_difference(f, [w.params["obj.b"]], 0, (i,))
        assert p["obj.b"].grad[i] == pytest.approx(num, rel=1e-4)


@pytest.fixture(scope="module")
def small_set():
    return make_dataset(8, 0, SceneConfig())


def test_zero_epochs_returns_init(small_set):
    assert train_toy(small_set, epochs=0, seed=4).equals(DetectorWeights.init(CFG, 4))


def test_training_is_deterministic_and_moves(small_set):
    a = train_toy(small_set, epochs=1, seed=2)
    b = train_toy(small_set, epochs=1, seed=2)
    assert a.equals(b)
    assert not a.equals(DetectorWeights.init(CFG, 2))


def test_training_needs_data():
    with pytest.raises(ValueError):
        train_toy([], epochs=1)
