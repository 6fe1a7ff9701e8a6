import dataclasses

import numpy as np
import pytest

from stealthpatch.colorspace import Palette
from stealthpatch.detector import DetectorConfig, DetectorWeights
from stealthpatch.fileio import (
    FormatError,
    ImageFile,
    PipelineConfig,
    decode_ppm,
    encode_ppm,
    format_config,
    format_metrics,
    load_array,
    load_dataset,
    load_image,
    load_palette,
    load_weights,
    parse_annotations,
    parse_config,
    parse_metrics,
    save_array,
    save_dataset,
    save_image,
    save_palette,
    save_weights,
)
from stealthpatch.scene import make_dataset


def random_image(rng, h=3, w=3):
    return ImageFile(rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8))


def test_ppm_round_trip(rng, tmp_path):
    img = random_image(rng)
    save_image(img, tmp_path / "a.ppm")
    assert load_image(tmp_path / "a.ppm") == img
    assert img.width == 3 and img.height == 3
    wide = random_image(rng, 5, 7)
    assert decode_ppm(encode_ppm(wide)) == wide


def test_float_array_round_trip(rng, tmp_path):
    arr = np.rint(rng.random((3, 4, 5)) * 255) / 255
    save_image(arr, tmp_path / "b.ppm")
    np.testing.assert_array_equal(load_image(tmp_path / "b.ppm").to_array(), arr)


def test_header_comments_and_whitespace():
    data = b"P6 # comment\n2\t1\n# another\n255\n" + bytes(range(6))
    img = decode_ppm(data)
    np.testing.assert_array_equal(img.pixels.reshape(-1), np.arange(6))


def test_truncated_raster_is_rejected(rng):
    data = encode_ppm(random_image(rng))
    with pytest.raises(FormatError, match="truncated"):
        decode_ppm(data[:-1])
    with pytest.raises(FormatError, match="header ended early"):
        decode_ppm(b"P6\n3 3")


def test_maxval_other_than_255_is_rejected():
    with pytest.raises(FormatError, match=r"byte 7: max value 65535"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


@pytest.mark.parametrize("data,offset", [
    (b"P3\n1 1\n255\n000", 0),
    (b"P6\n1 x\n255\n" + bytes(3), 5),
    (b"P6\n0 1\n255\n", 3),
])
def test_header_errors_report_byte_offset(data, offset):
    with pytest.raises(FormatError, match=f"byte {offset}:"):
        decode_ppm(data)


def test_trailing_bytes_are_rejected():
    with pytest.raises(FormatError, match="trailing"):
        decode_ppm(b"P6\n1 1\n255\n" + bytes(4))


def test_image_validation():
    with pytest.raises(ValueError):
        ImageFile(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        ImageFile.from_array(np.zeros((2, 2)))


def test_png_round_trip(rng, tmp_path):
    pytest.importorskip("PIL")
    img = random_image(rng, 4, 6)
    save_image(img, tmp_path / "c.png")
    assert load_image(tmp_path / "c.png") == img


def test_annotations(tmp_path):
    boxes, classes = parse_annotations("0 1 2 10 20\n\n1 3.5 4 8 9\n")
    np.testing.assert_array_equal(boxes, [[1, 2, 10, 20], [3.5, 4, 8, 9]])
    np.testing.assert_array_equal(classes, [0, 1])
    with pytest.raises(FormatError, match="line 2"):
        parse_annotations("0 1 2 3 4\n0 1 2 3\n")
    with pytest.raises(FormatError, match="line 1"):
        parse_annotations("0 5 5 1 1\n")
    with pytest.raises(FormatError, match="line 1"):
        parse_annotations("a 1 2 3 4\n")


def test_dataset_round_trip(tmp_path):
    scenes = make_dataset(3, 5)
    save_dataset(scenes, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    for a, b in zip(scenes, back):
        np.testing.assert_array_equal(np.rint(a.image * 255) / 255, b.image)
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.classes, b.classes)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "empty")


def test_palette_file(tmp_path):
    pal = Palette(np.array([[1, 2, 3], [250, 128, 0]]))
    save_palette(pal, tmp_path / "p.txt")
    assert (tmp_path / "p.txt").read_text() == "#010203\n#FA8000\n"
    assert load_palette(tmp_path / "p.txt") == pal
    (tmp_path / "bad.txt").write_text("#01020\n")
    with pytest.raises(FormatError):
        load_palette(tmp_path / "bad.txt")


def test_weights_round_trip_is_bit_exact(tmp_path):
    cfg = DetectorConfig(channels=(4, 8, 8, 8))
    w = DetectorWeights.init(cfg, 9)
    save_weights(w, tmp_path / "w.npz")
    back = load_weights(tmp_path / "w.npz")
    assert back.equals(w) and back.config == cfg
    first = (tmp_path / "w.npz").read_bytes()
    save_weights(w, tmp_path / "w.npz")
    assert (tmp_path / "w.npz").read_bytes() == first


def test_weights_format_errors(tmp_path):
    save_array(np.zeros(3), tmp_path / "a.npz", "teacher-patch")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "a.npz")
    with pytest.raises(FormatError):
        load_array(tmp_path / "a.npz", "student-logits")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_weights(tmp_path / "junk.npz")
    np.testing.assert_array_equal(load_array(tmp_path / "a.npz", "teacher-patch"), np.zeros(3))


def test_metrics_text():
    text = format_metrics({"ssim": 0.1, "asr": 0.25, "name": "x", "n": 3})
    assert text == "asr=0.25\nn=3\nname=x\nssim=0.1\n"
    assert parse_metrics(text) == {"asr": 0.25, "n": 3, "name": "x", "ssim": 0.1}
    with pytest.raises(FormatError, match="line 2"):
        parse_metrics("a=1\nb\n")
    with pytest.raises(ValueError):
        format_metrics({"a b": 1})


def test_config_round_trip():
    cfg = PipelineConfig()
    assert parse_config(format_config(cfg)) == cfg
    run = dataclasses.replace(cfg.run, beta=0.01, epochs=7,
                              eot=dataclasses.replace(cfg.run.eot, contrast_range=(0.9, 1.1)))
    custom = dataclasses.replace(cfg, seed=4, n_train=10,
                                 detector=dataclasses.replace(cfg.detector, anchors=((8.0, 16.0), (12.0, 30.0))),
                                 run=run)
    assert parse_config(format_config(custom)) == custom


def test_config_covers_every_field():
    keys = {line.split("=")[0] for line in format_config(PipelineConfig()).splitlines()}
    for k in ("seed", "detector.anchors", "run.beta", "run.omega", "eot.rotation_range_deg",
              "adv.lambda3", "mask.strategy", "mask.th_obj"):
        assert k in keys


def test_config_partial_and_comments():
    cfg = parse_config("# tiny\nn_train = 12  # scenes\nmask.strategy=obj_or_cls\n")
    assert cfg.n_train == 12 and cfg.run.mask.strategy == "obj_or_cls"
    assert cfg.run.epochs == PipelineConfig().run.epochs


@pytest.mark.parametrize("text,msg", [
    ("seed=0\nbogus=1\n", "line 2: unknown key"),
    ("seed\n", "line 1: expected key=value"),
    ("n_train=many\n", "line 1: bad value"),
    ("mask.strategy=all\n", "invalid configuration"),
    ("eot.patch_scale=2.0\n", "invalid configuration"),
])
def test_config_errors(text, msg):
    with pytest.raises(FormatError, match=msg):
        parse_config(text)


def test_with_seed_updates_run_seed():
    cfg = PipelineConfig().with_seed(9)
    assert cfg.seed == 9 and cfg.run.seed == 9
