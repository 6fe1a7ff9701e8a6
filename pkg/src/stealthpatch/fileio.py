"""File formats: PPM/PNG images, box annotations, palettes, detector weights,
metrics and the flat ``key=value`` pipeline configuration.

Images are quantized to 8 bits only here, at the file boundary.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorspace import Palette
from .detector import DetectorConfig, DetectorWeights
from .losses import AdvLossWeights, MaskConfig
from .scene import EotConfig, Scene
from .trainer import RunConfig

WEIGHTS_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its expected format."""


# ---------------------------------------------------------------- images


@dataclass
class ImageFile:
    pixels: np.ndarray  # (H, W, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 pixels, got {px.shape} {px.dtype}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_array(cls, image) -> "ImageFile":
        """From a ``[3, H, W]`` float image in ``[0, 1]`` (rounded to 8 bits)."""
        img = np.asarray(getattr(image, "data", image), dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ValueError(f"expected [3, H, W], got {img.shape}")
        return cls(np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0))

    def to_array(self) -> np.ndarray:
        return self.pixels.transpose(2, 0, 1).astype(np.float64) / 255.0

    def __eq__(self, other):
        return isinstance(other, ImageFile) and np.array_equal(self.pixels, other.pixels)


def _ppm_header(data: bytes):
    """Parse ``P6 width height maxval`` and return the values plus the raster offset."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= len(data):
            raise FormatError(f"byte {pos}: header ended early")
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((start, data[start:pos]))
    magic_at, magic = tokens[0]
    if magic != b"P6":
        raise FormatError(f"byte {magic_at}: expected magic 'P6', found {magic[:8]!r}")
    values = []
    for at, tok in tokens[1:]:
        if not tok.isdigit():
            raise FormatError(f"byte {at}: expected a decimal integer, found {tok[:16]!r}")
        values.append((at, int(tok)))
    (w_at, w), (h_at, h), (mv_at, maxval) = values
    if w < 1 or h < 1:
        raise FormatError(f"byte {w_at if w < 1 else h_at}: image dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"byte {mv_at}: max value {maxval} unsupported (only 255)")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"byte {pos}: expected one whitespace byte before the raster")
    return w, h, pos + 1


def decode_ppm(data: bytes) -> ImageFile:
    w, h, off = _ppm_header(data)
    need = w * h * 3
    got = len(data) - off
    if got < need:
        raise FormatError(f"byte {len(data)}: raster truncated ({got} of {need} bytes)")
    if got > need:
        raise FormatError(f"byte {off + need}: {got - need} trailing bytes after raster")
    return ImageFile(np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, 3).copy())


def encode_ppm(img: ImageFile) -> bytes:
    return b"P6\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def _as_image(img) -> ImageFile:
    return img if isinstance(img, ImageFile) else ImageFile.from_array(img)


def load_image(path) -> ImageFile:
    """Read a binary PPM (or, with Pillow installed, a PNG)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _load_png(path)
    return decode_ppm(path.read_bytes())


def save_image(img, path) -> None:
    """Write an :class:`ImageFile` or ``[3, H, W]`` float array as PPM (or PNG)."""
    path = Path(path)
    img = _as_image(img)
    if path.suffix.lower() == ".png":
        _save_png(img, path)
        return
    _atomic_write(path, encode_ppm(img))


def _pillow():
    try:
        from PIL import Image
    except ImportError:
        raise FormatError("PNG support needs Pillow (pip install 'artifact[png]')") from None
    return Image


def _load_png(path: Path) -> ImageFile:
    with _pillow().open(path) as im:
        return ImageFile(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())


def _save_png(img: ImageFile, path: Path) -> None:
    buf = io.BytesIO()
    _pillow().fromarray(img.pixels, "RGB").save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------- annotations


def format_annotations(boxes, classes) -> str:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    lines = [f"{int(c)} " + " ".join(repr(float(v)) for v in b) for c, b in zip(classes, boxes)]
    return "".join(line + "\n" for line in lines)


def parse_annotations(text: str) -> tuple[np.ndarray, np.ndarray]:
    """``class x1 y1 x2 y2`` per line; blank lines are skipped."""
    boxes, classes = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise FormatError(f"line {lineno}: expected 'class x1 y1 x2 y2'")
        try:
            cls = int(parts[0])
            box = [float(v) for v in parts[1:]]
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric field") from None
        if not (box[0] < box[2] and box[1] < box[3]):
            raise FormatError(f"line {lineno}: need x1 < x2 and y1 < y2")
        boxes.append(box)
        classes.append(cls)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=int)


def save_scene(scene: Scene, stem) -> None:
    """``<stem>.ppm`` plus ``<stem>.txt`` annotations."""
    stem = Path(stem)
    save_image(scene.image, stem.with_suffix(".ppm"))
    _atomic_text(stem.with_suffix(".txt"), format_annotations(scene.boxes, scene.classes))


def load_scene(stem) -> Scene:
    stem = Path(stem)
    boxes, classes = parse_annotations(stem.with_suffix(".txt").read_text(encoding="utf-8"))
    return Scene(load_image(stem.with_suffix(".ppm")).to_array(), boxes, classes)


def save_dataset(scenes: list[Scene], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        save_scene(sc, directory / f"{i:05d}")


def load_dataset(directory) -> list[Scene]:
    directory = Path(directory)
    stems = sorted(p.with_suffix("") for p in directory.glob("*.ppm"))
    if not stems:
        raise FileNotFoundError(f"no scenes in {directory}")
    return [load_scene(s) for s in stems]


# ---------------------------------------------------------------- palettes


def format_palette(palette: Palette) -> str:
    return "".join(h + "\n" for h in palette.to_hex())


def parse_palette(text: str) -> Palette:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    try:
        return Palette.from_hex(lines)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_palette(palette: Palette, path) -> None:
    _atomic_text(Path(path), format_palette(palette))


def load_palette(path) -> Palette:
    return parse_palette(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- weights and arrays


def _npz_bytes(meta: dict, arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **{k: np.ascontiguousarray(v, dtype="<f8") for k, v in sorted(arrays.items())})
    return buf.getvalue()


def _read_npz(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (zipfile.BadZipFile, EOFError, OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return meta, arrays


def save_weights(weights: DetectorWeights, path) -> None:
    meta = {"format": "detector-weights", "version": WEIGHTS_VERSION,
            "config": config_to_dict(weights.config)}
    _atomic_write(Path(path), _npz_bytes(meta, weights.params))


def load_weights(path) -> DetectorWeights:
    meta, arrays = _read_npz(path)
    if meta.get("format") != "detector-weights" or meta.get("version") != WEIGHTS_VERSION:
        raise FormatError(f"{path}: not a version-{WEIGHTS_VERSION} detector weights file")
    cfg = DetectorConfig(**{k: _untuple(v) for k, v in meta["config"].items()})
    return DetectorWeights(cfg, arrays)


def save_array(array, path, kind: str) -> None:
    """Float64 array with a ``kind`` tag, bit-exact."""
    _atomic_write(Path(path), _npz_bytes({"format": kind, "version": 1}, {"data": np.asarray(array)}))


def load_array(path, kind: str) -> np.ndarray:
    meta, arrays = _read_npz(path)
    if meta.get("format") != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {meta.get('format')!r}")
    return arrays["data"]


def config_to_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _untuple(v):
    return tuple(_untuple(x) for x in v) if isinstance(v, list) else v


# ---------------------------------------------------------------- metrics


def format_metrics(metrics: dict) -> str:
    """Sorted ``key=value`` lines; floats use their shortest round-trip form."""
    out = []
    for k in sorted(metrics):
        if "=" in k or any(c.isspace() for c in k):
            raise ValueError(f"bad metric key {k!r}")
        v = metrics[k]
        out.append(f"{k}={repr(float(v)) if isinstance(v, (float, np.floating)) else v}")
    return "".join(line + "\n" for line in out)


def parse_metrics(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"line {lineno}: expected key=value")
        for conv in (int, float):
            try:
                out[key.strip()] = conv(val)
                break
            except ValueError:
                continue
        else:
            out[key.strip()] = val.strip()
    return out


def save_metrics(metrics: dict, path) -> None:
    _atomic_text(Path(path), format_metrics(metrics))


def load_metrics(path) -> dict:
    return parse_metrics(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------- pipeline config


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run directory needs; ``seed`` drives every stage."""

    seed: int = 0
    n_train: int = 200
    n_test: int = 100
    det_epochs: int = 50
    det_lr: float = 6e-3
    det_batch_size: int = 8
    palette_colors: int = 8
    env_size: int = 128
    conf_threshold: float = 0.5
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    run: RunConfig = field(default_factory=lambda: RunConfig(epochs=50))

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1 or self.det_epochs < 0:
            raise ValueError("n_train, n_test must be >= 1 and det_epochs >= 0")
        if not 0 < self.conf_threshold < 1:
            raise ValueError("conf_threshold must lie in (0, 1)")

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=seed, run=dataclasses.replace(self.run, seed=seed))


# prefix -> (path of attributes from PipelineConfig, dataclass)
_SECTIONS = {
    "": ((), PipelineConfig),
    "detector.": (("detector",), DetectorConfig),
    "run.": (("run",), RunConfig),
    "eot.": (("run", "eot"), EotConfig),
    "adv.": (("run", "adv_weights"), AdvLossWeights),
    "mask.": (("run", "mask"), MaskConfig),
}


def _leaf_fields(cls):
    proto = cls()
    return [f for f in dataclasses.fields(cls) if not dataclasses.is_dataclass(getattr(proto, f.name))]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ";".join(_fmt(x) for x in v)
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_like(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ValueError("expected true or false")
        return text == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(_parse_like(p, default[0]) for p in text.split(";") if p.strip())
        proto = default[0] if default else 0.0
        return tuple(_parse_like(p, proto) for p in text.split(",") if p.strip())
    raise TypeError(f"unsupported config value type {type(default).__name__}")


def _get(cfg, path):
    for name in path:
        cfg = getattr(cfg, name)
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for prefix, (path, cls) in _SECTIONS.items():
        section = _get(cfg, path)
        for f in _leaf_fields(cls):
            lines.append(f"{prefix}{f.name}={_fmt(getattr(section, f.name))}")
    return "".join(line + "\n" for line in lines)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply ``key=value`` lines on top of ``base`` (defaults if omitted).

    ``#`` starts a comment; unknown keys and malformed values are errors that
    name the line.
    """
    base = base or PipelineConfig()
    values: dict[str, dict] = {prefix: {} for prefix in _SECTIONS}
    known = {}
    for prefix, (path, cls) in _SECTIONS.items():
        for f in _leaf_fields(cls):
            known[prefix + f.name] = (prefix, f.name, getattr(_get(base, path), f.name))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise FormatError(f"line {lineno}: expected key=value")
        if key not in known:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        prefix, name, default = known[key]
        try:
            values[prefix][name] = _parse_like(val, default)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: bad value for {key}: {exc}") from None
    try:
        return _rebuild(base, values)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid configuration: {exc}") from None


def _rebuild(base: PipelineConfig, values: dict) -> PipelineConfig:
    run = base.run
    run = dataclasses.replace(
        run,
        eot=dataclasses.replace(run.eot, **values["eot."]),
        adv_weights=dataclasses.replace(run.adv_weights, **values["adv."]),
        mask=dataclasses.replace(run.mask, **values["mask."]),
        **values["run."],
    )
    return dataclasses.replace(
        base, detector=dataclasses.replace(base.detector, **values["detector."]), run=run, **values[""]
    )


def save_config(cfg: PipelineConfig, path) -> None:
    _atomic_text(Path(path), format_config(cfg))


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)
