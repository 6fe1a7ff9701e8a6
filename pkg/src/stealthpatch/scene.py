"""Synthetic annotated scenes, differentiable patch compositing and EOT sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .detector import TARGET_CLASS
from .tensor import Tensor

# Default outdoor-ish environment: foliage greens, bark browns, path beige, sky.
DEFAULT_THEME = (
    (62, 94, 48),
    (96, 128, 62),
    (132, 150, 88),
    (104, 78, 52),
    (150, 122, 84),
    (186, 170, 132),
    (120, 140, 150),
    (70, 70, 60),
)

# clothing colors for target figures; chosen to contrast with the theme
FIGURE_COLORS = (
    (20, 20, 30),
    (230, 230, 235),
    (200, 30, 40),
    (30, 50, 190),
    (240, 200, 20),
)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    min_targets: int = 1
    max_targets: int = 3
    target_height: tuple[int, int] = (22, 40)
    distractor_prob: float = 0.3  # chance of one class-1 object
    clutter: int = 6
    theme: tuple[tuple[int, int, int], ...] = DEFAULT_THEME

    def __post_init__(self):
        if not 1 <= self.min_targets <= self.max_targets:
            raise ValueError("need 1 <= min_targets <= max_targets")


@dataclass
class Scene:
    image: np.ndarray  # [3, S, S] float64 in [0, 1]
    boxes: np.ndarray  # (n, 4) x1 y1 x2 y2 in pixels
    classes: np.ndarray  # (n,)
    background: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=int).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ValueError("one class id per box required")
        s = self.image.shape[-1]
        b = self.boxes
        if len(b) and (np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3])
                       or b.min() < 0 or b.max() > s):
            raise ValueError("boxes must be non-empty and lie inside the image")

    @property
    def size(self) -> int:
        return self.image.shape[-1]

    @property
    def target_boxes(self) -> np.ndarray:
        return self.boxes[self.classes == TARGET_CLASS]


# ---------------------------------------------------------------- synthesis


def _jitter(color, rng, amount=12):
    c = np.asarray(color, dtype=np.float64) + rng.integers(-amount, amount + 1, 3)
    return np.clip(c, 0, 255) / 255.0


def sample_background(rng: np.random.Generator, config: SceneConfig) -> dict:
    """Draw the parameters that fully determine a background."""
    theme = np.asarray(config.theme)
    pick = lambda: [int(v) for v in theme[rng.integers(len(theme))]]  # noqa: E731
    shapes = []
    for _ in range(config.clutter):
        shapes.append({
            "kind": "ellipse" if rng.random() < 0.5 else "rect",
            "color": pick(),
            "cx": float(rng.uniform(0, 1)),
            "cy": float(rng.uniform(0, 1)),
            "rx": float(rng.uniform(0.05, 0.25)),
            "ry": float(rng.uniform(0.05, 0.25)),
        })
    return {
        "top": pick(),
        "bottom": pick(),
        "shapes": shapes,
        "texture_seed": int(rng.integers(2**31)),
    }


def render_background(desc: dict, size: int) -> np.ndarray:
    """Render a background descriptor to ``[3, size, size]``."""
    t = (np.arange(size) + 0.5) / size
    top = np.asarray(desc["top"], dtype=np.float64) / 255
    bottom = np.asarray(desc["bottom"], dtype=np.float64) / 255
    img = (top[:, None, None] * (1 - t)[None, :, None] + bottom[:, None, None] * t[None, :, None])
    img = np.broadcast_to(img, (3, size, size)).copy()
    yy, xx = np.meshgrid(t, t, indexing="ij")
    for sh in desc["shapes"]:
        dx = (xx - sh["cx"]) / sh["rx"]
        dy = (yy - sh["cy"]) / sh["ry"]
        mask = (dx**2 + dy**2 <= 1) if sh["kind"] == "ellipse" else (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
        img[:, mask] = (np.asarray(sh["color"], dtype=np.float64) / 255)[:, None]
    tex = np.random.default_rng(desc["texture_seed"]).normal(0, 0.02, (1, size, size))
    return np.clip(img + tex, 0, 1)


def _draw_person(img, rng, x1, y1, w, h):
    """Stick-figure silhouette inside the box; returns the tight bounding box."""
    s = img.shape[-1]
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    body = _jitter(FIGURE_COLORS[rng.integers(len(FIGURE_COLORS))], rng, 8)
    legs = _jitter(FIGURE_COLORS[rng.integers(len(FIGURE_COLORS))], rng, 8)
    skin = _jitter((205, 160, 120), rng, 15)
    cx = x1 + w / 2
    head_r = 0.11 * h
    head_cy = y1 + head_r
    masks = []
    head = (xx - cx) ** 2 + (yy - head_cy) ** 2 <= head_r**2
    torso = (np.abs(xx - cx) <= 0.3 * w) & (yy >= y1 + 2 * head_r) & (yy <= y1 + 0.58 * h)
    arms = (np.abs(xx - cx) <= 0.5 * w) & (yy >= y1 + 2 * head_r) & (yy <= y1 + 2 * head_r + 0.1 * h)
    leg_l = (xx >= cx - 0.3 * w) & (xx <= cx - 0.05 * w) & (yy > y1 + 0.58 * h) & (yy <= y1 + h)
    leg_r = (xx >= cx + 0.05 * w) & (xx <= cx + 0.3 * w) & (yy > y1 + 0.58 * h) & (yy <= y1 + h)
    for m, col in ((torso | arms, body), (leg_l | leg_r, legs), (head, skin)):
        img[:, m] = col[:, None]
        masks.append(m)
    return _tight(np.logical_or.reduce(masks))


def _draw_vehicle(img, rng, x1, y1, w, h):
    s = img.shape[-1]
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    col = _jitter(FIGURE_COLORS[rng.integers(len(FIGURE_COLORS))], rng, 8)
    body = (xx >= x1) & (xx <= x1 + w) & (yy >= y1 + 0.25 * h) & (yy <= y1 + 0.8 * h)
    cabin = (xx >= x1 + 0.25 * w) & (xx <= x1 + 0.75 * w) & (yy >= y1) & (yy <= y1 + 0.3 * h)
    wr = 0.2 * h
    wheels = ((xx - x1 - 0.22 * w) ** 2 + (yy - y1 - h + wr) ** 2 <= wr**2) | (
        (xx - x1 - 0.78 * w) ** 2 + (yy - y1 - h + wr) ** 2 <= wr**2
    )
    img[:, body | cabin] = col[:, None]
    img[:, wheels] = np.array([0.08, 0.08, 0.08])[:, None]
    return _tight(body | cabin | wheels)


def _tight(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    return [float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)]


def synthesize_scene(seed, config: SceneConfig | None = None) -> Scene:
    """Deterministic synthetic scene with 1-3 person-like targets (class 0).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    config = config or SceneConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = config.size
    desc = sample_background(rng, config)
    img = render_background(desc, s)
    boxes, classes, cells = [], [], set()
    n_targets = int(rng.integers(config.min_targets, config.max_targets + 1))
    kinds = [TARGET_CLASS] * n_targets
    if rng.random() < config.distractor_prob:
        kinds.append(1)
    for kind in kinds:
        for _ in range(50):
            if kind == TARGET_CLASS:
                h = float(rng.integers(config.target_height[0], config.target_height[1] + 1))
                w = round(0.45 * h)
            else:
                w = float(rng.integers(18, 30))
                h = round(0.5 * w)
            x1 = float(rng.integers(0, s - w + 1))
            y1 = float(rng.integers(0, s - h + 1))
            cand = np.array([x1, y1, x1 + w, y1 + h])
            cell = (int((x1 + w / 2) // 8), int((y1 + h / 2) // 8))
            if cell in cells:
                continue
            if boxes and _max_overlap(cand, np.array(boxes)) > 0.0:
                continue
            break
        else:
            if kind == TARGET_CLASS and not boxes:
                raise RuntimeError("could not place a target")
            continue
        draw = _draw_person if kind == TARGET_CLASS else _draw_vehicle
        tight = draw(img, rng, x1, y1, w, h)
        boxes.append(tight)
        classes.append(kind)
        cells.add(cell)
    return Scene(img, np.array(boxes), np.array(classes), desc)


def _max_overlap(box, others):
    ix = np.clip(np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0]), 0, None)
    iy = np.clip(np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1]), 0, None)
    return float((ix * iy).max())


def make_dataset(n: int, seed: int, config: SceneConfig | None = None) -> list[Scene]:
    """``n`` scenes, each from its own child seed of ``seed``."""
    seqs = np.random.SeedSequence(seed).spawn(n)
    return [synthesize_scene(np.random.default_rng(sq), config) for sq in seqs]


def environment_image(seed: int, config: SceneConfig | None = None, size: int = 128) -> np.ndarray:
    """A target-free background from the scene theme, as ``(H, W, 3)`` uint8."""
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    img = render_background(sample_background(rng, config), size)
    return np.rint(img.transpose(1, 2, 0) * 255).astype(np.uint8)


# ---------------------------------------------------------------- EOT + compositing


@dataclass(frozen=True)
class EotConfig:
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    noise_std: float = 0.01
    rotation_range_deg: float = 20.0
    patch_scale: float = 0.25

    def __post_init__(self):
        if self.contrast_range[0] > self.contrast_range[1]:
            raise ValueError("contrast_range lo > hi")
        if self.brightness_range[0] > self.brightness_range[1]:
            raise ValueError("brightness_range lo > hi")
        if self.noise_std < 0 or self.rotation_range_deg < 0:
            raise ValueError("noise_std and rotation range must be non-negative")
        if not 0 < self.patch_scale <= 1:
            raise ValueError("patch_scale must lie in (0, 1]")

    @classmethod
    def identity(cls, patch_scale: float = 0.25) -> "EotConfig":
        return cls((1.0, 1.0), (0.0, 0.0), 0.0, 0.0, patch_scale)


@dataclass(frozen=True)
class Placement:
    center: tuple[float, float]
    side: float  # patch side in image pixels
    angle: float  # radians, counter-clockwise in image coordinates
    contrast: float
    brightness: float


@dataclass(frozen=True)
class Transforms:
    placements: tuple[Placement, ...]
    noise: np.ndarray | None  # [3, S, S] or None


def patch_side(box, patch_scale: float) -> float:
    """Patch side in pixels: ``patch_scale`` times the longer box side."""
    return patch_scale * max(box[2] - box[0], box[3] - box[1])


def sample_transforms(scene: Scene, eot: EotConfig, rng: np.random.Generator) -> Transforms:
    """Draw one EOT realization for every target box of ``scene``."""
    out = []
    for box in scene.target_boxes:
        angle = math.radians(rng.uniform(-eot.rotation_range_deg, eot.rotation_range_deg))
        contrast = rng.uniform(*eot.contrast_range)
        brightness = rng.uniform(*eot.brightness_range)
        center = ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)
        out.append(Placement(center, patch_side(box, eot.patch_scale), angle, contrast, brightness))
    noise = rng.normal(0.0, eot.noise_std, scene.image.shape) if eot.noise_std > 0 else None
    return Transforms(tuple(out), noise)


def fixed_transforms(scene: Scene, eot: EotConfig) -> Transforms:
    """Deterministic placement (no rotation, no photometric change, no noise)."""
    out = []
    for box in scene.target_boxes:
        center = ((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)
        out.append(Placement(center, patch_side(box, eot.patch_scale), 0.0, 1.0, 0.0))
    return Transforms(tuple(out), None)


@dataclass(frozen=True)
class _Plan:
    pixels: np.ndarray  # flat image indices covered by the patch
    src: np.ndarray  # (4, npix) flat patch indices of bilinear neighbours
    weights: np.ndarray  # (4, npix)


def sampling_plan(placement: Placement, patch_size: int, image_size: int) -> _Plan:
    """Inverse-map every image pixel in the rotated footprint to bilinear patch taps."""
    p, s = patch_size, image_size
    if placement.side < 2.0:
        raise ValueError(f"patch would be scaled to {placement.side:.2f} px, below 2x2")
    cx, cy = placement.center
    r = placement.side * math.sqrt(0.5) + 1
    xs = np.arange(max(0, int(cx - r)), min(s, int(math.ceil(cx + r)) + 1))
    ys = np.arange(max(0, int(cy - r)), min(s, int(math.ceil(cy + r)) + 1))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    dx = px + 0.5 - cx
    dy = py + 0.5 - cy
    c, sn = math.cos(placement.angle), math.sin(placement.angle)
    k = p / placement.side
    qx = (c * dx + sn * dy) * k + p / 2 - 0.5
    qy = (-sn * dx + c * dy) * k + p / 2 - 0.5
    inside = (qx >= -0.5) & (qx < p - 0.5) & (qy >= -0.5) & (qy < p - 0.5)
    qx, qy = qx[inside], qy[inside]
    pix = (py[inside] * s + px[inside]).astype(np.int64)
    x0, y0 = np.floor(qx), np.floor(qy)
    fx, fy = qx - x0, qy - y0
    x0i = np.clip(x0.astype(int), 0, p - 1)
    x1i = np.clip(x0.astype(int) + 1, 0, p - 1)
    y0i = np.clip(y0.astype(int), 0, p - 1)
    y1i = np.clip(y0.astype(int) + 1, 0, p - 1)
    src = np.stack([y0i * p + x0i, y0i * p + x1i, y1i * p + x0i, y1i * p + x1i])
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return _Plan(pix, src, w)


def _gather(patch_flat: Tensor, plan: _Plan) -> Tensor:
    pf = patch_flat.data
    out = (pf[:, plan.src] * plan.weights[None]).sum(axis=1)
    n = pf.shape[1]

    def bw(g):
        gp = np.empty_like(pf)
        flat_src = plan.src.ravel()
        for ch in range(pf.shape[0]):
            gp[ch] = np.bincount(flat_src, weights=(g[ch][None, :] * plan.weights).ravel(), minlength=n)
        return (gp,)

    return T.custom_op(out, (patch_flat,), bw)


def _paste(base: Tensor, values: Tensor, pixels: np.ndarray) -> Tensor:
    out = base.data.copy()
    out[:, pixels] = values.data

    def bw(g):
        gb = g.copy()
        gb[:, pixels] = 0.0
        return gb, g[:, pixels]

    return T.custom_op(out, (base, values), bw)


def composite(scene: Scene, patch: Tensor, transforms: Transforms) -> Tensor:
    """Paste ``patch`` (``[3, P, P]``) onto every target with the given transforms."""
    if patch.ndim != 3 or patch.shape[0] != 3 or patch.shape[1] != patch.shape[2]:
        raise ValueError(f"patch must be [3, P, P], got {patch.shape}")
    if len(transforms.placements) == 0:
        raise ValueError("scene has no target box to patch")
    s = scene.size
    p = patch.shape[1]
    flat = T.reshape(patch, (3, p * p))
    img = T.constant(scene.image.reshape(3, s * s))
    for pl in transforms.placements:
        plan = sampling_plan(pl, p, s)
        vals = _gather(flat, plan)
        if pl.contrast != 1.0:
            vals = T.scale(vals, pl.contrast)
        if pl.brightness != 0.0:
            vals = T.add(vals, pl.brightness)
        img = _paste(img, vals, plan.pixels)
    if transforms.noise is not None:
        img = T.add(img, T.constant(transforms.noise.reshape(3, s * s)))
    return T.reshape(T.clip(img, 0.0, 1.0), (3, s, s))


def apply_patch(scene: Scene, patch: Tensor, eot: EotConfig, rng: np.random.Generator) -> Tensor:
    """Composite ``patch`` on every target with a freshly sampled EOT realization."""
    return composite(scene, patch, sample_transforms(scene, eot, rng))


def occluder_augment(prob: float = 0.5, patch_scale: float = 0.25):
    """Detector-training augmentation pasting solid-color squares on targets.

    Makes the toy detector insensitive to plain, non-adversarial occlusion of
    the size an attack patch covers.
    """

    def augment(images: np.ndarray, rng: np.random.Generator, scenes) -> np.ndarray:
        out = images.copy()
        s = images.shape[-1]
        for img, sc in zip(out, scenes):
            for box in sc.target_boxes:
                if rng.random() >= prob:
                    continue
                side = patch_side(box, patch_scale) * rng.uniform(0.8, 1.3)
                cx = (box[0] + box[2]) / 2 + rng.uniform(-0.15, 0.15) * (box[2] - box[0])
                cy = (box[1] + box[3]) / 2 + rng.uniform(-0.15, 0.15) * (box[3] - box[1])
                x0, x1 = int(max(0, cx - side / 2)), int(min(s, cx + side / 2))
                y0, y1 = int(max(0, cy - side / 2)), int(min(s, cy + side / 2))
                img[:, y0:y1, x0:x1] = rng.random(3)[:, None, None]
        return out

    return augment
