"""sRGB <-> CIELAB conversion and k-means palette extraction in LAB space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# D65 reference white, XYZ scaled so that Y = 1
WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0

MAX_SAMPLES = 100_000
DEFAULT_COLORS = 8


def _decode_gamma(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _encode_gamma(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def srgb_to_lab(rgb) -> np.ndarray:
    """Convert 8-bit sRGB triples (``[..., 3]``) to CIELAB under D65."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {rgb.shape}")
    lin = _decode_gamma(np.clip(rgb, 0, 255) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / WHITE_D65
    f = np.where(xyz > _EPS, np.cbrt(xyz), (_KAPPA * xyz + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    """Inverse of :func:`srgb_to_lab`; out-of-gamut colors are clamped, result is ``uint8``."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0

    def finv(t):
        t3 = t**3
        return np.where(t3 > _EPS, t3, (116.0 * t - 16.0) / _KAPPA)

    xyz = np.stack([finv(fx), finv(fy), finv(fz)], axis=-1) * WHITE_D65
    lin = xyz @ _XYZ_TO_RGB.T
    return np.rint(_encode_gamma(lin) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class EnvironmentSample:
    """Pixel colors harvested from an environment image."""

    pixels: np.ndarray  # (n, 3) uint8

    @classmethod
    def from_image(cls, image: np.ndarray) -> "EnvironmentSample":
        """Accepts an ``(H, W, 3)`` uint8 array."""
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
        return cls(img.reshape(-1, 3).astype(np.uint8))

    @property
    def n(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class Palette:
    """Ordered set of sRGB colors available to the constrained patch."""

    colors: np.ndarray = field(repr=False)  # (m, 3) uint8

    def __post_init__(self):
        c = np.asarray(self.colors, dtype=np.uint8)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"palette must be (m, 3), got {c.shape}")
        if not 1 <= len(c) <= 64:
            raise ValueError(f"palette size must be in [1, 64], got {len(c)}")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("palette colors must be distinct")
        c.setflags(write=False)
        object.__setattr__(self, "colors", c)

    @property
    def m(self) -> int:
        return len(self.colors)

    def as_unit(self) -> np.ndarray:
        """Colors scaled to ``[0, 1]`` floats, shape ``(m, 3)``."""
        return self.colors.astype(np.float64) / 255.0

    def to_hex(self) -> list[str]:
        return ["#{:02X}{:02X}{:02X}".format(*map(int, c)) for c in self.colors]

    @classmethod
    def from_hex(cls, lines) -> "Palette":
        colors = []
        for ln in lines:
            s = ln.strip()
            if not s:
                continue
            if len(s) != 7 or s[0] != "#":
                raise ValueError(f"bad palette entry {s!r}; expected #RRGGBB")
            colors.append([int(s[i : i + 2], 16) for i in (1, 3, 5)])
        return cls(np.array(colors, dtype=np.uint8))

    def __eq__(self, other):
        return isinstance(other, Palette) and np.array_equal(self.colors, other.colors)

    def __hash__(self):
        return hash(self.colors.tobytes())


@dataclass
class KMeansResult:
    centers: np.ndarray  # (m, 3) LAB
    labels: np.ndarray  # (n,)
    objective: list[float]  # per Lloyd iteration, after the center update
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def kmeans_objective(points: np.ndarray, centers: np.ndarray) -> float:
    """Sum of squared distances from each point to its nearest center."""
    return float(_sq_dists(points, centers).min(axis=1).sum())


def _kmeans_pp(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            raise ValueError("not enough distinct colors for the requested cluster count")
        nxt = points[rng.choice(n, p=d2 / total)]
        centers.append(nxt)
        d2 = np.minimum(d2, ((points - nxt) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_lab(points: np.ndarray, m: int, rng: np.random.Generator, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on LAB points ``(n, 3)``.

    A cluster that ends up empty is re-seeded at the point currently farthest
    from its own center.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < m:
        raise ValueError(f"need at least {m} samples, got {len(points)}")
    centers = _kmeans_pp(points, m, rng)
    labels = np.full(len(points), -1)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centers)
        new_labels = d.argmin(axis=1)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        for k in range(m):
            members = labels == k
            if members.any():
                centers[k] = points[members].mean(axis=0)
            else:
                far = int(d[np.arange(len(points)), labels].argmax())
                centers[k] = points[far]
                labels[far] = k
                changed = True
        history.append(kmeans_objective(points, centers))
        if not changed:
            break
    labels = _sq_dists(points, centers).argmin(axis=1)
    return KMeansResult(centers, labels, history, it)


def extract_palette(
    env: EnvironmentSample,
    m: int = DEFAULT_COLORS,
    seed: int = 0,
    max_iters: int = 100,
) -> Palette:
    """Cluster environment colors in LAB space and return the centers as sRGB."""
    if env.n < m:
        raise ValueError(f"environment has {env.n} pixels, fewer than m={m}")
    rng = np.random.default_rng(seed)
    pixels = env.pixels
    if len(pixels) > MAX_SAMPLES:
        pixels = pixels[np.sort(rng.choice(len(pixels), MAX_SAMPLES, replace=False))]
    result = kmeans_lab(srgb_to_lab(pixels), m, rng, max_iters)
    rgb = lab_to_srgb(result.centers)
    _, first = np.unique(rgb, axis=0, return_index=True)
    if len(first) < m:
        logger.warning("%d palette centers collapsed to the same 8-bit color", m - len(first))
        rgb = rgb[np.sort(first)]
    return Palette(rgb)


def quantize_to_palette(image: np.ndarray, palette: Palette) -> np.ndarray:
    """Map each pixel of a ``[3, H, W]`` unit-range image to its nearest palette color in LAB."""
    img = np.asarray(image, dtype=np.float64)
    rgb8 = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0).reshape(-1, 3)
    idx = _sq_dists(srgb_to_lab(rgb8), srgb_to_lab(palette.colors)).argmin(axis=1)
    out = palette.as_unit()[idx].reshape(img.shape[1], img.shape[2], 3)
    return out.transpose(2, 0, 1)
