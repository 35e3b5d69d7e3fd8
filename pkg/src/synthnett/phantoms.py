"""Random geometric phantoms: an ellipse, a rectangle and a star on a zero background.

Shapes are rasterised hard-edged (pixel centres inside the outline) and
painted in the order ellipse, rectangle, star, later shapes overwriting
earlier ones.

Parameter ranges, as fractions of the image width ``n``:

* centres uniform in the central 60% of the frame, restricted so that the
  whole shape stays inside the image;
* ellipse semi-axes, rectangle side lengths and star outer radius uniform
  in [0.08, 0.25];
* star with 5 to 8 points, inner radius 40-60% of the outer radius;
* rotations uniform in [0, 2 pi), intensities uniform in [0.3, 1.0].

A sampled configuration is redrawn (from the same generator) until every
shape keeps at least one visible pixel after painting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

SIZE_RANGE = (0.08, 0.25)
CENTER_RANGE = (0.2, 0.8)
INTENSITY_RANGE = (0.3, 1.0)
STAR_POINTS = (5, 8)
STAR_INNER = (0.4, 0.6)
MAX_REDRAWS = 100


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (row, col)
    semi_axes: tuple[float, float]
    rotation: float
    intensity: float


@dataclass(frozen=True)
class Rectangle:
    center: tuple[float, float]
    extents: tuple[float, float]  # full side lengths
    rotation: float
    intensity: float


@dataclass(frozen=True)
class Star:
    center: tuple[float, float]
    outer_radius: float
    inner_radius: float
    points: int
    rotation: float
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    size: int
    ellipse: Ellipse
    rectangle: Rectangle
    star: Star
    seed: int | None = None

    def __post_init__(self):
        for shape in (self.ellipse, self.rectangle, self.star):
            if not 0.0 < shape.intensity <= 1.0:
                raise ValueError(f"intensity {shape.intensity} outside (0, 1]")
            r, c = shape.center
            rad = _bounding_radius(shape)
            if r - rad < 0 or c - rad < 0 or r + rad > self.size - 1 or c + rad > self.size - 1:
                raise ValueError(f"{type(shape).__name__} does not fit inside a {self.size}x{self.size} image")


def _bounding_radius(shape) -> float:
    if isinstance(shape, Ellipse):
        return max(shape.semi_axes)
    if isinstance(shape, Rectangle):
        return 0.5 * float(np.hypot(*shape.extents))
    return shape.outer_radius


def _rectangle_corners(rect: Rectangle) -> np.ndarray:
    hr, hc = rect.extents[0] / 2, rect.extents[1] / 2
    local = np.array([[-hr, -hc], [-hr, hc], [hr, hc], [hr, -hc]])
    return _rotate(local, rect.rotation) + np.asarray(rect.center)


def _star_vertices(star: Star) -> np.ndarray:
    n = 2 * star.points
    angles = star.rotation + np.pi * np.arange(n) / star.points
    radii = np.where(np.arange(n) % 2 == 0, star.outer_radius, star.inner_radius)
    return np.stack([radii * np.sin(angles), radii * np.cos(angles)], axis=1) + np.asarray(star.center)


def _rotate(pts: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return pts @ np.array([[c, s], [-s, c]])


def shape_masks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    """Boolean footprint of each shape before painting."""
    n = spec.size
    masks = {}
    m = np.zeros((n, n), dtype=bool)
    e = spec.ellipse
    rr, cc = draw_ellipse(e.center[0], e.center[1], e.semi_axes[0], e.semi_axes[1], shape=(n, n), rotation=e.rotation)
    m[rr, cc] = True
    masks["ellipse"] = m
    for name, verts in (("rectangle", _rectangle_corners(spec.rectangle)), ("star", _star_vertices(spec.star))):
        m = np.zeros((n, n), dtype=bool)
        rr, cc = draw_polygon(verts[:, 0], verts[:, 1], shape=(n, n))
        m[rr, cc] = True
        masks[name] = m
    return masks


def visible_masks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    """Pixels each shape still owns after painter's-order overwriting."""
    masks = shape_masks(spec)
    covered = np.zeros((spec.size, spec.size), dtype=bool)
    out = {}
    for name in ("star", "rectangle", "ellipse"):
        out[name] = masks[name] & ~covered
        covered |= masks[name]
    return out


def generate(spec: PhantomSpec) -> np.ndarray:
    """Rasterise ``spec`` into a (size, size) float64 image with values in [0, 1]."""
    img = np.zeros((spec.size, spec.size))
    masks = shape_masks(spec)
    for name, shape in (("ellipse", spec.ellipse), ("rectangle", spec.rectangle), ("star", spec.star)):
        img[masks[name]] = shape.intensity
    return img


def _center(rng, size, radius):
    lo = max(CENTER_RANGE[0] * size, radius)
    hi = min(CENTER_RANGE[1] * size, size - 1 - radius)
    if lo > hi:
        lo = hi = (size - 1) / 2
    return (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))


def _draw(rng: np.random.Generator, size: int, seed) -> PhantomSpec:
    lo, hi = SIZE_RANGE[0] * size, SIZE_RANGE[1] * size
    semi = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    ell = Ellipse(_center(rng, size, max(semi)), semi, float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(*INTENSITY_RANGE)))
    ext = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    rect = Rectangle(
        _center(rng, size, 0.5 * np.hypot(*ext)), ext, float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(*INTENSITY_RANGE))
    )
    outer = float(rng.uniform(lo, hi))
    star = Star(
        _center(rng, size, outer),
        outer,
        outer * float(rng.uniform(*STAR_INNER)),
        int(rng.integers(STAR_POINTS[0], STAR_POINTS[1] + 1)),
        float(rng.uniform(0, 2 * np.pi)),
        float(rng.uniform(*INTENSITY_RANGE)),
    )
    return PhantomSpec(size, ell, rect, star, seed)


def random_spec(size: int, seed: int) -> PhantomSpec:
    """Draw a phantom configuration in which all three shapes are visible."""
    if size < 8:
        raise ValueError("phantom size must be at least 8 pixels")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        spec = _draw(rng, size, seed)
        if all(m.any() for m in visible_masks(spec).values()):
            return spec
    raise RuntimeError(f"could not draw a phantom with all shapes visible (size={size}, seed={seed})")


def image_seed(master_seed: int, index: int) -> int:
    """Per-image seed derived from the master seed and the image index."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(count: int, size: int, master_seed: int) -> list[np.ndarray]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate(random_spec(size, image_seed(master_seed, i))) for i in range(count)]
