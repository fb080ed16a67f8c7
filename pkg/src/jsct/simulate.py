"""Synthetic phantoms and Poisson transmission measurements."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import PoissonData
from .projector import Geometry, SystemMatrix, forward_project

__all__ = ["Primitive", "Phantom", "PHANTOMS", "make_phantom", "simulate_counts",
           "rasterize", "MU_WATER"]

MU_WATER = 0.02  # mm^-1 at typical CT energies
MAX_LINE_INTEGRAL = 700.0


@dataclass(frozen=True)
class Primitive:
    """Additive ellipse or rectangle in normalised image coordinates.

    Coordinates run over ``[-1, 1]`` across the image width (x) and height
    (y, pointing up); ``angle`` rotates the shape counter-clockwise (radians).
    """

    kind: str
    center: tuple
    axes: tuple
    angle: float
    value: float

    def contains(self, x, y):
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        u = (c * dx + s * dy) / self.axes[0]
        v = (-s * dx + c * dy) / self.axes[1]
        if self.kind == "ellipse":
            return u * u + v * v <= 1.0
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray
    description: tuple

    @property
    def x(self) -> np.ndarray:
        return self.image.ravel()


# modified Shepp-Logan table: (a, b, x0, y0, phi_deg, value)
_SHEPP_LOGAN = (
    (0.69, 0.92, 0.0, 0.0, 0, 1.0),
    (0.6624, 0.874, 0.0, -0.0184, 0, -0.8),
    (0.11, 0.31, 0.22, 0.0, -18, -0.2),
    (0.16, 0.41, -0.22, 0.0, 18, -0.2),
    (0.21, 0.25, 0.0, 0.35, 0, 0.1),
    (0.046, 0.046, 0.0, 0.1, 0, 0.1),
    (0.046, 0.046, 0.0, -0.1, 0, 0.1),
    (0.046, 0.023, -0.08, -0.605, 0, 0.1),
    (0.023, 0.023, 0.0, -0.606, 0, 0.1),
    (0.023, 0.046, 0.06, -0.605, 0, 0.1),
)


def _shepp_logan_like():
    # scale so the brain region sits at water attenuation
    scale = MU_WATER / 0.2
    return tuple(Primitive("ellipse", (x0, y0), (a, b), math.radians(phi), v * scale)
                 for a, b, x0, y0, phi, v in _SHEPP_LOGAN)


def _blocks():
    # a densely packed case holding heavy, light and metal-like blocks; at
    # 1 mm pixels its ray sums reach about 9, as a full-size bag does
    case = 5 * MU_WATER
    return (
        Primitive("rectangle", (0.0, 0.0), (0.85, 0.6), 0.0, case),
        Primitive("rectangle", (-0.45, 0.25), (0.25, 0.18), 0.0, case),
        Primitive("rectangle", (0.35, -0.2), (0.3, 0.22), 0.3, -0.5 * case),
        Primitive("ellipse", (0.4, 0.35), (0.12, 0.12), 0.0, 2.5 * case),
        Primitive("rectangle", (-0.3, -0.3), (0.35, 0.08), -0.2, 1.5 * case),
    )


def _uniform_disc(value=MU_WATER, radius=0.8):
    return (Primitive("ellipse", (0.0, 0.0), (radius, radius), 0.0, value),)


PHANTOMS = {
    "shepp_logan_like": _shepp_logan_like,
    "blocks": _blocks,
    "uniform_disc": _uniform_disc,
}


def pixel_centers(geom: Geometry):
    """Normalised ``(x, y)`` coordinates of every pixel centre, image-shaped."""
    xs = (np.arange(geom.n_cols) + 0.5) / geom.n_cols * 2.0 - 1.0
    ys = 1.0 - (np.arange(geom.n_rows) + 0.5) / geom.n_rows * 2.0
    return np.meshgrid(xs, ys)


def rasterize(primitives, geom: Geometry) -> np.ndarray:
    X, Y = pixel_centers(geom)
    img = np.zeros(geom.image_shape)
    for p in primitives:
        img += np.where(p.contains(X, Y), p.value, 0.0)
    # additive tables can leave -1e-18 residue where values cancel
    img[np.abs(img) < 1e-12] = 0.0
    return img


def make_phantom(kind: str, geom: Geometry, **kwargs) -> Phantom:
    try:
        primitives = PHANTOMS[kind](**kwargs)
    except KeyError:
        raise ValueError(f"unknown phantom {kind!r}; choose from {sorted(PHANTOMS)}") from None
    img = rasterize(primitives, geom)
    if img.min() < 0 or img.max() > 1.0:
        raise ValueError(f"phantom values outside [0, 1] mm^-1: [{img.min()}, {img.max()}]")
    return Phantom(img, primitives)


def simulate_counts(H: SystemMatrix, x_true, I0, seed=None, noiseless=False) -> PoissonData:
    """Expected counts ``I0 exp(-H x)``, Poisson-sampled unless ``noiseless``.

    Sampling uses numpy's PCG64 generator seeded with ``seed``.
    """
    l = forward_project(H, x_true)
    I0 = np.broadcast_to(np.asarray(I0, dtype=np.float64), l.shape).copy()
    if np.any(I0 <= 0):
        raise ValueError("I0 must be positive")
    extreme = l > MAX_LINE_INTEGRAL
    if extreme.any():
        warnings.warn(f"{int(extreme.sum())} rays exceed line integral {MAX_LINE_INTEGRAL}; "
                      "their expected counts are set to 0", stacklevel=2)
    q = np.where(extreme, 0.0, I0 * np.exp(-np.minimum(l, MAX_LINE_INTEGRAL)))
    if noiseless:
        return PoissonData(q, I0)
    rng = np.random.Generator(np.random.PCG64(seed))
    return PoissonData(rng.poisson(q).astype(np.float64), I0)
