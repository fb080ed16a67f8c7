"""Nonnegative minimisation of convex one-dimensional functions.

``psi`` is any object exposing ``value``, ``grad`` and ``hess``; all three
are called with float arrays, so a batch of independent problems (one per
voxel) is solved in a single call.  Scalars work too and give scalar
results.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "Solver1DConfig",
    "Solve1DResult",
    "Status",
    "minimize_1d",
    "trust_region_step",
    "EPS_H",
]

EPS_H = 1e-14
_METHODS = ("newton", "trust_region", "fixed_trust_region")
_EPS = np.finfo(float).eps


class Status(IntEnum):
    CONVERGED = 0
    MAX_ITER = 1
    DIVERGED = 2
    NONFINITE = 3


@dataclass(frozen=True)
class Solver1DConfig:
    """Settings for :func:`minimize_1d`.

    ``tr_fixed_radius`` and ``tr_initial_radius`` default to ``None``; the
    reconstruction loop fills them with ``1/Z``, a bare call uses 1.
    """

    method: str = "fixed_trust_region"
    grad_tol: float = 1e-9
    max_iters: int = 50
    tr_initial_radius: float | None = None
    tr_fixed_radius: float | None = None
    tr_eta: float = 0.1
    tr_expand: float = 2.0
    tr_shrink: float = 0.25

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if not self.grad_tol > 0 or self.max_iters < 1:
            raise ValueError("grad_tol must be positive and max_iters >= 1")
        if not 0 < self.tr_eta < 1:
            raise ValueError("tr_eta must lie in (0, 1)")
        if not self.tr_shrink < 1 < self.tr_expand:
            raise ValueError("need tr_shrink < 1 < tr_expand")
        for r in (self.tr_initial_radius, self.tr_fixed_radius):
            if r is not None and not r > 0:
                raise ValueError("trust-region radii must be positive")

    def with_radius(self, radius: float) -> "Solver1DConfig":
        """Copy with unset radii replaced by ``radius``."""
        from dataclasses import replace

        return replace(
            self,
            tr_initial_radius=self.tr_initial_radius or radius,
            tr_fixed_radius=self.tr_fixed_radius or radius,
        )


@dataclass
class Solve1DResult:
    x: np.ndarray
    iters: np.ndarray
    status: np.ndarray

    @property
    def converged(self):
        return self.status == Status.CONVERGED


def trust_region_step(g, h, radius):
    """Newton step ``-g/h`` clipped to ``[-radius, radius]``."""
    return np.clip(-g / np.maximum(h, EPS_H), -radius, radius)


def _projected(g, x):
    return np.where(x <= 0, np.minimum(g, 0.0), g)


def minimize_1d(psi, x0, cfg: Solver1DConfig | None = None) -> Solve1DResult:
    """Minimise ``psi`` over ``x >= 0`` starting from ``x0``.

    Stops per element when the projected gradient is below
    ``grad_tol * (1 + |psi'(x0)|)`` or when the step falls under machine
    precision.  The returned point never has a larger ``psi`` than ``x0``.
    """
    cfg = cfg or Solver1DConfig()
    scalar = np.ndim(x0) == 0
    x0 = np.maximum(np.array(x0, dtype=np.float64, ndmin=1), 0.0)
    solve = {"newton": _newton, "trust_region": _trust_region,
             "fixed_trust_region": _fixed_trust_region}[cfg.method]
    x, iters, status = solve(psi, x0, cfg)
    if scalar:
        return Solve1DResult(float(x[0]), int(iters[0]), Status(int(status[0])))
    return Solve1DResult(x, iters, status)


def _keep_no_worse(psi, x0, x, status):
    f0 = psi.value(x0)
    f = psi.value(x)
    worse = ~(f <= f0)
    status = np.where(~np.isfinite(f), Status.NONFINITE, status)
    return np.where(worse, x0, x), status


def _newton(psi, x0, cfg):
    """Plain projected Newton; elements whose value goes up are flagged DIVERGED."""
    n = x0.size
    x = x0.copy()
    fx = psi.value(x)
    g = psi.grad(x)
    tol = cfg.grad_tol * (1.0 + np.abs(g))
    iters = np.zeros(n, dtype=np.int64)
    status = np.full(n, Status.MAX_ITER, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_iters):
        done = active & (np.abs(_projected(g, x)) <= tol)
        status[done] = Status.CONVERGED
        active &= ~done
        if not active.any():
            break
        h = psi.hess(x)
        xn = np.maximum(x - g / np.maximum(h, EPS_H), 0.0)
        fn = psi.value(xn)
        iters[active] += 1
        bad = active & ~np.isfinite(fn)
        up = active & np.isfinite(fn) & (fn > fx + 4 * _EPS * np.abs(fx))
        stall = active & (np.abs(xn - x) <= 4 * _EPS * np.maximum(np.abs(x), 1e-300))
        status[bad] = Status.NONFINITE
        status[up] = Status.DIVERGED
        status[stall & ~bad & ~up] = Status.CONVERGED
        move = active & ~bad & ~up
        x = np.where(move, xn, x)
        fx = np.where(move, fn, fx)
        active &= ~(bad | up | stall)
        if not active.any():
            break
        g = np.where(active, psi.grad(x), g)
    return x, iters, status


def _trust_region(psi, x0, cfg):
    """Classical ratio-test trust region on the projected Newton model."""
    n = x0.size
    x = x0.copy()
    fx = psi.value(x)
    g = psi.grad(x)
    tol = cfg.grad_tol * (1.0 + np.abs(g))
    radius = np.full(n, cfg.tr_initial_radius or 1.0)
    iters = np.zeros(n, dtype=np.int64)
    status = np.full(n, Status.MAX_ITER, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_iters):
        done = active & (np.abs(_projected(g, x)) <= tol)
        status[done] = Status.CONVERGED
        active &= ~done
        if not active.any():
            break
        iters[active] += 1
        h = psi.hess(x)
        raw = trust_region_step(g, h, radius)
        xn = np.maximum(x + raw, 0.0)
        s = xn - x
        pred = -(g * s + 0.5 * h * s * s)
        fn = psi.value(xn)
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.where(pred > 0, (fx - fn) / pred, -np.inf)
        rho = np.where(np.isfinite(fn), rho, -np.inf)
        at_edge = np.abs(raw) >= radius
        radius = np.where(rho < 0.25, radius * cfg.tr_shrink,
                          np.where((rho > 0.75) & at_edge, radius * cfg.tr_expand, radius))
        accept = active & (rho > cfg.tr_eta)
        x = np.where(accept, xn, x)
        fx = np.where(accept, fn, fx)
        # nothing representable left to gain
        stall = active & ((radius <= 4 * _EPS * np.maximum(np.abs(x), 1e-300))
                          | (accept & (np.abs(s) <= 4 * _EPS * np.maximum(np.abs(x), 1e-300)))
                          | (pred <= 0))
        status[stall] = Status.CONVERGED
        active &= ~stall
        if not active.any():
            break
        g = np.where(accept & active, psi.grad(x), g)
    return x, iters, status


def _fixed_trust_region(psi, x0, cfg):
    """Newton steps clipped to a fixed radius inside a sign-change bracket.

    Each iteration costs one gradient and one curvature evaluation.  The
    gradient sign tightens a bracket ``(lo, hi)`` around the minimiser; a
    clipped Newton step that leaves the bracket is replaced by its midpoint.
    """
    n = x0.size
    R = cfg.tr_fixed_radius or 1.0
    x = x0.copy()
    g = psi.grad(x)
    tol = cfg.grad_tol * (1.0 + np.abs(g))
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    iters = np.zeros(n, dtype=np.int64)
    status = np.full(n, Status.MAX_ITER, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    for _ in range(cfg.max_iters):
        done = active & (np.abs(_projected(g, x)) <= tol)
        status[done] = Status.CONVERGED
        active &= ~done
        if not active.any():
            break
        iters[active] += 1
        pos = g > 0
        hi = np.where(active & pos, np.minimum(hi, x), hi)
        lo = np.where(active & ~pos, np.maximum(lo, x), lo)
        h = psi.hess(x)
        cand = np.maximum(x + trust_region_step(g, h, R), 0.0)
        # with one end still open, leaving the bracket means the step underflowed
        # (cand == x); that is caught as a stall below rather than bisected
        closed = np.isfinite(hi - lo)
        outside = closed & ((cand <= lo) | (cand >= hi))
        with np.errstate(invalid="ignore"):
            cand = np.where(outside, 0.5 * (lo + hi), cand)
            narrow = closed & (hi - lo <= 4 * _EPS * np.maximum(np.abs(hi), 1e-300))
        stall = active & ((np.abs(cand - x) <= 4 * _EPS * np.maximum(np.abs(x), 1e-300)) | narrow)
        status[stall] = Status.CONVERGED
        x = np.where(active & ~stall, cand, x)
        active &= ~stall
        if not active.any():
            break
        g = np.where(active, psi.grad(x), g)
    bad = ~np.isfinite(x)
    x = np.where(bad, x0, x)
    status = np.where(bad, Status.NONFINITE, status)
    x, status = _keep_no_worse(psi, x0, x, status)
    return x, iters, status
