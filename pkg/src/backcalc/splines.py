"""Spline bases and smoothing penalties on (possibly time-dilated) daily grids.

Cubic terms use a clamped B-spline basis with the exact integrated
squared-second-derivative penalty, evaluated segment-wise by Gauss-Legendre
quadrature (exact: the integrand is piecewise polynomial). Cyclic terms use
the value-parameterized periodic cubic spline, with a zero-mean constraint
over the seven weekdays absorbed into the basis. Adaptive terms split the
cubic penalty into several PSD components whose weighted sum lets smoothness
vary along the grid.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import interpolate


class DimensionError(ValueError):
    """Basis dimension incompatible with the grid or penalty order."""


class GridError(ValueError):
    """Evaluation grid not usable (non-monotone, anchor at edge, ...)."""


@dataclass
class SmoothTerm:
    """A spline basis evaluated on a grid plus its smoothing penalties.

    design : (len(grid), p) basis matrix
    penalty : list of (p, p) symmetric PSD matrices, one per smoothing
        parameter
    knots : knot locations in grid units (dilated units for dilated grids)
    kind : "cubic" | "cyclic" | "adaptive"
    """

    design: np.ndarray
    penalty: list
    knots: np.ndarray
    kind: str
    grid: np.ndarray
    degree: int = 3
    period: float | None = None
    constraint: np.ndarray | None = None  # basis reparameterization (cyclic)

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]


def _clamped_knots(lo: float, hi: float, k: int, degree: int = 3) -> np.ndarray:
    """Even interior knots with (degree+1)-fold boundary knots for k basis fns."""
    n_interior = k - degree - 1
    if n_interior < 0:
        raise DimensionError(f"k={k} too small for degree {degree} (need k >= {degree + 1})")
    interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


def bspline_design(x, knots, degree: int = 3, deriv: int = 0) -> np.ndarray:
    """Evaluate all B-spline basis functions (columns) at points x."""
    x = np.asarray(x, dtype=float)
    k = len(knots) - degree - 1
    out = np.empty((x.size, k))
    coef = np.zeros(k)
    for j in range(k):
        coef[j] = 1.0
        out[:, j] = interpolate.splev(x, (knots, coef, degree), der=deriv)
        coef[j] = 0.0
    return out


def _segment_quadrature(knots, degree, weight_fn=None, extra_breaks=None):
    """Exact integral of B''(t) B''(t)^T (optionally times a piecewise-linear
    weight) using 3-point Gauss-Legendre on each inter-knot segment."""
    k = len(knots) - degree - 1
    breaks = knots if extra_breaks is None else np.concatenate([knots, extra_breaks])
    uniq = np.unique(breaks)
    S = np.zeros((k, k))
    gx, gw = np.polynomial.legendre.leggauss(3)
    for a, b in zip(uniq[:-1], uniq[1:]):
        if b <= a:
            continue
        half = 0.5 * (b - a)
        pts = 0.5 * (a + b) + half * gx
        d2 = bspline_design(pts, knots, degree, deriv=2)
        w = gw * half
        if weight_fn is not None:
            w = w * weight_fn(pts)
        S += d2.T @ (w[:, None] * d2)
    return S


def cubic_basis(grid, k: int) -> SmoothTerm:
    """Cubic B-spline basis on the grid with the curvature penalty."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise GridError("grid must be strictly increasing")
    if k < 4:
        raise DimensionError(f"cubic basis needs k >= 4, got {k}")
    if k > grid.size:
        raise DimensionError(f"k={k} exceeds number of grid points {grid.size}")
    knots = _clamped_knots(grid[0], grid[-1], k)
    X = bspline_design(grid, knots)
    S = _segment_quadrature(knots, 3)
    return SmoothTerm(design=X, penalty=[_symmetrize(S)], knots=knots, kind="cubic", grid=grid)


def adaptive_penalty(grid, k: int, m: int) -> SmoothTerm:
    """Cubic basis whose curvature penalty is split into m PSD components.

    The weight functions are linear B-splines forming a partition of unity,
    so the component sum equals the plain cubic penalty and m=1 reproduces
    cubic_basis exactly.
    """
    grid = np.asarray(grid, dtype=float)
    if m < 1:
        raise DimensionError("need at least one penalty component")
    if m >= k:
        raise DimensionError(f"m={m} must be smaller than basis dimension k={k}")
    term = cubic_basis(grid, k)
    if m == 1:
        return term
    wk = _clamped_knots(grid[0], grid[-1], m, degree=1)
    penalties = []
    for j in range(m):
        coef = np.zeros(m)
        coef[j] = 1.0
        weight = lambda t, c=coef.copy(): np.maximum(interpolate.splev(t, (wk, c, 1)), 0.0)
        penalties.append(_symmetrize(_segment_quadrature(term.knots, 3, weight, extra_breaks=wk)))
    return SmoothTerm(design=term.design, penalty=penalties, knots=term.knots,
                      kind="adaptive", grid=grid)


def _cyclic_matrices(knots):
    """Cyclic tridiagonal B, D with B m = D gamma linking knot values gamma to
    knot second derivatives m for the periodic cubic interpolating spline."""
    h = np.diff(knots)
    K = len(h)  # number of free knot values (last knot wraps to the first)
    B = np.zeros((K, K))
    D = np.zeros((K, K))
    for j in range(K):
        hm = h[j - 1]
        hj = h[j]
        B[j, j] = (hm + hj) / 3.0
        B[j, (j + 1) % K] += hj / 6.0
        B[j, (j - 1) % K] += hm / 6.0
        D[j, j] = -1.0 / hm - 1.0 / hj
        D[j, (j + 1) % K] += 1.0 / hj
        D[j, (j - 1) % K] += 1.0 / hm
    return B, D


def _cyclic_design_raw(x, knots, period, deriv=0):
    """Design rows for the value-parameterized periodic cubic spline."""
    B, D = _cyclic_matrices(knots)
    BinvD = np.linalg.solve(B, D)
    K = len(knots) - 1
    x = np.mod(np.asarray(x, dtype=float) - knots[0], period) + knots[0]
    idx = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, K - 1)
    rows = np.zeros((x.size, K))
    for i, (xi, j) in enumerate(zip(x, idx)):
        h = knots[j + 1] - knots[j]
        u = xi - knots[j]
        v = knots[j + 1] - xi
        gam = np.zeros(K)
        gam[j] += [v / h, -1.0 / h, 0.0][deriv]
        gam[(j + 1) % K] += [u / h, 1.0 / h, 0.0][deriv]
        if deriv == 0:
            cm = v**3 / (6 * h) - h * v / 6.0
            cp = u**3 / (6 * h) - h * u / 6.0
        elif deriv == 1:
            cm = -(v**2) / (2 * h) + h / 6.0
            cp = u**2 / (2 * h) - h / 6.0
        else:
            cm = v / h
            cp = u / h
        rows[i] = gam + cm * BinvD[j] + cp * BinvD[(j + 1) % K]
    return rows


def cyclic_basis(period: float = 7.0, k: int = 6, grid=None) -> SmoothTerm:
    """Periodic cubic spline basis over [0, period] with a zero-mean constraint.

    Value, first and second derivative match at 0 and `period` by
    construction; the mean over the integer days 1..period is constrained to
    zero (absorbed into the basis, so the returned design has k-1 columns).
    Default grid is the seven weekdays 1..7.
    """
    if k < 3:
        raise DimensionError(f"cyclic basis needs k >= 3, got {k}")
    if grid is None:
        grid = np.arange(1.0, period + 1.0)
    grid = np.asarray(grid, dtype=float)
    knots = np.linspace(0.0, period, k + 1)
    B, D = _cyclic_matrices(knots)
    S = D.T @ np.linalg.solve(B, D)
    days = np.arange(1.0, int(round(period)) + 1.0)
    c = _cyclic_design_raw(days, knots, period).sum(axis=0)
    # null-space basis of the constraint via the full QR of c
    q, _ = np.linalg.qr(c[:, None], mode="complete")
    Z = q[:, 1:]
    X = _cyclic_design_raw(grid, knots, period) @ Z
    return SmoothTerm(design=X, penalty=[_symmetrize(Z.T @ S @ Z)], knots=knots,
                      kind="cyclic", grid=grid, period=period, constraint=Z)


def evaluate_term(term: SmoothTerm, x, deriv: int = 0) -> np.ndarray:
    """Design matrix of an existing term at new points x."""
    if term.kind == "cyclic":
        raw = _cyclic_design_raw(x, term.knots, term.period, deriv=deriv)
        return raw @ term.constraint
    return bspline_design(x, term.knots, term.degree, deriv=deriv)


def dilate_grid(grid, anchor_day, weights=(3.5, 6.0, 3.5)) -> np.ndarray:
    """Stretch the time axis so the day before/of/after the anchor have the
    given widths (all other days keep width 1).

    Used only for basis and penalty construction; the death-time convolution
    always runs on calendar days, and the returned grid maps one-to-one onto
    the input days.
    """
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) != 1.0):
        raise GridError("dilation expects a contiguous daily grid")
    if anchor_day not in grid:
        raise GridError(f"anchor day {anchor_day} is not on the grid")
    if not (grid[0] + 1 <= anchor_day <= grid[-1] - 2):
        raise GridError(f"anchor day {anchor_day} must be interior to the grid "
                        f"[{grid[0]}, {grid[-1]}] with a full day on each side")
    widths = np.ones(grid.size - 1)
    for offset, w in zip((-1, 0, 1), weights):
        widths[np.searchsorted(grid, anchor_day + offset)] = w
    out = np.empty_like(grid)
    out[0] = grid[0]
    out[1:] = grid[0] + np.cumsum(widths)
    return out


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)
