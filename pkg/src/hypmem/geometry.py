"""Lorentz-model kernels: Minkowski form, distances, exp/log maps, centroids.

Points live on the upper sheet of the hyperboloid <x,x> = -1/c, x0 > 0,
where <.,.> is the Minkowski bilinear form -x0*y0 + sum_i xi*yi.  Public
operations consume and produce validated ``LorentzPoint`` / ``TangentVector``
values; the module-private ``*_rows`` helpers work on raw coordinate
matrices and are shared by the tree, retrieval and training modules.

Numerical policy: arccosh arguments are clamped to [1, inf); sinh(x)/x and
arccosh(a)/sqrt(a^2-1) are evaluated by series near their removable
singularities; every returned point has its time coordinate rebuilt from
the space-like part so that manifold error does not accumulate across
chained operations.  The absolute manifold tolerance (1e-9) bounds the
usable radius to roughly 6.5 length units at double precision: beyond that
the residual of the constraint is dominated by rounding of x0^2 itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, NotTangentError, NumericError, ShapeError

MANIFOLD_ATOL = 1e-9
TANGENT_ATOL = 1e-8

# alpha = -c<x,y> below 1 + _COINCIDENT_EPS counts as the same point
_COINCIDENT_EPS = 1e-12
_SERIES_EPS = 1e-6
_ZERO_VECTOR_EPS = 1e-12


@dataclass(frozen=True)
class Curvature:
    """Positive curvature magnitude c of the hyperboloid <x,x> = -1/c."""

    c: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise DomainError(f"curvature must be a positive finite real, got {self.c}")

    @property
    def sqrt(self) -> float:
        return math.sqrt(self.c)


@dataclass(frozen=True, eq=False)
class LorentzPoint:
    """A point on the hyperboloid: coords[0] is time-like, coords[1:] space-like."""

    coords: np.ndarray
    curvature: Curvature = field(default_factory=Curvature)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64, copy=True)
        if coords.ndim != 1 or coords.size < 2:
            raise ShapeError(f"expected a vector of length >= 2, got shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise NumericError("point coordinates must be finite")
        coords.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        if coords[0] <= 0.0:
            raise DomainError("time-like coordinate must be positive (upper sheet)")
        residual = abs(float(-coords[0] * coords[0] + coords[1:] @ coords[1:]) + 1.0 / self.c)
        if residual > MANIFOLD_ATOL:
            raise DomainError(
                f"point off the manifold: |<x,x> + 1/c| = {residual:.3e} > {MANIFOLD_ATOL:g}"
            )

    @property
    def c(self) -> float:
        return self.curvature.c

    @property
    def n(self) -> int:
        """Space-like dimension (ambient length minus one)."""
        return self.coords.size - 1

    @property
    def time(self) -> float:
        return float(self.coords[0])

    @property
    def spatial(self) -> np.ndarray:
        return self.coords[1:]

    @property
    def spatial_norm(self) -> float:
        return float(np.linalg.norm(self.coords[1:]))

    def allclose(self, other: "LorentzPoint", atol: float = 1e-10) -> bool:
        return (
            self.curvature == other.curvature
            and self.coords.size == other.coords.size
            and bool(np.allclose(self.coords, other.coords, rtol=0.0, atol=atol))
        )


@dataclass(frozen=True, eq=False)
class TangentVector:
    """An ambient vector constrained to the tangent space of its base point."""

    base: LorentzPoint
    vec: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vec, dtype=np.float64, copy=True)
        if vec.shape != self.base.coords.shape:
            raise ShapeError(
                f"tangent vector shape {vec.shape} != base shape {self.base.coords.shape}"
            )
        if not np.all(np.isfinite(vec)):
            raise NumericError("tangent coordinates must be finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vec", vec)
        pairing = abs(minkowski_inner(self.base.coords, vec))
        if pairing > TANGENT_ATOL:
            raise NotTangentError(
                f"|<base, vec>| = {pairing:.3e} > {TANGENT_ATOL:g}: not a tangent vector"
            )

    @property
    def norm(self) -> float:
        """Lorentz norm sqrt(<v,v>); tangent vectors are space-like."""
        return math.sqrt(max(0.0, minkowski_inner(self.vec, self.vec)))

    def scaled(self, factor: float) -> "TangentVector":
        return TangentVector(self.base, self.vec * factor)


def _as_coords(x) -> np.ndarray:
    if isinstance(x, LorentzPoint):
        return x.coords
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


def minkowski_inner(x, y) -> float:
    """Bilinear form -x0*y0 + sum_{i>=1} xi*yi."""
    xc, yc = _as_coords(x), _as_coords(y)
    if xc.size != yc.size:
        raise ShapeError(f"dimension mismatch: {xc.size} vs {yc.size}")
    if xc.size < 2:
        raise ShapeError("vectors must have length >= 2")
    return float(-xc[0] * yc[0] + xc[1:] @ yc[1:])


def _check_pair(x: LorentzPoint, y: LorentzPoint):
    if x.coords.size != y.coords.size:
        raise ShapeError(f"dimension mismatch: {x.coords.size} vs {y.coords.size}")
    if x.curvature != y.curvature:
        raise ShapeError(f"curvature mismatch: {x.c} vs {y.c}")


def _time_from_spatial(spatial: np.ndarray, c: float):
    """Solve the manifold constraint for the time-like coordinate."""
    return np.sqrt(1.0 / c + np.sum(np.square(spatial), axis=-1))


def _from_spatial(spatial: np.ndarray, curvature: Curvature) -> LorentzPoint:
    coords = np.empty(spatial.size + 1)
    coords[0] = _time_from_spatial(spatial, curvature.c)
    coords[1:] = spatial
    return LorentzPoint(coords, curvature)


def _rebuilt(coords: np.ndarray, curvature: Curvature) -> LorentzPoint:
    """Construct a point from ambient coords, re-deriving the time coordinate."""
    return _from_spatial(np.asarray(coords, dtype=np.float64)[1:], curvature)


def origin(n: int, curvature: Curvature | None = None) -> LorentzPoint:
    """Apex of the upper sheet: (1/sqrt(c), 0, ..., 0) with n space-like zeros."""
    if n < 1:
        raise DomainError(f"dimension must be >= 1, got {n}")
    curvature = curvature or Curvature()
    coords = np.zeros(n + 1)
    coords[0] = 1.0 / curvature.sqrt
    return LorentzPoint(coords, curvature)


def project_to_manifold(spatial, curvature: Curvature | None = None) -> LorentzPoint:
    """Lift a space-like vector onto the hyperboloid."""
    curvature = curvature or Curvature()
    arr = np.asarray(spatial, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ShapeError(f"expected a 1-D spatial vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("spatial coordinates must be finite")
    return _from_spatial(arr, curvature)


def _sinhc(x: float) -> float:
    """sinh(x)/x with the series limit at 0."""
    if abs(x) < _SERIES_EPS:
        return 1.0 + x * x / 6.0
    return math.sinh(x) / x


def _g_factor(alpha):
    """arccosh(a)/sqrt(a^2-1), series-stable near a = 1 (vectorised)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    e = alpha - 1.0
    small = e < 1e-4
    safe = np.where(small, 2.0, alpha)
    out = np.arccosh(safe) / np.sqrt(safe * safe - 1.0)
    series = 1.0 - e / 3.0 + (2.0 / 15.0) * e * e
    return np.where(small, series, out)


def _g_prime(alpha):
    """Derivative of _g_factor: (1 - a*g(a)) / (a^2 - 1), series-stable."""
    alpha = np.asarray(alpha, dtype=np.float64)
    e = alpha - 1.0
    small = e < 1e-4
    safe = np.where(small, 2.0, alpha)
    g = _g_factor(safe)
    out = (1.0 - safe * g) / (safe * safe - 1.0)
    series = -1.0 / 3.0 + (4.0 / 15.0) * e
    return np.where(small, series, out)


def distance(x: LorentzPoint, y: LorentzPoint) -> float:
    """Geodesic distance (1/sqrt(c)) * arccosh(-c <x,y>), clamped at 1."""
    _check_pair(x, y)
    alpha = max(1.0, -x.c * minkowski_inner(x.coords, y.coords))
    return math.acosh(alpha) / x.curvature.sqrt


def exp_map(base: LorentzPoint, v: TangentVector | np.ndarray) -> LorentzPoint:
    """Follow the geodesic from ``base`` with initial velocity ``v`` for unit time."""
    if isinstance(v, TangentVector):
        if v.base.coords is not base.coords and not np.array_equal(v.base.coords, base.coords):
            raise DomainError("tangent vector is based at a different point")
        vec = v.vec
    else:
        vec = np.asarray(v, dtype=np.float64)
        if vec.shape != base.coords.shape:
            raise ShapeError(f"shape mismatch: {vec.shape} vs {base.coords.shape}")
        pairing = abs(minkowski_inner(base.coords, vec))
        if pairing > TANGENT_ATOL:
            raise NotTangentError(f"|<base, v>| = {pairing:.3e} exceeds tangent tolerance")
    norm = math.sqrt(max(0.0, minkowski_inner(vec, vec)))
    if norm < _ZERO_VECTOR_EPS:
        return base
    theta = base.curvature.sqrt * norm
    coords = math.cosh(theta) * base.coords + _sinhc(theta) * vec
    return _rebuilt(coords, base.curvature)


def log_map(base: LorentzPoint, target: LorentzPoint) -> TangentVector:
    """Inverse of exp_map: tangent vector at ``base`` pointing to ``target``."""
    _check_pair(base, target)
    c = base.c
    alpha = max(1.0, -c * minkowski_inner(base.coords, target.coords))
    if alpha - 1.0 < _COINCIDENT_EPS:
        return TangentVector(base, np.zeros_like(base.coords))
    vec = float(_g_factor(alpha)) * (target.coords - alpha * base.coords)
    return TangentVector(base, vec)


def geodesic_interpolate(z_i: LorentzPoint, z_j: LorentzPoint, rho: float) -> LorentzPoint:
    """Point at fraction ``rho`` along the geodesic from z_i to z_j."""
    if not (0.0 <= rho <= 1.0):
        raise DomainError(f"interpolation fraction must lie in [0, 1], got {rho}")
    _check_pair(z_i, z_j)
    if rho == 0.0:
        return z_i
    if rho == 1.0:
        return z_j
    return exp_map(z_i, log_map(z_i, z_j).scaled(rho))


def lorentz_centroid(
    points: Sequence[LorentzPoint], weights: Iterable[float] | None = None
) -> LorentzPoint:
    """Weighted Minkowski mean renormalised onto the hyperboloid.

    Minimises the summed weighted Lorentz inner-product dissimilarity; the
    closed form is m = sum(w_i z_i) rescaled so that <m,m> = -1/c.
    """
    points = list(points)
    if not points:
        raise DomainError("centroid of an empty point set")
    curvature = points[0].curvature
    X, _ = _stack_points(points)
    if weights is None:
        m = X.mean(axis=0)
    else:
        w = np.asarray(list(weights), dtype=np.float64)
        if w.shape != (len(points),):
            raise ShapeError(f"{len(points)} points but weight shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DomainError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise DomainError("weights must sum to a positive value")
        m = (w @ X) / total
    quad = -curvature.c * float(-m[0] * m[0] + m[1:] @ m[1:])
    if quad <= 0:
        # cannot occur for upper-sheet points with non-negative weights
        raise NumericError("degenerate Minkowski mean: renormalisation undefined")
    return _rebuilt(m / math.sqrt(quad), curvature)


def tangent_project(base: LorentzPoint, ambient) -> TangentVector:
    """Minkowski-orthogonal projection of an ambient vector onto T_base."""
    vec = np.asarray(ambient, dtype=np.float64)
    if vec.shape != base.coords.shape:
        raise ShapeError(f"shape mismatch: {vec.shape} vs {base.coords.shape}")
    projected = vec + base.c * minkowski_inner(base.coords, vec) * base.coords
    # kill the residual pairing left by rounding before validation
    projected = projected + base.c * minkowski_inner(base.coords, projected) * base.coords
    return TangentVector(base, projected)


# ---------------------------------------------------------------------------
# Raw-matrix helpers shared by tree / retrieval / training internals.
# Rows are ambient coordinates; no validation is performed here.
# ---------------------------------------------------------------------------


def _stack_points(points: Sequence[LorentzPoint]) -> tuple[np.ndarray, Curvature]:
    curvature = points[0].curvature
    size = points[0].coords.size
    for p in points[1:]:
        if p.curvature != curvature or p.coords.size != size:
            raise ShapeError("points mix dimensions or curvatures")
    return np.stack([p.coords for p in points]), curvature


def _inner_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """<X_i, y> for every row of X."""
    return X[:, 1:] @ y[1:] - X[:, 0] * y[0]


def _alpha_rows(X: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    return np.maximum(1.0, -c * _inner_rows(X, y))


def _dist_rows(X: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    return np.arccosh(_alpha_rows(X, y, c)) / math.sqrt(c)


def _alpha_pairs(X: np.ndarray, Y: np.ndarray, c: float) -> np.ndarray:
    """Row-wise alpha for paired matrices of identical shape."""
    inner = np.einsum("ij,ij->i", X[:, 1:], Y[:, 1:]) - X[:, 0] * Y[:, 0]
    return np.maximum(1.0, -c * inner)


def _dist_pairs(X: np.ndarray, Y: np.ndarray, c: float) -> np.ndarray:
    return np.arccosh(_alpha_pairs(X, Y, c)) / math.sqrt(c)


def _log0_rows(X: np.ndarray, c: float) -> np.ndarray:
    """Space-like part of log_origin(X_i); the time component is zero."""
    alpha = np.sqrt(c) * X[:, 0]
    return _g_factor(alpha)[:, None] * X[:, 1:]


def _exp0_rows(S: np.ndarray, c: float) -> np.ndarray:
    """exp_origin of tangent rows given by their space-like parts."""
    S = np.atleast_2d(S)
    norms = np.linalg.norm(S, axis=1)
    theta = np.sqrt(c) * norms
    small = theta < _SERIES_EPS
    safe = np.where(small, 1.0, theta)
    sinhc = np.where(small, 1.0 + theta * theta / 6.0, np.sinh(safe) / safe)
    out = np.empty((S.shape[0], S.shape[1] + 1))
    out[:, 1:] = sinhc[:, None] * S
    out[:, 0] = _time_from_spatial(out[:, 1:], c)
    return out


def _exp_rows(P: np.ndarray, V: np.ndarray, c: float) -> np.ndarray:
    """Row-wise exp map: retract tangent rows V at base rows P."""
    sq = np.einsum("ij,ij->i", V[:, 1:], V[:, 1:]) - V[:, 0] * V[:, 0]
    norms = np.sqrt(np.maximum(0.0, sq))
    theta = np.sqrt(c) * norms
    small = theta < _SERIES_EPS
    safe = np.where(small, 1.0, theta)
    sinhc = np.where(small, 1.0 + theta * theta / 6.0, np.sinh(safe) / safe)
    out = np.cosh(theta)[:, None] * P + sinhc[:, None] * V
    out[:, 0] = _time_from_spatial(out[:, 1:], c)
    return out
