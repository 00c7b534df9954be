"""Entailment-cone geometry: half-angles, exterior angles, containment tests.

A node at z owns a cone of half-angle omega(z) = arcsin(2K / (sqrt(c) *
||z_space||)), clamped near the apex.  The exterior angle phi(p, q) is the
angle at p between the tangent directions toward q and toward the apex
point; containment compares an angle against omega.

Two angle conventions are supported.  ``as_paper`` uses phi as defined
above; ``pi_minus`` uses pi - phi, which measures against the direction
pointing away from the apex and matches the classical entailment-cone
picture (parents shallow, children deep).  Which one a memory bank uses is
part of its cone configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DomainError, ShapeError
from .geometry import Curvature, LorentzPoint, _check_pair

AS_PAPER = "as_paper"
PI_MINUS = "pi_minus"
_CONVENTIONS = (AS_PAPER, PI_MINUS)

_COINCIDENT_EPS = 1e-12  # on alpha - 1, i.e. cosh(sqrt(c) d) - 1
_APEX_EPS = 1e-9  # on the space-like norm of the angle's base point


@dataclass(frozen=True)
class ConeParams:
    """Cone aperture constant and apex clamp.

    ``eps_apex`` is the space-like norm below which the half-angle saturates;
    ``None`` resolves to 2*aperture/sqrt(c), which makes the arcsin clamp
    exact at the boundary.
    """

    aperture: float = 0.1
    eps_apex: float | None = None
    convention: str = AS_PAPER

    def __post_init__(self):
        if not (math.isfinite(self.aperture) and self.aperture > 0):
            raise DomainError(f"aperture must be positive, got {self.aperture}")
        if self.eps_apex is not None and not (math.isfinite(self.eps_apex) and self.eps_apex > 0):
            raise DomainError(f"eps_apex must be positive, got {self.eps_apex}")
        if self.convention not in _CONVENTIONS:
            raise DomainError(f"unknown angle convention {self.convention!r}")

    def resolved_eps_apex(self, c: float) -> float:
        if self.eps_apex is None:
            return 2.0 * self.aperture / math.sqrt(c)
        if 2.0 * self.aperture / (math.sqrt(c) * self.eps_apex) > 1.0 + 1e-12:
            raise DomainError(
                "eps_apex too small: 2K/(sqrt(c)*eps_apex) must not exceed 1 "
                f"(K={self.aperture}, eps_apex={self.eps_apex}, c={c})"
            )
        return self.eps_apex


def cone_half_angle(z: LorentzPoint, params: ConeParams) -> float:
    """Half-angle of the cone owned by z; non-increasing in the spatial norm."""
    return float(_half_angles(np.array([z.spatial_norm]), z.c, params)[0])


def _half_angles(spatial_norms: np.ndarray, c: float, params: ConeParams) -> np.ndarray:
    eps = params.resolved_eps_apex(c)
    r = np.maximum(np.asarray(spatial_norms, dtype=np.float64), eps)
    arg = np.minimum(1.0, 2.0 * params.aperture / (math.sqrt(c) * r))
    return np.arcsin(arg)


def _cos_raw_angle_terms(P: np.ndarray, Q: np.ndarray, c: float):
    """Shared scalars for the angle at P toward Q: returns (cosine, Dp2, Do2).

    Angle bases are rows of P, targets rows of Q (broadcastable).  Dp2 <= 0
    marks a coincident pair, Do2 <= 0 a base at the apex; the cosine is
    meaningless there and must be masked by the caller.
    """
    sqrt_c = math.sqrt(c)
    beta = np.einsum("...j,...j->...", P[..., 1:], Q[..., 1:]) - P[..., 0] * Q[..., 0]
    gamma_p = -P[..., 0] / sqrt_c
    gamma_q = -Q[..., 0] / sqrt_c
    numer = gamma_q + c * beta * gamma_p
    dp2 = c * beta * beta - 1.0 / c
    do2 = c * gamma_p * gamma_p - 1.0 / c  # == ||P_space||^2
    return numer, dp2, do2


def _raw_angles(P: np.ndarray, Q: np.ndarray, c: float):
    """arccos of the normalised angle cosine plus degeneracy masks."""
    numer, dp2, do2 = _cos_raw_angle_terms(P, Q, c)
    coincident = dp2 <= _COINCIDENT_EPS / c
    at_apex = do2 <= _APEX_EPS * _APEX_EPS
    denom = np.sqrt(np.maximum(dp2, 1e-300)) * np.sqrt(np.maximum(do2, 1e-300))
    cosine = np.clip(numer / denom, -1.0, 1.0)
    return np.arccos(cosine), coincident, at_apex


def _apply_convention(phi: np.ndarray, convention: str) -> np.ndarray:
    if convention == AS_PAPER:
        return phi
    return math.pi - phi


def _effective_angles(P: np.ndarray, Q: np.ndarray, c: float, convention: str):
    """Convention-mapped angles for internal batch use.

    Degenerate geometry is forced to angle 0.0 (treated as contained): a
    target coincident with the base trivially lies in any cone around it,
    and a base at the apex has a saturated cone with no preferred axis.
    """
    phi, coincident, at_apex = _raw_angles(P, Q, c)
    angles = _apply_convention(phi, convention)
    degenerate = np.logical_or(coincident, at_apex)
    if np.any(degenerate):
        angles = np.where(degenerate, 0.0, angles)
    return angles


def exterior_angle(z_p: LorentzPoint, z_c: LorentzPoint, convention: str = AS_PAPER) -> float:
    """Angle at z_p between the directions toward z_c and toward the apex."""
    if convention not in _CONVENTIONS:
        raise DomainError(f"unknown angle convention {convention!r}")
    _check_pair(z_p, z_c)
    phi, coincident, at_apex = _raw_angles(z_p.coords, z_c.coords, z_p.c)
    if bool(coincident):
        raise DegenerateGeometryError("child coincides with the parent point")
    if bool(at_apex):
        raise DegenerateGeometryError("parent at the apex: direction to origin undefined")
    return float(_apply_convention(phi, convention))


def entails(z_p: LorentzPoint, z_c: LorentzPoint, params: ConeParams) -> bool:
    """True iff z_c lies inside the entailment cone of z_p."""
    angle = exterior_angle(z_p, z_c, params.convention)
    return angle <= cone_half_angle(z_p, params)


def entailment_penalty(pairs, params: ConeParams) -> float:
    """Mean hinge max(0, angle - omega) over (parent, child) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise DomainError("penalty over an empty pair list")
    total = 0.0
    for i, (z_p, z_c) in enumerate(pairs):
        try:
            angle = exterior_angle(z_p, z_c, params.convention)
        except DegenerateGeometryError as err:
            raise DegenerateGeometryError(f"pair {i}: {err}") from None
        total += max(0.0, angle - cone_half_angle(z_p, params))
    return total / len(pairs)


def _contained_from_base(
    base_coords: np.ndarray, target_rows: np.ndarray, c: float, params: ConeParams
):
    """Angles at a single base toward many targets, plus the containment mask."""
    if target_rows.size == 0:
        empty = np.zeros(0)
        return empty, np.zeros(0, dtype=bool)
    angles = _effective_angles(base_coords[None, :], target_rows, c, params.convention)
    spatial_norm = math.sqrt(max(0.0, float(base_coords[1:] @ base_coords[1:])))
    omega = float(_half_angles(np.array([spatial_norm]), c, params)[0])
    return angles, angles <= omega


def _contained_at_bases(
    base_rows: np.ndarray, omegas: np.ndarray, target_coords: np.ndarray, c: float,
    params: ConeParams,
):
    """Angle at each base row toward one target, compared with per-base omegas."""
    if base_rows.size == 0:
        empty = np.zeros(0)
        return empty, np.zeros(0, dtype=bool)
    angles = _effective_angles(base_rows, target_coords[None, :], c, params.convention)
    return angles, angles <= omegas


def _angles_from_base(
    base_coords: np.ndarray, target_rows: np.ndarray, c: float, params: ConeParams
) -> np.ndarray:
    if target_rows.size == 0:
        return np.zeros(0)
    return _effective_angles(base_coords[None, :], target_rows, c, params.convention)
