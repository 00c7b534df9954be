"""Riemannian optimisation of memory embeddings.

Items are free Lorentz parameters; the objective combines a mean
parent-child geodesic distance, a hinge penalty on entailment-cone
violations, a latent norm regulariser and an optional affine reconstruction
of per-item features from the origin chart.  Gradients are analytic in the
ambient coordinates; `finite_diff_check` is the anti-regression oracle.

Updates flip the time component of the ambient gradient (the inverse
Lorentz metric), project onto the tangent space and retract with the exact
exponential map, so iterates stay on the hyperboloid.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .cones import AS_PAPER, ConeParams, _half_angles
from .errors import DomainError, MissingItemError, NumericError, ShapeError, TrainingDivergedError
from .geometry import (
    Curvature,
    LorentzPoint,
    _exp_rows,
    _from_spatial,
    minkowski_inner,
)

_DIST_CUSP_EPS = 1e-15  # alpha - 1 below which the distance gradient is zeroed
_ANGLE_GUARD = 1e-12  # 1 - |cos| below which the arccos derivative is skipped
_BOUNDARY_EPS = 1e-6  # |angle - omega| treated as a hinge boundary


@dataclass(frozen=True)
class TrainerConfig:
    """Weights, step count and reproducibility knobs for `train`."""

    lr: float = 1e-3
    dist_weight: float = 1.0
    entail_weight: float = 1.0
    recon_weight: float = 0.0
    norm_weight: float = 1e-4
    steps: int = 1000
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise DomainError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0:
            raise DomainError(f"steps must be >= 0, got {self.steps}")
        for name in ("dist_weight", "entail_weight", "recon_weight", "norm_weight"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.init_scale <= 0:
            raise DomainError("init_scale must be positive")


@dataclass
class EmbeddingProblem:
    """Items (optionally featured), parent-child edges and optional negatives."""

    features: dict[str, np.ndarray | None]
    edges: list[tuple[str, str]]
    negatives: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        clean: dict[str, np.ndarray | None] = {}
        dim = None
        for item_id, feat in self.features.items():
            if feat is None:
                clean[item_id] = None
                continue
            arr = np.asarray(feat, dtype=np.float64)
            if arr.ndim != 1:
                raise ShapeError(f"feature of {item_id!r} must be 1-D")
            if dim is None:
                dim = arr.size
            elif arr.size != dim:
                raise ShapeError(f"feature of {item_id!r} has length {arr.size}, expected {dim}")
            clean[item_id] = arr
        self.features = clean
        for name, pairs in (("edge", self.edges), ("negative", self.negatives)):
            for a, b in pairs:
                if a not in self.features or b not in self.features:
                    raise MissingItemError(f"{name} references unknown item: ({a!r}, {b!r})")
                if a == b:
                    raise DomainError(f"self-{name} not allowed: {a!r}")

    @property
    def ids(self) -> list[str]:
        return list(self.features)

    @property
    def feat_dim(self) -> int | None:
        for feat in self.features.values():
            if feat is not None:
                return feat.size
        return None


@dataclass
class ReconHead:
    """Affine decode from the origin chart back to feature space."""

    weight: np.ndarray  # (feat_dim, latent_dim)
    bias: np.ndarray  # (feat_dim,)

    def decode(self, chart_rows: np.ndarray) -> np.ndarray:
        return chart_rows @ self.weight.T + self.bias


@dataclass
class HistoryRow:
    step: int
    total: float
    recon: float
    dist: float
    entail: float
    norm: float
    satisfaction: float


@dataclass
class TrainResult:
    embeddings: dict[str, LorentzPoint]
    history: list[HistoryRow]
    satisfaction: float
    recon_head: ReconHead | None


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    checked: int
    excluded: int


class _Workspace:
    """Index arrays and constants shared by the loss/gradient kernels."""

    def __init__(self, problem: EmbeddingProblem, latent_dim: int, curvature: Curvature):
        self.ids = problem.ids
        self.index = {item_id: i for i, item_id in enumerate(self.ids)}
        self.m = len(self.ids)
        self.latent_dim = latent_dim
        self.curvature = curvature
        self.c = curvature.c
        self.sqrt_c = curvature.sqrt
        self.edge_p = np.array([self.index[p] for p, _ in problem.edges], dtype=np.intp)
        self.edge_c = np.array([self.index[ch] for _, ch in problem.edges], dtype=np.intp)
        feat_rows = [i for i, item_id in enumerate(self.ids) if problem.features[item_id] is not None]
        self.feat_rows = np.array(feat_rows, dtype=np.intp)
        if feat_rows:
            self.feats = np.stack([problem.features[self.ids[i]] for i in feat_rows])
        else:
            self.feats = np.zeros((0, 0))


def _J(X: np.ndarray) -> np.ndarray:
    out = X.copy()
    out[..., 0] = -out[..., 0]
    return out


def _pair_inner(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", X[:, 1:], Y[:, 1:]) - X[:, 0] * Y[:, 0]


def _g_and_prime(alpha: np.ndarray):
    """arccosh(a)/sqrt(a^2-1) and its derivative, series-stable near 1."""
    e = alpha - 1.0
    small = e < 1e-4
    safe = np.where(small, 2.0, alpha)
    root = np.sqrt(safe * safe - 1.0)
    g_exact = np.arccosh(safe) / root
    g = np.where(small, 1.0 - e / 3.0 + (2.0 / 15.0) * e * e, g_exact)
    gp_exact = (1.0 - safe * g_exact) / (safe * safe - 1.0)
    gp = np.where(small, -1.0 / 3.0 + (4.0 / 15.0) * e, gp_exact)
    return g, gp


def _evaluate(
    Z: np.ndarray,
    head: ReconHead | None,
    ws: _Workspace,
    cfg: TrainerConfig,
    cone: ConeParams,
    want_grads: bool,
):
    """Loss, per-term breakdown, ambient gradients and per-item stability flags."""
    c, sqrt_c = ws.c, ws.sqrt_c
    G = np.zeros_like(Z) if want_grads else None
    gW = gb = None
    unstable = np.zeros(ws.m, dtype=bool)
    parts = {"recon": 0.0, "dist": 0.0, "entail": 0.0, "norm": 0.0}

    n_edges = ws.edge_p.size
    if n_edges:
        P = Z[ws.edge_p]
        Ch = Z[ws.edge_c]
        alpha = np.maximum(1.0, -c * _pair_inner(P, Ch))
        dists = np.arccosh(alpha) / sqrt_c
        parts["dist"] = float(dists.mean())
        if want_grads and cfg.dist_weight > 0:
            ok = alpha - 1.0 > _DIST_CUSP_EPS
            unstable[ws.edge_p[~ok]] = True
            unstable[ws.edge_c[~ok]] = True
            denom = np.sqrt(np.maximum(alpha * alpha - 1.0, 1e-300))
            coef = np.where(ok, cfg.dist_weight / (n_edges * denom), 0.0) * (-sqrt_c)
            np.add.at(G, ws.edge_p, coef[:, None] * _J(Ch))
            np.add.at(G, ws.edge_c, coef[:, None] * _J(P))

        # entailment hinge on the convention-mapped exterior angle
        beta = _pair_inner(P, Ch)
        gamma_p = -P[:, 0] / sqrt_c
        gamma_q = -Ch[:, 0] / sqrt_c
        numer = gamma_q + c * beta * gamma_p
        dp2 = c * beta * beta - 1.0 / c
        do2 = c * gamma_p * gamma_p - 1.0 / c
        degenerate = (dp2 <= 1e-12 / c) | (do2 <= 1e-18)
        dp = np.sqrt(np.maximum(dp2, 1e-300))
        do = np.sqrt(np.maximum(do2, 1e-300))
        cosine = np.clip(numer / (dp * do), -1.0, 1.0)
        phi = np.arccos(cosine)
        angle = phi if cone.convention == AS_PAPER else math.pi - phi
        angle = np.where(degenerate, 0.0, angle)
        # the cone radius must come from the actual spatial coordinates so the
        # ambient gradient of omega matches the implemented function
        sp_norm = np.sqrt(np.einsum("ij,ij->i", P[:, 1:], P[:, 1:]))
        eps_apex = cone.resolved_eps_apex(c)
        r = np.maximum(sp_norm, eps_apex)
        t = np.minimum(1.0, 2.0 * cone.aperture / (sqrt_c * r))
        omega = np.arcsin(t)
        margin = angle - omega
        hinge = np.maximum(0.0, margin)
        parts["entail"] = float(hinge.mean())
        boundary = np.abs(margin) <= _BOUNDARY_EPS
        unstable[ws.edge_p[boundary | degenerate]] = True
        unstable[ws.edge_c[boundary | degenerate]] = True
        if want_grads and cfg.entail_weight > 0:
            guard = 1.0 - cosine * cosine > _ANGLE_GUARD
            unstable[ws.edge_p[~guard]] = True
            unstable[ws.edge_c[~guard]] = True
            active = (margin > 0) & ~degenerate & guard
            if np.any(active):
                idx = np.flatnonzero(active)
                coef = cfg.entail_weight / n_edges
                sign = -1.0 if cone.convention == AS_PAPER else 1.0
                dangle_dcos = sign / np.sqrt(1.0 - cosine[idx] ** 2)
                JC = _J(Ch[idx])
                JP = _J(P[idx])
                Jo = np.zeros(Z.shape[1])
                Jo[0] = -1.0 / sqrt_c
                inv_d = 1.0 / (dp[idx] * do[idx])
                dcos_dP = (
                    (c * gamma_p[idx] * inv_d)[:, None] * JC
                    + (c * beta[idx] * inv_d)[:, None] * Jo
                    - cosine[idx, None]
                    * ((c * beta[idx] / dp2[idx])[:, None] * JC + (c * gamma_p[idx] / do2[idx])[:, None] * Jo)
                )
                dcos_dC = (Jo + (c * gamma_p[idx])[:, None] * JP) * inv_d[:, None] - (
                    cosine[idx] * c * beta[idx] / dp2[idx]
                )[:, None] * JP
                gradP = dangle_dcos[:, None] * dcos_dP
                # omega responds to the parent only while both clamps are inactive
                om_act = (sp_norm[idx] > eps_apex) & (t[idx] < 1.0)
                if np.any(om_act):
                    sub = np.flatnonzero(om_act)
                    rows = idx[sub]
                    dom_dr = (
                        -2.0
                        * cone.aperture
                        / (sqrt_c * r[rows] ** 2)
                        / np.sqrt(np.maximum(1.0 - t[rows] ** 2, 1e-300))
                    )
                    dr = np.zeros((sub.size, Z.shape[1]))
                    dr[:, 1:] = P[rows, 1:] / sp_norm[rows, None]
                    gradP[sub] -= dom_dr[:, None] * dr
                np.add.at(G, ws.edge_p[idx], coef * gradP)
                np.add.at(G, ws.edge_c[idx], coef * dangle_dcos[:, None] * dcos_dC)

    sq_norms = np.einsum("ij,ij->i", Z[:, 1:], Z[:, 1:])
    parts["norm"] = float(sq_norms.mean())
    if want_grads and cfg.norm_weight > 0:
        G[:, 1:] += (2.0 * cfg.norm_weight / ws.m) * Z[:, 1:]

    if head is not None and cfg.recon_weight > 0 and ws.feat_rows.size:
        rows = ws.feat_rows
        alpha0 = sqrt_c * Z[rows, 0]
        g, gp = _g_and_prime(alpha0)
        chart = g[:, None] * Z[rows, 1:]
        resid = head.decode(chart) - ws.feats
        m_f, d_f = ws.feats.shape
        parts["recon"] = float(np.sum(resid * resid) / (m_f * d_f))
        if want_grads:
            scale = 2.0 / (m_f * d_f)
            d_chart = scale * (resid @ head.weight)
            G[rows, 0] += cfg.recon_weight * sqrt_c * gp * np.einsum("ij,ij->i", d_chart, Z[rows, 1:])
            G[rows, 1:] += cfg.recon_weight * g[:, None] * d_chart
            gW = cfg.recon_weight * scale * (resid.T @ chart)
            gb = cfg.recon_weight * scale * resid.sum(axis=0)

    total = (
        cfg.recon_weight * parts["recon"]
        + cfg.dist_weight * parts["dist"]
        + cfg.entail_weight * parts["entail"]
        + cfg.norm_weight * parts["norm"]
    )
    return total, parts, G, gW, gb, unstable


def _satisfaction(Z: np.ndarray, ws: _Workspace, cone: ConeParams) -> float:
    """Fraction of edges whose child lies inside the parent cone."""
    if not ws.edge_p.size:
        return 1.0
    c, sqrt_c = ws.c, ws.sqrt_c
    P, Ch = Z[ws.edge_p], Z[ws.edge_c]
    beta = _pair_inner(P, Ch)
    gamma_p = -P[:, 0] / sqrt_c
    gamma_q = -Ch[:, 0] / sqrt_c
    numer = gamma_q + c * beta * gamma_p
    dp2 = c * beta * beta - 1.0 / c
    do2 = c * gamma_p * gamma_p - 1.0 / c
    degenerate = (dp2 <= 1e-12 / c) | (do2 <= 1e-18)
    cosine = np.clip(
        numer / (np.sqrt(np.maximum(dp2, 1e-300)) * np.sqrt(np.maximum(do2, 1e-300))), -1.0, 1.0
    )
    phi = np.arccos(cosine)
    angle = phi if cone.convention == AS_PAPER else math.pi - phi
    angle = np.where(degenerate, 0.0, angle)
    omega = _half_angles(np.sqrt(np.maximum(do2, 0.0)), c, cone)
    return float(np.mean(angle <= omega))


def _stack_embeddings(problem: EmbeddingProblem, embeddings: Mapping[str, LorentzPoint]):
    rows = []
    curvature = None
    for item_id in problem.ids:
        try:
            point = embeddings[item_id]
        except KeyError:
            raise MissingItemError(f"no embedding for item {item_id!r}") from None
        if curvature is None:
            curvature = point.curvature
        elif point.curvature != curvature:
            raise ShapeError("embeddings mix curvatures")
        rows.append(point.coords)
    return np.stack(rows), curvature


def loss_total(
    problem: EmbeddingProblem,
    embeddings: Mapping[str, LorentzPoint],
    recon_head: ReconHead | None,
    cfg: TrainerConfig,
    cone: ConeParams,
) -> tuple[float, dict[str, float]]:
    """Weighted objective and its unweighted per-term breakdown."""
    Z, curvature = _stack_embeddings(problem, embeddings)
    ws = _Workspace(problem, Z.shape[1] - 1, curvature)
    total, parts, *_ = _evaluate(Z, recon_head, ws, cfg, cone, want_grads=False)
    parts["total"] = total
    return total, parts


def riemannian_step(
    embeddings: Mapping[str, LorentzPoint],
    grads: Mapping[str, np.ndarray],
    lr: float,
) -> dict[str, LorentzPoint]:
    """One descent step: metric-correct, tangent-project, retract via exp."""
    updated: dict[str, LorentzPoint] = {}
    for item_id, point in embeddings.items():
        g = np.asarray(grads.get(item_id, np.zeros_like(point.coords)), dtype=np.float64)
        if g.shape != point.coords.shape:
            raise ShapeError(f"gradient shape mismatch for {item_id!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for item {item_id!r}")
        Z = point.coords[None, :]
        new = _step_rows(Z, g[None, :], point.c, lr)
        updated[item_id] = LorentzPoint(new[0], point.curvature)
    return updated


def _step_rows(Z: np.ndarray, G: np.ndarray, c: float, lr: float) -> np.ndarray:
    H = _J(G)
    inner = _pair_inner(Z, H)
    riem = H + c * inner[:, None] * Z
    return _exp_rows(Z, -lr * riem, c)


def _init_rows(ws: _Workspace, cfg: TrainerConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    spatial = rng.normal(0.0, cfg.init_scale, size=(ws.m, ws.latent_dim))
    Z = np.empty((ws.m, ws.latent_dim + 1))
    Z[:, 1:] = spatial
    Z[:, 0] = np.sqrt(1.0 / ws.c + np.einsum("ij,ij->i", spatial, spatial))
    return Z


def _init_head(ws: _Workspace) -> ReconHead | None:
    if not ws.feat_rows.size:
        return None
    d_f = ws.feats.shape[1]
    return ReconHead(weight=np.eye(d_f, ws.latent_dim), bias=np.zeros(d_f))


def train(
    problem: EmbeddingProblem,
    cfg: TrainerConfig,
    cone: ConeParams,
    latent_dim: int | None = None,
    curvature: Curvature | None = None,
) -> TrainResult:
    """Run `cfg.steps` of loss/gradient/step from a seeded small-norm init.

    The latent dimension defaults to the feature dimension (or 2 for
    featureless problems).  Raises `TrainingDivergedError` if the loss or a
    gradient stops being finite.
    """
    curvature = curvature or Curvature()
    if latent_dim is None:
        latent_dim = problem.feat_dim or 2
    ws = _Workspace(problem, latent_dim, curvature)
    if not ws.m:
        raise DomainError("cannot train an empty problem")
    Z = _init_rows(ws, cfg)
    head = _init_head(ws) if cfg.recon_weight > 0 else None
    history: list[HistoryRow] = []
    for step in range(cfg.steps):
        total, parts, G, gW, gb, _ = _evaluate(Z, head, ws, cfg, cone, want_grads=True)
        if not math.isfinite(total) or not np.all(np.isfinite(G)):
            raise TrainingDivergedError(step)
        history.append(
            HistoryRow(
                step=step,
                total=total,
                recon=parts["recon"],
                dist=parts["dist"],
                entail=parts["entail"],
                norm=parts["norm"],
                satisfaction=_satisfaction(Z, ws, cone),
            )
        )
        Z = _step_rows(Z, G, ws.c, cfg.lr)
        if head is not None and gW is not None:
            head.weight = head.weight - cfg.lr * gW
            head.bias = head.bias - cfg.lr * gb
    satisfaction = _satisfaction(Z, ws, cone)
    embeddings = {item_id: LorentzPoint(Z[i], curvature) for i, item_id in enumerate(ws.ids)}
    return TrainResult(embeddings, history, satisfaction, head)


def finite_diff_check(
    problem: EmbeddingProblem,
    embeddings: Mapping[str, LorentzPoint],
    cfg: TrainerConfig,
    cone: ConeParams,
    h: float = 1e-5,
    max_coords: int = 4000,
) -> FiniteDiffReport:
    """Central finite differences of the loss vs analytic ambient gradients.

    Coordinates of items sitting within 1e-6 of a hinge boundary (or in
    otherwise non-smooth configurations) are excluded and counted.  The
    relative error is |fd - analytic| / max(|fd|, |analytic|, 1e-6); the
    floor keeps difference noise on near-zero gradients from registering.
    """
    if not (1e-7 <= h <= 1e-3):
        raise DomainError(f"step size h must lie in [1e-7, 1e-3], got {h}")
    Z, curvature = _stack_embeddings(problem, embeddings)
    ws = _Workspace(problem, Z.shape[1] - 1, curvature)
    head = _init_head(ws) if cfg.recon_weight > 0 else None
    _, _, G, _, _, unstable = _evaluate(Z, head, ws, cfg, cone, want_grads=True)

    coords = [(i, j) for i in range(ws.m) for j in range(Z.shape[1])]
    excluded = sum(Z.shape[1] for i in range(ws.m) if unstable[i])
    checked = 0
    max_rel = 0.0
    for i, j in coords:
        if unstable[i]:
            continue
        if checked >= max_coords:
            break
        Zp = Z.copy()
        Zp[i, j] += h
        up, *_ = _evaluate(Zp, head, ws, cfg, cone, want_grads=False)
        Zp[i, j] -= 2 * h
        down, *_ = _evaluate(Zp, head, ws, cfg, cone, want_grads=False)
        fd = (up - down) / (2 * h)
        an = G[i, j]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        max_rel = max(max_rel, rel)
        checked += 1
    return FiniteDiffReport(max_rel_error=max_rel, checked=checked, excluded=excluded)


# ---------------------------------------------------------------------------
# Problem files and the loss-history CSV
# ---------------------------------------------------------------------------


def save_problem(problem: EmbeddingProblem, path) -> None:
    """Line-delimited records: items with optional features, then edges."""
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, feat in problem.features.items():
            record: dict = {"id": item_id}
            if feat is not None:
                record["feat"] = [float(v) for v in feat]
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        for parent, child in problem.edges:
            fh.write(json.dumps({"parent": parent, "child": child}, sort_keys=True) + "\n")
        for parent, non_child in problem.negatives:
            fh.write(
                json.dumps({"parent": parent, "non_child": non_child}, sort_keys=True) + "\n"
            )


def load_problem(path) -> EmbeddingProblem:
    features: dict[str, np.ndarray | None] = {}
    edges: list[tuple[str, str]] = []
    negatives: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if "id" in record:
                feat = record.get("feat")
                features[record["id"]] = None if feat is None else np.asarray(feat, dtype=np.float64)
            elif "non_child" in record:
                negatives.append((record["parent"], record["non_child"]))
            elif "parent" in record:
                edges.append((record["parent"], record["child"]))
            else:
                raise DomainError(f"{path}:{line_no}: unrecognised problem record")
    return EmbeddingProblem(features=features, edges=edges, negatives=negatives)


def write_history_csv(history: list[HistoryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "recon", "dist", "entail", "norm", "satisfaction"])
        for row in history:
            writer.writerow(
                [
                    row.step,
                    repr(row.total),
                    repr(row.recon),
                    repr(row.dist),
                    repr(row.entail),
                    repr(row.norm),
                    repr(row.satisfaction),
                ]
            )
