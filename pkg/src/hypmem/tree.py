"""Hierarchical long-term memory tree and its offline consolidation pass.

Structure: a structural root (depth 0, no centroid) over real nodes, each
carrying a Lorentz centroid, a cached cone half-angle, direct entries and
child nodes.  Insertion descends greedily through entailing children and
falls back to an exhaustive containment scan before instantiating a new
root-level branch.  Consolidation drains the unconsolidated pool, splits
nodes whose violation ratio exceeds the threshold, merges redundant
siblings and removes duplicate entries, iterating those sweeps to a fixed
point so a second pass is a no-op.

Centroids are renormalised weighted Minkowski means over direct entries
(weight 1) and child centroids (weighted by subtree entry count); a running
ambient sum per node makes the per-insert update O(dim) instead of
O(subtree).  Degenerate angles follow the cones-module policy: an entry
coincident with a centroid counts as contained, as does anything under a
centroid sitting exactly at the apex.

Reader/writer contract: retrieval reads a tree without ever mutating it;
`consolidate` works on a private clone and returns the new tree, so the
caller can publish it with an atomic reference swap.
"""

from __future__ import annotations

import itertools
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cones import ConeParams, _contained_at_bases, _contained_from_base, cone_half_angle
from .errors import DomainError, HypmemError, MissingItemError, ShapeError
from .geometry import (
    Curvature,
    LorentzPoint,
    _dist_rows,
    _stack_points,
    distance,
    lorentz_centroid,
)

ROOT_ID = 0
_MAX_CONSOLIDATION_PASSES = 100


@dataclass
class MemoryEntry:
    """One stored experience: embedding plus its textual and action context."""

    entry_id: str
    z: LorentzPoint
    instruction: str = ""
    subgoal: str = ""
    payload: bytes = b""
    verified: bool = True
    committed: bool = False


@dataclass(eq=False)
class TreeNode:
    node_id: int
    parent_id: int | None
    depth: int
    centroid: LorentzPoint | None  # None only for the structural root
    half_angle: float = 0.0  # cached cone half-angle of the centroid
    children: list[int] = field(default_factory=list)
    entry_ids: list[str] = field(default_factory=list)
    subtree_entries: int = 0
    # running weighted Minkowski sum behind the centroid (not serialised)
    msum: np.ndarray | None = field(default=None, repr=False, compare=False)


@dataclass
class SplitOutcome:
    status: str  # no_entries | below_threshold | too_small | rejected | split
    violation_before: float
    violation_after: float | None = None
    child_ids: tuple[int, int] | None = None


@dataclass
class ConsolidationReport:
    drained: int = 0
    discarded_unverified: int = 0
    new_branches: int = 0
    splits: int = 0
    merges: int = 0
    dedups: int = 0
    split_violations: list[tuple[float, float]] = field(default_factory=list)
    rejected_splits: int = 0
    passes: int = 0
    budget_exhausted: bool = False
    wall_time: float = 0.0


class UnconsolidatedPool:
    """Append-only staging area for experiences awaiting consolidation."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: list[MemoryEntry] = []

    def append(self, entry: MemoryEntry) -> None:
        entry.committed = False
        with self._lock:
            self._pending.append(entry)

    def __len__(self) -> int:
        with self._lock:
            return len(self._pending)

    def drain(self) -> list[MemoryEntry]:
        with self._lock:
            pending, self._pending = self._pending, []
        return pending


class _RowCache:
    """Growable (ids, rows, extra) arrays kept in sync with a node list."""

    __slots__ = ("ids", "rows", "extra", "n", "dirty", "pos")

    def __init__(self, width: int):
        self.ids: list = []
        self.rows = np.empty((8, width))
        self.extra = np.empty(8)
        self.n = 0
        self.dirty = False
        self.pos: dict = {}

    def append(self, key, row: np.ndarray, extra: float = 0.0) -> None:
        if self.n == self.rows.shape[0]:
            self.rows = np.resize(self.rows, (2 * self.n, self.rows.shape[1]))
            self.extra = np.resize(self.extra, 2 * self.n)
        self.rows[self.n] = row
        self.extra[self.n] = extra
        self.pos[key] = self.n
        self.ids.append(key)
        self.n += 1

    def update(self, key, row: np.ndarray, extra: float = 0.0) -> None:
        i = self.pos[key]
        self.rows[i] = row
        self.extra[i] = extra

    def view(self):
        return self.ids, self.rows[: self.n], self.extra[: self.n]


class MemoryTree:
    """Mutable memory hierarchy; all public mutation goes through module ops."""

    def __init__(self, curvature: Curvature | None = None, cone: ConeParams | None = None):
        self.curvature = curvature or Curvature()
        self.cone = cone or ConeParams()
        self.nodes: dict[int, TreeNode] = {
            ROOT_ID: TreeNode(node_id=ROOT_ID, parent_id=None, depth=0, centroid=None)
        }
        self.entries: dict[str, MemoryEntry] = {}
        self.dim: int | None = None
        self._next_node_id = 1
        self._child_rows: dict[int, _RowCache] = {}
        self._entry_rows: dict[int, _RowCache] = {}
        self._path_cache: dict[int, str] = {}

    # -- basic access -------------------------------------------------------

    @property
    def root(self) -> TreeNode:
        return self.nodes[ROOT_ID]

    def node(self, node_id: int) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise MissingItemError(f"no node {node_id}") from None

    def real_node_ids(self) -> list[int]:
        return sorted(nid for nid in self.nodes if nid != ROOT_ID)

    @property
    def entry_count(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.root.children

    @property
    def width(self) -> int:
        return (self.dim or 1) + 1

    # -- cached matrices ----------------------------------------------------

    def entry_matrix(self, node_id: int) -> tuple[list[str], np.ndarray]:
        """Direct entry ids and their stacked coordinates."""
        cache = self._entry_rows.get(node_id)
        node = self.node(node_id)
        if cache is None or cache.dirty:
            cache = _RowCache(self.width)
            for eid in node.entry_ids:
                cache.append(eid, self.entries[eid].z.coords)
            self._entry_rows[node_id] = cache
        ids, rows, _ = cache.view()
        return ids, rows

    def child_arrays(self, node_id: int) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Child ids, stacked centroids and cached half-angles."""
        cache = self._child_rows.get(node_id)
        node = self.node(node_id)
        if cache is None or cache.dirty:
            cache = _RowCache(self.width)
            for kid in node.children:
                child = self.nodes[kid]
                cache.append(kid, child.centroid.coords, child.half_angle)
            self._child_rows[node_id] = cache
        return cache.view()

    def _entry_appended(self, node: TreeNode, entry: MemoryEntry) -> None:
        cache = self._entry_rows.get(node.node_id)
        if cache is not None and not cache.dirty:
            cache.append(entry.entry_id, entry.z.coords)

    def _entries_invalidated(self, node_id: int) -> None:
        cache = self._entry_rows.get(node_id)
        if cache is not None:
            cache.dirty = True

    def _centroid_changed(self, node: TreeNode) -> None:
        cache = self._child_rows.get(node.parent_id)
        if cache is not None and not cache.dirty:
            cache.update(node.node_id, node.centroid.coords, node.half_angle)

    def _children_invalidated(self, node_id: int) -> None:
        cache = self._child_rows.get(node_id)
        if cache is not None:
            cache.dirty = True

    def _child_appended(self, parent_id: int, child: TreeNode) -> None:
        cache = self._child_rows.get(parent_id)
        if cache is not None and not cache.dirty:
            cache.append(child.node_id, child.centroid.coords, child.half_angle)

    def node_path(self, node_id: int) -> str:
        """Slash-joined node ids from the top-level branch down to this node."""
        cached = self._path_cache.get(node_id)
        if cached is not None:
            return cached
        parts: list[int] = []
        nid = node_id
        while nid is not None and nid != ROOT_ID:
            parts.append(nid)
            nid = self.nodes[nid].parent_id
        path = "/".join(str(p) for p in reversed(parts))
        self._path_cache[node_id] = path
        return path

    # -- centroid bookkeeping -------------------------------------------------

    def _normalised(self, msum: np.ndarray) -> LorentzPoint:
        c = self.curvature.c
        quad = -c * (-msum[0] * msum[0] + msum[1:] @ msum[1:])
        if quad <= 0:
            raise HypmemError("degenerate centroid sum")
        row = msum / math.sqrt(quad)
        out = row.copy()
        out[0] = math.sqrt(1.0 / c + out[1:] @ out[1:])
        return LorentzPoint(out, self.curvature)

    def _set_centroid_from_sum(self, node: TreeNode, cone: ConeParams) -> None:
        node.centroid = self._normalised(node.msum)
        node.half_angle = cone_half_angle(node.centroid, cone)
        self._centroid_changed(node)

    def _rebuild_sum(self, node: TreeNode) -> None:
        msum = np.zeros(self.width)
        for eid in node.entry_ids:
            msum += self.entries[eid].z.coords
        for kid in node.children:
            child = self.nodes[kid]
            msum += max(1, child.subtree_entries) * child.centroid.coords
        node.msum = msum

    def _recompute_node(self, node: TreeNode, cone: ConeParams) -> None:
        node.subtree_entries = len(node.entry_ids) + sum(
            self.nodes[k].subtree_entries for k in node.children
        )
        if node.entry_ids or node.children:
            self._rebuild_sum(node)
            self._set_centroid_from_sum(node, cone)

    def _refresh_upward(self, node_id: int, cone: ConeParams) -> None:
        """Exact bottom-up recompute of counts and centroids along a path."""
        nid = node_id
        while nid is not None and nid != ROOT_ID:
            node = self.nodes[nid]
            self._recompute_node(node, cone)
            nid = node.parent_id

    def _bubble_insert(self, node: TreeNode, entry: MemoryEntry, cone: ConeParams) -> None:
        """O(depth * dim) centroid maintenance after attaching one entry."""
        delta_node = node
        contribution_old = None
        while True:
            if contribution_old is None:
                delta_node.msum = delta_node.msum + entry.z.coords
            else:
                delta_node.msum = delta_node.msum + contribution_old
            old_w = max(1, delta_node.subtree_entries)
            old_centroid = delta_node.centroid.coords
            delta_node.subtree_entries += 1
            self._set_centroid_from_sum(delta_node, cone)
            parent_id = delta_node.parent_id
            if parent_id == ROOT_ID or parent_id is None:
                break
            new_w = max(1, delta_node.subtree_entries)
            contribution_old = new_w * delta_node.centroid.coords - old_w * old_centroid
            delta_node = self.nodes[parent_id]

    # -- structural helpers -------------------------------------------------

    def _new_node(self, parent_id: int, centroid: LorentzPoint, cone: ConeParams) -> TreeNode:
        node = TreeNode(
            node_id=self._next_node_id,
            parent_id=parent_id,
            depth=self.nodes[parent_id].depth + 1,
            centroid=centroid,
            half_angle=cone_half_angle(centroid, cone),
            msum=centroid.coords.copy(),
        )
        self._next_node_id += 1
        self.nodes[node.node_id] = node
        self.nodes[parent_id].children.append(node.node_id)
        self._child_appended(parent_id, node)
        return node

    def _attach_new_branch(self, entry: MemoryEntry, cone: ConeParams) -> TreeNode:
        branch = self._new_node(ROOT_ID, entry.z, cone)
        branch.entry_ids.append(entry.entry_id)
        branch.subtree_entries = 1
        branch.msum = entry.z.coords.copy()
        entry.committed = True
        self.entries[entry.entry_id] = entry
        self._entries_invalidated(branch.node_id)
        return branch

    def _attach_at(self, node: TreeNode, entry: MemoryEntry, cone: ConeParams) -> None:
        node.entry_ids.append(entry.entry_id)
        entry.committed = True
        self.entries[entry.entry_id] = entry
        self._entry_appended(node, entry)
        self._bubble_insert(node, entry, cone)

    def insert(self, entry: MemoryEntry, cone: ConeParams | None = None) -> list[int]:
        return insert_entry(self, entry, cone)

    def clone(self) -> "MemoryTree":
        out = MemoryTree(self.curvature, self.cone)
        out.nodes = {
            nid: TreeNode(
                node_id=n.node_id,
                parent_id=n.parent_id,
                depth=n.depth,
                centroid=n.centroid,
                half_angle=n.half_angle,
                children=list(n.children),
                entry_ids=list(n.entry_ids),
                subtree_entries=n.subtree_entries,
                msum=None if n.msum is None else n.msum.copy(),
            )
            for nid, n in self.nodes.items()
        }
        out.entries = {eid: replace(e) for eid, e in self.entries.items()}
        out.dim = self.dim
        out._next_node_id = self._next_node_id
        return out

    # -- integrity ----------------------------------------------------------

    def check_well_formed(self) -> None:
        """Raise HypmemError when any structural invariant is broken."""
        seen_entries: set[str] = set()
        reachable = {ROOT_ID}
        queue = deque([ROOT_ID])
        while queue:
            nid = queue.popleft()
            node = self.nodes[nid]
            if nid != ROOT_ID:
                if node.centroid is None:
                    raise HypmemError(f"node {nid} has no centroid")
                expected = cone_half_angle(node.centroid, self.cone)
                if abs(expected - node.half_angle) > 1e-12:
                    raise HypmemError(f"node {nid}: cached half-angle is stale")
            for eid in node.entry_ids:
                if eid in seen_entries:
                    raise HypmemError(f"entry {eid!r} owned by more than one node")
                if eid not in self.entries:
                    raise HypmemError(f"node {nid} references unknown entry {eid!r}")
                if not self.entries[eid].committed:
                    raise HypmemError(f"entry {eid!r} attached but not committed")
                seen_entries.add(eid)
            subtree = len(node.entry_ids)
            for kid in node.children:
                child = self.nodes.get(kid)
                if child is None:
                    raise HypmemError(f"node {nid} references unknown child {kid}")
                if child.parent_id != nid:
                    raise HypmemError(f"node {kid}: parent pointer mismatch")
                if child.depth != node.depth + 1:
                    raise HypmemError(f"node {kid}: depth inconsistent")
                if kid in reachable:
                    raise HypmemError(f"node {kid} reachable via two parents")
                reachable.add(kid)
                queue.append(kid)
                subtree += child.subtree_entries
            if nid != ROOT_ID and node.subtree_entries != subtree:
                raise HypmemError(f"node {nid}: subtree count {node.subtree_entries} != {subtree}")
        if reachable != set(self.nodes):
            raise HypmemError("orphan nodes present")
        if seen_entries != set(self.entries):
            raise HypmemError("entry map does not match node ownership")


# ---------------------------------------------------------------------------
# Insertion
# ---------------------------------------------------------------------------


def insert_entry(tree: MemoryTree, entry: MemoryEntry, cone: ConeParams | None = None) -> list[int]:
    """Attach an entry to the deepest entailing node, or start a new branch.

    Greedy descent keeps the minimum-angle entailing child per level; if the
    descent never accepts, every node is checked before a new root-level
    branch (centroid = the entry itself) is instantiated.  Returns the node
    path from the top-level branch to the owning node.
    """
    cone = cone or tree.cone
    if entry.z.curvature != tree.curvature:
        raise ShapeError("entry curvature differs from the tree's")
    if tree.dim is None:
        tree.dim = entry.z.n
    elif entry.z.n != tree.dim:
        raise ShapeError(f"entry dimension {entry.z.n} != tree dimension {tree.dim}")
    if entry.entry_id in tree.entries:
        raise DomainError(f"duplicate entry id {entry.entry_id!r}")

    c = tree.curvature.c
    coords = entry.z.coords
    path: list[int] = []
    current = tree.root
    while current.children:
        kids, rows, omegas = tree.child_arrays(current.node_id)
        angles, contained = _contained_at_bases(rows, omegas, coords, c, cone)
        if not np.any(contained):
            break
        idx = np.flatnonzero(contained)
        best = idx[np.lexsort((np.array(kids)[idx], angles[idx]))[0]]
        current = tree.nodes[kids[best]]
        path.append(current.node_id)

    if not path:
        # exhaustive containment scan before instantiating a branch
        hit = _exhaustive_acceptor(tree, coords, cone)
        if hit is not None:
            tree._attach_at(tree.nodes[hit], entry, cone)
            return _path_ids(tree, hit)
        branch = tree._attach_new_branch(entry, cone)
        return [branch.node_id]

    tree._attach_at(tree.nodes[path[-1]], entry, cone)
    return path


def _exhaustive_acceptor(tree: MemoryTree, coords: np.ndarray, cone: ConeParams) -> int | None:
    """Deepest containment acceptor over all nodes (ties: min angle, min id)."""
    c = tree.curvature.c
    best: tuple[int, float, int] | None = None  # (-depth, angle, id)
    queue = deque([ROOT_ID])
    while queue:
        nid = queue.popleft()
        node = tree.nodes[nid]
        if not node.children:
            continue
        kids, rows, omegas = tree.child_arrays(nid)
        angles, contained = _contained_at_bases(rows, omegas, coords, c, cone)
        for i in np.flatnonzero(contained):
            child = tree.nodes[kids[i]]
            key = (-child.depth, float(angles[i]), child.node_id)
            if best is None or key < best:
                best = key
        queue.extend(kids)
    return None if best is None else best[2]


def _path_ids(tree: MemoryTree, node_id: int) -> list[int]:
    out: list[int] = []
    nid = node_id
    while nid is not None and nid != ROOT_ID:
        out.append(nid)
        nid = tree.nodes[nid].parent_id
    return list(reversed(out))


# ---------------------------------------------------------------------------
# Violation ratio and Lorentzian K-Means
# ---------------------------------------------------------------------------


def violation_ratio(tree: MemoryTree, node_id: int, cone: ConeParams | None = None) -> float:
    """Fraction of the node's direct entries outside its cone."""
    cone = cone or tree.cone
    node = tree.node(node_id)
    if not node.entry_ids:
        raise DomainError(f"node {node_id} has no direct entries")
    _, coords = tree.entry_matrix(node_id)
    _, contained = _contained_from_base(node.centroid.coords, coords, tree.curvature.c, cone)
    return float(np.mean(~contained))


def _centroid_rows(X: np.ndarray, weights: np.ndarray | None, c: float) -> np.ndarray:
    m = X.mean(axis=0) if weights is None else (weights @ X) / weights.sum()
    quad = -c * (-m[0] * m[0] + m[1:] @ m[1:])
    row = m / np.sqrt(quad)
    out = row.copy()
    out[0] = np.sqrt(1.0 / c + out[1:] @ out[1:])
    return out


def _sq_dist_to(X: np.ndarray, row: np.ndarray, c: float) -> np.ndarray:
    d = _dist_rows(X, row, c)
    return d * d


def _kmeans_rows(X: np.ndarray, n_clusters: int, c: float, max_iters: int):
    m = X.shape[0]
    if n_clusters < 1:
        raise DomainError("need at least one cluster")
    if max_iters < 1:
        raise DomainError("need at least one iteration")
    if m < n_clusters:
        raise DomainError(f"{m} points cannot form {n_clusters} clusters")
    if n_clusters == 1:
        cen = _centroid_rows(X, None, c)
        return np.zeros(m, dtype=np.intp), cen[None, :], [float(_sq_dist_to(X, cen, c).sum())]

    # farthest-pair seeding via a double sweep, then greedy farthest-point
    a = int(np.argmax(_dist_rows(X, X[0], c)))
    b = int(np.argmax(_dist_rows(X, X[a], c)))
    seeds = [a, b]
    min_d = np.minimum(_dist_rows(X, X[a], c), _dist_rows(X, X[b], c))
    while len(seeds) < n_clusters:
        nxt = int(np.argmax(min_d))
        seeds.append(nxt)
        min_d = np.minimum(min_d, _dist_rows(X, X[nxt], c))
    C = X[seeds].copy()

    labels = None
    history: list[float] = []
    for _ in range(max_iters):
        inner = X[:, 1:] @ C[:, 1:].T - np.outer(X[:, 0], C[:, 0])
        alpha = np.maximum(1.0, -c * inner)
        D = np.arccosh(alpha) / np.sqrt(c)
        new_labels = np.argmin(D, axis=1)
        # deterministic empty-cluster repair: the stolen point becomes the
        # cluster's centroid, which strictly reduces the objective
        for k in range(n_clusters):
            if not np.any(new_labels == k):
                assigned = D[np.arange(m), new_labels]
                eligible = np.bincount(new_labels, minlength=n_clusters)[new_labels] > 1
                steal = int(np.argmax(np.where(eligible, assigned, -1.0)))
                new_labels[steal] = k
                C[k] = X[steal]
                inner_k = X[:, 1:] @ C[k, 1:] - X[:, 0] * C[k, 0]
                D[:, k] = np.arccosh(np.maximum(1.0, -c * inner_k)) / np.sqrt(c)
        assigned = D[np.arange(m), new_labels]
        history.append(float(assigned @ assigned))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for k in range(n_clusters):
            members = labels == k
            cand = _centroid_rows(X[members], None, c)
            # keep the old centroid when the closed-form mean does not
            # improve the squared-distance objective
            if _sq_dist_to(X[members], cand, c).sum() <= _sq_dist_to(X[members], C[k], c).sum():
                C[k] = cand
    return labels, C, history


def lorentzian_kmeans(
    points: Sequence[LorentzPoint],
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 50,
):
    """K-Means under the Lorentz geodesic metric with renormalised-mean centroids.

    Seeding is deterministic (approximate farthest pair, then farthest
    point); ``seed`` is accepted for interface stability but unused.
    Returns (assignments, centroids, per-iteration squared-distance
    objective), with the objective provably non-increasing.
    """
    del seed
    points = list(points)
    if not points:
        raise DomainError("no points to cluster")
    X, curvature = _stack_points(points)
    labels, C, history = _kmeans_rows(X, n_clusters, curvature.c, max_iters)
    centroids = [LorentzPoint(row, curvature) for row in C]
    return labels, centroids, history


# ---------------------------------------------------------------------------
# Split / merge
# ---------------------------------------------------------------------------


def split_node(
    tree: MemoryTree,
    node_id: int,
    split_threshold: float = 0.3,
    cone: ConeParams | None = None,
) -> SplitOutcome:
    """Binary-split a node whose violation ratio exceeds the threshold.

    The candidate partition is evaluated before any mutation: when the
    worst child would violate at least as much as the parent did, nothing
    changes and the outcome is ``rejected``.
    """
    cone = cone or tree.cone
    node = tree.node(node_id)
    if node_id == ROOT_ID or not node.entry_ids:
        return SplitOutcome(status="no_entries", violation_before=0.0)
    before = violation_ratio(tree, node_id, cone)
    if before <= split_threshold:
        return SplitOutcome(status="below_threshold", violation_before=before)
    if len(node.entry_ids) < 2:
        return SplitOutcome(status="too_small", violation_before=before)

    ids, X = tree.entry_matrix(node_id)
    c = tree.curvature.c
    labels, C, _ = _kmeans_rows(X, 2, c, max_iters=50)
    ratios = []
    for k in range(2):
        members = X[labels == k]
        _, contained = _contained_from_base(C[k], members, c, cone)
        ratios.append(float(np.mean(~contained)))
    after = max(ratios)
    if after >= before:
        return SplitOutcome(status="rejected", violation_before=before, violation_after=after)

    child_ids = []
    for k in range(2):
        member_ids = [ids[i] for i in range(len(ids)) if labels[i] == k]
        child = tree._new_node(node_id, LorentzPoint(C[k], tree.curvature), cone)
        child.entry_ids = member_ids
        child.subtree_entries = len(member_ids)
        tree._rebuild_sum(child)
        child_ids.append(child.node_id)
    node.entry_ids = []
    tree._entries_invalidated(node_id)
    tree._refresh_upward(node_id, cone)
    return SplitOutcome(
        status="split",
        violation_before=before,
        violation_after=after,
        child_ids=(child_ids[0], child_ids[1]),
    )


def _mergeable(
    tree: MemoryTree, a: TreeNode, b: TreeNode, cone: ConeParams, merge_eps: float
) -> bool:
    gap = distance(a.centroid, b.centroid)
    if gap < merge_eps:
        return True
    ca, cb = a.centroid.coords, b.centroid.coords
    c = tree.curvature.c
    _, ab = _contained_from_base(ca, cb[None, :], c, cone)
    _, ba = _contained_from_base(cb, ca[None, :], c, cone)
    return bool(ab[0]) and bool(ba[0])


def merge_nodes(
    tree: MemoryTree,
    sibling_ids: Sequence[int],
    cone: ConeParams | None = None,
    merge_eps: float = 1e-3,
) -> int | None:
    """Merge siblings whose centroids mutually entail or nearly coincide.

    Returns the surviving node id, or None when the criterion fails for any
    pair (in which case nothing is mutated).
    """
    cone = cone or tree.cone
    ids = sorted(set(int(i) for i in sibling_ids))
    if len(ids) < 2:
        raise DomainError("merge needs at least two distinct nodes")
    nodes = [tree.node(i) for i in ids]
    if any(n.node_id == ROOT_ID for n in nodes):
        raise DomainError("cannot merge the root")
    parents = {n.parent_id for n in nodes}
    if len(parents) != 1:
        raise DomainError(f"nodes {ids} are not siblings")
    for x, y in itertools.combinations(nodes, 2):
        if not _mergeable(tree, x, y, cone, merge_eps):
            return None

    target, rest = nodes[0], nodes[1:]
    parent = tree.nodes[target.parent_id]
    for other in rest:
        target.entry_ids.extend(other.entry_ids)
        for kid in other.children:
            tree.nodes[kid].parent_id = target.node_id
            target.children.append(kid)
        parent.children.remove(other.node_id)
        del tree.nodes[other.node_id]
        tree._child_rows.pop(other.node_id, None)
        tree._entry_rows.pop(other.node_id, None)
    tree._entries_invalidated(target.node_id)
    tree._children_invalidated(target.node_id)
    tree._children_invalidated(parent.node_id)
    tree._path_cache.clear()
    tree._refresh_upward(target.node_id, cone)
    return target.node_id


# ---------------------------------------------------------------------------
# Bulk construction (used by the latency benchmark)
# ---------------------------------------------------------------------------


def build_kmeans_tree(
    entries: Sequence[MemoryEntry],
    branching: int = 16,
    leaf_size: int = 48,
    curvature: Curvature | None = None,
    cone: ConeParams | None = None,
    max_iters: int = 12,
) -> MemoryTree:
    """Balanced index over a full bank via recursive top-down K-Means.

    Partitions the entries with Lorentzian K-Means until groups fit the
    leaf size; interior centroids are the cluster means, so the result is
    a well-formed tree ready for consolidation and retrieval.
    """
    if branching < 2:
        raise DomainError("branching must be >= 2")
    entries = list(entries)
    tree = MemoryTree(curvature or (entries[0].z.curvature if entries else None), cone)
    if not entries:
        return tree
    tree.dim = entries[0].z.n
    for e in entries:
        if e.entry_id in tree.entries:
            raise DomainError(f"duplicate entry id {e.entry_id!r}")
        e.committed = True
        tree.entries[e.entry_id] = e
    X = np.stack([e.z.coords for e in entries])
    ids = [e.entry_id for e in entries]
    c = tree.curvature.c
    cone = cone or tree.cone

    def build(parent_id: int, index: np.ndarray) -> None:
        sub = X[index]
        centroid = LorentzPoint(_centroid_rows(sub, None, c), tree.curvature)
        node = tree._new_node(parent_id, centroid, cone)
        node.subtree_entries = int(index.size)
        if index.size <= leaf_size or index.size < 2:
            node.entry_ids = [ids[i] for i in index]
            tree._rebuild_sum(node)
            return
        k = min(branching, index.size)
        labels, _, _ = _kmeans_rows(sub, k, c, max_iters)
        groups = [index[labels == j] for j in range(k)]
        groups = [g for g in groups if g.size]
        if len(groups) == 1:
            node.entry_ids = [ids[i] for i in index]
            tree._rebuild_sum(node)
            return
        for g in groups:
            build(node.node_id, g)
        tree._rebuild_sum(node)

    build(ROOT_ID, np.arange(len(entries)))
    # root-level sums already exact; refresh cached arrays lazily
    return tree


# ---------------------------------------------------------------------------
# Consolidation
# ---------------------------------------------------------------------------


def _dedup_node(tree: MemoryTree, node: TreeNode, dedup_eps: float) -> list[str]:
    """Drop near-identical entries sharing (instruction, subgoal); keep lowest id."""
    groups: dict[tuple[str, str], list[str]] = {}
    for eid in node.entry_ids:
        e = tree.entries[eid]
        groups.setdefault((e.instruction, e.subgoal), []).append(eid)
    removed: list[str] = []
    for group in groups.values():
        if len(group) < 2:
            continue
        group = sorted(group)
        coords = np.stack([tree.entries[eid].z.coords for eid in group])
        drop = np.zeros(len(group), dtype=bool)
        c = tree.curvature.c
        for i in range(len(group)):
            if drop[i]:
                continue
            later = np.arange(i + 1, len(group))
            if later.size:
                d = _dist_rows(coords[later], coords[i], c)
                drop[later[d < dedup_eps]] = True
        removed.extend(group[i] for i in range(len(group)) if drop[i])
    if removed:
        gone = set(removed)
        node.entry_ids = [eid for eid in node.entry_ids if eid not in gone]
        for eid in removed:
            del tree.entries[eid]
        tree._entries_invalidated(node.node_id)
    return removed


def _prune_empty(tree: MemoryTree, node_id: int, cone: ConeParams) -> None:
    """Remove childless, entryless nodes bottom-up after dedup."""
    nid = node_id
    while nid != ROOT_ID:
        node = tree.nodes[nid]
        parent_id = node.parent_id
        if node.entry_ids or node.children:
            break
        tree.nodes[parent_id].children.remove(nid)
        del tree.nodes[nid]
        tree._child_rows.pop(nid, None)
        tree._entry_rows.pop(nid, None)
        tree._children_invalidated(parent_id)
        nid = parent_id
    tree._path_cache.clear()
    if nid != ROOT_ID:
        tree._refresh_upward(nid, cone)


def _merged_would_resplit(
    tree: MemoryTree, a: TreeNode, b: TreeNode, cone: ConeParams, split_threshold: float
) -> bool:
    """Guard against split/merge oscillation across consolidation passes."""
    if len(a.entry_ids) + len(b.entry_ids) < 2:
        return False
    # the running sums make the merged centroid an O(dim) computation
    msum = a.msum + b.msum
    c = tree.curvature.c
    quad = -c * (-msum[0] * msum[0] + msum[1:] @ msum[1:])
    if quad <= 0:
        return True
    row = msum / math.sqrt(quad)
    _, Xa = tree.entry_matrix(a.node_id)
    _, Xb = tree.entry_matrix(b.node_id)
    X = np.vstack([Xa, Xb])
    _, contained = _contained_from_base(row, X, c, cone)
    return float(np.mean(~contained)) > split_threshold


def _merge_sweep(
    work: MemoryTree,
    parent_id: int,
    cone: ConeParams,
    merge_eps: float,
    split_threshold: float,
    budget_left,
    report: ConsolidationReport,
) -> bool:
    """One vectorised merge pass over a sibling set.

    Screens all pairs at once (distance and mutual containment matrices),
    then merges disjoint candidate pairs in deterministic order; merged
    targets are not reconsidered until the next consolidation pass.
    """
    kids = sorted(work.nodes[parent_id].children)
    if len(kids) < 2:
        return False
    c = work.curvature.c
    rows = np.stack([work.nodes[k].centroid.coords for k in kids])
    omegas = np.array([work.nodes[k].half_angle for k in kids])
    inner = rows[:, 1:] @ rows[:, 1:].T - np.outer(rows[:, 0], rows[:, 0])
    dists = np.arccosh(np.maximum(1.0, -c * inner)) / math.sqrt(c)
    angles = _effective_angles(rows[:, None, :], rows[None, :, :], c, cone.convention)
    contained = angles <= omegas[:, None]
    candidates = (contained & contained.T) | (dists < merge_eps)
    changed = False
    consumed: set[int] = set()
    for i, j in zip(*np.nonzero(np.triu(candidates, k=1))):
        a_id, b_id = kids[int(i)], kids[int(j)]
        if a_id in consumed or b_id in consumed:
            continue
        if not budget_left():
            report.budget_exhausted = True
            return changed
        a, b = work.nodes[a_id], work.nodes[b_id]
        if _merged_would_resplit(work, a, b, cone, split_threshold):
            continue
        merged = merge_nodes(work, [a_id, b_id], cone, merge_eps)
        if merged is not None:
            report.merges += 1
            changed = True
            consumed.update((a_id, b_id))
    return changed


def consolidate(
    tree: MemoryTree,
    pool: UnconsolidatedPool | None,
    cone: ConeParams | None = None,
    split_threshold: float = 0.3,
    budget: int | None = None,
    merge_eps: float = 1e-3,
    dedup_eps: float = 1e-6,
) -> tuple[MemoryTree, ConsolidationReport]:
    """Drain the pool, then split / merge / dedup until nothing changes.

    Works on a private clone and returns it together with the report; the
    input tree is never touched, so readers can keep using it until the
    caller swaps in the result.  ``budget`` caps the number of structural
    operations (splits + merges + dedup removals); hitting it stops the
    pass early and is flagged in the report.
    """
    t0 = time.perf_counter()
    cone = cone or tree.cone
    work = tree.clone()
    report = ConsolidationReport()

    for entry in pool.drain() if pool is not None else []:
        if not entry.verified:
            report.discarded_unverified += 1
            continue
        nodes_before = len(work.nodes)
        insert_entry(work, entry, cone)
        report.drained += 1
        if len(work.nodes) > nodes_before:
            report.new_branches += 1

    def budget_left() -> bool:
        if budget is None:
            return True
        return report.splits + report.merges + report.dedups < budget

    resistant: set[int] = set()
    for pass_no in range(1, _MAX_CONSOLIDATION_PASSES + 1):
        report.passes = pass_no
        changed = False

        # split sweep, processing freshly created children in the same pass
        queue = deque(work.real_node_ids())
        while queue:
            nid = queue.popleft()
            if nid in resistant or nid not in work.nodes:
                continue
            if not budget_left():
                report.budget_exhausted = True
                break
            outcome = split_node(work, nid, split_threshold, cone)
            if outcome.status == "split":
                changed = True
                report.splits += 1
                report.split_violations.append(
                    (outcome.violation_before, outcome.violation_after)
                )
                queue.extend(outcome.child_ids)
            elif outcome.status == "rejected":
                report.rejected_splits += 1
                resistant.add(nid)
            elif outcome.status == "too_small":
                resistant.add(nid)
        if report.budget_exhausted:
            break

        # merge sweep over each sibling set
        for parent_id in [ROOT_ID] + work.real_node_ids():
            if parent_id not in work.nodes:
                continue
            progress = True
            while progress and budget_left():
                progress = False
                kids = sorted(work.nodes[parent_id].children)
                for a_id, b_id in itertools.combinations(kids, 2):
                    a, b = work.nodes[a_id], work.nodes[b_id]
                    if not _mergeable(work, a, b, cone, merge_eps):
                        continue
                    if _merged_would_resplit(work, a, b, cone, split_threshold):
                        continue
                    merged = merge_nodes(work, [a_id, b_id], cone, merge_eps)
                    if merged is not None:
                        report.merges += 1
                        changed = True
                        progress = True
                        resistant.discard(merged)
                        break
        if not budget_left():
            report.budget_exhausted = True
            break

        # dedup sweep
        for nid in work.real_node_ids():
            if nid not in work.nodes:
                continue
            node = work.nodes[nid]
            if len(node.entry_ids) < 2:
                continue
            removed = _dedup_node(work, node, dedup_eps)
            if removed:
                report.dedups += len(removed)
                changed = True
                resistant.discard(nid)
                _prune_empty(work, nid, cone)
                if not budget_left():
                    report.budget_exhausted = True
                    break
        if report.budget_exhausted or not changed:
            break

    report.wall_time = time.perf_counter() - t0
    return work, report


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass
class TreeStats:
    node_count: int
    entry_count: int
    max_depth: int
    depth_node_counts: dict[int, int]
    depth_mean_subtree_entries: dict[int, float]
    icicle: list[tuple[int, int, int, int]]  # (node_id, depth, subtree_entries, parent_id)


def tree_stats(tree: MemoryTree) -> TreeStats:
    """Deterministic traversal statistics over the real (non-root) nodes."""
    counts: dict[int, int] = {}
    sums: dict[int, int] = {}
    icicle: list[tuple[int, int, int, int]] = []
    for nid in tree.real_node_ids():
        node = tree.nodes[nid]
        counts[node.depth] = counts.get(node.depth, 0) + 1
        sums[node.depth] = sums.get(node.depth, 0) + node.subtree_entries
        icicle.append((nid, node.depth, node.subtree_entries, node.parent_id))
    icicle.sort(key=lambda row: (row[1], row[0]))
    means = {d: sums[d] / counts[d] for d in counts}
    return TreeStats(
        node_count=len(icicle),
        entry_count=tree.entry_count,
        max_depth=max(counts) if counts else 0,
        depth_node_counts=dict(sorted(counts.items())),
        depth_mean_subtree_entries=dict(sorted(means.items())),
        icicle=icicle,
    )
