"""kNN node mapping between the spatial grid and graph nodes.

The assignment marks, for each pixel center (x+0.5, y+0.5), its k nearest
landmarks (ties broken by ascending node index). The forward map pools each
node's representative region by mean; the reverse map broadcasts node
features back, each pixel receiving the mean of its k nearest nodes. Both
are linear operators; dense column-/row-stochastic matrices are available
for auditing, while the hot path works on gathered indices so a k=1 forward
map matches a per-Voronoi-cell mean oracle bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .landmarks import LandmarkSet


@dataclass
class AssignmentMatrix:
    """Binary pixel-to-node assignment, stored as per-pixel index lists.

    `indices[p]` holds pixel p's k nearest node indices in selection order
    (ascending distance, ties by ascending index). Rows of the dense form
    sum to exactly k.
    """

    indices: np.ndarray  # (HW, k) int32
    k: int
    h: int
    w: int
    n_nodes: int
    landmarks: LandmarkSet

    @cached_property
    def a(self) -> np.ndarray:
        dense = np.zeros((self.h * self.w, self.n_nodes))
        rows = np.repeat(np.arange(self.h * self.w), self.k)
        dense[rows, self.indices.ravel()] = 1.0
        return dense

    def to_triplets(self) -> np.ndarray:
        """Sparse (pixel, node) pairs for text export."""
        rows = np.repeat(np.arange(self.h * self.w), self.k)
        return np.stack([rows, self.indices.ravel().astype(np.int64)], axis=1)


def build_assignment(landmarks: LandmarkSet, h: int, w: int, k: int) -> AssignmentMatrix:
    """Assign every pixel its k nearest landmarks (Euclidean, deterministic)."""
    n = landmarks.count
    if n < 1:
        raise ValueError("need at least one landmark")
    if not (1 <= k <= n):
        raise ValueError(f"k={k} out of range for {n} nodes")
    ys, xs = np.divmod(np.arange(h * w), w)
    px = xs + 0.5
    py = ys + 0.5
    lx = landmarks.points[:, 0]
    ly = landmarks.points[:, 1]
    d2 = (px[:, None] - lx[None, :]) ** 2 + (py[:, None] - ly[None, :]) ** 2
    order = np.argsort(d2, axis=1, kind="stable")  # stable: index tie-break
    return AssignmentMatrix(order[:, :k].astype(np.int32), k, h, w, n, landmarks)


@dataclass
class ForwardMap:
    """Region-level mean pooling: columns of the dense matrix sum to 1."""

    assignment: AssignmentMatrix
    counts: np.ndarray  # (n_nodes,) pixels per node region

    @cached_property
    def qf(self) -> np.ndarray:
        return self.assignment.a / self.counts[None, :]


def build_forward_map(assignment: AssignmentMatrix) -> ForwardMap:
    counts = np.bincount(assignment.indices.ravel(),
                         minlength=assignment.n_nodes).astype(np.float64)
    if (counts == 0).any():
        empty = np.nonzero(counts == 0)[0]
        raise ValueError(f"empty node region for node(s) {empty.tolist()}")
    return ForwardMap(assignment, counts)


@dataclass
class ReverseMap:
    """Node-to-pixel broadcast: rows of the dense matrix sum to 1."""

    assignment: AssignmentMatrix

    @cached_property
    def qr(self) -> np.ndarray:
        return self.assignment.a / self.assignment.k


def forward_map(f: np.ndarray, fm: ForwardMap) -> np.ndarray:
    """Pool spatial features (HW, C) into node features (|V|, C).

    Accumulation runs in ascending pixel order so the k=1 case reproduces a
    sequential per-cell mean exactly.
    """
    asn = fm.assignment
    hw = asn.h * asn.w
    f = np.asarray(f, dtype=np.float64)
    if f.shape[0] != hw:
        raise ValueError(f"feature rows {f.shape[0]} != HW {hw}")
    acc = np.zeros((asn.n_nodes, f.shape[1]))
    if asn.k == 1:
        np.add.at(acc, asn.indices[:, 0], f)
    else:
        np.add.at(acc, asn.indices.ravel(), np.repeat(f, asn.k, axis=0))
    return acc / fm.counts[:, None]


def forward_map_backward(dx: np.ndarray, fm: ForwardMap) -> np.ndarray:
    """Gradient of forward_map w.r.t. the spatial features."""
    asn = fm.assignment
    scaled = dx / fm.counts[:, None]
    return scaled[asn.indices].sum(axis=1)


def reverse_map(z: np.ndarray, rm: ReverseMap, examined_selector: np.ndarray) -> np.ndarray:
    """Broadcast node features back to the grid: select the examined view's
    node rows, then give each pixel the mean of its k nearest nodes."""
    z = np.asarray(z, dtype=np.float64)
    sel = np.asarray(examined_selector)
    if sel.min() < 0 or sel.max() >= z.shape[0]:
        raise ValueError("examined selector out of range")
    ze = z[sel]
    asn = rm.assignment
    if ze.shape[0] != asn.n_nodes:
        raise ValueError("selected nodes do not match the reverse map")
    if asn.k == 1:
        return ze[asn.indices[:, 0]].copy()
    return ze[asn.indices].sum(axis=1) / asn.k


def reverse_map_backward(dout: np.ndarray, rm: ReverseMap, examined_selector: np.ndarray,
                         n_total: int) -> np.ndarray:
    """Gradient of reverse_map w.r.t. the full stacked node features."""
    asn = rm.assignment
    dze = np.zeros((asn.n_nodes, dout.shape[1]))
    scaled = dout / asn.k
    if asn.k == 1:
        np.add.at(dze, asn.indices[:, 0], scaled)
    else:
        np.add.at(dze, asn.indices.ravel(), np.repeat(scaled, asn.k, axis=0))
    dz = np.zeros((n_total, dout.shape[1]))
    dz[np.asarray(examined_selector)] = dze
    return dz


def save_triplets(path, assignment: AssignmentMatrix) -> None:
    """Export the sparse assignment as '<pixel> <node>' lines."""
    with open(path, "w") as fh:
        fh.write(f"assignment {assignment.h} {assignment.w} "
                 f"{assignment.n_nodes} {assignment.k}\n")
        for i, j in assignment.to_triplets():
            fh.write(f"{i} {j}\n")
