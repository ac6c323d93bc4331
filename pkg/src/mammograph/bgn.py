"""Bipartite graph convolution across ipsilateral (CC/MLO) node sets.

The rectangular adjacency H couples CC nodes to MLO nodes as the elementwise
product of a frozen geometric prior H^g (normalized co-occurrence counts of
mass-bearing node pairs from the training split) and an instance semantic
graph H^s (sigmoid of a learned linear function of concatenated node
features). Convolutions run on the augmented symmetric block form
[[0, H], [H^T, 0]] with CC nodes first, MLO nodes second, whichever view is
examined.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkSet
from .numcore import Param, sigmoid, sigmoid_grad_from_output

log = logging.getLogger(__name__)


@dataclass
class FrequencyMatrix:
    eps: np.ndarray  # (|V_CC|, |V_MLO|) nonnegative counts


@dataclass
class GeometricGraph:
    hg: np.ndarray  # (|V_CC|, |V_MLO|) nonnegative reals


def nearest_node(landmarks: LandmarkSet, x: float, y: float) -> int:
    d2 = (landmarks.points[:, 0] - x) ** 2 + (landmarks.points[:, 1] - y) ** 2
    return int(np.argmin(d2))  # first minimum: ties to the lowest index


def accumulate_mass_links(annotations, lm_cc: LandmarkSet, lm_mlo: LandmarkSet,
                          into: FrequencyMatrix | None = None) -> FrequencyMatrix:
    """Count, per mass instance, the (nearest CC node, nearest MLO node) pair
    of its two box centers. Instances missing a view are skipped with a
    warning. Pass `into` to accumulate across cases."""
    if into is None:
        into = FrequencyMatrix(np.zeros((lm_cc.count, lm_mlo.count)))
    by_instance: dict = {}
    for ann in annotations:
        by_instance.setdefault(ann.instance_id, {})[ann.view] = ann
    for iid, views in sorted(by_instance.items()):
        if "cc" not in views or "mlo" not in views:
            log.warning("mass %s lacks one ipsilateral view; skipped", iid)
            continue
        ci = nearest_node(lm_cc, *_box_center(views["cc"].box))
        mj = nearest_node(lm_mlo, *_box_center(views["mlo"].box))
        into.eps[ci, mj] += 1
    return into


def _box_center(box) -> tuple[float, float]:
    x, y, w, h = box
    return x + w / 2.0, y + h / 2.0


def normalize_geometric(freq: FrequencyMatrix) -> GeometricGraph:
    """hg_ij = eps_ij / sqrt(D_i. * D_.j) with row/column sums D; 0/0 := 0."""
    eps = np.asarray(freq.eps, dtype=np.float64)
    drow = eps.sum(axis=1)
    dcol = eps.sum(axis=0)
    denom = np.sqrt(drow[:, None] * dcol[None, :])
    hg = np.zeros_like(eps)
    nz = denom > 0
    hg[nz] = eps[nz] / denom[nz]
    return GeometricGraph(hg)


class SemanticGraph:
    """H^s_ij = sigmoid([X_i^CC, X_j^MLO] . w_s), with backward pass."""

    def __init__(self, ws: Param):
        if ws.value.shape[1] != 1 or ws.value.shape[0] % 2 != 0:
            raise ValueError("ws must be a (2C, 1) column")
        self.ws = ws

    @property
    def channels(self) -> int:
        return self.ws.value.shape[0] // 2

    def forward(self, x_cc: np.ndarray, x_mlo: np.ndarray):
        c = self.channels
        if x_cc.shape[1] != c or x_mlo.shape[1] != c:
            raise ValueError("node feature width does not match ws")
        u = self.ws.value[:c, 0]
        v = self.ws.value[c:, 0]
        pre = (x_cc @ u)[:, None] + (x_mlo @ v)[None, :]
        hs = sigmoid(pre)
        cache = (x_cc, x_mlo, hs)
        return hs, cache

    def backward(self, dhs: np.ndarray, cache):
        x_cc, x_mlo, hs = cache
        c = self.channels
        dpre = dhs * sigmoid_grad_from_output(hs)
        row = dpre.sum(axis=1)  # (n_cc,)
        col = dpre.sum(axis=0)  # (n_mlo,)
        self.ws.grad[:c, 0] += x_cc.T @ row
        self.ws.grad[c:, 0] += x_mlo.T @ col
        dx_cc = row[:, None] * self.ws.value[:c, 0][None, :]
        dx_mlo = col[:, None] * self.ws.value[c:, 0][None, :]
        return dx_cc, dx_mlo


def combine(hg: GeometricGraph, hs: np.ndarray) -> np.ndarray:
    """H = H^g o H^s (elementwise product)."""
    if hg.hg.shape != hs.shape:
        raise ValueError(f"shape mismatch {hg.hg.shape} vs {hs.shape}")
    return hg.hg * hs


@dataclass
class BipartiteAdjacency:
    hb: np.ndarray  # ((ncc+nmlo), (ncc+nmlo)) symmetric, zero diagonal blocks
    n_cc: int
    n_mlo: int

    @property
    def cc_selector(self) -> np.ndarray:
        return np.arange(self.n_cc)

    @property
    def mlo_selector(self) -> np.ndarray:
        return np.arange(self.n_cc, self.n_cc + self.n_mlo)


def augment_bipartite(h: np.ndarray) -> BipartiteAdjacency:
    """Block form [[0, H], [H^T, 0]]; CC nodes first, MLO second."""
    ncc, nmlo = h.shape
    hb = np.zeros((ncc + nmlo, ncc + nmlo))
    hb[:ncc, ncc:] = h
    hb[ncc:, :ncc] = h.T
    return BipartiteAdjacency(hb, ncc, nmlo)


class BipartiteConv:
    """Stacked graph convolutions Z <- sigmoid(H^B Z W) over a fixed H^B.

    The adjacency is treated as an input (it carries gradient back to the
    semantic graph); layer weights are Params of shape (C, C).
    """

    def __init__(self, layers: list[Param]):
        if not layers:
            raise ValueError("need at least one layer")
        c = layers[0].value.shape[0]
        for w in layers:
            if w.value.shape != (c, c):
                raise ValueError("layer weights must all be (C, C)")
        self.layers = layers

    def forward(self, xb: np.ndarray, hb: BipartiteAdjacency):
        if xb.shape[0] != hb.hb.shape[0]:
            raise ValueError("node count mismatch between features and adjacency")
        if xb.shape[1] != self.layers[0].value.shape[0]:
            raise ValueError("feature width does not match layer weights")
        z = xb
        caches = []
        for w in self.layers:
            hz = hb.hb @ z
            out = sigmoid(hz @ w.value)
            caches.append((z, hz, out))
            z = out
        return z, caches

    def backward(self, dz: np.ndarray, hb: BipartiteAdjacency, caches):
        """Returns (dxb, dhb); accumulates layer weight grads."""
        dhb = np.zeros_like(hb.hb)
        for w, (zin, hz, out) in zip(reversed(self.layers), reversed(caches)):
            dpre = dz * sigmoid_grad_from_output(out)
            w.grad += hz.T @ dpre
            dhz = dpre @ w.value.T
            dhb += dhz @ zin.T
            dz = hb.hb.T @ dhz
        return dz, dhb


def save_geometric_graph(path, freq: FrequencyMatrix, geo: GeometricGraph) -> None:
    """Structured text: dims, dense H^g values, then the raw counts for audit."""
    r, c = geo.hg.shape
    with open(path, "w") as fh:
        fh.write(f"geograph {r} {c}\n")
        for row in geo.hg:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")
        fh.write("frequency\n")
        for row in freq.eps:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_geometric_graph(path) -> tuple[FrequencyMatrix, GeometricGraph]:
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != "geograph":
            raise ValueError("not a geometric graph file")
        r, c = int(header[1]), int(header[2])
        hg = np.array([[float(v) for v in fh.readline().split()] for _ in range(r)])
        if fh.readline().strip() != "frequency":
            raise ValueError("missing frequency section")
        eps = np.array([[float(v) for v in fh.readline().split()] for _ in range(r)])
    return FrequencyMatrix(eps.reshape(r, c)), GeometricGraph(hg.reshape(r, c))
