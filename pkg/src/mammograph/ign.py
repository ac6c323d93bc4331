"""Inception graph convolution across bilateral node sets.

Bilateral views share a view type, so the examined and contralateral node
sets have equal size n and a positional correspondence. Each branch s links
every examined node to its top-s nearest contralateral landmarks (mirrored
into canonical coordinates beforehand); the augmented adjacency adds
self-loops, giving [[I, J], [J^T, I]]. A layer sums the per-branch
propagations before the sigmoid:

    Z <- sigmoid( sum_b  Jhat_b Z W_b )
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import LandmarkSet
from .numcore import Param, sigmoid, sigmoid_grad_from_output


@dataclass
class CrossViewAdjacency:
    j: np.ndarray  # (n, n) binary, row sums = s
    s: int


@dataclass
class InceptionAdjacency:
    jhat: np.ndarray  # (2n, 2n) symmetric
    s: int
    n: int


def build_cross_adjacency(lm_e: LandmarkSet, lm_c: LandmarkSet, s: int) -> CrossViewAdjacency:
    """Row i marks the s nearest contralateral landmarks to examined landmark
    i (Euclidean, ties by ascending index)."""
    n = lm_e.count
    if lm_c.count != n:
        raise ValueError(f"bilateral node counts differ: {n} vs {lm_c.count}")
    if not (1 <= s <= n):
        raise ValueError(f"s={s} out of range for {n} nodes")
    d2 = ((lm_e.points[:, None, :] - lm_c.points[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    j = np.zeros((n, n))
    rows = np.repeat(np.arange(n), s)
    j[rows, order[:, :s].ravel()] = 1.0
    return CrossViewAdjacency(j, s)


def augment_inception(cross: CrossViewAdjacency, self_loops: bool = True) -> InceptionAdjacency:
    """[[M, J], [J^T, M]] with M = I by default (self-loops); M = 0 is the
    no-self-loop ablation."""
    n = cross.j.shape[0]
    m = np.eye(n) if self_loops else np.zeros((n, n))
    jhat = np.zeros((2 * n, 2 * n))
    jhat[:n, :n] = m
    jhat[n:, n:] = m
    jhat[:n, n:] = cross.j
    jhat[n:, :n] = cross.j.T
    return InceptionAdjacency(jhat, cross.s, n)


class InceptionConv:
    """Multi-branch graph convolution; `layers[l][b]` is the (C, C) weight of
    branch b in layer l. Branch order must match the adjacency list."""

    def __init__(self, layers: list[list[Param]], branch_sizes: tuple[int, ...]):
        if sorted(set(branch_sizes)) != list(branch_sizes):
            raise ValueError("branch sizes must be distinct and ascending")
        for bank in layers:
            if len(bank) != len(branch_sizes):
                raise ValueError("every layer needs one weight per branch")
        self.layers = layers
        self.branch_sizes = branch_sizes

    def pre_activation(self, z: np.ndarray, jhats: list[InceptionAdjacency],
                       bank: list[Param]) -> np.ndarray:
        pre = np.zeros((z.shape[0], bank[0].value.shape[1]))
        for jh, w in zip(jhats, bank):
            pre += (jh.jhat @ z) @ w.value
        return pre

    def forward(self, xi: np.ndarray, jhats: list[InceptionAdjacency]):
        if len(jhats) != len(self.branch_sizes):
            raise ValueError("adjacency list does not match branch configuration")
        for jh, s in zip(jhats, self.branch_sizes):
            if jh.s != s:
                raise ValueError(f"adjacency for s={jh.s} given where s={s} expected")
        z = xi
        caches = []
        for bank in self.layers:
            jz = [jh.jhat @ z for jh in jhats]
            pre = np.zeros((z.shape[0], bank[0].value.shape[1]))
            for t, w in zip(jz, bank):
                pre += t @ w.value
            out = sigmoid(pre)
            caches.append((z, jz, out))
            z = out
        return z, caches

    def backward(self, dz: np.ndarray, jhats: list[InceptionAdjacency], caches):
        for bank, (zin, jz, out) in zip(reversed(self.layers), reversed(caches)):
            dpre = dz * sigmoid_grad_from_output(out)
            dzin = np.zeros_like(zin)
            for jh, t, w in zip(jhats, jz, bank):
                w.grad += t.T @ dpre
                dzin += jh.jhat.T @ (dpre @ w.value.T)
            dz = dzin
        return dz
