"""Correspondence reasoning enhancement.

Reverse-mapped bipartite features F_B and the bilateral attention map
F_hat (a per-pixel sigmoid scalar) are fused with the examined-view features:

    full:      Y = [F_hat * F_e, F_B] W_f^T      (W_f: C x 2C)
    bgn_only:  Y = [F_e, F_B] W_f^T              (W_f: C x 2C)
    ign_only:  Y = (F_hat * F_e) W_f^T           (W_f: C x C)

`*` multiplies each pixel's C channels by its attention scalar. The same
parameter set applies at every feature level; only the assignment matrices
are per-level.
"""

from __future__ import annotations

import numpy as np

from .bgn import BipartiteAdjacency
from .nodemap import ReverseMap, reverse_map
from .numcore import Param, sigmoid, sigmoid_grad_from_output

FUSION_MODES = ("full", "bgn_only", "ign_only")


class AttentionHead:
    """F_hat = sigmoid(F_I w_I): one scalar in (0, 1) per pixel."""

    def __init__(self, wi: Param):
        if wi.value.shape[1] != 1:
            raise ValueError("w_I must be a (C, 1) column")
        self.wi = wi

    def forward(self, fi: np.ndarray):
        if fi.shape[1] != self.wi.value.shape[0]:
            raise ValueError("feature width does not match w_I")
        fhat = sigmoid(fi @ self.wi.value)
        return fhat, (fi, fhat)

    def backward(self, dfhat: np.ndarray, cache):
        fi, fhat = cache
        dpre = dfhat * sigmoid_grad_from_output(fhat)
        self.wi.grad += fi.T @ dpre
        return dpre @ self.wi.value.T


class FusionLayer:
    """Mode-specific linear fusion with weight W_f."""

    def __init__(self, mode: str, wf: Param):
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        c = wf.value.shape[0]
        want = (c, 2 * c) if mode in ("full", "bgn_only") else (c, c)
        if wf.value.shape != want:
            raise ValueError(f"W_f shape {wf.value.shape} does not match mode "
                             f"{mode!r} (want {want})")
        self.mode = mode
        self.wf = wf

    def forward(self, fe: np.ndarray, fb: np.ndarray | None = None,
                fhat: np.ndarray | None = None):
        c = self.wf.value.shape[0]
        if fe.shape[1] != c:
            raise ValueError("F_e width mismatch")
        if self.mode == "full":
            _need(fb, "F_B"), _need(fhat, "attention map")
            _check_like(fb, fe), _check_att(fhat, fe)
            gated = fhat * fe
            concat = np.concatenate([gated, fb], axis=1)
        elif self.mode == "bgn_only":
            _need(fb, "F_B")
            _check_like(fb, fe)
            gated = None
            concat = np.concatenate([fe, fb], axis=1)
        else:  # ign_only
            _need(fhat, "attention map")
            _check_att(fhat, fe)
            gated = fhat * fe
            concat = gated
        y = concat @ self.wf.value.T
        return y, (fe, fb, fhat, concat)

    def backward(self, dy: np.ndarray, cache):
        """Returns (dfe, dfb, dfhat); entries are None where unused."""
        fe, fb, fhat, concat = cache
        c = self.wf.value.shape[0]
        self.wf.grad += dy.T @ concat
        dconcat = dy @ self.wf.value
        if self.mode == "full":
            dgated = dconcat[:, :c]
            dfb = dconcat[:, c:]
            dfe = dgated * fhat
            dfhat = (dgated * fe).sum(axis=1, keepdims=True)
            return dfe, dfb, dfhat
        if self.mode == "bgn_only":
            return dconcat[:, :c], dconcat[:, c:], None
        dgated = dconcat
        dfe = dgated * fhat
        dfhat = (dgated * fe).sum(axis=1, keepdims=True)
        return dfe, None, dfhat


def _need(v, name):
    if v is None:
        raise ValueError(f"{name} required by this fusion mode")


def _check_like(fb, fe):
    if fb.shape != fe.shape:
        raise ValueError(f"F_B shape {fb.shape} != F_e shape {fe.shape}")


def _check_att(fhat, fe):
    if fhat.shape != (fe.shape[0], 1):
        raise ValueError(f"attention map must be ({fe.shape[0]}, 1), got {fhat.shape}")


def enhance_per_level(levels: list[dict], enhance_fn) -> list[np.ndarray]:
    """Apply one shared enhancement to several feature levels.

    `levels` holds per-level inputs (features plus resolution-dependent
    maps); `enhance_fn(level)` runs the shared-parameter pipeline on one
    level. Channel width must agree across levels.
    """
    if not levels:
        return []
    c = levels[0]["fe"].shape[1]
    for lv in levels:
        if lv["fe"].shape[1] != c:
            raise ValueError("channel width differs across levels")
    return [enhance_fn(lv) for lv in levels]


def visualize_correspondence(hb: BipartiteAdjacency, rm: ReverseMap,
                             examined_node: int, target_selector: np.ndarray) -> np.ndarray:
    """Response image of the nodes correlated with one query node.

    A one-hot vector at `examined_node` (global index) is propagated through
    the bipartite adjacency; the rows of the opposite view (chosen by
    `target_selector`) are reverse-mapped with that view's map and min-max
    normalized to 8 bits.
    """
    total = hb.hb.shape[0]
    if not (0 <= examined_node < total):
        raise ValueError(f"node index {examined_node} out of range")
    x = np.zeros((total, 1))
    x[examined_node, 0] = 1.0
    response = hb.hb @ x
    o = reverse_map(response, rm, target_selector)
    img = o.reshape(rm.assignment.h, rm.assignment.w)
    return minmax_to_u8(img)


def response_map(f: np.ndarray, h: int, w: int) -> np.ndarray:
    """Channel-wise max pooling of an (HW, C) feature map, min-max normalized."""
    if f.shape[0] != h * w:
        raise ValueError("feature rows do not match the grid")
    return minmax_to_u8(f.max(axis=1).reshape(h, w))


def minmax_to_u8(img: np.ndarray) -> np.ndarray:
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.rint((img - lo) / (hi - lo) * 255.0).astype(np.uint8)


def upscale_nearest(img: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upscale for exporting feature-resolution images."""
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def overlay_attention(gray: np.ndarray, attention_u8: np.ndarray) -> np.ndarray:
    """Red-channel blend (alpha 0.5) of an attention image over a gray image."""
    if gray.shape != attention_u8.shape:
        raise ValueError("shape mismatch between image and attention map")
    rgb = np.stack([gray, gray, gray], axis=2).astype(np.float64)
    rgb[..., 0] = 0.5 * rgb[..., 0] + 0.5 * attention_u8.astype(np.float64)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
