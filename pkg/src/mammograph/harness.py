"""Toy detection pipeline over the multi-view graph enhancement.

A three-layer convolutional backbone (3x3 kernels, strides 1-2-2, width 16)
feeds the graph modules; a 1x1 head predicts a per-cell score and four box
offsets against a fixed base box. Four wiring modes mirror the module
ablations:

    single_view  -- the full fusion with H^B forced to zero and the
                    attention map forced to ones (so F_B is the constant
                    0.5 field and Y = [F_e, 0.5] W_f^T)
    bgn_only     -- Y = [F_e, F_B] W_f^T
    ign_only     -- Y = (F_hat * F_e) W_f^T
    full_agn     -- Y = [F_hat * F_e, F_B] W_f^T

Training is per-case SGD (Nesterov momentum) with binary cross-entropy on
the score map, balanced between positive and negative cells, plus an L1
penalty on box offsets at positive cells. Evaluation reports recall at
fixed false-positive-per-image operating points with an IoU > 0.2 match.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import bgn as bgn_mod
from . import fusion as fusion_mod
from . import geometry as geo
from . import ign as ign_mod
from . import landmarks as lmk
from . import nodemap as nm
from .numcore import Param, make_param, save_params, load_params, sgd_step
from .phantom import PhantomCase

log = logging.getLogger(__name__)

MODES = ("single_view", "bgn_only", "ign_only", "full_agn")
FPI_POINTS = (0.5, 1.0, 2.0, 3.0, 4.0)
IOU_MATCH = 0.2


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    epochs: int = 30
    seed: int = 0
    channels: int = 16
    stride: int = 4
    bgn_k: int = 3
    ign_k: int = 1
    ign_branches: tuple[int, ...] = (1, 3, 5)
    graph_layers: int = 2
    base_box_side: float = 48.0
    nms_iou: float = 0.3
    max_detections: int = 50
    box_loss_weight: float = 1.0
    lr_milestones: tuple[float, ...] = ()  # fractions of total steps; lr x0.1 at each


# ---------------------------------------------------------------------------
# convolutional backbone


def _im2col(xp: np.ndarray, k: int, stride: int):
    c, h, w = xp.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2 = xp.strides
    view = as_strided(xp, shape=(c, k, k, ho, wo),
                      strides=(s0, s1, s2, s1 * stride, s2 * stride))
    return view.reshape(c * k * k, ho * wo), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """x: (Cin, H, W); w: (Cout, Cin*9); b: (Cout,). 3x3 kernel, pad 1."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols, ho, wo = _im2col(xp, 3, stride)
    out = w @ cols + b[:, None]
    return out.reshape(-1, ho, wo), (cols, xp.shape)


def conv2d_backward(dout: np.ndarray, cache, w: np.ndarray, stride: int):
    cols, xp_shape = cache
    co, ho, wo = dout.shape
    dflat = dout.reshape(co, -1)
    dw = dflat @ cols.T
    db = dflat.sum(axis=1)
    dcols = (w.T @ dflat).reshape(xp_shape[0], 3, 3, ho, wo)
    dxp = np.zeros(xp_shape)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + ho * stride:stride, kx:kx + wo * stride:stride] += dcols[:, ky, kx]
    return dw, db, dxp[:, 1:-1, 1:-1]


class Backbone:
    """conv(1->C, s1) - relu - conv(C->C, s2) - relu - conv(C->C, s2),
    producing an (HW/16, C) flattened feature map at 1/4 resolution."""

    STRIDES = (1, 2, 2)

    def __init__(self, channels: int, rng: np.random.Generator):
        c = channels
        self.channels = c
        self.params = []
        chans = [(1, c), (c, c), (c, c)]
        for i, (cin, cout) in enumerate(chans):
            w = make_param(f"conv{i + 1}_w", cout, cin * 9, rng,
                           fan_in=cin * 9, fan_out=cout * 9)
            b = Param(f"conv{i + 1}_b", np.zeros((1, cout)))
            self.params += [w, b]

    def forward(self, img: np.ndarray):
        """img: (H, W) uint8; H and W must be divisible by 4."""
        h, w = img.shape
        if h % 4 or w % 4:
            raise ValueError("image size must be divisible by 4")
        x = img.astype(np.float64)[None] / 255.0
        caches = []
        for i in range(3):
            wp, bp = self.params[2 * i], self.params[2 * i + 1]
            out, cc = conv2d_forward(x, wp.value, bp.value[0], self.STRIDES[i])
            if i < 2:
                mask = out > 0
                x = out * mask
            else:
                mask = None
                x = out
            caches.append((cc, mask, out.shape))
        c, fh, fw = x.shape
        fmap = x.reshape(c, fh * fw).T.copy()
        return fmap, (caches, (fh, fw))

    def backward(self, dfmap: np.ndarray, cache):
        caches, (fh, fw) = cache
        dx = dfmap.T.reshape(self.channels, fh, fw)
        for i in reversed(range(3)):
            cc, mask, _shape = caches[i]
            if mask is not None:
                dx = dx * mask
            wp, bp = self.params[2 * i], self.params[2 * i + 1]
            dw, db, dx = conv2d_backward(dx, cc, wp.value, self.STRIDES[i])
            wp.grad += dw
            bp.grad += db[None, :]
        return dx

    def grid_shape(self, img_shape) -> tuple[int, int]:
        return img_shape[0] // 4, img_shape[1] // 4


class DetectionHead:
    """1x1 head: sigmoid score plus 4 box offsets per cell."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.score_w = make_param("head_score_w", channels, 1, rng)
        self.score_b = Param("head_score_b", np.zeros((1, 1)))
        self.off_w = make_param("head_off_w", channels, 4, rng)
        self.off_b = Param("head_off_b", np.zeros((1, 4)))
        self.params = [self.score_w, self.score_b, self.off_w, self.off_b]

    def forward(self, y: np.ndarray):
        logits = y @ self.score_w.value + self.score_b.value
        offsets = y @ self.off_w.value + self.off_b.value
        return logits, offsets, y

    def backward(self, dlogits: np.ndarray, doffsets: np.ndarray, y: np.ndarray):
        self.score_w.grad += y.T @ dlogits
        self.score_b.grad += dlogits.sum(axis=0, keepdims=True)
        self.off_w.grad += y.T @ doffsets
        self.off_b.grad += doffsets.sum(axis=0, keepdims=True)
        return dlogits @ self.score_w.value.T + doffsets @ self.off_w.value.T


# ---------------------------------------------------------------------------
# case context: everything resolution- and geometry-dependent, prepared once


class CasePreparationError(RuntimeError):
    pass


@dataclass
class CaseContext:
    case_id: str
    images: tuple[np.ndarray, np.ndarray, np.ndarray]  # examined, aux, contra
    view_types: tuple[str, str, str]
    gt_boxes: np.ndarray  # (n, 4) examined-view boxes
    examined_is_cc: bool
    fm_e_bgn: nm.ForwardMap
    fm_a_bgn: nm.ForwardMap
    rm_e_bgn: nm.ReverseMap
    fm_e_ign: nm.ForwardMap
    fm_c_ign: nm.ForwardMap
    rm_e_ign: nm.ReverseMap
    jhats: list[ign_mod.InceptionAdjacency]
    n_cc: int
    n_mlo: int
    grid: tuple[int, int]
    landmark_sets: tuple = ()  # (lm_e, lm_a, lm_c) in image coordinates

    @property
    def bgn_selector(self) -> np.ndarray:
        if self.examined_is_cc:
            return np.arange(self.n_cc)
        return np.arange(self.n_cc, self.n_cc + self.n_mlo)

    @property
    def n_examined(self) -> int:
        return self.n_cc if self.examined_is_cc else self.n_mlo


def preprocess_view(img: np.ndarray, view_type: str):
    """Mask, pectoral reference line, nipple and landmarks for one view."""
    mask = geo.otsu_threshold(img)
    if view_type == "cc":
        line = geo.chest_wall_line()
        cfg = lmk.DEFAULT_CC_CONFIG
    else:
        prior = geo.HoughPrior(*geo.MLO_PRIOR_THETA)
        line = geo.hough_pectoral_line(geo.canny_edges(img), prior)
        cfg = lmk.DEFAULT_MLO_CONFIG
    nipple = geo.detect_nipple(mask, line)
    lm = lmk.embed_landmarks(mask, line, nipple, cfg, view_type)
    if lm.count != cfg.total:
        raise CasePreparationError(
            f"{view_type} view produced {lm.count} landmarks, expected {cfg.total}")
    return mask, line, nipple, lm


def build_context(case_id: str, images, view_types, landmark_sets, gt_boxes,
                  cfg: TrainConfig) -> CaseContext:
    """Assemble maps and adjacencies from already-computed landmarks.

    `landmark_sets` is (lm_e, lm_a, lm_c) in image coordinates.
    """
    lm_e, lm_a, lm_c = landmark_sets
    h, w = images[0].shape
    fh, fw = h // cfg.stride, w // cfg.stride
    ratio = 1.0 / cfg.stride
    se, sa, sc = (lm.scaled(ratio) for lm in (lm_e, lm_a, lm_c))

    fm_e_bgn = nm.build_forward_map(nm.build_assignment(se, fh, fw, cfg.bgn_k))
    fm_a_bgn = nm.build_forward_map(nm.build_assignment(sa, fh, fw, cfg.bgn_k))
    rm_e_bgn = nm.ReverseMap(fm_e_bgn.assignment)
    asn_e_ign = nm.build_assignment(se, fh, fw, cfg.ign_k)
    fm_e_ign = nm.build_forward_map(asn_e_ign)
    fm_c_ign = nm.build_forward_map(nm.build_assignment(sc, fh, fw, cfg.ign_k))
    rm_e_ign = nm.ReverseMap(asn_e_ign)
    jhats = [ign_mod.augment_inception(ign_mod.build_cross_adjacency(lm_e, lm_c, s))
             for s in cfg.ign_branches]

    examined_is_cc = view_types[0] == "cc"
    n_cc = lm_e.count if examined_is_cc else lm_a.count
    n_mlo = lm_a.count if examined_is_cc else lm_e.count
    return CaseContext(
        case_id=case_id, images=tuple(images), view_types=tuple(view_types),
        gt_boxes=np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4),
        examined_is_cc=examined_is_cc,
        fm_e_bgn=fm_e_bgn, fm_a_bgn=fm_a_bgn, rm_e_bgn=rm_e_bgn,
        fm_e_ign=fm_e_ign, fm_c_ign=fm_c_ign, rm_e_ign=rm_e_ign,
        jhats=jhats, n_cc=n_cc, n_mlo=n_mlo, grid=(fh, fw),
        landmark_sets=(lm_e, lm_a, lm_c))


def prepare_case(case: PhantomCase, cfg: TrainConfig) -> CaseContext:
    """Full preprocessing: segmentation, line, nipple, landmarks, maps."""
    lms = []
    for img, vt in zip((case.examined, case.auxiliary, case.contralateral),
                       case.view_types):
        lms.append(preprocess_view(img, vt)[3])
    gt = np.array([a.box for a in case.annotations if a.view == case.examined_view],
                  dtype=np.float64).reshape(-1, 4)
    return build_context(case.case_id, (case.examined, case.auxiliary, case.contralateral),
                         case.view_types, lms, gt, cfg)


# ---------------------------------------------------------------------------
# detection model


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    score: float


class MultiViewModel:
    """Backbone + graph enhancement + detection head for one wiring mode."""

    def __init__(self, mode: str, cfg: TrainConfig,
                 geo_graph: bgn_mod.GeometricGraph | None, seed: int | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode in ("bgn_only", "full_agn") and geo_graph is None:
            raise ValueError(f"mode {mode!r} needs a prebuilt geometric graph")
        self.mode = mode
        self.cfg = cfg
        self.geo_graph = geo_graph
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        c = cfg.channels
        self.backbone = Backbone(c, rng)
        self.use_bgn = mode in ("bgn_only", "full_agn")
        self.use_ign = mode in ("ign_only", "full_agn")

        self.semantic = bgn_mod.SemanticGraph(make_param("ws", 2 * c, 1, rng)) \
            if self.use_bgn else None
        self.bgn_conv = bgn_mod.BipartiteConv(
            [make_param(f"bgn_w{i}", c, c, rng) for i in range(cfg.graph_layers)]) \
            if self.use_bgn else None
        if self.use_ign:
            layers = [[make_param(f"ign_w{i}_s{s}", c, c, rng) for s in cfg.ign_branches]
                      for i in range(cfg.graph_layers)]
            self.ign_conv = ign_mod.InceptionConv(layers, cfg.ign_branches)
            self.attention = fusion_mod.AttentionHead(make_param("wi", c, 1, rng))
        else:
            self.ign_conv = None
            self.attention = None
        fusion_mode = {"single_view": "full", "full_agn": "full",
                       "bgn_only": "bgn_only", "ign_only": "ign_only"}[mode]
        wf_cols = 2 * c if fusion_mode in ("full", "bgn_only") else c
        self.fusion = fusion_mod.FusionLayer(fusion_mode, make_param("wf", c, wf_cols, rng))
        self.head = DetectionHead(c, rng)

        self.params = list(self.backbone.params)
        if self.use_bgn:
            self.params.append(self.semantic.ws)
            self.params += self.bgn_conv.layers
        if self.use_ign:
            self.params += [w for bank in self.ign_conv.layers for w in bank]
            self.params.append(self.attention.wi)
        self.params += [self.fusion.wf] + self.head.params

    # -- forward / backward ------------------------------------------------

    def enhance(self, ctx: CaseContext, wire_hb_zero: bool = False,
                wire_att_ones: bool = False):
        """Graph-enhanced features Y for the examined view, plus caches."""
        cache: dict = {"ctx": ctx, "wired": (wire_hb_zero, wire_att_ones)}
        fe, cache["bb_e"] = self.backbone.forward(ctx.images[0])
        hw = fe.shape[0]
        cache["fe"] = fe

        if self.use_bgn:
            fa, cache["bb_a"] = self.backbone.forward(ctx.images[1])
            xe = nm.forward_map(fe, ctx.fm_e_bgn)
            xa = nm.forward_map(fa, ctx.fm_a_bgn)
            x_cc, x_mlo = (xe, xa) if ctx.examined_is_cc else (xa, xe)
            hs, cache["sem"] = self.semantic.forward(x_cc, x_mlo)
            h = bgn_mod.combine(self.geo_graph, hs)
            hb = bgn_mod.augment_bipartite(h)
            if wire_hb_zero:
                hb = bgn_mod.BipartiteAdjacency(np.zeros_like(hb.hb), hb.n_cc, hb.n_mlo)
            xb = np.vstack([x_cc, x_mlo])
            zb, cache["bgn"] = self.bgn_conv.forward(xb, hb)
            fb = nm.reverse_map(zb, ctx.rm_e_bgn, ctx.bgn_selector)
            cache["hb"] = hb
            cache["xb_parts"] = (xe, xa)
        elif self.fusion.mode in ("full", "bgn_only"):
            # single_view: the wired-zero chain collapses to the constant 0.5
            fb = np.full((hw, self.cfg.channels), 0.5)
        else:
            fb = None
        cache["fb"] = fb

        if self.use_ign:
            fc, cache["bb_c"] = self.backbone.forward(ctx.images[2])
            xie = nm.forward_map(fe, ctx.fm_e_ign)
            xic = nm.forward_map(fc, ctx.fm_c_ign)
            xi = np.vstack([xie, xic])
            zi, cache["ign"] = self.ign_conv.forward(xi, ctx.jhats)
            fi = nm.reverse_map(zi, ctx.rm_e_ign, np.arange(ctx.n_examined))
            fhat, cache["att"] = self.attention.forward(fi)
            if wire_att_ones:
                fhat = np.ones_like(fhat)
            cache["fi_rows"] = zi.shape[0]
        elif self.fusion.mode in ("full", "ign_only"):
            fhat = np.ones((hw, 1))
        else:
            fhat = None
        cache["fhat"] = fhat

        kwargs = {}
        if self.fusion.mode in ("full", "bgn_only"):
            kwargs["fb"] = fb
        if self.fusion.mode in ("full", "ign_only"):
            kwargs["fhat"] = fhat
        y, cache["fusion"] = self.fusion.forward(fe, **kwargs)
        cache["y"] = y
        return y, cache

    def enhance_backward(self, dy: np.ndarray, cache):
        ctx: CaseContext = cache["ctx"]
        wire_hb_zero, wire_att_ones = cache["wired"]
        dfe, dfb, dfhat = self.fusion.backward(dy, cache["fusion"])
        dfe = dfe.copy()

        if self.use_ign and not wire_att_ones:
            dfi = self.attention.backward(dfhat, cache["att"])
            dzi = nm.reverse_map_backward(dfi, ctx.rm_e_ign,
                                          np.arange(ctx.n_examined), cache["fi_rows"])
            dxi = self.ign_conv.backward(dzi, ctx.jhats, cache["ign"])
            n = ctx.n_examined
            dfe += nm.forward_map_backward(dxi[:n], ctx.fm_e_ign)
            dfc = nm.forward_map_backward(dxi[n:], ctx.fm_c_ign)
            self.backbone.backward(dfc, cache["bb_c"])

        if self.use_bgn:
            hb = cache["hb"]
            dzb = nm.reverse_map_backward(dfb, ctx.rm_e_bgn, ctx.bgn_selector,
                                          ctx.n_cc + ctx.n_mlo)
            dxb, dhb = self.bgn_conv.backward(dzb, hb, cache["bgn"])
            dx_cc = dxb[:ctx.n_cc]
            dx_mlo = dxb[ctx.n_cc:]
            if not wire_hb_zero:
                dh = dhb[:ctx.n_cc, ctx.n_cc:] + dhb[ctx.n_cc:, :ctx.n_cc].T
                dhs = dh * self.geo_graph.hg
                dxc_h, dxm_h = self.semantic.backward(dhs, cache["sem"])
                dx_cc = dx_cc + dxc_h
                dx_mlo = dx_mlo + dxm_h
            dxe, dxa = (dx_cc, dx_mlo) if ctx.examined_is_cc else (dx_mlo, dx_cc)
            dfe += nm.forward_map_backward(dxe, ctx.fm_e_bgn)
            dfa = nm.forward_map_backward(dxa, ctx.fm_a_bgn)
            self.backbone.backward(dfa, cache["bb_a"])

        self.backbone.backward(dfe, cache["bb_e"])

    def case_loss(self, ctx: CaseContext, wire_hb_zero: bool = False,
                  wire_att_ones: bool = False, backward: bool = True) -> float:
        """Forward (and optionally backward) pass of the training loss."""
        y, cache = self.enhance(ctx, wire_hb_zero, wire_att_ones)
        logits, offsets, yck = self.head.forward(y)
        labels, targets = cell_targets(ctx, self.cfg)
        loss, dlogits, doffsets = detection_loss(
            logits, offsets, labels, targets, self.cfg.box_loss_weight)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss on case {ctx.case_id}")
        if backward:
            dy = self.head.backward(dlogits, doffsets, yck)
            self.enhance_backward(dy, cache)
        return loss

    def predict(self, ctx: CaseContext) -> list[Detection]:
        y, _ = self.enhance(ctx)
        logits, offsets, _ = self.head.forward(y)
        scores = 1.0 / (1.0 + np.exp(-logits[:, 0]))
        boxes = decode_boxes(offsets, ctx.grid, self.cfg)
        top = np.argsort(-scores, kind="stable")[:300]
        dets = [Detection(tuple(boxes[i]), float(scores[i])) for i in top]
        return nms(dets, self.cfg.nms_iou)[: self.cfg.max_detections]

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_params(self.params, path)

    def load(self, path) -> None:
        loaded = {p.name: p.value for p in load_params(path)}
        for p in self.params:
            if p.name not in loaded:
                raise ValueError(f"checkpoint missing param {p.name!r}")
            if loaded[p.name].shape != p.value.shape:
                raise ValueError(f"checkpoint shape mismatch for {p.name!r}")
            p.value[:] = loaded[p.name]


# ---------------------------------------------------------------------------
# cells, loss, boxes


def cell_centers(grid: tuple[int, int], stride: int) -> np.ndarray:
    fh, fw = grid
    ys, xs = np.divmod(np.arange(fh * fw), fw)
    return np.stack([(xs + 0.5) * stride, (ys + 0.5) * stride], axis=1)


def cell_targets(ctx: CaseContext, cfg: TrainConfig):
    """Positive cells (base box IoU > 0.2 with any GT) and offset targets."""
    centers = cell_centers(ctx.grid, cfg.stride)
    n = centers.shape[0]
    labels = np.zeros(n, dtype=bool)
    targets = np.zeros((n, 4))
    b = cfg.base_box_side
    for gt in ctx.gt_boxes:
        gx, gy, gw, gh = gt
        ious = iou_many(np.concatenate([centers - b / 2.0,
                                        np.full((n, 2), b)], axis=1), gt)
        pos = ious > IOU_MATCH
        newly = pos & ~labels
        labels |= pos
        cx, cy = centers[newly, 0], centers[newly, 1]
        targets[newly, 0] = (gx + gw / 2.0 - cx) / b
        targets[newly, 1] = (gy + gh / 2.0 - cy) / b
        targets[newly, 2] = math.log(gw / b)
        targets[newly, 3] = math.log(gh / b)
    return labels, targets


def detection_loss(logits, offsets, labels, targets, box_weight):
    """Balanced BCE on scores + L1 on offsets at positive cells.

    Returns (loss, dlogits, doffsets)."""
    z = logits[:, 0]
    pos = labels
    neg = ~labels
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    loss = 0.0
    dz = np.zeros_like(z)
    if n_pos:
        loss += 0.5 * np.logaddexp(0.0, -z[pos]).mean()
        dz[pos] = 0.5 * (p[pos] - 1.0) / n_pos
    if n_neg:
        w = 0.5 if n_pos else 1.0
        loss += w * np.logaddexp(0.0, z[neg]).mean()
        dz[neg] = w * p[neg] / n_neg
    doff = np.zeros_like(offsets)
    if n_pos:
        diff = offsets[pos] - targets[pos]
        loss += box_weight * np.abs(diff).mean()
        doff[pos] = box_weight * np.sign(diff) / diff.size
    return float(loss), dz[:, None], doff


def decode_boxes(offsets: np.ndarray, grid: tuple[int, int], cfg: TrainConfig) -> np.ndarray:
    centers = cell_centers(grid, cfg.stride)
    b = cfg.base_box_side
    cx = centers[:, 0] + offsets[:, 0] * b
    cy = centers[:, 1] + offsets[:, 1] * b
    w = b * np.exp(np.clip(offsets[:, 2], -4, 4))
    h = b * np.exp(np.clip(offsets[:, 3], -4, 4))
    return np.stack([cx - w / 2.0, cy - h / 2.0, w, h], axis=1)


# ---------------------------------------------------------------------------
# detection metrics


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("zero-area box")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def iou_many(boxes: np.ndarray, box) -> np.ndarray:
    bx, by, bw, bh = box
    ix = np.maximum(0.0, np.minimum(boxes[:, 0] + boxes[:, 2], bx + bw)
                    - np.maximum(boxes[:, 0], bx))
    iy = np.maximum(0.0, np.minimum(boxes[:, 1] + boxes[:, 3], by + bh)
                    - np.maximum(boxes[:, 1], by))
    inter = ix * iy
    return inter / (boxes[:, 2] * boxes[:, 3] + bw * bh - inter)


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy descending-score suppression; ties broken by box coordinates."""
    if not (0.0 <= iou_thresh <= 1.0):
        raise ValueError("iou_thresh must be in [0, 1]")
    order = sorted(dets, key=lambda d: (-d.score,) + tuple(d.box))
    keep: list[Detection] = []
    for d in order:
        if all(iou(d.box, k.box) <= iou_thresh for k in keep):
            keep.append(d)
    return keep


@dataclass
class FrocCurve:
    points: list[tuple[float, float]]  # (fpi, recall) at the operating points

    def recall_at(self, fpi: float) -> float:
        for f, r in self.points:
            if f == fpi:
                return r
        raise KeyError(fpi)


def evaluate_froc(preds_per_case: list[list[Detection]],
                  gts_per_case: list[list]) -> FrocCurve:
    """Sweep the score threshold over all detections; a GT counts as recalled
    when a surviving detection overlaps it with IoU > 0.2. Recall at each
    operating FPI is linearly interpolated between achieved curve points."""
    n_images = len(gts_per_case)
    total_gt = sum(len(g) for g in gts_per_case)
    if total_gt == 0:
        raise ValueError("empty ground-truth set: recall undefined")
    events = []
    for ci, dets in enumerate(preds_per_case):
        for d in dets:
            events.append((-d.score, ci, tuple(d.box)))
    events.sort()
    matched = [set() for _ in range(n_images)]
    tp = 0
    fp = 0
    xs = [0.0]
    rs = [0.0]
    for negscore, ci, box in events:
        gts = gts_per_case[ci]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched[ci]:
                continue
            v = iou(box, tuple(gt))
            if v > best_iou:
                best_iou, best_j = v, j
        if best_iou > IOU_MATCH:
            matched[ci].add(best_j)
            tp += 1
        else:
            fp += 1
        f = fp / n_images
        r = tp / total_gt
        if xs[-1] == f:
            rs[-1] = max(rs[-1], r)
        else:
            xs.append(f)
            rs.append(r)
    points = [(t, float(np.interp(t, xs, rs))) for t in FPI_POINTS]
    return FrocCurve(points)


def write_froc_csv(path, curve: FrocCurve) -> None:
    with open(path, "w") as fh:
        fh.write("fpi,recall\n")
        for f, r in curve.points:
            fh.write(f"{f},{r:.6f}\n")


def write_summary(path, mode: str, seed: int, curve: FrocCurve) -> None:
    with open(path, "w") as fh:
        fh.write(f"mode {mode}\nseed {seed}\n")
        for f, r in curve.points:
            fh.write(f"R@{f} {r:.6f}\n")


# ---------------------------------------------------------------------------
# training / evaluation


def build_geometric_graph(cases_with_contexts,
                          lm_cc_count: int = 66, lm_mlo_count: int = 71):
    """Accumulate the frequency matrix over (PhantomCase, CaseContext) pairs
    from the training split. Each case carries its own landmark sets; node
    indices correspond across cases by construction."""
    freq = bgn_mod.FrequencyMatrix(np.zeros((lm_cc_count, lm_mlo_count)))
    for case, ctx in cases_with_contexts:
        lm_e, lm_a, _ = ctx.landmark_sets
        lm_cc, lm_mlo = (lm_e, lm_a) if ctx.examined_is_cc else (lm_a, lm_e)
        bgn_mod.accumulate_mass_links(case.annotations, lm_cc, lm_mlo, into=freq)
    return freq, bgn_mod.normalize_geometric(freq)


def train(contexts: list[CaseContext], mode: str, cfg: TrainConfig,
          geo_graph: bgn_mod.GeometricGraph | None = None,
          log_every: int = 0) -> MultiViewModel:
    """Deterministic per-case SGD over the prepared training contexts."""
    model = MultiViewModel(mode, cfg, geo_graph)
    rng = np.random.default_rng(cfg.seed)
    total = cfg.epochs * len(contexts)
    decay_steps = sorted(int(f * total) for f in cfg.lr_milestones)
    lr = cfg.lr
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(contexts))
        for idx in order:
            while decay_steps and step >= decay_steps[0]:
                lr *= 0.1
                decay_steps.pop(0)
            loss = model.case_loss(contexts[idx])
            sgd_step(model.params, lr, cfg.weight_decay, cfg.momentum, cfg.nesterov)
            step += 1
            if log_every and step % log_every == 0:
                log.info("mode=%s epoch=%d step=%d loss=%.4f", mode, epoch, step, loss)
    return model


def evaluate(model: MultiViewModel, contexts: list[CaseContext]) -> FrocCurve:
    preds = [model.predict(ctx) for ctx in contexts]
    gts = [[tuple(b) for b in ctx.gt_boxes] for ctx in contexts]
    return evaluate_froc(preds, gts)


# ---------------------------------------------------------------------------
# mode-comparison experiment


@dataclass
class ExperimentResult:
    curves: dict  # (mode, seed) -> FrocCurve
    geo_graph: bgn_mod.GeometricGraph
    frequency: bgn_mod.FrequencyMatrix

    def median_recall(self, mode: str, fpi: float = 1.0) -> float:
        vals = sorted(c.recall_at(fpi) for (m, s), c in self.curves.items() if m == mode)
        return float(np.median(vals))


def load_and_prepare(manifest_path, cfg: TrainConfig, splits=("train", "val", "test"),
                     progress_every: int = 0):
    """Load manifest cases and preprocess them once; returns
    {split: [(PhantomCase, CaseContext), ...]} skipping unpreparable cases
    with a warning."""
    from .phantom import load_case, read_manifest

    out = {s: [] for s in splits}
    entries = [(p, s) for p, s in read_manifest(manifest_path) if s in splits]
    for i, (path, split) in enumerate(entries):
        case = load_case(path)
        try:
            ctx = prepare_case(case, cfg)
        except (CasePreparationError, ValueError) as exc:
            log.warning("case %s skipped: %s", case.case_id, exc)
            continue
        out[split].append((case, ctx))
        if progress_every and (i + 1) % progress_every == 0:
            log.info("prepared %d/%d cases", i + 1, len(entries))
    return out


def run_mode_experiment(prepared: dict, cfg: TrainConfig,
                        modes=MODES, seeds=(0, 1, 2),
                        eval_split: str = "test") -> ExperimentResult:
    """Train every (mode, seed) on the shared prepared training contexts and
    evaluate on the held-out split."""
    train_ctxs = [ctx for _, ctx in prepared["train"]]
    eval_ctxs = [ctx for _, ctx in prepared[eval_split]]
    if not train_ctxs or not eval_ctxs:
        raise ValueError("experiment needs non-empty train and eval splits")
    freq, geo_graph = build_geometric_graph(prepared["train"])
    curves = {}
    for mode in modes:
        g = geo_graph if mode in ("bgn_only", "full_agn") else None
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed)
            model = train(train_ctxs, mode, run_cfg, g)
            curve = evaluate(model, eval_ctxs)
            curves[(mode, seed)] = curve
            log.info("mode=%s seed=%d %s", mode, seed,
                     " ".join(f"R@{f}={r:.3f}" for f, r in curve.points))
    return ExperimentResult(curves, geo_graph, freq)
