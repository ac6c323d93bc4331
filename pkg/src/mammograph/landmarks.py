"""Pseudo-landmark embedding.

Landmarks are placed on equidistant lines parallel to the pectoral reference
line between the nipple and that line; each line is intersected with the
breast foreground and points are inserted at interior fractions of the
resulting chord. MLO views additionally receive rows of points inside the
pectoral region behind the line. Ordering is line-major (nipple side first,
points along the +t direction of each line), pectoral rows appended last,
so equal inputs always produce byte-identical landmark sets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import BreastMask, NippleLocation, PectoralLine

log = logging.getLogger(__name__)

_SAMPLE_STEP = 0.25  # px, along-line scan resolution for chord endpoints


@dataclass(frozen=True)
class LandmarkConfig:
    """Line/point schedule.

    `points_per_line[i]` is the point count on line i (line 0 nearest the
    nipple). `pectoral_points_per_row` holds per-row counts for the extra
    MLO rows behind the pectoral line; `mlo_pectoral_rows` is its length.
    """

    n_lines: int
    points_per_line: tuple[int, ...]
    pectoral_points_per_row: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_lines < 1:
            raise ValueError("n_lines must be >= 1")
        if len(self.points_per_line) != self.n_lines:
            raise ValueError("points_per_line length must equal n_lines")
        if any(m < 1 for m in self.points_per_line):
            raise ValueError("every points_per_line entry must be >= 1")
        if any(m < 1 for m in self.pectoral_points_per_row):
            raise ValueError("every pectoral row count must be >= 1")

    @property
    def mlo_pectoral_rows(self) -> int:
        return len(self.pectoral_points_per_row)

    @property
    def total(self) -> int:
        return sum(self.points_per_line) + sum(self.pectoral_points_per_row)


# Default schedules reproducing 66 CC / 71 MLO nodes. Only the totals are
# published; the per-line split is a configuration choice.
DEFAULT_CC_CONFIG = LandmarkConfig(8, (4, 6, 8, 9, 10, 10, 10, 9))
DEFAULT_MLO_CONFIG = LandmarkConfig(8, (4, 6, 8, 9, 10, 10, 10, 9), (5,))


@dataclass
class LandmarkSet:
    view_type: str  # "cc" | "mlo"
    points: np.ndarray  # (N, 2) float64, (x, y) image coordinates

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.view_type not in ("cc", "mlo"):
            raise ValueError(f"unknown view type {self.view_type!r}")

    @property
    def count(self) -> int:
        return len(self.points)

    def scaled(self, factor: float) -> "LandmarkSet":
        """Landmarks in a resampled coordinate frame (e.g. feature-map res)."""
        return LandmarkSet(self.view_type, self.points * factor)


def embed_landmarks(mask: BreastMask, line: PectoralLine, nipple: NippleLocation,
                    cfg: LandmarkConfig, view_type: str) -> LandmarkSet:
    """Place pseudo landmarks for one view. Lines that fail to intersect the
    foreground at two points are skipped with a warning and shrink the count."""
    d_nip = line.signed_distance(nipple.x, nipple.y)
    if abs(d_nip) < 1.0:
        raise ValueError("nipple lies on the pectoral line")
    n = cfg.n_lines
    points: list[tuple[float, float]] = []
    for i in range(n):
        # line i sits at fraction (i+1)/(n+1) of the way nipple -> pectoral
        offset = d_nip * (n - i) / (n + 1)
        chord = _chord_points(mask, line, offset, cfg.points_per_line[i])
        if chord is None:
            log.warning("landmark line %d (%s view) does not cross the foreground "
                        "at two points; skipped", i, view_type)
            continue
        points.extend(chord)
    if view_type == "mlo" and cfg.mlo_pectoral_rows > 0:
        points.extend(_pectoral_rows(mask, line, d_nip, cfg))
    return LandmarkSet(view_type, np.array(points, dtype=np.float64).reshape(-1, 2))


def _chord_points(mask: BreastMask, line: PectoralLine, offset: float,
                  m: int) -> list[tuple[float, float]] | None:
    """Sample the foreground chord of the line at signed `offset` from the
    pectoral line, then place m points at interior fractions j/(m+1)."""
    h, w = mask.mask.shape
    ct, st = math.cos(line.theta), math.sin(line.theta)
    # base point on the offset line; direction t = (-sin, cos)
    bx = ct * (line.rho + offset)
    by = st * (line.rho + offset)
    tmax = math.hypot(h, w)
    ts = np.arange(-tmax, tmax + _SAMPLE_STEP, _SAMPLE_STEP)
    px = bx - st * ts
    py = by + ct * ts
    xi = np.rint(px).astype(int)
    yi = np.rint(py).astype(int)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    inside = np.zeros(len(ts), dtype=bool)
    inside[ok] = mask.mask[yi[ok], xi[ok]]
    idx = np.nonzero(inside)[0]
    if len(idx) < 2:
        return None
    t0, t1 = ts[idx[0]], ts[idx[-1]]
    if t1 - t0 < _SAMPLE_STEP:
        return None
    out = []
    for j in range(1, m + 1):
        t = t0 + (t1 - t0) * j / (m + 1)
        x = bx - st * t
        y = by + ct * t
        x, y = _nudge_inside(mask, x, y, -st, ct, t1 - t0)
        out.append((x, y))
    return out


def _nudge_inside(mask: BreastMask, x: float, y: float, dx: float, dy: float,
                  span: float) -> tuple[float, float]:
    """Move a point the minimal distance along the line so its rounded pixel
    is foreground (handles concave dents in the contour)."""
    h, w = mask.mask.shape

    def fg(px, py):
        xi, yi = int(round(px)), int(round(py))
        return 0 <= xi < w and 0 <= yi < h and mask.mask[yi, xi]

    if fg(x, y):
        return x, y
    step = _SAMPLE_STEP
    t = step
    while t < span:
        for s in (+t, -t):
            if fg(x + dx * s, y + dy * s):
                return x + dx * s, y + dy * s
        t += step
    return x, y  # give up; caller's foreground invariant check will flag it


def _pectoral_rows(mask: BreastMask, line: PectoralLine, d_nip: float,
                   cfg: LandmarkConfig) -> list[tuple[float, float]]:
    """Rows of points inside the pectoral region (opposite side of the line
    from the nipple), at interior fractions of the region's depth."""
    ys, xs = np.nonzero(mask.mask)
    sd = line.signed_distance(xs.astype(float), ys.astype(float))
    sign = 1.0 if d_nip > 0 else -1.0
    behind = sd * sign < -0.5
    if not behind.any():
        log.warning("no pectoral region behind the line; pectoral rows skipped")
        return []
    depth = float(np.max(-sd[behind] * sign))
    rows = cfg.mlo_pectoral_rows
    out: list[tuple[float, float]] = []
    for r, m in enumerate(cfg.pectoral_points_per_row):
        offset = -sign * depth * (r + 1) / (rows + 1)
        chord = _chord_points(mask, line, offset, m)
        if chord is None:
            log.warning("pectoral row %d does not cross the foreground; skipped", r)
            continue
        out.extend(chord)
    return out


def uniform_grid_landmarks(mask: BreastMask, rows: int, cols: int,
                           view_type: str = "cc") -> LandmarkSet:
    """Ablation baseline: a regular grid over the foreground bounding box,
    keeping only cell centers that land on foreground."""
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    ys, xs = np.nonzero(mask.mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    pts = []
    for r in range(rows):
        for c in range(cols):
            x = x0 + (c + 0.5) * (x1 - x0) / cols
            y = y0 + (r + 0.5) * (y1 - y0) / rows
            xi, yi = int(round(x)), int(round(y))
            if 0 <= xi < mask.width and 0 <= yi < mask.height and mask.mask[yi, xi]:
                pts.append((x, y))
    return LandmarkSet(view_type, np.array(pts, dtype=np.float64).reshape(-1, 2))


def save_landmarks(path, lm: LandmarkSet) -> None:
    """Landmark file: view type, count, then integer pixel coordinates."""
    with open(path, "w") as fh:
        fh.write(f"view {lm.view_type}\ncount {lm.count}\n")
        for x, y in lm.points:
            fh.write(f"{int(round(x))} {int(round(y))}\n")


def load_landmarks(path) -> LandmarkSet:
    with open(path) as fh:
        view = fh.readline().split()[1]
        count = int(fh.readline().split()[1])
        pts = [tuple(map(float, fh.readline().split())) for _ in range(count)]
    return LandmarkSet(view, np.array(pts, dtype=np.float64).reshape(-1, 2))
