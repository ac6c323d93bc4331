"""Image preprocessing ahead of landmark embedding.

Foreground segmentation (Otsu + largest component + traced contour), Canny
edges, Hough fitting of the pectoral muscle line, nipple localization and
view resizing. Images are plain (H, W) uint8 arrays indexed [row, col];
points and lines live in (x, y) = (col, row) coordinates. Lines use the
Hesse normal form x*cos(theta) + y*sin(theta) = rho with theta in [0, pi).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

# Defaults: the upstream description fixes none of these, so standard
# textbook values are used throughout.
CANNY_SIGMA = 1.4
CANNY_LOW = 20.0
CANNY_HIGH = 60.0
HOUGH_RHO_STEP = 1.0
HOUGH_THETA_STEP = math.radians(1.0)
MLO_PRIOR_THETA = (math.radians(30.0), math.radians(80.0))


@dataclass
class BreastMask:
    """Foreground mask plus its traced boundary.

    `contour` is an (N, 2) int array of (x, y) pixels, ordered clockwise in
    image coordinates (y grows downward) and closed implicitly (last pixel
    is adjacent to the first).
    """

    mask: np.ndarray  # (H, W) bool
    contour: np.ndarray  # (N, 2) int, (x, y)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


@dataclass
class PectoralLine:
    rho: float
    theta: float  # radians, in [0, pi)

    def signed_distance(self, x, y):
        return x * math.cos(self.theta) + y * math.sin(self.theta) - self.rho


@dataclass
class NippleLocation:
    x: int
    y: int


@dataclass
class HoughPrior:
    """Angular window (radians, Hesse theta) plus an optional rho window."""

    theta_min: float
    theta_max: float
    rho_min: float | None = None
    rho_max: float | None = None


def otsu_threshold_value(img: np.ndarray) -> int:
    """The intensity maximizing between-class variance over the 256-bin
    histogram (class 0 = intensities <= t); first argmax on ties."""
    img = _check_gray(img)
    if img.min() == img.max():
        raise ValueError("constant image: no foreground to segment")
    hist = np.bincount(img.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist) / total
    mu = np.cumsum(hist * levels) / total
    mu_t = mu[-1]
    w1 = 1.0 - w0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.zeros(256)
    var_between[valid] = (mu_t * w0[valid] - mu[valid]) ** 2 / (w0[valid] * w1[valid])
    return int(np.argmax(var_between))


def otsu_threshold(img: np.ndarray) -> BreastMask:
    """Segment the breast: Otsu threshold, keep largest component, trace contour.

    Foreground is intensity strictly above the threshold.
    """
    thresh = otsu_threshold_value(img)
    fg = img > thresh
    if not fg.any():
        raise ValueError("empty foreground after thresholding")
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    keep = int(np.argmax(counts))
    mask = labels == keep
    contour = trace_contour(mask)
    return BreastMask(mask=mask, contour=contour)


# Moore neighborhood in clockwise order starting from west, as (dx, dy).
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]


def trace_contour(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbor boundary trace, clockwise, starting at the topmost-
    leftmost foreground pixel. Off-image counts as background."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask has no contour")
    start_i = np.lexsort((xs, ys))[0]
    start = (int(xs[start_i]), int(ys[start_i]))
    h, w = mask.shape

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and mask[y, x]

    contour = [start]
    # enter scanning from the west neighbor (known background for the start)
    prev_dir = 0
    cur = start
    while True:
        found = False
        for i in range(8):
            d = (prev_dir + 1 + i) % 8
            dx, dy = _MOORE[d]
            nx, ny = cur[0] + dx, cur[1] + dy
            if fg(nx, ny):
                # backtrack: next search starts from the pixel before the hit
                prev_dir = (d + 4) % 8
                cur = (nx, ny)
                found = True
                break
        if not found:
            break  # isolated single pixel
        if cur == start and len(contour) > 1:
            break
        contour.append(cur)
        if len(contour) > 4 * mask.size:
            raise RuntimeError("contour trace failed to close")
    return np.array(contour, dtype=np.int64)


def gaussian_kernel_5x5(sigma: float = CANNY_SIGMA) -> np.ndarray:
    ax = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _convolve2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0] // 2
    padded = np.pad(img.astype(np.float64), r, mode="reflect")
    out = np.zeros(img.shape, dtype=np.float64)
    h, w = img.shape
    for ky in range(kernel.shape[0]):
        for kx in range(kernel.shape[1]):
            out += kernel[ky, kx] * padded[ky:ky + h, kx:kx + w]
    return out


def canny_edges(img: np.ndarray, low: float = CANNY_LOW,
                high: float = CANNY_HIGH) -> np.ndarray:
    """Canny detector: 5x5 Gaussian (sigma 1.4), Sobel, non-maximum
    suppression, double-threshold hysteresis. Returns an (H, W) bool map."""
    img = _check_gray(img)
    if not (0 <= low <= high):
        raise ValueError("need 0 <= low <= high")
    smooth = _convolve2d(img, gaussian_kernel_5x5())
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    gx = _convolve2d(smooth, kx)
    gy = _convolve2d(smooth, kx.T)
    mag = np.hypot(gx, gy)

    # quantize gradient direction to 0/45/90/135 degrees
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    sector = ((angle + np.pi / 8) // (np.pi / 4)).astype(int) % 4
    offsets = {0: (1, 0), 1: (1, 1), 2: (0, 1), 3: (-1, 1)}  # (dx, dy) per sector
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    h, w = mag.shape
    yy, xx = np.mgrid[0:h, 0:w]
    for s, (dx, dy) in offsets.items():
        sel = sector == s
        fwd = padded[1 + yy[sel] + dy, 1 + xx[sel] + dx]
        bwd = padded[1 + yy[sel] - dy, 1 + xx[sel] - dx]
        m = mag[sel]
        # >= forward, > backward: breaks two-pixel plateau ties to one side
        keep[yy[sel], xx[sel]] = (m >= fwd) & (m > bwd)

    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    if not strong.any():
        return np.zeros_like(weak)
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    strong_labels = np.unique(labels[strong])
    return np.isin(labels, strong_labels[strong_labels > 0])


def hough_pectoral_line(edges: np.ndarray, prior: HoughPrior) -> PectoralLine:
    """Vote in (rho, theta) space (1 px x 1 deg grid) inside the prior window,
    then refine the winning cell by total least squares over its inliers."""
    ys, xs = np.nonzero(edges)
    if len(ys) == 0:
        raise ValueError("empty edge map: no pectoral line")
    h, w = edges.shape
    diag = math.hypot(h, w)
    thetas = np.arange(0.0, math.pi, HOUGH_THETA_STEP)
    in_window = (thetas >= prior.theta_min - 1e-12) & (thetas <= prior.theta_max + 1e-12)
    thetas = thetas[in_window]
    if thetas.size == 0:
        raise ValueError("prior angular window contains no theta cells")
    n_rho = int(2 * math.ceil(diag / HOUGH_RHO_STEP)) + 1
    rho0 = -math.ceil(diag / HOUGH_RHO_STEP) * HOUGH_RHO_STEP
    acc = np.zeros((thetas.size, n_rho), dtype=np.int64)
    x = xs.astype(np.float64)
    y = ys.astype(np.float64)
    for ti, th in enumerate(thetas):
        rho = x * math.cos(th) + y * math.sin(th)
        bins = np.rint((rho - rho0) / HOUGH_RHO_STEP).astype(np.int64)
        np.add.at(acc[ti], bins, 1)
    if prior.rho_min is not None or prior.rho_max is not None:
        rho_values = rho0 + np.arange(n_rho) * HOUGH_RHO_STEP
        bad = np.zeros(n_rho, dtype=bool)
        if prior.rho_min is not None:
            bad |= rho_values < prior.rho_min
        if prior.rho_max is not None:
            bad |= rho_values > prior.rho_max
        acc[:, bad] = 0
    if acc.max() == 0:
        raise ValueError("no Hough votes inside the prior window")
    ti, ri = np.unravel_index(int(np.argmax(acc)), acc.shape)
    theta_c = float(thetas[ti])
    rho_c = rho0 + ri * HOUGH_RHO_STEP

    # least-squares refinement over the cell's inlier edge pixels
    d = np.abs(x * math.cos(theta_c) + y * math.sin(theta_c) - rho_c)
    inl = d <= 1.5 * HOUGH_RHO_STEP
    if inl.sum() >= 2:
        px, py = x[inl], y[inl]
        mx, my = px.mean(), py.mean()
        cov = np.cov(np.stack([px - mx, py - my]))
        evals, evecs = np.linalg.eigh(np.atleast_2d(cov))
        direction = evecs[:, int(np.argmax(evals))]
        theta = math.atan2(-direction[0], direction[1])  # normal angle
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:
            theta -= math.pi
        rho = mx * math.cos(theta) + my * math.sin(theta)
        # keep the refinement only if it stays within the prior window
        if prior.theta_min - 1e-9 <= theta <= prior.theta_max + 1e-9:
            return PectoralLine(rho=float(rho), theta=float(theta))
    return PectoralLine(rho=float(rho_c), theta=theta_c)


def chest_wall_line() -> PectoralLine:
    """The CC-view reference: the vertical chest-wall image border x = 0."""
    return PectoralLine(rho=0.0, theta=0.0)


def detect_nipple(mask: BreastMask, line: PectoralLine) -> NippleLocation:
    """Contour point farthest from the pectoral line; ties broken by the
    smallest y, then the smallest x."""
    if len(mask.contour) == 0:
        raise ValueError("empty contour")
    xs = mask.contour[:, 0].astype(np.float64)
    ys = mask.contour[:, 1].astype(np.float64)
    d = np.abs(xs * math.cos(line.theta) + ys * math.sin(line.theta) - line.rho)
    best = d.max()
    cand = np.nonzero(d == best)[0]
    order = np.lexsort((xs[cand], ys[cand]))
    i = cand[order[0]]
    return NippleLocation(x=int(mask.contour[i, 0]), y=int(mask.contour[i, 1]))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with pixel-center alignment:
    src = (dst + 0.5) * (in / out) - 0.5, clamped to the source extent."""
    img = _check_gray(img)
    h, w = img.shape
    if (out_h, out_w) == (h, w):
        return img.copy()
    sy = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - fx) + f[y0][:, x1] * fx
    bot = f[y1][:, x0] * (1 - fx) + f[y1][:, x1] * fx
    out = top * (1 - fy[:, :]) + bot * fy[:, :]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_to_examined(views: list[np.ndarray], examined_index: int) -> list[np.ndarray]:
    """Resample every view to the examined view's dimensions (examined
    unchanged)."""
    for v in views:
        if v.size == 0:
            raise ValueError("empty image")
    th, tw = views[examined_index].shape
    out = []
    for i, v in enumerate(views):
        if i == examined_index:
            out.append(v.copy())
        else:
            out.append(resize_bilinear(v, th, tw))
    return out


def mirror_horizontal(img: np.ndarray) -> np.ndarray:
    """Right-breast images are mirrored at ingestion so every breast shares
    left-orientation coordinates (chest wall at x = 0)."""
    return img[:, ::-1].copy()


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if data[i:i + 1] == b"#":
            while data[i:i + 1] not in (b"\n", b""):
                i += 1
        elif data[i:i + 1].isspace():
            i += 1
        else:
            j = i
            while not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    i += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=i)
    return pixels.reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = _check_gray(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected (H, W, 3) uint8")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def mask_to_pgm_array(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def _check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D gray image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 intensities, got {img.dtype}")
    return img
