"""Synthetic multi-view mammography phantoms.

Each case models one breast as a half-ellipsoid absorption volume with
procedural 3D gland texture (so ipsilateral projections share structure),
renders a top-down ray-sum for CC and a tilted ray-sum for MLO, and places
masses as dense spheres whose analytic projections give exact bounding
boxes. Because both projection directions are perpendicular to the
chest-to-nipple axis, a mass keeps the same perpendicular distance to the
pectoral reference line in both views: the line correspondence the
geometric graph is meant to learn. The contralateral breast reuses the
textured volume without masses, smoothly warped; an occlusion sheet can
hide a mass in the examined view only.

Case directory layout: {case_id}/{r_cc,r_mlo,l_cc,l_mlo}.pgm plus
annotations.txt; right-side images are stored mirrored (chest wall on the
right) and canonicalized at load time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo

VIEWS = ("cc", "mlo")
SIDES = ("l", "r")


class CaseRejected(RuntimeError):
    """Raised when mass placement cannot satisfy the containment rules."""


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 256
    mlo_angle: float = 40.0  # degrees, ray tilt of the MLO projection
    gland_texture_scale: float = 0.4
    distortion_amplitude: float = 3.0  # px, contralateral warp
    mass_count_range: tuple[int, int] = (1, 2)
    mass_radius_range: tuple[float, float] = (11.0, 13.0)
    occlusion_prob: float = 0.5
    seed: int = 0
    mass_density_range: tuple[float, float] = (0.55, 0.85)
    texture_samples: int = 12  # ray samples through the texture field

    def __post_init__(self):
        if not (20.0 < self.mlo_angle < 70.0):
            raise ValueError("mlo_angle must be in (20, 70) degrees")
        if self.mass_count_range[0] > self.mass_count_range[1] or self.mass_count_range[0] < 0:
            raise ValueError("invalid mass_count_range")
        if self.mass_radius_range[0] > self.mass_radius_range[1] or self.mass_radius_range[0] <= 0:
            raise ValueError("invalid mass_radius_range")
        if not (0.0 <= self.occlusion_prob <= 1.0):
            raise ValueError("occlusion_prob must be a probability")

    @property
    def median_mass_radius(self) -> float:
        return 0.5 * (self.mass_radius_range[0] + self.mass_radius_range[1])


@dataclass
class MassAnnotation:
    view: str  # "cc" | "mlo" (examined breast)
    box: tuple[float, float, float, float]  # (x, y, w, h), canonical coords
    instance_id: str

    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0


@dataclass
class PhantomCase:
    case_id: str
    examined: np.ndarray
    auxiliary: np.ndarray
    contralateral: np.ndarray
    view_types: tuple[str, str, str]  # (examined, auxiliary, contralateral)
    annotations: list[MassAnnotation]
    examined_side: str
    all_images: dict = field(default_factory=dict)  # {(side, view): uint8}
    mlo_line: tuple[float, float] = (0.0, 0.0)  # generator's (rho, theta)

    @property
    def examined_view(self) -> str:
        return self.view_types[0]


@dataclass
class _BreastGeometry:
    a: float  # chest -> nipple semi-axis
    b: float  # lateral semi-axis
    c: float  # vertical semi-axis
    alpha: float  # MLO ray tilt, radians
    theta_p: float  # MLO pectoral line angle (Hesse), radians
    rho_p: float  # MLO pectoral line offset in canvas coords
    ox: float
    oy: float
    wedge_depth: float

    @property
    def b_v(self) -> float:
        # lateral semi-axis of the MLO projection ellipse
        return 1.0 / math.sqrt(
            math.cos(self.alpha) ** 2 / self.b**2 + math.sin(self.alpha) ** 2 / self.c**2)

    def mlo_to_canvas(self, x, v):
        ct, st = math.cos(self.theta_p), math.sin(self.theta_p)
        return x * ct - v * st + self.ox, x * st + v * ct + self.oy


def _case_rng(cfg: PhantomConfig, case_seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, case_seed]))


def _value_noise_3d(rng, shape, cells):
    coarse = rng.random(cells)
    factors = [s / c for s, c in zip(shape, cells)]
    out = ndimage.zoom(coarse, factors, order=1, mode="nearest", grid_mode=True)
    return out[: shape[0], : shape[1], : shape[2]]


def _texture_field(rng, shape, scale):
    noise = np.zeros(shape)
    weights = (1.0, 0.5, 0.25)
    cells = [(8, 8, 6), (16, 16, 12), (32, 32, 24)]
    for wgt, cell in zip(weights, cells):
        noise += wgt * _value_noise_3d(rng, shape, cell)
    noise /= sum(weights)
    return scale * 2.0 * (noise - 0.5)  # zero-mean, +-scale


class _Renderer:
    """Ray-sums of density = 1 + texture inside the half-ellipsoid."""

    TEX_SHAPE = (48, 48, 32)  # grid over [0,a] x [-b,b] x [-c,c]

    def __init__(self, g: _BreastGeometry, texture: np.ndarray, n_samples: int):
        self.g = g
        self.tex = texture
        self.n_samples = n_samples

    def _tex_lookup(self, x, y, z):
        nx, ny, nz = self.TEX_SHAPE
        g = self.g
        ix = np.clip(x / g.a * (nx - 1), 0, nx - 1)
        iy = np.clip((y / g.b + 1.0) * 0.5 * (ny - 1), 0, ny - 1)
        iz = np.clip((z / g.c + 1.0) * 0.5 * (nz - 1), 0, nz - 1)
        return ndimage.map_coordinates(self.tex, [ix, iy, iz], order=1, mode="nearest")

    def _integrate(self, x, u, halfchord, ray_y, ray_z):
        """Midpoint-rule ray integral of (1 + texture) over chord length
        2*halfchord; ray_y/ray_z map (u, t) -> 3D coordinates."""
        m = self.n_samples
        n = x.size
        tk = (2.0 * np.arange(m) + 1.0 - m) / m  # midpoints in (-1, 1)
        t = halfchord[:, None] * tk[None, :]
        xs = np.broadcast_to(x[:, None], (n, m)).ravel()
        ys = ray_y(np.broadcast_to(u[:, None], (n, m)).ravel(), t.ravel())
        zs = ray_z(np.broadcast_to(u[:, None], (n, m)).ravel(), t.ravel())
        tex = self._tex_lookup(xs, ys, zs).reshape(n, m)
        step = 2.0 * halfchord / m
        return 2.0 * halfchord + step * tex.sum(axis=1)

    def render_cc(self, size: int) -> np.ndarray:
        """Top-down ray-sum on the canvas: col = x (chest at col 0),
        row = y + size/2."""
        g = self.g
        cols, rows = np.meshgrid(np.arange(size), np.arange(size))
        x = cols.ravel() + 0.5
        y = rows.ravel() + 0.5 - size / 2.0
        r2 = (x / g.a) ** 2 + (y / g.b) ** 2
        inside = r2 < 1.0
        img = np.zeros(size * size)
        hc = g.c * np.sqrt(np.maximum(1.0 - r2[inside], 0.0))
        img[inside] = self._integrate(
            x[inside], y[inside], hc,
            ray_y=lambda u, t: u, ray_z=lambda u, t: t)
        return img.reshape(size, size)

    def render_mlo_frame(self, x, v):
        """Ray-sum at the tilted direction for frame coordinates (x, v):
        ray point = (x, v*cos(alpha) + t*sin(alpha), -v*sin(alpha) + t*cos(alpha))."""
        g = self.g
        ca, sa = math.cos(g.alpha), math.sin(g.alpha)
        A = (sa / g.b) ** 2 + (ca / g.c) ** 2
        B = 2.0 * v * sa * ca * (1.0 / g.b**2 - 1.0 / g.c**2)
        C = (v * ca / g.b) ** 2 + (v * sa / g.c) ** 2 + (x / g.a) ** 2 - 1.0
        disc = B * B - 4.0 * A * C
        inside = (disc > 0.0) & (x > 0.0)
        out = np.zeros_like(x)
        if inside.any():
            xi, vi = x[inside], v[inside]
            di = disc[inside]
            t_mid = -B[inside] / (2.0 * A)
            hc = np.sqrt(di) / (2.0 * A)
            out[inside] = self._integrate(
                xi, vi, hc,
                ray_y=lambda u, t: u * ca + (t + np.repeat(t_mid, self.n_samples)) * sa,
                ray_z=lambda u, t: -u * sa + (t + np.repeat(t_mid, self.n_samples)) * ca)
        return out


def _sphere_projection_bump(size_or_grid, cx, cy, radius, amplitude):
    """Chord-length profile of a projected sphere: 2*sqrt(r^2 - rho^2)."""
    h, w = size_or_grid
    y0 = max(int(cy - radius - 2), 0)
    y1 = min(int(cy + radius + 3), h)
    x0 = max(int(cx - radius - 2), 0)
    x1 = min(int(cx + radius + 3), w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    r2 = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2
    bump = np.zeros((h, w))
    bump[y0:y1, x0:x1] = amplitude * 2.0 * np.sqrt(np.maximum(radius**2 - r2, 0.0))
    return bump


def _occlusion_sheet(shape, cx, cy, rng, radius, peak):
    """Elongated bright ridge partially covering a mass; max-blended so the
    mass profile vanishes under the sheet core."""
    h, w = shape
    ang = rng.uniform(0, math.pi)
    off = rng.uniform(0.0, 0.6 * radius)
    oa = rng.uniform(0, 2 * math.pi)
    cx = cx + off * math.cos(oa)
    cy = cy + off * math.sin(oa)
    sig_l = rng.uniform(2.5, 4.0) * radius
    sig_s = rng.uniform(0.9, 1.3) * radius
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    u = dx * math.cos(ang) + dy * math.sin(ang)
    t = -dx * math.sin(ang) + dy * math.cos(ang)
    return peak * np.exp(-0.5 * ((u / sig_l) ** 2 + (t / sig_s) ** 2))


def _smooth_warp(img: np.ndarray, rng, amplitude: float) -> np.ndarray:
    h, w = img.shape
    coarse = rng.normal(0.0, amplitude, size=(2, 6, 6))
    flow_y = ndimage.zoom(coarse[0], (h / 6, w / 6), order=1, mode="nearest", grid_mode=True)[:h, :w]
    flow_x = ndimage.zoom(coarse[1], (h / 6, w / 6), order=1, mode="nearest", grid_mode=True)[:h, :w]
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    return ndimage.map_coordinates(img, [rows + flow_y, cols + flow_x],
                                   order=1, mode="nearest")


def _sample_geometry(cfg: PhantomConfig, rng) -> _BreastGeometry:
    s = cfg.image_size
    a = rng.uniform(0.58, 0.66) * s
    b = rng.uniform(0.34, 0.40) * s
    c = rng.uniform(0.26, 0.32) * s
    theta_p = math.radians(rng.uniform(40.0, 58.0))
    g = _BreastGeometry(a=a, b=b, c=c, alpha=math.radians(cfg.mlo_angle),
                        theta_p=theta_p, rho_p=0.0, ox=0.0, oy=0.0,
                        wedge_depth=0.16 * a)
    # place the MLO frame so the breast ellipse fits with a margin and the
    # wedge exits through the top-left corner
    phis = np.linspace(0, math.pi, 64)
    ex = a * np.sin(phis)  # x in [0, a]
    ev = g.b_v * np.cos(phis)
    cx, cy = [], []
    for x, v in [(0.0, g.b_v), (0.0, -g.b_v)] + list(zip(ex, ev)) + list(zip(ex, -ev)):
        px = x * math.cos(theta_p) - v * math.sin(theta_p)
        py = x * math.sin(theta_p) + v * math.cos(theta_p)
        cx.append(px)
        cy.append(py)
    margin = 6.0
    ox = margin - min(cx)
    oy = margin - min(cy)
    span_x = max(cx) - min(cx)
    span_y = max(cy) - min(cy)
    if span_x > s - 2 * margin or span_y > s - 2 * margin:
        scale = min((s - 2 * margin) / span_x, (s - 2 * margin) / span_y)
        a, b, c = a * scale, b * scale, c * scale
        g = replace(g, a=a, b=b, c=c, wedge_depth=0.16 * a)
        ox, oy = margin - min(cx) * scale, margin - min(cy) * scale
    rho_p = ox * math.cos(theta_p) + oy * math.sin(theta_p)
    return replace(g, ox=ox, oy=oy, rho_p=rho_p)


def _render_mlo_canvas(renderer: _Renderer, size: int) -> np.ndarray:
    """Inverse-map every canvas pixel into the MLO frame, ray-sum there and
    add the pectoral wedge (crisp face at x = 0, feathered elsewhere)."""
    g = renderer.g
    cols, rows = np.meshgrid(np.arange(size), np.arange(size))
    px = cols.ravel() + 0.5 - g.ox
    py = rows.ravel() + 0.5 - g.oy
    ct, st = math.cos(g.theta_p), math.sin(g.theta_p)
    x = px * ct + py * st
    v = -px * st + py * ct
    img = renderer.render_mlo_frame(x, v).reshape(size, size)

    # wedge behind the line: the face at x = 0 is brighter than any tissue
    # column (a crisp step Canny can localize); behind it the profile decays
    # gently and fades out at the far side so no second straight edge forms
    depth = g.wedge_depth
    fade = 14.0
    xs = x.reshape(size, size)
    vs = v.reshape(size, size)
    ramp = np.zeros_like(xs)
    band = (xs < 0.0) & (xs >= -depth)
    ramp[band] = 0.5 + 0.5 * (1.0 + xs[band] / depth)
    tail = (xs < -depth) & (xs >= -depth - fade)
    ramp[tail] = 0.5 * (1.0 + (xs[tail] + depth) / fade)
    v_l = 1.35 * g.b_v
    taper = np.clip((v_l - np.abs(vs)) / (0.45 * g.b_v), 0.0, 1.0)
    wedge_peak = 2.9 * g.c
    wedge = wedge_peak * ramp * np.sqrt(taper)
    img = np.maximum(img, wedge)
    return img


def generate_case(cfg: PhantomConfig, case_seed: int) -> PhantomCase:
    """Render one deterministic case: (cfg, case_seed) fixes all bytes."""
    rng = _case_rng(cfg, case_seed)
    s = cfg.image_size
    g = _sample_geometry(cfg, rng)
    texture = _texture_field(rng, _Renderer.TEX_SHAPE, cfg.gland_texture_scale)
    renderer = _Renderer(g, texture, cfg.texture_samples)

    bg_cc = renderer.render_cc(s)
    bg_mlo = _render_mlo_canvas(renderer, s)

    examined_side = SIDES[int(rng.integers(0, 2))]
    examined_view = VIEWS[int(rng.integers(0, 2))]
    n_masses = int(rng.integers(cfg.mass_count_range[0], cfg.mass_count_range[1] + 1))

    masses = []
    for _ in range(n_masses):
        placed = False
        for _attempt in range(60):
            r = rng.uniform(*cfg.mass_radius_range)
            x0 = rng.uniform(0.18, 0.80) * g.a
            y_max = 0.62 * g.b * math.sqrt(max(1.0 - (x0 / g.a) ** 2, 0.0))
            z_max = 0.45 * g.c * math.sqrt(max(1.0 - (x0 / g.a) ** 2, 0.0))
            y0 = rng.uniform(-y_max, y_max)
            z0 = rng.uniform(-z_max, z_max)
            inside = ((x0 + r) / g.a) ** 2 + ((abs(y0) + r) / g.b) ** 2 \
                + ((abs(z0) + r) / g.c) ** 2
            if inside > 0.92:
                continue
            if any(math.hypot(x0 - m[0], y0 - m[1]) < r + m[3] + 6 for m in masses):
                continue
            dens = rng.uniform(*cfg.mass_density_range)
            masses.append((x0, y0, z0, r, dens))
            placed = True
            break
        if not placed:
            raise CaseRejected(f"case {case_seed}: mass placement failed")

    occluded = [bool(rng.random() < cfg.occlusion_prob) for _ in masses]

    # mass bumps and analytic boxes in both ipsilateral views
    cc_mass = np.zeros((s, s))
    mlo_mass = np.zeros((s, s))
    annotations = []
    ca, sa = math.cos(g.alpha), math.sin(g.alpha)
    for idx, (x0, y0, z0, r, dens) in enumerate(masses):
        iid = f"mass{idx}"
        cc_cx, cc_cy = x0, y0 + s / 2.0
        cc_mass += _sphere_projection_bump((s, s), cc_cx, cc_cy, r, dens)
        annotations.append(MassAnnotation("cc", (cc_cx - r, cc_cy - r, 2 * r, 2 * r), iid))
        v0 = y0 * ca - z0 * sa
        m_cx, m_cy = g.mlo_to_canvas(x0, v0)
        mlo_mass += _sphere_projection_bump((s, s), m_cx, m_cy, r, dens)
        annotations.append(MassAnnotation("mlo", (m_cx - r, m_cy - r, 2 * r, 2 * r), iid))

    ex_cc = bg_cc + cc_mass
    ex_mlo = bg_mlo + mlo_mass
    ex_img = {"cc": ex_cc, "mlo": ex_mlo}

    # occlusion sheets hide masses in the examined view only
    bg_peak = max(bg_cc.max(), bg_mlo.max())
    for idx, (x0, y0, z0, r, dens) in enumerate(masses):
        if not occluded[idx]:
            continue
        ann = next(a for a in annotations if a.instance_id == f"mass{idx}"
                   and a.view == examined_view)
        cx, cy = ann.center()
        sheet = _occlusion_sheet((s, s), cx, cy, rng, r, 1.2 * bg_peak)
        ex_img[examined_view] = np.maximum(ex_img[examined_view], sheet)

    # contralateral: the textured volume without masses, smoothly warped
    con_cc = _smooth_warp(bg_cc, rng, cfg.distortion_amplitude)
    con_mlo = _smooth_warp(bg_mlo, rng, cfg.distortion_amplitude)

    scale8 = 200.0 / bg_peak
    to_u8 = lambda f: np.clip(np.rint(f * scale8), 0, 255).astype(np.uint8)
    other = "r" if examined_side == "l" else "l"
    images = {
        (examined_side, "cc"): to_u8(ex_img["cc"]),
        (examined_side, "mlo"): to_u8(ex_img["mlo"]),
        (other, "cc"): to_u8(con_cc),
        (other, "mlo"): to_u8(con_mlo),
    }
    aux_view = "mlo" if examined_view == "cc" else "cc"
    return PhantomCase(
        case_id=f"case_{case_seed:05d}",
        examined=images[(examined_side, examined_view)],
        auxiliary=images[(examined_side, aux_view)],
        contralateral=images[(other, examined_view)],
        view_types=(examined_view, aux_view, examined_view),
        annotations=annotations,
        examined_side=examined_side,
        all_images=images,
        mlo_line=(g.rho_p, g.theta_p),
    )


def save_case(case: PhantomCase, out_dir) -> Path:
    """Write the four PGMs and the annotations file. Right-side images (and
    their boxes) are stored mirrored; loading mirrors them back."""
    d = Path(out_dir) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    s = case.examined.shape[1]
    for (side, view), img in sorted(case.all_images.items()):
        stored = geo.mirror_horizontal(img) if side == "r" else img
        geo.write_pgm(d / f"{side}_{view}.pgm", stored)
    with open(d / "annotations.txt", "w") as fh:
        fh.write(f"case {case.case_id}\n")
        fh.write(f"examined {case.examined_side} {case.examined_view}\n")
        fh.write(f"mlo_line {case.mlo_line[0]:.6f} {case.mlo_line[1]:.8f}\n")
        for ann in case.annotations:
            x, y, w, h = ann.box
            if case.examined_side == "r":
                x = s - x - w
            fh.write(f"ann {case.examined_side}_{ann.view} "
                     f"{x:.2f} {y:.2f} {w:.2f} {h:.2f} {ann.instance_id}\n")
    return d


def load_case(case_dir) -> PhantomCase:
    d = Path(case_dir)
    with open(d / "annotations.txt") as fh:
        case_id = fh.readline().split()[1]
        _, side, view = fh.readline().split()
        parts = fh.readline().split()
        mlo_line = (float(parts[1]), float(parts[2]))
        annotations = []
        for line in fh:
            p = line.split()
            if p[0] != "ann":
                continue
            stem = p[1]
            box = tuple(float(v) for v in p[2:6])
            annotations.append((stem, box, p[6]))
    images = {}
    s = None
    for sd in SIDES:
        for vw in VIEWS:
            img = geo.read_pgm(d / f"{sd}_{vw}.pgm")
            s = img.shape[1]
            if sd == "r":
                img = geo.mirror_horizontal(img)
            images[(sd, vw)] = img
    anns = []
    for stem, (x, y, w, h), iid in annotations:
        ann_side, ann_view = stem.split("_")
        if ann_side == "r":
            x = s - x - w
        anns.append(MassAnnotation(ann_view, (x, y, w, h), iid))
    aux_view = "mlo" if view == "cc" else "cc"
    other = "r" if side == "l" else "l"
    return PhantomCase(
        case_id=case_id,
        examined=images[(side, view)],
        auxiliary=images[(side, aux_view)],
        contralateral=images[(other, view)],
        view_types=(view, aux_view, view),
        annotations=anns,
        examined_side=side,
        all_images=images,
        mlo_line=mlo_line,
    )


def generate_dataset(cfg: PhantomConfig, n_cases: int, split_ratios: tuple[float, float, float],
                     out_dir, jobs: int = 1) -> Path:
    """Seeded, disjoint train/val/test split; returns the manifest path."""
    if n_cases < 1:
        raise ValueError("need a positive case count")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = round(split_ratios[0] * n_cases)
    n_val = round(split_ratios[1] * n_cases)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n_cases - n_train - n_val)
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED])).permutation(n_cases)
    assignment = {}
    for pos, case_idx in enumerate(order):
        assignment[int(case_idx)] = splits[pos]

    seeds = list(range(n_cases))
    if jobs > 1:
        import multiprocessing as mp

        with mp.Pool(jobs) as pool:
            cases = pool.starmap(generate_case, [(cfg, cs) for cs in seeds], chunksize=8)
    else:
        cases = [generate_case(cfg, cs) for cs in seeds]
    lines = []
    for cs, case in zip(seeds, cases):
        save_case(case, out)
        lines.append(f"{case.case_id} {assignment[cs]}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(manifest_path) -> list[tuple[Path, str]]:
    root = Path(manifest_path).parent
    out = []
    for line in Path(manifest_path).read_text().splitlines():
        if not line.strip():
            continue
        case_id, split = line.split()
        out.append((root / case_id, split))
    return out
