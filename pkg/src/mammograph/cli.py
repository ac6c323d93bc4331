"""Command-line entry point.

Subcommands cover the full pipeline: phantom dataset generation,
landmark embedding, geometric-graph construction, training, FROC
evaluation, visualization and the self-verification suites. Every command
is deterministic given its flags and seed; configuration precedence is
flags > config file > defaults, and the resolved configuration is logged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bgn as bgn_mod
from . import fusion as fusion_mod
from . import geometry as geo
from . import harness as h
from . import landmarks as lmk
from . import nodemap as nm
from . import phantom as ph
from .numcore import grad_check

log = logging.getLogger("mammograph")


class CliError(RuntimeError):
    pass


def _resolve_config(defaults: dict, config_path, overrides: dict) -> dict:
    """flags > config file > defaults; unknown keys are rejected."""
    resolved = dict(defaults)
    if config_path:
        loaded = json.loads(Path(config_path).read_text())
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    log.info("resolved config: %s", json.dumps(resolved, default=str, sort_keys=True))
    return resolved


def _phantom_config(resolved: dict) -> ph.PhantomConfig:
    fields = {f.name for f in dataclasses.fields(ph.PhantomConfig)}
    kwargs = {k: v for k, v in resolved.items() if k in fields}
    for key in ("mass_count_range", "mass_radius_range", "mass_density_range"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return ph.PhantomConfig(**kwargs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    defaults = {f.name: getattr(ph.PhantomConfig(), f.name)
                for f in dataclasses.fields(ph.PhantomConfig)}
    resolved = _resolve_config(defaults, args.config, {"seed": args.seed})
    cfg = _phantom_config(resolved)
    if args.n < 1:
        raise CliError("--n must be positive")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"output directory {out} is not empty (use --force)")
    manifest = ph.generate_dataset(cfg, args.n, tuple(args.split), out, jobs=args.jobs)
    print(manifest)
    return 0


def cmd_landmarks(args) -> int:
    image = geo.read_pgm(args.image)
    view = args.view or _infer_view(args.image)
    stage = "otsu"
    try:
        mask = geo.otsu_threshold(image)
        if view == "cc":
            line = geo.chest_wall_line()
        else:
            stage = "canny"
            edges = geo.canny_edges(image)
            stage = "hough"
            line = geo.hough_pectoral_line(edges, geo.HoughPrior(*geo.MLO_PRIOR_THETA))
        stage = "nipple"
        nipple = geo.detect_nipple(mask, line)
        stage = "landmarks"
        cfg = lmk.DEFAULT_CC_CONFIG if view == "cc" else lmk.DEFAULT_MLO_CONFIG
        lm = lmk.embed_landmarks(mask, line, nipple, cfg, view)
    except (ValueError, RuntimeError) as exc:
        raise CliError(f"stage {stage}: {exc}") from exc
    out = Path(args.out)
    lmk.save_landmarks(out.with_suffix(".txt"), lm)
    overlay = _draw_overlay(image, lm, line)
    geo.write_pgm(out.with_suffix(".overlay.pgm"), overlay)
    print(f"{lm.count} landmarks -> {out.with_suffix('.txt')}")
    return 0


def _infer_view(path) -> str:
    stem = Path(path).stem.lower()
    if stem.endswith("cc"):
        return "cc"
    if stem.endswith("mlo"):
        return "mlo"
    raise CliError("cannot infer view type from filename; pass --view")


def _draw_overlay(image, lm, line) -> np.ndarray:
    out = image.copy()
    hgt, wid = out.shape
    ct, st = math.cos(line.theta), math.sin(line.theta)
    ts = np.arange(-2 * max(hgt, wid), 2 * max(hgt, wid))
    lx = np.rint(ct * line.rho - st * ts).astype(int)
    ly = np.rint(st * line.rho + ct * ts).astype(int)
    ok = (lx >= 0) & (lx < wid) & (ly >= 0) & (ly < hgt)
    out[ly[ok], lx[ok]] = 255
    for x, y in np.rint(lm.points).astype(int):
        out[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2] = 255
    return out


def _load_split(manifest, split: str):
    entries = ph.read_manifest(manifest)
    dirs = [p for p, s in entries if s == split]
    return [ph.load_case(p) for p in dirs]


def cmd_build_geograph(args) -> int:
    if args.split != "train":
        raise CliError("geometric graphs are built from the training split only")
    cases = _load_split(args.manifest, "train")
    if not cases:
        raise CliError("training split is empty")
    freq = bgn_mod.FrequencyMatrix(np.zeros((lmk.DEFAULT_CC_CONFIG.total,
                                             lmk.DEFAULT_MLO_CONFIG.total)))
    for case in cases:
        lms = {}
        for img, vt in zip((case.examined, case.auxiliary), case.view_types[:2]):
            lms[vt] = h.preprocess_view(img, vt)[3]
        bgn_mod.accumulate_mass_links(case.annotations, lms["cc"], lms["mlo"], into=freq)
    geo_graph = bgn_mod.normalize_geometric(freq)
    bgn_mod.save_geometric_graph(args.out, freq, geo_graph)
    print(args.out)
    return 0


_TRAIN_DEFAULTS = {f.name: getattr(h.TrainConfig(), f.name)
                   for f in dataclasses.fields(h.TrainConfig)}


def _train_config(resolved: dict) -> h.TrainConfig:
    kwargs = dict(resolved)
    for key in ("ign_branches", "lr_milestones"):
        kwargs[key] = tuple(kwargs[key])
    return h.TrainConfig(**kwargs)


def median_base_box(contexts) -> float:
    widths = np.concatenate([c.gt_boxes[:, 2] for c in contexts if len(c.gt_boxes)])
    return 2.0 * float(np.median(widths))


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr}
    resolved = _resolve_config(_TRAIN_DEFAULTS, args.config, overrides)
    cfg = _train_config(resolved)
    geo_graph = None
    if args.mode in ("bgn_only", "full_agn"):
        if not args.geograph:
            raise CliError(f"mode {args.mode} requires --geograph "
                           "(run build-geograph on the training split first)")
        _, geo_graph = bgn_mod.load_geometric_graph(args.geograph)
    cases = _load_split(args.manifest, "train")
    if not cases:
        raise CliError("training split is empty")
    contexts = [h.prepare_case(c, cfg) for c in cases]
    if resolved.get("base_box_side") == _TRAIN_DEFAULTS["base_box_side"]:
        cfg = dataclasses.replace(cfg, base_box_side=median_base_box(contexts))
    model = h.train(contexts, args.mode, cfg, geo_graph, log_every=args.log_every)
    out = Path(args.out)
    model.save(out)
    meta = {"mode": args.mode, "config": dataclasses.asdict(cfg),
            "geograph": str(args.geograph) if args.geograph else None}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=1))
    print(out)
    return 0


def _model_from_checkpoint(ckpt_path) -> tuple[h.MultiViewModel, h.TrainConfig]:
    meta = json.loads(Path(str(ckpt_path) + ".meta.json").read_text())
    cfgd = meta["config"]
    cfg = _train_config(cfgd)
    geo_graph = None
    if meta["geograph"]:
        _, geo_graph = bgn_mod.load_geometric_graph(meta["geograph"])
    model = h.MultiViewModel(meta["mode"], cfg, geo_graph)
    model.load(ckpt_path)
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    if args.mode and args.mode != model.mode:
        raise CliError(f"checkpoint was trained in mode {model.mode!r}, not {args.mode!r}")
    cases = _load_split(args.manifest, args.split)
    if not cases:
        raise CliError(f"{args.split} split is empty")
    contexts = [h.prepare_case(c, cfg) for c in cases]
    curve = h.evaluate(model, contexts)
    h.write_froc_csv(args.out, curve)
    summary = Path(str(args.out) + ".summary.txt")
    h.write_summary(summary, model.mode, cfg.seed, curve)
    for f, r in curve.points:
        print(f"R@{f} {r:.4f}")
    return 0


def cmd_visualize(args) -> int:
    model, cfg = _model_from_checkpoint(args.checkpoint)
    case = ph.load_case(args.case)
    ctx = h.prepare_case(case, cfg)
    y, cache = model.enhance(ctx)
    fh, fw = ctx.grid
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_exam = ctx.n_examined
    if not (0 <= args.node < n_exam):
        raise CliError(f"--node must be in [0, {n_exam})")
    if model.use_bgn:
        hb = cache["hb"]
    else:
        total = ctx.n_cc + ctx.n_mlo
        hb = bgn_mod.BipartiteAdjacency(np.zeros((total, total)), ctx.n_cc, ctx.n_mlo)
    if ctx.examined_is_cc:
        query = args.node
        target_sel = np.arange(ctx.n_cc, ctx.n_cc + ctx.n_mlo)
    else:
        query = ctx.n_cc + args.node
        target_sel = np.arange(ctx.n_cc)
    rm_aux = nm.ReverseMap(ctx.fm_a_bgn.assignment)
    corr = fusion_mod.visualize_correspondence(hb, rm_aux, query, target_sel)

    fhat = cache["fhat"] if cache["fhat"] is not None else np.full((fh * fw, 1), 0.5)
    att = fusion_mod.minmax_to_u8(fhat.reshape(fh, fw))
    resp_fe = fusion_mod.response_map(cache["fe"], fh, fw)
    resp_y = fusion_mod.response_map(y, fh, fw)

    files = {
        "correspondence.pgm": corr,
        "attention.pgm": att,
        "response_examined.pgm": resp_fe,
        "response_enhanced.pgm": resp_y,
    }
    for name, img in files.items():
        geo.write_pgm(out_dir / name, fusion_mod.upscale_nearest(img, cfg.stride))
    if args.overlay:
        up = fusion_mod.upscale_nearest(att, cfg.stride)
        geo.write_ppm(out_dir / "attention_overlay.ppm",
                      fusion_mod.overlay_attention(ctx.images[0], up))
    print(out_dir)
    return 0


# ---------------------------------------------------------------------------
# verification suites

VERIFY_SUITES = ("grad", "maps", "graphs", "preproc", "all")


def _verify_grad() -> list[tuple[str, bool, str]]:
    results = []
    rng = np.random.default_rng(123)
    cfg = h.TrainConfig(channels=16, bgn_k=2, ign_branches=(1, 2),
                        base_box_side=8.0, seed=5)
    imgs = [rng.integers(0, 255, (16, 16), dtype=np.uint8) for _ in range(3)]
    from .landmarks import LandmarkSet
    lm_e = LandmarkSet("cc", rng.uniform(1, 15, (4, 2)))
    lm_a = LandmarkSet("mlo", rng.uniform(1, 15, (5, 2)))
    lm_c = LandmarkSet("cc", lm_e.points + rng.normal(0, 0.8, (4, 2)))
    ctx = h.build_context("verify", imgs, ("cc", "mlo", "cc"),
                          (lm_e, lm_a, lm_c), np.array([[4.0, 5.0, 7.0, 7.0]]), cfg)
    geo_graph = bgn_mod.GeometricGraph(np.random.default_rng(6).random((4, 5)))
    for mode in h.MODES:
        g = geo_graph if mode in ("bgn_only", "full_agn") else None
        model = h.MultiViewModel(mode, cfg, g)
        for p in model.params:
            p.zero_grad()
        model.case_loss(ctx)
        reports = grad_check(lambda: model.case_loss(ctx, backward=False),
                             model.params, eps=1e-5,
                             max_entries_per_param=25, rng=np.random.default_rng(7))
        worst = max(reports, key=lambda r: r.max_rel_error)
        results.append((f"grad/{mode}", all(r.passed for r in reports),
                        f"max rel err {worst.max_rel_error:.2e} ({worst.param_name})"))
    return results


def _verify_maps() -> list[tuple[str, bool, str]]:
    from .landmarks import LandmarkSet
    rng = np.random.default_rng(11)
    ok_sums = True
    ok_vor = True
    for _ in range(100):
        hgt = int(rng.integers(4, 12))
        wid = int(rng.integers(4, 12))
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        pts = np.stack([rng.uniform(0, wid, n), rng.uniform(0, hgt, n)], axis=1)
        asn = nm.build_assignment(LandmarkSet("cc", pts), hgt, wid, k)
        try:
            fm = nm.build_forward_map(asn)
        except ValueError:
            continue
        rm = nm.ReverseMap(asn)
        if np.max(np.abs(fm.qf.sum(axis=0) - 1.0)) > 1e-12:
            ok_sums = False
        if np.max(np.abs(rm.qr.sum(axis=1) - 1.0)) > 1e-12:
            ok_sums = False
        if k == 1:
            f = rng.standard_normal((hgt * wid, 3))
            got = nm.forward_map(f, fm)
            acc = np.zeros((n, 3))
            cnt = np.zeros(n)
            for p in range(hgt * wid):
                j = asn.indices[p, 0]
                acc[j] += f[p]
                cnt[j] += 1
            if not np.array_equal(got, acc / cnt[:, None]):
                ok_vor = False
    return [("maps/stochastic-sums", ok_sums, "Q^f cols / Q^r rows sum to 1 @1e-12"),
            ("maps/voronoi-oracle", ok_vor, "k=1 pooling == per-cell mean, exact")]


def _verify_graphs() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(13)
    ok_norm = True
    for _ in range(100):
        r = int(rng.integers(1, 8))
        c = int(rng.integers(1, 8))
        eps = rng.integers(0, 5, size=(r, c)).astype(float)
        if rng.random() < 0.4 and r > 1:
            eps[rng.integers(0, r)] = 0
        if rng.random() < 0.4 and c > 1:
            eps[:, rng.integers(0, c)] = 0
        hg = bgn_mod.normalize_geometric(bgn_mod.FrequencyMatrix(eps)).hg
        for i in range(r):
            for j in range(c):
                d = math.sqrt(eps[i].sum() * eps[:, j].sum())
                want = 0.0 if d == 0 else eps[i, j] / d
                if abs(hg[i, j] - want) > 1e-12:
                    ok_norm = False
    hmat = rng.random((5, 7))
    hb = bgn_mod.augment_bipartite(hmat)
    ok_sym = (np.array_equal(hb.hb, hb.hb.T)
              and not hb.hb[:5, :5].any() and not hb.hb[5:, 5:].any())
    from . import ign as ign_mod
    from .landmarks import LandmarkSet
    pts = rng.uniform(0, 50, (8, 2))
    ok_deg = True
    for s in (1, 3, 5):
        cross = ign_mod.build_cross_adjacency(
            LandmarkSet("cc", pts), LandmarkSet("cc", pts + rng.normal(0, 2, (8, 2))), s)
        jh = ign_mod.augment_inception(cross)
        if not np.array_equal(jh.jhat[:8].sum(axis=1), np.full(8, 1.0 + s)):
            ok_deg = False
    return [("graphs/normalization-oracle", ok_norm, "direct formula @1e-12 incl. zero rows"),
            ("graphs/bipartite-structure", ok_sym, "H^B symmetric, zero diagonal blocks"),
            ("graphs/inception-degrees", ok_deg, "row degrees = 1 + s")]


def _verify_preproc() -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(17)
    hits = 0
    for _ in range(100):
        theta = math.radians(rng.uniform(32, 78))
        rho = rng.uniform(40, 160)
        yy, xx = np.mgrid[0:192, 0:192]
        d = np.abs(xx * math.cos(theta) + yy * math.sin(theta) - rho)
        edges = d <= 0.5
        got = geo.hough_pectoral_line(edges, geo.HoughPrior(math.radians(30), math.radians(80)))
        if abs(got.rho - rho) <= 2.0 and abs(math.degrees(got.theta - theta)) <= 2.0:
            hits += 1
    ok_otsu = True
    for _ in range(100):
        lo, hi = sorted(rng.integers(0, 250, size=2))
        if hi - lo < 10:
            hi = lo + 10
        img = np.where(rng.random((32, 32)) < 0.5, lo, hi).astype(np.int64)
        img = (img + rng.integers(-3, 4, size=img.shape)).clip(0, 255).astype(np.uint8)
        if img.min() == img.max():
            continue
        hist = np.bincount(img.ravel(), minlength=256).astype(float)
        total = hist.sum()
        best_t, best_v = 0, -1.0
        for t in range(256):
            w0 = hist[: t + 1].sum() / total
            w1 = 1.0 - w0
            if w0 == 0 or w1 == 0:
                continue
            mu0 = (hist[: t + 1] * np.arange(t + 1)).sum() / (w0 * total)
            mu1 = (hist[t + 1:] * np.arange(t + 1, 256)).sum() / (w1 * total)
            v = w0 * w1 * (mu0 - mu1) ** 2
            if v > best_v + 1e-12:
                best_v, best_t = v, t
        if geo.otsu_threshold_value(img) != best_t:
            ok_otsu = False
    return [("preproc/hough-round-trip", hits >= 95, f"{hits}/100 within (2 px, 2 deg)"),
            ("preproc/otsu-oracle", ok_otsu, "matches exhaustive 256-threshold scan")]


def cmd_verify(args) -> int:
    suites = {
        "grad": _verify_grad,
        "maps": _verify_maps,
        "graphs": _verify_graphs,
        "preproc": _verify_preproc,
    }
    names = list(suites) if args.suite == "all" else [args.suite]
    failed = 0
    for name in names:
        for label, ok, detail in suites[name]():
            print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
            failed += 0 if ok else 1
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mammograph",
        description="multi-view graph reasoning for mammogram mass detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", default=None, help="JSON file with PhantomConfig keys")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("landmarks", help="embed pseudo landmarks into one view")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--view", choices=("cc", "mlo"), default=None)
    p.set_defaults(func=cmd_landmarks)

    p = sub.add_parser("build-geograph", help="accumulate the geometric prior graph")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_build_geograph)

    p = sub.add_parser("train", help="train a detection model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=h.MODES, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--geograph", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (FROC)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=h.MODES, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="emit correspondence/attention/response maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--suite", choices=VERIFY_SUITES, default="all")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
