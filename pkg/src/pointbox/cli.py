"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``report``.

Every command writes ``manifest.json`` into its output directory recording the
command line, configuration hash, seed and the files it produced.  Exit codes
are 0 on success, 2 for usage/configuration/input errors and 3 when training
aborts on a numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import anchors as anc
from . import evalmetrics as em
from . import synthcrowd as sc
from . import tinydet
from . import trainer as tr
from .errors import NumericFailure, PointBoxError

log = logging.getLogger("pointbox")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(PointBoxError):
    pass


def worker_count() -> int:
    """Worker cap from ``POINTBOX_THREADS`` (default: CPU count)."""
    raw = os.environ.get("POINTBOX_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"POINTBOX_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def fan_out(fn, items):
    """Ordered map over ``items`` on up to ``worker_count()`` threads."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def write_manifest(out: Path, argv: list[str], extra: dict) -> None:
    doc = {"command": argv, "version": __version__,
           "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: Path) -> dict:
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc.msg} at line {exc.lineno} column {exc.colno}") from exc


def parse_r(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"r must be a positive number or 'inf', got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"r must be positive, got {text!r}")
    return value


def parse_scales(text: str) -> tuple[float, ...]:
    try:
        scales = tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"scales must be comma separated numbers, got {text!r}")
    if not scales or any(s <= 0 for s in scales):
        raise argparse.ArgumentTypeError("scales must be positive")
    return scales


def fmt_r(r: float) -> str:
    return "inf" if math.isinf(r) else f"{r:g}"


# -- gen --------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    data = read_json(Path(args.spec)) if args.spec else {}
    if not isinstance(data, dict):
        raise UsageError(f"{args.spec}: scene spec must be a JSON object")
    if args.seed is not None:
        data["seed"] = args.seed
    spec = sc.SceneSpec.from_dict(data)
    spec.validate()
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make(i):
        scene = sc.generate_one(spec, i)
        sc.save_scene(scene, out)
        return scene.id

    ids = fan_out(make, range(args.count))
    write_manifest(out, argv, {"kind": "dataset", "spec": sc.spec_to_dict(spec), "seed": spec.seed,
                               "count": args.count, "scenes": ids})
    log.info("wrote %d scenes to %s", len(ids), out)
    return EXIT_OK


# -- train ------------------------------------------------------------------

def load_config(args) -> tr.TrainConfig:
    """Desk preset, then the config file's keys, then command-line overrides."""
    data = tr.desk_config().to_dict()
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        data.update(_config_keys(text, path))
    for key in ("variant", "epochs", "seed"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    return tr.TrainConfig.from_dict(data)


def _config_keys(text: str, path: Path) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: {exc.msg} at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def load_train_scenes(data_dir: Path) -> list[sc.TrainScene]:
    ids = sc.list_scene_ids(data_dir)
    if not ids:
        raise UsageError(f"no scenes found in {data_dir}")
    return fan_out(lambda i: sc.load_train_scene(data_dir, i), ids)


def checkpoint_meta(result_state, cfg: tr.TrainConfig, epoch: int, train_ids, val_ids) -> dict:
    return {"variant": cfg.variant, "config_hash": cfg.digest(), "config": cfg.to_dict(),
            "epoch": epoch, "specs": [[s.scale, s.aspect] for s in result_state.specs],
            "train_ids": list(train_ids), "val_ids": list(val_ids)}


def cmd_train(args, argv) -> int:
    cfg = load_config(args)
    data_dir = Path(args.data)
    scenes = load_train_scenes(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = tr.split_train_val(scenes)
    log.info("training %s on %d scenes, validating on %d", cfg.variant, len(train), len(val))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    hist_path = out / "history.csv"
    with open(hist_path, "w", newline="") as fh:
        csv.writer(fh).writerow(tr.EpochStats.HEADER)

    def on_epoch(row):
        with open(hist_path, "a", newline="") as fh:
            csv.writer(fh).writerow(row.row())

    files = ["config.json", "history.csv"]
    try:
        result = tr.run(cfg, scenes, on_epoch)
    except NumericFailure as exc:
        (out / "abort.json").write_text(json.dumps({"error": str(exc)}, indent=2) + "\n")
        write_manifest(out, argv, {"kind": "train", "status": "aborted", "config_hash": cfg.digest(),
                                   "seed": cfg.seed, "data": str(data_dir),
                                   "data_resolved": str(data_dir.resolve()),
                                   "artifacts": files + ["abort.json"]})
        raise

    state = result.state
    train_ids = [s.id for s in train]
    val_ids = [s.id for s in val]
    tinydet.save_checkpoint(out / "best.ckpt", result.best_params,
                            checkpoint_meta(state, cfg, result.best_epoch, train_ids, val_ids))
    tinydet.save_checkpoint(out / "final.ckpt", result.final_params,
                            checkpoint_meta(state, cfg, cfg.epochs - 1, train_ids, val_ids))
    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "image_id", "lxy", "lw", "lh", "cls"))
        w.writerows(state.loss_log)
    pseudo = {sid: [[list(h) for h in g.history] for g in gl] for sid, gl in sorted(state.pseudo.items())}
    (out / "pseudo_history.json").write_text(json.dumps(pseudo) + "\n")
    folds = {sid: {"fold": state.folds[sid],
                   "tl": state.scores[sid].tl if sid in state.scores else None}
             for sid in sorted(state.folds)}
    (out / "folds.json").write_text(json.dumps(folds, indent=1, sort_keys=True) + "\n")
    (out / "anchors.json").write_text(json.dumps(
        [{"scale": s.scale, "aspect": s.aspect} for s in state.specs], indent=1) + "\n")
    files += ["best.ckpt", "final.ckpt", "train_log.csv", "pseudo_history.json", "folds.json",
              "anchors.json"]
    write_manifest(out, argv, {"kind": "train", "status": "ok", "variant": cfg.variant,
                               "config_hash": cfg.digest(), "seed": cfg.seed,
                               "best_epoch": result.best_epoch,
                               "parameters": tinydet.param_count(result.best_params),
                               "data": str(data_dir), "data_resolved": str(data_dir.resolve()),
                               "artifacts": files})
    log.info("best epoch %d, outputs in %s", result.best_epoch, out)
    return EXIT_OK


# -- eval -------------------------------------------------------------------

def cmd_eval(args, argv) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    params, meta = tinydet.load_checkpoint(ckpt_path, tinydet.init_params(0))
    if "specs" not in meta:
        raise UsageError(f"{ckpt_path}: checkpoint carries no anchor specs")
    specs = [anc.AnchorSpec(float(s), float(a)) for s, a in meta["specs"]]
    data_dir = Path(args.data)
    ids = sc.list_scene_ids(data_dir)
    if args.split == "val":
        ids = [i for i in ids if tr.is_val_id(i)]
    elif args.split == "train":
        ids = [i for i in ids if not tr.is_val_id(i)]
    leaked = sorted(set(ids) & set(meta.get("train_ids", [])))
    if leaked:
        log.warning("leakage: %d of %d evaluated scenes were used to train this checkpoint",
                    len(leaked), len(ids))
    if not ids:
        raise UsageError(f"no scenes in split {args.split!r} of {data_dir}")
    scales = args.scales or tuple(meta.get("config", {}).get("test_scales", (0.5, 1.0, 1.5, 2.0)))
    base = em.EvalProtocol(c=args.c, r=args.r, confidence=args.confidence)
    scenes = fan_out(lambda i: sc.load_train_scene(data_dir, i), ids)

    def detect(s):
        return tr.predict(params, s.image, specs, base, scales, score_floor=args.ap_floor)

    dets = fan_out(detect, scenes)
    points = [s.points for s in scenes]
    protocols = [base] if math.isinf(args.r) else [base, em.EvalProtocol(c=args.c, r=math.inf)]
    curves = [(p, em.average_precision(dets, points, p)) for p in protocols]
    confident = [(b[s >= args.confidence], s[s >= args.confidence]) for b, s in dets]
    est = [len(s) for _, s in confident]
    gt = [len(p) for p in points]
    mae, mse = em.mae_mse(est, gt)
    centers = [b[:, :2] for b, _ in confident]
    dims = [(s.image.shape[1], s.image.shape[0]) for s in scenes]
    good = [em.match_image(b, s, p, base) for (b, s), p in zip(confident, points)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p, curve in curves:
        rows.append((f"c={p.c:g};r={fmt_r(p.r)}", "AP", curve.ap))
    count_key = f"confidence={args.confidence:g}"
    rows += [(count_key, "MAE", mae), (count_key, "MSE", mse)]
    rows += [(count_key, f"GAME{L}", em.game(centers, points, dims, L)) for L in range(4)]
    rows.append((f"c={args.c:g};r={fmt_r(args.r)};{count_key}", "good_conjunctive",
                 int(sum((m.matched_gt >= 0).sum() for m in good))))
    rows.append((f"c={args.c:g};r={fmt_r(args.r)};{count_key}", "good_disjunctive",
                 int(sum(m.n_good_disjunctive for m in good))))
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("protocol", "metric", "value"))
        w.writerows(rows)
    pr = {"curves": [{"label": f"c={p.c:g}, r={fmt_r(p.r)}", "ap": c.ap,
                      "precision": c.precision.tolist(), "recall": c.recall.tolist()}
                     for p, c in curves]}
    (out / "pr.json").write_text(json.dumps(pr) + "\n")
    with open(out / "counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("image_id", "estimated", "annotated"))
        w.writerows(zip(ids, est, gt))
    write_manifest(out, argv, {"kind": "eval", "checkpoint": str(ckpt_path),
                               "config_hash": meta.get("config_hash"), "seed": meta.get("config", {}).get("seed"),
                               "data": str(data_dir), "split": args.split, "scales": list(scales),
                               "leaked_scenes": len(leaked),
                               "artifacts": ["results.csv", "pr.json", "counts.csv"]})
    for key, metric, value in rows:
        print(f"{key:28s} {metric:18s} {value:.4f}" if isinstance(value, float)
              else f"{key:28s} {metric:18s} {value}")
    return EXIT_OK


# -- report -----------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_plot(series, title: str, xlabel: str, ylabel: str, width=480, height=320) -> str:
    """Line chart as an SVG string; ``series`` is ``[(label, xs, ys), ...]``."""
    ml, mr, mt, mb = 56, 120, 28, 40
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys) if np.isfinite(x) and np.isfinite(y)]
    if pts:
        xs_all, ys_all = zip(*pts)
        x0, x1 = min(xs_all), max(xs_all)
        y0, y1 = min(min(ys_all), 0.0), max(ys_all)
    else:
        x0 = y0 = 0.0
        x1 = y1 = 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>',
             f'<text x="{ml + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
             f'<text x="14" y="{mt + ph / 2:.0f}" text-anchor="middle" '
             f'transform="rotate(-90 14 {mt + ph / 2:.0f})">{ylabel}</text>']
    for v, anchor in ((x0, "start"), (x1, "end")):
        parts.append(f'<text x="{sx(v):.1f}" y="{mt + ph + 14}" text-anchor="{anchor}">{v:.3g}</text>')
    for v in (y0, y1):
        parts.append(f'<text x="{ml - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys)
                          if np.isfinite(x) and np.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                     f'<title>{label}</title></polyline>')
        ly = mt + 12 + 16 * k
        parts.append(f'<line x1="{ml + pw + 8}" y1="{ly}" x2="{ml + pw + 24}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 28}" y="{ly + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def read_history(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k in ("variant", "active_folds") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def pseudo_size_errors(pseudo: dict, data_dir: Path) -> dict[str, list[float]]:
    """Median relative size error per epoch, overall and for heads in the lower half."""
    per_epoch: dict[int, list] = {}
    bottom: dict[int, list] = {}
    for sid, heads in pseudo.items():
        scene = sc.load_scene(data_dir, sid)
        lower = scene.points[:, 1] >= scene.image.shape[0] / 2
        for gi, hist in enumerate(heads):
            for epoch, w, h in hist:
                err = float(em.relative_size_error([[w, h]], scene.true_boxes[gi:gi + 1])[0])
                per_epoch.setdefault(int(epoch), []).append(err)
                if lower[gi]:
                    bottom.setdefault(int(epoch), []).append(err)
    epochs = sorted(per_epoch)
    return {"epoch": epochs,
            "all": [float(np.median(per_epoch[e])) for e in epochs],
            "bottom": [float(np.median(bottom[e])) if bottom.get(e) else float("nan") for e in epochs]}


def find_runs(root: Path) -> list[Path]:
    if (root / "history.csv").exists():
        return [root]
    if not root.is_dir():
        raise UsageError(f"run directory not found: {root}")
    runs = sorted(p.parent for p in root.glob("*/history.csv"))
    if not runs:
        raise UsageError(f"no history.csv under {root}")
    return runs


def read_results(path: Path) -> dict[str, float]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = row["metric"] if row["metric"] != "AP" else ("AP_inf" if "r=inf" in row["protocol"] else "AP")
            out[key] = float(row["value"])
    return out


TABLE_COLUMNS = ("variant", "run", "epochs", "best_epoch", "best_val_mae", "pseudo_err_all",
                 "pseudo_err_bottom", "AP", "AP_inf", "MAE", "MSE", "GAME0", "GAME1", "GAME2", "GAME3")


def cmd_report(args, argv) -> int:
    runs = find_runs(Path(args.run))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    written = []
    for run in runs:
        hist = read_history(run / "history.csv")
        if not hist:
            raise UsageError(f"{run / 'history.csv'} has no epochs")
        name = run.name
        variant = hist[0]["variant"]
        epochs = [h["epoch"] for h in hist]
        svg = svg_plot([("cls", epochs, [h["cls"] for h in hist]),
                        ("reg", epochs, [h["reg"] for h in hist]),
                        ("lxy", epochs, [h["lxy"] for h in hist]),
                        ("lw+lh", epochs, [h["lw"] + h["lh"] for h in hist])],
                       f"{name} ({variant}) training loss", "epoch", "loss")
        (out / f"{name}_loss.svg").write_text(svg)
        written.append(f"{name}_loss.svg")
        row = {"variant": variant, "run": name, "epochs": len(hist)}
        maes = [h["val_mae"] for h in hist]
        if any(np.isfinite(maes)):
            best = int(np.nanargmin(maes))
            row.update(best_epoch=best, best_val_mae=maes[best])
        manifest = read_json(run / "manifest.json") if (run / "manifest.json").exists() else {}
        data_dir = Path(manifest.get("data_resolved", manifest.get("data", "")))
        if (run / "pseudo_history.json").exists() and manifest and data_dir.is_dir():
            errs = pseudo_size_errors(read_json(run / "pseudo_history.json"), data_dir)
            (out / f"{name}_pseudo_error.svg").write_text(svg_plot(
                [("all heads", errs["epoch"], errs["all"]),
                 ("lower half", errs["epoch"], errs["bottom"])],
                f"{name} ({variant}) pseudo box size error", "epoch", "median relative error"))
            (out / f"{name}_pseudo_error.json").write_text(json.dumps(errs) + "\n")
            written += [f"{name}_pseudo_error.svg", f"{name}_pseudo_error.json"]
            row.update(pseudo_err_all=errs["all"][-1], pseudo_err_bottom=errs["bottom"][-1])
        else:
            log.warning("%s: no pseudo history or dataset; skipping size error", name)
        if (run / "eval" / "pr.json").exists():
            pr = read_json(run / "eval" / "pr.json")
            (out / f"{name}_pr.svg").write_text(svg_plot(
                [(f"{c['label']} AP={c['ap']:.3f}", c["recall"], c["precision"]) for c in pr["curves"]],
                f"{name} ({variant}) precision-recall", "recall", "precision"))
            written.append(f"{name}_pr.svg")
        if (run / "eval" / "results.csv").exists():
            row.update(read_results(run / "eval" / "results.csv"))
        table.append(row)

    table.sort(key=lambda r: (r["variant"], r["run"]))
    with open(out / "variants.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, TABLE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(table)

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(TABLE_COLUMNS) + " |", "|" + "---|" * len(TABLE_COLUMNS)]
    lines += ["| " + " | ".join(cell(r.get(c)) for c in TABLE_COLUMNS) + " |" for r in table]
    (out / "variants.md").write_text("\n".join(lines) + "\n")
    written += ["variants.csv", "variants.md"]
    write_manifest(out, argv, {"kind": "report", "runs": [str(r) for r in runs], "artifacts": written})
    print("\n".join(lines))
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointbox", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic crowd dataset")
    g.add_argument("--spec", help="scene spec JSON (default: built-in desk spec)")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--count", type=int, default=120)
    g.add_argument("--seed", type=int, help="overrides the spec's seed")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="TrainConfig JSON (default: desk preset)")
    t.add_argument("--variant", choices=tr.VARIANTS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--c", type=float, default=20.0, help="center distance threshold in pixels")
    e.add_argument("--r", type=parse_r, default=1.0, help="size ratio, or 'inf'")
    e.add_argument("--confidence", type=float, default=0.8, help="score cut for counting")
    e.add_argument("--ap-floor", type=float, default=0.05, help="lowest score kept for PR curves")
    e.add_argument("--scales", type=parse_scales, help="test scales, e.g. 0.5,1,1.5,2")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="plots and variant table from run directories")
    r.add_argument("--run", required=True, help="a run directory or a parent of several")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args, ["pointbox"] + argv)
    except NumericFailure as exc:
        print(f"pointbox: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PointBoxError, ValueError, OSError) as exc:
        print(f"pointbox: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
