"""Command line entry point: gen, train, eval, infer, render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io as cio
from .geom3d import GeometryError, Pose
from .heatmap import SIGMA_SCALE, decode_corners
from .scene import GenConfig, generate_scene, scene_rng
from .train import LAMBDA, AugConfig, TrainConfig, occlude

log = logging.getLogger("cornerpose")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CliError(f"cannot read config {path}: {err}", EXIT_USAGE) from None


# ---- gen ----

def cmd_gen(seed: int, count: int, out_dir, gen_config: GenConfig = GenConfig()) -> list[str]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(count):
            name = f"scene_{i:05d}"
            cio.write_scene(out / name, generate_scene(scene_rng(seed, i), gen_config))
            names.append(name)
        cio.write_manifest(out, {"seed": seed, "count": count, "gen": asdict(gen_config), "scenes": names})
    except OSError as err:
        raise CliError(f"writing dataset failed at {err.filename}: {err.strerror}") from None
    return names


# ---- train ----

LOG_HEADER = "step\tlr\tcoarse\tfine\ttotal\n"


def format_loss_row(r: dict) -> str:
    return f"{r['step']}\t{r['lr']:.9g}\t{r['coarse']:.9g}\t{r['fine']:.9g}\t{r['total']:.9g}\n"


def read_loss_log(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        s, lr, c, f, t = line.split("\t")
        rows.append((int(s), float(lr), float(c), float(f), float(t)))
    return rows


def cmd_train(dataset_dir, out_checkpoint, train_cfg: TrainConfig, model_cfg=None, figures: bool = True) -> Path:
    """Train on a dataset; writes the checkpoint, ``<out>.loss.tsv`` and ``<out>.loss.png``."""
    from .nn import ModelConfig, NumericFailure, build_model
    from .train import train

    model_cfg = model_cfg or ModelConfig()
    info, named = _load_dataset(dataset_dir)
    scenes = [s for _, s in named]
    if train_cfg.steps > 0 and not scenes:
        raise CliError(f"{dataset_dir}: dataset is empty")
    out = Path(out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".loss.tsv")
    model = build_model(model_cfg, seed=train_cfg.seed)
    extra = {"train": train_cfg.to_dict()}
    with open(log_path, "w") as fh:
        fh.write(LOG_HEADER)

        def on_step(rec):
            fh.write(format_loss_row(rec))

        try:
            if train_cfg.steps > 0:
                train(scenes, model, train_cfg, on_step)
        except NumericFailure as err:
            cio.save_model(out, model, extra)  # update was skipped, so these are the last finite weights
            raise CliError(f"{err}; last good checkpoint kept at {out}", EXIT_NUMERIC) from None
    cio.save_model(out, model, extra)
    if figures:
        from .plotting import loss_curve

        loss_curve(read_loss_log(log_path), out.with_name(out.name + ".loss.png"))
    return out


# ---- eval ----

REPORT_COLUMNS = ["scene_id", "add", "adds", "proj2d", "add_0.1d", "adds_0.1d", "add(s)_0.1d", "proj2d_5px", "corner_px"]


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.9g}"


def format_report(rows: list[dict], aggregates: dict) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append("\t".join([
            r["scene_id"], _fmt(r["add"]), _fmt(r["adds"]), _fmt(r["proj2d"]),
            str(int(r["add_0.1d"])), str(int(r["adds_0.1d"])), str(int(r["add(s)_0.1d"])), str(int(r["proj2d_5px"])),
            _fmt(r["corner_px"]),
        ]))
    for k in sorted(aggregates):
        lines.append(f"# {k}\t{_fmt(aggregates[k])}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[list[dict], dict]:
    lines = text.splitlines()
    if not lines or lines[0].split("\t") != REPORT_COLUMNS:
        raise cio.FormatError("report header mismatch")
    rows, agg = [], {}
    for line in lines[1:]:
        if line.startswith("# "):
            k, v = line[2:].split("\t")
            agg[k] = float(v)
            continue
        f = line.split("\t")
        rows.append({
            "scene_id": f[0], "add": float(f[1]), "adds": float(f[2]), "proj2d": float(f[3]),
            "add_0.1d": bool(int(f[4])), "adds_0.1d": bool(int(f[5])), "add(s)_0.1d": bool(int(f[6])),
            "proj2d_5px": bool(int(f[7])), "corner_px": float(f[8]),
        })
    return rows, agg


def report_rows(report) -> list[dict]:
    return [{
        "scene_id": r.scene_id, "add": r.add, "adds": r.adds, "proj2d": r.proj2d,
        "add_0.1d": r.add_ok, "adds_0.1d": r.adds_ok, "add(s)_0.1d": r.add_s_ok, "proj2d_5px": r.proj2d_ok,
        "corner_px": r.corner_err,
    } for r in report.rows]


def cmd_eval(dataset_dir, checkpoint, out_report, n_refs: int = 5, selection: str = "fps",
             bypass: bool = False, min_conf: float = 0.0, sigma_scale: float = SIGMA_SCALE,
             occlusion: float = 0.0, cloud_noise: float = 0.0, seed: int = 0, figures: bool = True):
    """Evaluate every scene and write the report (plus figures next to it)."""
    from .eval import AUC_MAX, MetricReport, evaluate_scene

    if n_refs < 1:
        raise CliError("--n-refs must be at least 1", EXIT_USAGE)
    model = None
    if not bypass:
        if checkpoint is None:
            raise CliError("a checkpoint is required unless --bypass is given", EXIT_USAGE)
        model, _ = cio.load_model(checkpoint)
    _, named = _load_dataset(dataset_dir)
    results = []
    for i, (name, scene) in enumerate(named):
        rng = np.random.default_rng([seed, i])
        if len(scene.references) < n_refs and selection != "all":
            raise CliError(f"{name}: {len(scene.references)} references, {n_refs} requested")
        if occlusion > 0:
            scene = replace(scene, query=occlude(scene.query, rng, occlusion))
        results.append(evaluate_scene(scene, name, model, n_refs, selection, min_conf, sigma_scale, cloud_noise, rng))
    report = MetricReport(results)
    agg = report.aggregates()
    out = Path(out_report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_report(report_rows(report), agg))
    if figures and results:
        from .plotting import accuracy_curves, corner_error_histogram

        stem = out.with_suffix("")
        accuracy_curves({"ADD": [r.add for r in results], "ADD-S": [r.adds for r in results]},
                        AUC_MAX, stem.with_name(stem.name + "_auc.png"))
        corner_error_histogram([r.corner_err for r in results], stem.with_name(stem.name + "_corners.png"))
    return report, agg


# ---- infer / render ----

def _predict_scene(scene, model, n_refs, selection, sigma_scale):
    from .eval import reconstruct_box, select_references
    from .nn import predict
    from .train import view_heatmap

    idx = select_references(scene, n_refs, selection, model)
    box, centroid = reconstruct_box(scene, idx)
    local = scene.with_references(idx)
    local.box = box
    local.references = [replace(v, pose=v.pose.recentered(centroid)) for v in local.references]
    hm = predict(model, [v.image for v in local.references],
                 [view_heatmap(local, v, sigma_scale) for v in local.references], scene.query.image)
    return box, centroid, hm


def cmd_infer(scene_dir, checkpoint, query_image=None, n_refs: int = 5, selection: str = "fps",
              min_conf: float = 0.0, sigma_scale: float = SIGMA_SCALE, out=sys.stdout):
    """Print the 3x4 pose, decoded corners with confidences, and the RMS reprojection error."""
    from .pnp import estimate_pose

    model, _ = cio.load_model(checkpoint)
    scene = cio.read_scene(scene_dir)
    if query_image is not None:
        img = cio.read_tensor(query_image)
        if img.shape != scene.query.image.shape or img.dtype != np.uint8:
            raise CliError(f"{query_image}: expected a uint8 image of shape {scene.query.image.shape}")
        scene = replace(scene, query=replace(scene.query, image=img))
    box, centroid, hm = _predict_scene(scene, model, n_refs, selection, sigma_scale)
    corners, conf = decode_corners(hm)
    local_pose, rms = estimate_pose(corners, conf, box, scene.intrinsics, min_conf)
    pose = Pose(local_pose.rotation, local_pose.translation - local_pose.rotation @ centroid)
    m = np.column_stack([pose.rotation, pose.translation])
    print("pose (camera-from-object, 3x4):", file=out)
    for row in m:
        print("  " + " ".join(f"{v: .9f}" for v in row), file=out)
    print("corners (x, y, confidence):", file=out)
    for i, (p, c) in enumerate(zip(corners.points, conf)):
        print(f"  {i}: {p[0]:9.3f} {p[1]:9.3f}  {c:.4f}", file=out)
    print(f"rms_reproj_px: {rms:.6f}", file=out)
    return pose, corners, conf, rms


def cmd_render(scene_dir, pose: Pose, out_image) -> np.ndarray:
    from .overlay import render_overlay, write_ppm

    scene = cio.read_scene(scene_dir)
    img = render_overlay(scene.query.image, scene.intrinsics, scene.box, scene.query.pose, pose)
    write_ppm(out_image, img)
    return img


# ---- argument handling ----

def _load_dataset(path):
    try:
        return cio.read_dataset(path)
    except OSError as err:
        raise CliError(f"cannot read dataset {path}: {err}") from None


def _configs(args):
    from .nn import ModelConfig

    raw = load_config(args.config)
    try:
        gen = GenConfig.from_dict(raw.get("gen", {}))
        model = ModelConfig.from_dict(raw.get("model", {}))
        tr = raw.get("train", {})
        train = TrainConfig.from_dict(tr)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid config: {err}", EXIT_USAGE) from None
    return gen, model, train


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cornerpose", description="Box-corner heatmap object pose estimation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file with optional 'gen', 'model', 'train' sections")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the corner network")
    common(t)
    t.add_argument("dataset")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--sigma-scale", type=float)
    t.add_argument("--no-aug", action="store_true", help="disable all augmentation")

    e = sub.add_parser("eval", help="evaluate poses on a dataset")
    common(e)
    e.add_argument("dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--out", required=True, help="report path (TSV)")
    e.add_argument("--n-refs", type=int, default=5)
    e.add_argument("--selection", choices=["fps", "neighbors", "all"], default="fps")
    e.add_argument("--bypass", action="store_true", help="feed ground-truth heatmaps instead of the network")
    e.add_argument("--min-conf", type=float, default=0.0)
    e.add_argument("--sigma-scale", type=float, default=SIGMA_SCALE)
    e.add_argument("--occlusion", type=float, default=0.0, help="occluder area as a fraction of the query silhouette")
    e.add_argument("--cloud-noise", type=float, default=0.0, help="std of Gaussian noise on the cloud [m]")
    e.add_argument("--no-figures", action="store_true")

    i = sub.add_parser("infer", help="estimate the pose of one scene's query")
    common(i)
    i.add_argument("scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--query", help="override query image (.btns, uint8 HxWx3)")
    i.add_argument("--n-refs", type=int, default=5)
    i.add_argument("--selection", choices=["fps", "neighbors", "all"], default="fps")
    i.add_argument("--min-conf", type=float, default=0.0)
    i.add_argument("--sigma-scale", type=float, default=SIGMA_SCALE)

    r = sub.add_parser("render", help="draw gt (green) and predicted (blue) boxes as PPM")
    common(r)
    r.add_argument("scene")
    r.add_argument("--pose", type=float, nargs=12, metavar="X", help="predicted pose: R row-major then t")
    r.add_argument("--checkpoint", help="predict the pose with this checkpoint instead of --pose")
    r.add_argument("--n-refs", type=int, default=5)
    r.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    from .nn import ConfigError, NumericFailure
    from .pnp import InsufficientCorrespondencesError, NumericFailureError, PnPError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        gen_cfg, model_cfg, train_cfg = _configs(args)
        if args.command == "gen":
            if args.count < 0:
                raise CliError("--count must be non-negative", EXIT_USAGE)
            cmd_gen(args.seed, args.count, args.out, gen_cfg)
        elif args.command == "train":
            overrides = {k: v for k, v in {
                "steps": args.steps, "lr": args.lr, "batch_size": args.batch_size,
                "lam": args.lam, "sigma_scale": args.sigma_scale,
            }.items() if v is not None}
            train_cfg = replace(train_cfg, seed=args.seed, **overrides)
            if args.no_aug:
                train_cfg = replace(train_cfg, aug=AugConfig.none())
            cmd_train(args.dataset, args.out, train_cfg, model_cfg)
        elif args.command == "eval":
            _, agg = cmd_eval(args.dataset, args.checkpoint, args.out, args.n_refs, args.selection, args.bypass,
                              args.min_conf, args.sigma_scale, args.occlusion, args.cloud_noise, args.seed,
                              not args.no_figures)
            for k in sorted(agg):
                print(f"{k}\t{_fmt(agg[k])}")
        elif args.command == "infer":
            cmd_infer(args.scene, args.checkpoint, args.query, args.n_refs, args.selection,
                      args.min_conf, args.sigma_scale)
        elif args.command == "render":
            if args.checkpoint:
                pose, *_ = cmd_infer(args.scene, args.checkpoint, n_refs=args.n_refs, out=sys.stderr)
            elif args.pose:
                pose = Pose(np.reshape(args.pose[:9], (3, 3)), args.pose[9:])
            else:
                raise CliError("render needs --pose or --checkpoint", EXIT_USAGE)
            cmd_render(args.scene, pose, args.out)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except InsufficientCorrespondencesError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, NumericFailureError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (cio.FormatError, GeometryError, PnPError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
