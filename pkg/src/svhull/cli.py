"""Command line front end: ``svhull <command> [options]``.

Every option can also come from a JSON file passed with ``--config``; flags
override file values, which override the built-in defaults. Exit codes: 0 ok,
2 usage or configuration error, 3 I/O error, 4 numerical tolerance exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline
from .datagen import DEFAULT_INTRINSICS, NoiseSpec, load_dataset, make_dataset, perturb_pose
from .geometry import CameraIntrinsics, Pose
from .nn import load_params, save_params
from .psvh import GradcheckCase, gradcheck, psvh_forward
from .refine import LOG_COLUMNS, RefinerConfig, carve_refine, pose_fit, rnet_forward, rnet_train
from .silhouette import PGMFormatError, degrade_silhouette, is_binary, load_pgm, render_silhouette, save_pgm
from .voxelgrid import DEFAULT_DIM, GridFormatError, iou, load_grid, save_grid

log = logging.getLogger("svhull")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TOLERANCE = 0, 2, 3, 4

REFINE_COLUMNS = ("sample_id", "iou_coarse", "iou_refined", "iou_gain")


class ConfigError(Exception):
    pass


class ToleranceError(Exception):
    pass


# defaults per command; keys double as JSON config keys and flag destinations
GLOBAL_DEFAULTS = {"config": None, "seed": 0, "threads": None, "out": None, "verbose": False}
COMMAND_DEFAULTS = {
    "gen": {"shapes": 20, "views": 24, "dim": DEFAULT_DIM, "image_size": 128, "intrinsics": None, "noise": {}},
    "hull": {"sil": None, "pose": None, "intrinsics": None, "dim": DEFAULT_DIM, "vgt": None,
             "rot_perturb": 0.0},
    "refine": {"coarse": None, "hull": None, "params": None, "baseline": None, "gt": None, "csv": None,
               "sample_id": ""},
    "train": {"data": None, "phase": "gt", "epochs": 10, "lr": RefinerConfig.lr, "crop": 16,
              "crops_per_sample": 4, "batch": 4, "channels": list(RefinerConfig.channels), "log": None,
              "adapt_epochs": None, "init": None},
    "eval": {"data": None, "params": None, "split": "test", "buckets": list(pipeline.ROTATION_BUCKETS),
             "baseline": None},
    "gradcheck": {"path": "pose", "binary": False, "dim": 8, "tolerance": None},
    "posefit": {"data": None, "sample_id": None, "sil": None, "blur": 2, "rot_perturb": 5.0, "steps": 150, "lr": 0.01,
                "lam": 0.1, "max_rot_error": None},
    "render": {"grid": None, "pose": None, "intrinsics": None, "image_size": 128},
}
PATH_KEYS = {"config", "out", "intrinsics", "sil", "pose", "vgt", "coarse", "hull", "params", "gt", "csv", "data",
             "log", "init", "grid"}


@dataclass
class RunConfig:
    """Resolved options of one invocation."""

    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def build(cls, command, flags: dict, file_values: dict | None = None) -> "RunConfig":
        allowed = {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[command]}
        merged = dict(allowed)
        file_values = dict(file_values or {})
        unknown = set(file_values) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(sorted(unknown))}")
        merged.update(file_values)
        merged.update({k: v for k, v in flags.items() if v is not None and k in allowed})
        for key in PATH_KEYS & set(merged):
            if merged[key] is not None:
                merged[key] = Path(merged[key]).expanduser().resolve()
        return cls(command, merged)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _require(cfg: RunConfig, *keys):
    missing = [k for k in keys if cfg.values.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _intrinsics(path):
    if path is None:
        return DEFAULT_INTRINSICS
    data = json.loads(Path(path).read_text())
    if "intrinsics" in data:
        data = data["intrinsics"]
    return CameraIntrinsics.from_dict(data)


def _pose(path):
    return Pose.from_dict(json.loads(Path(path).read_text()))


def _write_csv(path, columns, rows, append=False):
    path = Path(path)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})


def _with_suffix(path: Path, tag):
    return path.with_name(f"{path.stem}_{tag}{path.suffix or '.csv'}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig):
    _require(cfg, "out")
    try:
        noise = NoiseSpec.from_dict(cfg.noise)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad noise spec: {exc}") from None
    size = (int(cfg.image_size), int(cfg.image_size))
    K = _intrinsics(cfg.intrinsics) if cfg.intrinsics else CameraIntrinsics(
        DEFAULT_INTRINSICS.f * size[1] / 128.0, size[1] / 2.0, size[0] / 2.0)
    samples, _ = make_dataset(int(cfg.shapes), int(cfg.views), K, int(cfg.seed), noise, cfg.out,
                              int(cfg.dim), size)
    print(cfg.out / "manifest.json")
    log.info("%d samples", len(samples))
    return EXIT_OK


def cmd_hull(cfg: RunConfig):
    _require(cfg, "sil", "pose", "out")
    S = load_pgm(cfg.sil)
    pose = _pose(cfg.pose)
    K = _intrinsics(cfg.intrinsics)
    if cfg.rot_perturb:
        pose = perturb_pose(pose, int(cfg.seed), float(cfg.rot_perturb), 0.0, K)
    H, stats = psvh_forward(S, pose, K, int(cfg.dim), return_stats=True)
    save_grid(cfg.out, H)
    print(f"off_image_fraction {stats['off_image_fraction']:.6f}")
    if not np.any(H > 0):
        print("warning: hull is empty (silhouette is blank or the cube projects outside the image)",
              file=sys.stderr)
    if cfg.vgt is not None:
        print(f"containment {pipeline.containment(H, load_grid(cfg.vgt)):.6f}")
    return EXIT_OK


def cmd_refine(cfg: RunConfig):
    _require(cfg, "coarse", "hull", "out")
    V = load_grid(cfg.coarse)
    H = load_grid(cfg.hull)
    if cfg.baseline is not None:
        if cfg.baseline != "carve":
            raise ConfigError(f"unknown baseline {cfg.baseline!r}; only 'carve' is available")
        out = carve_refine(V, H)
    else:
        if cfg.params is None:
            raise FileNotFoundError("no model given: pass --params or --baseline carve")
        out = rnet_forward(load_params(cfg.params), V, H)
    save_grid(cfg.out, out)
    if cfg.gt is not None:
        G = load_grid(cfg.gt)
        row = {"sample_id": cfg.sample_id or Path(cfg.coarse).parent.name, "iou_coarse": iou(V, G),
               "iou_refined": iou(out, G)}
        row["iou_gain"] = row["iou_refined"] - row["iou_coarse"]
        print(f"iou_coarse {row['iou_coarse']:.6f} iou_refined {row['iou_refined']:.6f}")
        if cfg.csv is not None:
            _write_csv(cfg.csv, REFINE_COLUMNS, [row], append=True)
    return EXIT_OK


def _refiner_config(cfg: RunConfig, epochs=None):
    try:
        return RefinerConfig(channels=tuple(cfg.channels), lr=float(cfg.lr),
                             epochs=int(cfg.epochs if epochs is None else epochs), seed=int(cfg.seed),
                             crop=None if cfg.crop in (None, 0) else int(cfg.crop),
                             crops_per_sample=int(cfg.crops_per_sample), batch=int(cfg.batch))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: RunConfig):
    _require(cfg, "data", "out")
    if cfg.phase not in ("gt", "noisy", "const", "both"):
        raise ConfigError("--phase must be gt, noisy, const or both")
    samples, manifest = load_dataset(cfg.data)
    K = CameraIntrinsics.from_dict(manifest["intrinsics"])
    train, test = pipeline.split_samples(samples)
    if not train:
        raise ConfigError("dataset has no training samples")
    init = load_params(cfg.init) if cfg.init is not None else None
    first = "gt" if cfg.phase == "both" else cfg.phase
    result = rnet_train(pipeline.make_triples(train, first, K), _refiner_config(cfg),
                        holdout=pipeline.make_triples(test, first, K), init=init)
    logs = [dict(r, phase=first) for r in result.log]
    params = result.params
    if cfg.phase == "both":
        # adaptation to hulls built from estimated poses and silhouettes
        epochs = cfg.adapt_epochs if cfg.adapt_epochs is not None else max(1, int(cfg.epochs) // 2)
        adapt = rnet_train(pipeline.make_triples(train, "noisy", K), _refiner_config(cfg, epochs),
                           holdout=pipeline.make_triples(test, "noisy", K), init=params)
        n = len(logs)
        logs += [dict(r, phase="noisy", epoch=r["epoch"] + n) for r in adapt.log]
        params = adapt.params
    save_params(cfg.out, params)
    log_path = cfg.log or cfg.out.with_name(cfg.out.name + ".log.csv")
    _write_csv(log_path, ("phase",) + LOG_COLUMNS, logs)
    print(cfg.out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig):
    _require(cfg, "data", "out")
    samples, manifest = load_dataset(cfg.data)
    K = CameraIntrinsics.from_dict(manifest["intrinsics"])
    if cfg.split not in ("train", "test", "all"):
        raise ConfigError("--split must be train, test or all")
    chosen = [s for s in samples if cfg.split == "all" or s.split == cfg.split]
    if cfg.params is None and cfg.baseline != "carve":
        raise FileNotFoundError("no model given: pass --params or --baseline carve")
    params = load_params(cfg.params) if cfg.params is not None else None
    rows = pipeline.evaluate_samples(chosen, params, K, [float(b) for b in cfg.buckets], int(cfg.seed))
    _write_csv(cfg.out, pipeline.EVAL_COLUMNS, rows)
    agg = pipeline.aggregate_rows(rows)
    _write_csv(_with_suffix(cfg.out, "aggregate"), pipeline.AGGREGATE_COLUMNS, agg)
    for r in agg:
        print(f"{r['noise_bucket']:>6} n={r['n']:4d} iou {r['iou_coarse']:.4f} -> {r['iou_refined']:.4f} "
              f"gain {r['iou_gain']:+.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig):
    if cfg.path not in ("pose", "silhouette"):
        raise ConfigError("--path must be pose or silhouette")
    case = GradcheckCase(path=cfg.path, D=int(cfg.dim), binary=bool(cfg.binary))
    if cfg.tolerance is not None:
        key = "pose_tol" if cfg.path == "pose" else "silhouette_tol"
        case = GradcheckCase(**{**case.__dict__, key: float(cfg.tolerance)})
    report = gradcheck(case, int(cfg.seed))
    if not report.eligible:
        print(f"ineligible: {report.reason}", file=sys.stderr)
        return EXIT_USAGE
    text = report.to_csv()
    if cfg.out is not None:
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    worst = max(report.max_rel_error.values())
    print(f"max_rel_error {worst:.3e} tolerance {report.tolerance:.1e}", file=sys.stderr)
    if not report.passed:
        raise ToleranceError(f"gradient check failed: {worst:.3e} > {report.tolerance:.1e}")
    return EXIT_OK


def cmd_posefit(cfg: RunConfig):
    _require(cfg, "data", "sample_id")
    root = Path(cfg.data)
    manifest = json.loads((root / "manifest.json").read_text())
    entry = next((e for e in manifest["samples"] if e["id"] == cfg.sample_id), None)
    if entry is None:
        raise ConfigError(f"sample {cfg.sample_id!r} not in {root}")
    K = CameraIntrinsics.from_dict(manifest["intrinsics"])
    V = load_grid(root / entry["vgt"])
    S = load_pgm(cfg.sil if cfg.sil is not None else root / entry["sil"])
    if cfg.blur:
        S = degrade_silhouette(S, blur_radius=int(cfg.blur))
    if is_binary(S) and S.min() < S.max():
        raise ConfigError("pose fitting needs a smoothed silhouette: pass --blur 1 or more "
                          "(a binary mask has zero image gradient almost everywhere)")
    p_gt = _pose(root / entry["pose"])
    p0 = perturb_pose(p_gt, int(cfg.seed), float(cfg.rot_perturb), 0.0, K)
    p, trace = pose_fit(V, S, K, p0, steps=int(cfg.steps), lr=float(cfg.lr), lam=float(cfg.lam))
    e0 = pipeline.rotation_error_deg(p0, p_gt)
    e1 = pipeline.rotation_error_deg(p, p_gt)
    print(f"rotation_error initial {e0:.4f} final {e1:.4f} loss {trace[0]:.3f} -> {min(trace):.3f}")
    if cfg.out is not None:
        Path(cfg.out).write_text(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    if cfg.max_rot_error is not None and e1 > float(cfg.max_rot_error):
        raise ToleranceError(f"final rotation error {e1:.3f} deg exceeds {cfg.max_rot_error}")
    return EXIT_OK


def cmd_render(cfg: RunConfig):
    _require(cfg, "grid", "pose", "out")
    size = (int(cfg.image_size), int(cfg.image_size))
    S = render_silhouette(load_grid(cfg.grid), _pose(cfg.pose), _intrinsics(cfg.intrinsics), size)
    save_pgm(cfg.out, S)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "hull": cmd_hull, "refine": cmd_refine, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "posefit": cmd_posefit, "render": cmd_render}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=None)
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="svhull", description="Single-view visual hull toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--shapes", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--intrinsics", help="JSON with f, u0, v0")

    p = sub.add_parser("hull", parents=[common], help="build a hull grid from a silhouette and a pose")
    p.add_argument("--sil")
    p.add_argument("--pose")
    p.add_argument("--intrinsics", help="JSON with f, u0, v0 (a dataset manifest also works)")
    p.add_argument("--dim", type=int)
    p.add_argument("--vgt", help="ground-truth grid; prints the containment fraction")
    p.add_argument("--rot-perturb", type=float, help="rotation noise in degrees applied to the pose")

    p = sub.add_parser("refine", parents=[common], help="refine a coarse grid with a hull")
    p.add_argument("--coarse")
    p.add_argument("--hull")
    p.add_argument("--params")
    p.add_argument("--baseline", choices=["carve"])
    p.add_argument("--gt", help="ground-truth grid for the metrics row")
    p.add_argument("--csv", help="append a metrics row to this CSV")
    p.add_argument("--sample-id")

    p = sub.add_parser("train", parents=[common], help="train the refiner on a dataset")
    p.add_argument("--data")
    p.add_argument("--phase", choices=["gt", "noisy", "const", "both"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--adapt-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--crop", type=int, help="training crop edge; 0 trains on whole grids")
    p.add_argument("--crops-per-sample", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--channels", type=_ints, help="comma-separated, e.g. 4,8,8,8,1")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--init", help="start from these parameters")

    p = sub.add_parser("eval", parents=[common], help="evaluate refinement over noise buckets")
    p.add_argument("--data")
    p.add_argument("--params")
    p.add_argument("--baseline", choices=["carve"])
    p.add_argument("--split", choices=["train", "test", "all"])
    p.add_argument("--buckets", type=_floats, help="rotation noise buckets in degrees, e.g. 0,5,10,20")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of hull gradients")
    p.add_argument("--path", choices=["pose", "silhouette"])
    p.add_argument("--binary", action="store_true", default=None, help="use an unsmoothed silhouette")
    p.add_argument("--dim", type=int, help="hull grid edge")
    p.add_argument("--tolerance", type=float)

    p = sub.add_parser("posefit", parents=[common], help="recover a perturbed pose through the hull layer")
    p.add_argument("--data")
    p.add_argument("--sample-id")
    p.add_argument("--sil", help="silhouette to fit instead of the sample's own")
    p.add_argument("--blur", type=int, help="silhouette box-blur radius in pixels")
    p.add_argument("--rot-perturb", type=float, help="initial rotation noise in degrees")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--max-rot-error", type=float, help="exit 4 if the final error is larger")

    p = sub.add_parser("render", parents=[common], help="render a grid's silhouette")
    p.add_argument("--grid")
    p.add_argument("--pose")
    p.add_argument("--intrinsics")
    p.add_argument("--image-size", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    flags = {k: v for k, v in vars(args).items() if k != "command"}
    logging.basicConfig(level=logging.INFO if flags.get("verbose") else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = RunConfig.build(args.command, flags, _load_config_file(flags.get("config")))
        if cfg.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(cfg.threads)):
                return COMMANDS[args.command](cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"svhull {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ToleranceError as exc:
        print(f"svhull {args.command}: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except (OSError, GridFormatError, PGMFormatError, KeyError, json.JSONDecodeError) as exc:
        print(f"svhull {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"svhull {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
