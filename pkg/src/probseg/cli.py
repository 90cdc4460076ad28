"""Command-line front end.

Subcommands: simulate (write a synthetic run directory), fuse (cluster and
fuse a run into observations plus variance maps), eval (score a run against
its ground truth), render (grayscale PGM images of the fused grids).

Configuration is plain `key = value` text with dotted keys (see
DEFAULTS for the full list); `#` starts a comment line.  Command-line
flags override file values; the PROBSEG_CONFIG environment variable
supplies a default config path when --config is not given.  Exit codes:
0 success, 1 internal error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fusion import (
    HEATMAP_CLUSTER_SIZE,
    HEATMAP_TOTAL_PASSES,
    FusionConfig,
    bsas_cluster,
)
from .metrics import EvalConfig, evaluate_dataset
from .model import ValidationError
from .runio import (
    RunMeta,
    load_run,
    read_grid_file,
    save_run,
    write_grid_file,
    write_pgm,
)
from .simulator import NoiseConfig, generate_scene, simulate_samples
from .uncertainty import variance_maps

SWEEP_PASSES = (1, 2, 4, 8, 16, 24, 32)
# Gray value 255 corresponds to the maximum Bernoulli variance 0.25.
VARIANCE_GRAY_SCALE = 0.25


class ConfigError(ValueError):
    pass


def _parse_alpha(v: str) -> str:
    if v not in ("log-half", "raw"):
        raise ConfigError(f"fbw alpha must be 'log-half' or 'raw', got {v!r}")
    return v


def _parse_denominator(v: str) -> str:
    if v not in (HEATMAP_TOTAL_PASSES, HEATMAP_CLUSTER_SIZE):
        raise ConfigError(
            f"heatmap denominator must be '{HEATMAP_TOTAL_PASSES}' or "
            f"'{HEATMAP_CLUSTER_SIZE}', got {v!r}"
        )
    return v


DEFAULTS = {
    "fusion.min_detections": 2,
    "fusion.score_threshold": 0.5,
    "fusion.iou_threshold": 0.5,
    "fusion.heatmap_denominator": HEATMAP_TOTAL_PASSES,
    "metrics.ace_bins": 10,
    "metrics.ause_steps": 20,
    "metrics.fbw_alpha": "log-half",
    "simulate.width": 64,
    "simulate.height": 64,
    "simulate.objects": 3,
    "simulate.classes": 3,
    "simulate.passes": 24,
    "simulate.seed": 0,
    "simulate.existence_prob": 1.0,
    "simulate.boundary_sigma": 0.0,
    "simulate.soft_edge_width": 0.0,
    "simulate.pixel_flip_prob": 0.0,
    "simulate.label_flip_prob": 0.0,
    "simulate.score_concentration": math.inf,
    "simulate.clutter_rate": 0.0,
}

_CASTS = {
    "fusion.min_detections": int,
    "fusion.score_threshold": float,
    "fusion.iou_threshold": float,
    "fusion.heatmap_denominator": _parse_denominator,
    "metrics.ace_bins": int,
    "metrics.ause_steps": int,
    "metrics.fbw_alpha": _parse_alpha,
    "simulate.width": int,
    "simulate.height": int,
    "simulate.objects": int,
    "simulate.classes": int,
    "simulate.passes": int,
    "simulate.seed": int,
    "simulate.existence_prob": float,
    "simulate.boundary_sigma": float,
    "simulate.soft_edge_width": float,
    "simulate.pixel_flip_prob": float,
    "simulate.label_flip_prob": float,
    "simulate.score_concentration": float,
    "simulate.clutter_rate": float,
}


def parse_config_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _CASTS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CASTS[key](val)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


@dataclass(frozen=True)
class RunConfig:
    """Validated bundle of all tunables one invocation uses."""

    fusion: FusionConfig
    metrics: EvalConfig
    noise: NoiseConfig
    width: int
    height: int
    objects: int
    classes: int
    passes: int

    @classmethod
    def load(cls, config_path: str | None, overrides: dict) -> "RunConfig":
        values = dict(DEFAULTS)
        path = config_path or os.environ.get("PROBSEG_CONFIG")
        if path:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            values.update(parse_config_file(Path(path)))
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _CASTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _CASTS[key](val)
        fusion = FusionConfig(
            min_detections=values["fusion.min_detections"],
            score_threshold=values["fusion.score_threshold"],
            iou_threshold=values["fusion.iou_threshold"],
            heatmap_denominator=values["fusion.heatmap_denominator"],
        )
        metrics = EvalConfig(
            ace_bins=values["metrics.ace_bins"],
            ause_steps=values["metrics.ause_steps"],
            fbw_alpha_raw=values["metrics.fbw_alpha"] == "raw",
        )
        noise = NoiseConfig(
            seed=values["simulate.seed"],
            existence_prob=values["simulate.existence_prob"],
            boundary_sigma=values["simulate.boundary_sigma"],
            soft_edge_width=values["simulate.soft_edge_width"],
            pixel_flip_prob=values["simulate.pixel_flip_prob"],
            label_flip_prob=values["simulate.label_flip_prob"],
            score_concentration=values["simulate.score_concentration"],
            clutter_rate=values["simulate.clutter_rate"],
        )
        return cls(
            fusion=fusion,
            metrics=metrics,
            noise=noise,
            width=values["simulate.width"],
            height=values["simulate.height"],
            objects=values["simulate.objects"],
            classes=values["simulate.classes"],
            passes=values["simulate.passes"],
        )


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    if cfg.passes < 1:
        raise ConfigError("M must be >= 1")
    scene = generate_scene(
        cfg.width, cfg.height, cfg.objects, cfg.classes, cfg.noise.seed
    )
    sim = simulate_samples(scene, cfg.passes, cfg.noise, cfg.classes)
    meta = RunMeta(
        image_id=scene.image_id,
        width=cfg.width,
        height=cfg.height,
        class_names=("background",)
        + tuple(f"class_{k}" for k in range(1, cfg.classes + 1)),
    )
    out = Path(args.out)
    save_run(meta, list(sim.samples), scene, out)
    _write_json(
        out / "provenance.json",
        [
            {
                "pass": rec.pass_index,
                "detection": rec.detection_index,
                "source": rec.source,
                "instance": rec.instance_index,
            }
            for rec in sim.provenance
        ],
    )
    n_det = sum(len(s.detections) for s in sim.samples)
    print(
        f"wrote {out}: {len(scene.instances)} objects, M={cfg.passes}, "
        f"{n_det} detections, seed={cfg.noise.seed}"
    )
    print(
        "noise: existence={:g} boundary_sigma={:g} soft_edge={:g} "
        "pixel_flip={:g} label_flip={:g} concentration={:g} clutter={:g}".format(
            cfg.noise.existence_prob,
            cfg.noise.boundary_sigma,
            cfg.noise.soft_edge_width,
            cfg.noise.pixel_flip_prob,
            cfg.noise.label_flip_prob,
            cfg.noise.score_concentration,
            cfg.noise.clutter_rate,
        )
    )
    return 0


def _fuse_run(run_dir: Path, fusion: FusionConfig):
    meta, samples, scene = load_run(run_dir)
    observations = bsas_cluster(samples, fusion)
    index_of = {}
    for s in samples:
        for k, det in enumerate(s.detections):
            index_of[id(det)] = (s.pass_index, k)
    return meta, samples, scene, observations, index_of


def cmd_fuse(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    run_dir = Path(args.run_dir)
    meta, samples, scene, observations, index_of = _fuse_run(run_dir, cfg.fusion)
    if not observations:
        print("warning: no observations survived fusion", file=sys.stderr)
    records = []
    for i, obs in enumerate(observations):
        vm = variance_maps(obs)
        files = {}
        for kind, grid in (
            ("mean", obs.mean_mask.values),
            ("heatmap", obs.heatmap.values),
            ("aleatoric", vm.aleatoric),
            ("epistemic", vm.epistemic),
        ):
            name = f"obs_{i:03d}_{kind}.bin"
            write_grid_file(
                run_dir / name, obs.mean_box, obs.mean_classes, grid
            )
            files[kind] = name
        records.append(
            {
                "index": i,
                "label": obs.label,
                "size": obs.size,
                "score": float(obs.score),
                "box": [float(v) for v in obs.mean_box.as_array()],
                "mean_classes": [float(v) for v in obs.mean_classes.probs],
                "members": [list(index_of[id(det)]) for _, det in obs.members],
                "files": files,
            }
        )
    _write_json(
        run_dir / "observations.json",
        {
            "count": len(records),
            "fusion": {
                "min_detections": cfg.fusion.min_detections,
                "score_threshold": cfg.fusion.score_threshold,
                "iou_threshold": cfg.fusion.iou_threshold,
                "heatmap_denominator": cfg.fusion.heatmap_denominator,
            },
            "observations": records,
        },
    )
    print(f"{len(records)} observations from {len(samples)} passes")
    return 0


def _write_sparsification(path: Path, curve) -> None:
    lines = ["fraction,brier,oracle_brier"]
    if curve is not None:
        for f, b, o in zip(curve.fractions, curve.brier, curve.oracle_brier):
            lines.append(f"{float(f):.6f},{float(b):.12g},{float(o):.12g}")
    path.write_text("\n".join(lines) + "\n")


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    run_dir = Path(args.run_dir)
    meta, samples, scene = load_run(run_dir)
    if scene is None:
        raise ConfigError("ground truth required (no ground_truth.json in run)")
    m_values = [m for m in SWEEP_PASSES if m <= len(samples)] if args.sweep else [
        len(samples)
    ]
    for m in m_values:
        observations = bsas_cluster(samples[:m], cfg.fusion)
        report = evaluate_dataset([(observations, scene)], cfg.metrics)
        payload = report.as_dict()
        payload["passes"] = m
        suffix = f"_m{m}" if args.sweep else ""
        _write_json(run_dir / f"report{suffix}.json", payload)
        _write_sparsification(
            run_dir / f"sparsification{suffix}.csv", report.sparsification
        )
        ace_txt = "n/a" if report.ace is None else f"{report.ace:.4f}"
        print(
            f"M={m:3d}  pmq={report.pmq:.4f}  ppmq={report.ppmq:.4f}  "
            f"q_s={report.q_s:.4f}  q_l={report.q_l:.4f}  "
            f"fbw={report.fbw_mean:.4f}  ace={ace_txt}  ause={report.ause:.4f}"
        )
    return 0


def cmd_render(args) -> int:
    run_dir = Path(args.run_dir)
    obs_path = run_dir / "observations.json"
    if not obs_path.is_file():
        raise ConfigError(f"no observations.json in {run_dir}; run 'fuse' first")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    meta = RunMeta(
        image_id=str(manifest["image_id"]),
        width=int(manifest["width"]),
        height=int(manifest["height"]),
        class_names=tuple(manifest["class_names"]),
    )
    listing = json.loads(obs_path.read_text())
    which = args.which
    count = 0
    for rec in listing["observations"]:
        grid = read_grid_file(run_dir / rec["files"][which], meta)
        v = grid.astype(np.float64)
        if which in ("aleatoric", "epistemic"):
            v = v / VARIANCE_GRAY_SCALE
        gray = np.clip(np.rint(255.0 * v), 0, 255).astype(np.uint8)
        out = run_dir / f"obs_{rec['index']:03d}_{which}.pgm"
        write_pgm(out, gray)
        count += 1
    print(f"rendered {count} {which} images")
    return 0


# ---------------------------------------------------------------------------
# Argument plumbing


def _overrides(args) -> dict:
    pairs = {
        "min_detections": "fusion.min_detections",
        "score": "fusion.score_threshold",
        "iou": "fusion.iou_threshold",
        "denominator": "fusion.heatmap_denominator",
        "ace_bins": "metrics.ace_bins",
        "ause_steps": "metrics.ause_steps",
        "fbw_alpha": "metrics.fbw_alpha",
        "width": "simulate.width",
        "height": "simulate.height",
        "objects": "simulate.objects",
        "classes": "simulate.classes",
        "passes": "simulate.passes",
        "seed": "simulate.seed",
        "existence_prob": "simulate.existence_prob",
        "boundary_sigma": "simulate.boundary_sigma",
        "soft_edge_width": "simulate.soft_edge_width",
        "pixel_flip_prob": "simulate.pixel_flip_prob",
        "label_flip_prob": "simulate.label_flip_prob",
        "score_concentration": "simulate.score_concentration",
        "clutter_rate": "simulate.clutter_rate",
    }
    out = {}
    for attr, key in pairs.items():
        if hasattr(args, attr):
            out[key] = getattr(args, attr)
    return out


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-detections", type=int, dest="min_detections")
    p.add_argument("--score", type=float, help="score filter threshold")
    p.add_argument("--iou", type=float, help="cluster affinity threshold")
    p.add_argument(
        "--denominator",
        choices=(HEATMAP_TOTAL_PASSES, HEATMAP_CLUSTER_SIZE),
        help="heatmap denominator",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probseg",
        description="Fusion, uncertainty and evaluation for sampled "
        "probabilistic instance segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic run directory")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--config")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--objects", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--passes", type=int, help="number of forward passes M")
    p.add_argument("--seed", type=int)
    p.add_argument("--existence-prob", type=float, dest="existence_prob")
    p.add_argument("--boundary-sigma", type=float, dest="boundary_sigma")
    p.add_argument("--soft-edge-width", type=float, dest="soft_edge_width")
    p.add_argument("--pixel-flip-prob", type=float, dest="pixel_flip_prob")
    p.add_argument("--label-flip-prob", type=float, dest="label_flip_prob")
    p.add_argument(
        "--score-concentration", type=float, dest="score_concentration"
    )
    p.add_argument("--clutter-rate", type=float, dest="clutter_rate")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fuse", help="cluster and fuse a run into observations")
    p.add_argument("run_dir")
    p.add_argument("--config")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a run against its ground truth")
    p.add_argument("run_dir")
    p.add_argument("--config")
    _add_fusion_flags(p)
    p.add_argument("--ace-bins", type=int, dest="ace_bins")
    p.add_argument("--ause-steps", type=int, dest="ause_steps")
    p.add_argument(
        "--fbw-alpha", choices=("log-half", "raw"), dest="fbw_alpha"
    )
    p.add_argument(
        "--sweep",
        action="store_true",
        help="evaluate at M in %s by subsampling passes" % (SWEEP_PASSES,),
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write PGM images of fused grids")
    p.add_argument("run_dir")
    p.add_argument(
        "--which",
        required=True,
        choices=("mean", "heatmap", "aleatoric", "epistemic"),
    )
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {e!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
