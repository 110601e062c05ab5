"""Command-line surface: generate / map / render / eval / ablate.

Exit codes: 0 success, 2 argument or data-format problems, 3 numerical
failures (optimization divergence).
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional

import cv2
import numpy as np

from .dataset import (DatasetFormatError, encode_depth, generate,
                      load_dataset)
from .mapconfig import ConfigError, MapperConfig, apply_overrides, \
    dump_config, load_config
from .mapper import MappingDivergence, run_mapping
from .metrics import MetricError, evaluate, psnr, split_protocol
from .raster import render
from .scenes import PRESETS
from .serialize import MapFormatError, load_map


def _load_cfg(args) -> MapperConfig:
    cfg = load_config(args.config) if args.config else MapperConfig()
    if args.set:
        apply_overrides(cfg, args.set)
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    if args.scene not in PRESETS:
        raise ConfigError(f"unknown scene {args.scene!r}; available: "
                          f"{', '.join(sorted(PRESETS))}")
    script = PRESETS[args.scene]()
    if args.seed is not None:
        script.seed = args.seed
    ds = generate(script, args.out)
    print(f"generated {len(ds)} frames in {args.out} "
          f"({len(ds.sequence_starts)} sequence(s))")
    return 0


def cmd_map(args) -> int:
    cfg = _load_cfg(args)
    ds = load_dataset(args.dataset)
    result = run_mapping(ds, cfg, out_dir=args.out)
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(dump_config(cfg))
    s = result.stats
    print(f"mapped {s['frames_mapped']} frames -> {s['keyframes']} keyframes,"
          f" {len(result.gmap)} live splats"
          f" (seeded {s['seeded']}, removed {s['removed']},"
          f" pruned {s['pruned']})")
    print(f"map: {result.map_path}")
    print(f"conflict log: {result.log_path}")
    return 0


def cmd_render(args) -> int:
    gmap = load_map(args.map)
    ds = load_dataset(args.dataset)
    if not (0 <= args.frame_id < len(ds)):
        raise ConfigError(f"frame id {args.frame_id} outside dataset "
                          f"(0..{len(ds) - 1})")
    frame = ds.frames[args.frame_id]
    out = render(gmap, frame.camera)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"render_{args.frame_id:06d}")
    color8 = np.clip(out.color * 255.0, 0, 255).astype(np.uint8)
    cv2.imwrite(stem + "_color.png", cv2.cvtColor(color8, cv2.COLOR_RGB2BGR))
    cv2.imwrite(stem + "_depth.png", encode_depth(out.depth))
    print(f"wrote {stem}_color.png / _depth.png "
          f"(psnr vs stored frame: {psnr(out.color, frame.color):.2f} dB)")
    return 0


def cmd_eval(args) -> int:
    gmap = load_map(args.map)
    ds = load_dataset(args.dataset)
    report = evaluate(gmap, ds)
    text = report.format(per_view=args.per_view)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


_ABLATION_ARMS = (
    ("full", {}),
    ("dsa_off", {"dsa": "off"}),
    ("dsa_add", {"dsa": "add"}),
    ("dsa_remove", {"dsa": "remove"}),
    ("kf_none", {"kf_filtering": "none"}),
    ("kf_full", {"kf_filtering": "full"}),
    ("no_refine", {"final_refinement": "off"}),
)

_TABLE_METRICS = ("psnr", "depth_l1_cm", "changed_psnr",
                  "changed_depth_l1_cm")


def cmd_ablate(args) -> int:
    base = _load_cfg(args)
    ds = load_dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for name, overrides in _ABLATION_ARMS:
        cfg = replace(base, **overrides)
        cfg.validate()
        arm_dir = os.path.join(args.out, name)
        result = run_mapping(ds, cfg, out_dir=arm_dir)
        report = evaluate(result.gmap, ds)
        agg = report.aggregate("novel")
        rows.append((name, agg))
        with open(os.path.join(arm_dir, "report.txt"), "w") as f:
            f.write(report.format())
        print(f"[{name}] novel: " + "  ".join(
            f"{m}={agg[m]:.3f}" for m in _TABLE_METRICS if m in agg))

    header = "arm".ljust(12) + "".join(m.rjust(22) for m in _TABLE_METRICS)
    lines = [header]
    for name, agg in rows:
        cells = "".join(
            (f"{agg[m]:.6f}" if m in agg else "-").rjust(22)
            for m in _TABLE_METRICS)
        lines.append(name.ljust(12) + cells)
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table)
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="evomap",
        description="Gaussian-splat mapping with long-term scene "
                    "adaptation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a scripted RGB-D "
                                        "dataset")
    g.add_argument("--scene", required=True,
                   help=f"one of: {', '.join(sorted(PRESETS))}")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("map", help="run the mapping pipeline")
    m.add_argument("--dataset", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--config", default=None)
    m.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE")
    m.set_defaults(func=cmd_map)

    r = sub.add_parser("render", help="render a map at a dataset pose")
    r.add_argument("--map", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--frame-id", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a map against a dataset")
    e.add_argument("--map", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--per-view", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--set", action="append", default=[],
                   metavar="KEY=VALUE")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, MapFormatError, MetricError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MappingDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
