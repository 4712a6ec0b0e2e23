"""``gaitproj`` command line: synth, project, sweep, analyze, net-check, init-weights.

Every command takes ``--config run.json`` plus ``--set section.key=value``
overrides, ``--out DIR`` and ``--seed N``, and writes the fully resolved
configuration to ``DIR/config.json``.  Feeding that file back through
``--config`` reproduces the run byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import analytics, net, netcheck, weights
from .pointcloud import (
    Sequence,
    WalkerGeometry,
    WalkerParams,
    compute_stats,
    format_xyz,
    limb_point_fraction,
    load_sequence,
    synth_walker,
)
from .projection import (
    Mode,
    ProjectionConfig,
    normalize,
    prepare_config,
    rasterize_sequence,
    to_rgb,
    write_png_stack,
)

log = logging.getLogger("gaitproj")

COMMANDS = ("synth", "project", "sweep", "analyze", "net-check", "init-weights")


class ConfigError(ValueError):
    pass


def _walker_defaults() -> dict:
    d = asdict(WalkerParams())
    d.pop("seed")
    return d


def default_config(command: str) -> dict:
    sweep = analytics.SweepConfig()
    return {
        "command": command,
        "seed": 0,
        "input": None,
        "out": None,
        "pattern": "*.xyz",
        "walker": _walker_defaults(),
        "projection": ProjectionConfig().to_dict(),
        "sweep": {"z_steps": list(sweep.z_steps), "r_steps": list(sweep.r_steps), "l": sweep.l, "d": sweep.d},
        "net": {**net.NetConfig().to_dict(), "weights": None, "init": "random", "clips": 2},
        "png": {"rgb": True},
    }


def _merge(base: dict, over: dict, path="") -> dict:
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, path + k + ".")
        else:
            base[k] = v
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, args) -> dict:
    cfg = default_config(command)
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if loaded.get("command", command) != command:
            raise ConfigError(f"config is for command {loaded['command']!r}, not {command!r}")
        _merge(cfg, loaded)
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(val)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.input is not None:
        cfg["input"] = args.input
    if args.out is not None:
        cfg["out"] = args.out
    if cfg["out"] is None:
        raise ConfigError("an output directory is required (--out)")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _walker_params(cfg: dict) -> WalkerParams:
    w = dict(cfg["walker"])
    geom = WalkerGeometry(**w.pop("geometry", {}))
    return WalkerParams(**w, seed=int(cfg["seed"]), geometry=geom)


def _projection(cfg: dict) -> ProjectionConfig:
    return ProjectionConfig.from_dict(cfg["projection"])


def _load_input_sequence(cfg: dict) -> Sequence:
    if not cfg["input"]:
        raise ConfigError("an input sequence directory is required (--input)")
    return load_sequence(cfg["input"], cfg["pattern"])


def _stats_dict(stats) -> dict:
    return {"z_min": stats.z_min, "z_max": stats.z_max, "c": stats.c, "r": stats.r,
            "max_abs_y": stats.max_abs_y, "n_points": stats.n_points}


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    params = _walker_params(cfg)
    params.validate()
    seq = synth_walker(params)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for fr in seq.frames:
        (out / f"{fr.frame_index:04d}.xyz").write_text(format_xyz(fr, with_labels=True))
    _write_json(out / "manifest.json", {
        "identity_id": seq.identity_id, "sequence_id": seq.sequence_id, "condition": seq.condition,
        "n_frames": len(seq), "points_per_frame": params.points_per_frame,
        "limb_point_fraction": limb_point_fraction(seq), "walker": asdict(params),
    })
    _write_json(out / "config.json", cfg)
    log.info("wrote %d frames to %s", len(seq), out)
    return 0


def cmd_project(cfg: dict) -> int:
    seq = _load_input_sequence(cfg)
    stats = compute_stats(seq)
    pcfg = prepare_config(seq, _projection(cfg), stats)   # validation happens before any output
    depth = rasterize_sequence(seq, pcfg, stats, validate=False)
    images = [to_rgb(im) for im in normalize(depth)]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_png_stack(images, out, seq.sequence_id, rgb=bool(cfg["png"]["rgb"]))
    labelled = any(bool((im.label[im.valid] != 0).any()) for im in depth)
    summary = {
        "identity_id": seq.identity_id,
        "sequence_id": seq.sequence_id,
        "n_frames": len(seq),
        "stats": _stats_dict(stats),
        "mode": pcfg.mode.value,
        "R": pcfg.R if pcfg.mode is Mode.SPHERICAL else None,
        "z_r": pcfg.z_r if pcfg.mode is Mode.SPHERICAL else None,
        "frames": [{"frame_index": fr.frame_index, "points": len(fr), "valid_pixels": int(im.valid.sum()),
                    "dropped_points": im.dropped_points} for fr, im in zip(seq.frames, depth)],
        "limb_pixel_fraction": analytics.limb_pixel_fraction(depth) if labelled else None,
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "config.json", cfg)
    log.info("projected %d frames (%s) to %s", len(seq), pcfg.mode.value, out)
    return 0


def _sweep_config(cfg: dict) -> analytics.SweepConfig:
    s = cfg["sweep"]
    return analytics.SweepConfig(z_steps=tuple(s["z_steps"]), r_steps=tuple(s["r_steps"]),
                                 l=s["l"], d=s["d"], base=_projection(cfg))


def cmd_sweep(cfg: dict) -> int:
    seq = _load_input_sequence(cfg)
    report = analytics.run_sweep(seq, _sweep_config(cfg))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    analytics.emit_report(report, out / "sweep.csv")
    best = report.best()
    _write_json(out / "sweep_summary.json", {
        "stats": _stats_dict(report.stats), "l": report.l, "d": report.d,
        "best": {"z_r": best.z_r, "R": best.R, "z_step": best.z_step, "r_step": best.r_step,
                 "limb_fraction": best.limb_fraction},
        "planar_limb_fraction": report.planar.limb_fraction,
        "invalid_cells": [{"z_step": c.z_step, "r_step": c.r_step, "reason": c.invalid_reason}
                          for c in report.cells if not c.valid],
    })
    _write_json(out / "config.json", cfg)
    log.info("sweep: %d cells (%d valid) -> %s", len(report.cells), len(report.valid_cells()), out / "sweep.csv")
    return 0


def cmd_analyze(cfg: dict) -> int:
    seq = _load_input_sequence(cfg)
    stats = compute_stats(seq)
    pcfg = _projection(cfg)
    rec = analytics.evaluate(seq, prepare_config(seq, pcfg, stats), stats)
    planar = analytics.evaluate(seq, ProjectionConfig.from_dict({**pcfg.to_dict(), "mode": "Planar"}), stats)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "analysis.json", {"stats": _stats_dict(stats), "projection": asdict(rec),
                                        "planar": asdict(planar)})
    _write_json(out / "config.json", cfg)
    return 0


def _net_config(cfg: dict) -> net.NetConfig:
    n = {k: v for k, v in cfg["net"].items() if k not in ("weights", "init", "clips")}
    return net.NetConfig.from_dict(n)


def cmd_init_weights(cfg: dict) -> int:
    params = net.init_params(_net_config(cfg), int(cfg["seed"]), cfg["net"]["init"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    weights.save(params, out / "weights.bin")
    _write_json(out / "config.json", cfg)
    return 0


def cmd_net_check(cfg: dict) -> int:
    if not cfg["input"]:
        raise ConfigError("net-check needs a projection output directory (--input)")
    inputs = cfg["input"] if isinstance(cfg["input"], list) else [cfg["input"]]
    out = Path(cfg["out"])
    if cfg["net"]["weights"]:
        params = weights.load(cfg["net"]["weights"])
    else:
        params = net.init_params(_net_config(cfg), int(cfg["seed"]), cfg["net"]["init"])
    stacks = [s for d in inputs for s in netcheck.find_stacks(d)]
    if not stacks:
        raise ConfigError(f"no PNG stacks found under {inputs}")
    samples = netcheck.build_batch(stacks, clips=int(cfg["net"]["clips"]),
                                   channels=params.config.in_channels)
    report = netcheck.run_checks(samples, params)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg["net"]["weights"]:
        weights.save(params, out / "weights.bin")
    _write_json(out / "net_check.json", report)
    _write_json(out / "config.json", cfg)
    for c in report["checks"]:
        log.info("%-40s %s", c["name"], "PASS" if c["passed"] else "FAIL")
    return 0 if report["passed"] else 1


HANDLERS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "net-check": cmd_net_check,
    "init-weights": cmd_init_weights,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitproj", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field, e.g. projection.mode=Planar")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for every random draw")
        p.add_argument("--input", help="input directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except (ValueError, OSError) as e:
        print(f"gaitproj {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
