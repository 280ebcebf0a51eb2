"""Command-line front end: ``gen-scene``, ``locate`` and ``simulate``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys

import numpy as np

from . import config as config_mod
from .cloud import write_clouds_csv
from .config import ConfigError, RunConfig
from .gmm import write_field_csv, write_mixtures_json
from .measure import AngleMeasurement, MeasurementSet, PtMeasurement, RptMeasurement
from .scene import SceneError, generate_scene, write_scene
from .sim import CampaignError, build_scene, localize, run_campaign, with_axis, write_campaign

log = logging.getLogger("nlos_locate")


class CliError(RuntimeError):
    pass


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="JSON run config")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="campaign seed (u64)")
    g.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="worker processes")
    g.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS,
                   help="print the fully resolved config as JSON and exit")
    return p


def _run_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run overrides")
    g.add_argument("--scene", metavar="PATH", help="scene file (default: generated canonical room)")
    g.add_argument("--clutter", type=int, help="clutter boxes in the generated room")
    g.add_argument("--sigma-eta", type=float, metavar="DEG", help="AoA error std in degrees")
    g.add_argument("--sigma-nu", type=float, metavar="M", help="PT and RPT length error std (m)")
    g.add_argument("--sigma-nu-pt", type=float, metavar="M")
    g.add_argument("--sigma-nu-rpt", type=float, metavar="M")
    g.add_argument("--fusion", choices=["aoa", "aoa+pt", "aoa+rpt"])
    g.add_argument("--n-rays", type=int)
    g.add_argument("--n-select", type=int)
    g.add_argument("--k-max", type=int)
    g.add_argument("--n-init", type=int)
    g.add_argument("--grid-spacing", type=float, metavar="M")
    return p


def build_parser() -> argparse.ArgumentParser:
    glob = _global_flags()
    run = _run_flags()
    parser = argparse.ArgumentParser(prog="nlos-locate", parents=[glob],
                                     description="Digital-twin-aided AoA/PT/RPT positioning")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[glob], help="write the canonical room scene")
    g.add_argument("--width", type=float, default=8.0)
    g.add_argument("--length", type=float, default=18.0)
    g.add_argument("--height", type=float, default=2.5)
    g.add_argument("--clutter", type=int, default=0)
    g.add_argument("--clutter-seed", type=int, default=0)
    g.add_argument("--output", "-o", metavar="FILE", help="scene file (default OUT/scene.json)")

    loc = sub.add_parser("locate", parents=[glob, run], help="localize from a measurement file")
    loc.add_argument("measurements", metavar="MEAS_FILE")
    loc.add_argument("--dump", default="", help="comma list of: clouds, mixtures, field")
    loc.add_argument("--field-decimate", type=int, default=4)

    sim = sub.add_parser("simulate", parents=[glob, run], help="run a campaign or a sweep")
    sim.add_argument("--n-trials", type=int)
    sim.add_argument("--sweep", metavar="AXIS=V1,V2,...",
                     help="e.g. sigma_eta=0.25,0.5,0.75,1.0deg or sigma_nu_pt=0.2,0.5")
    return parser


def resolve_config(args) -> RunConfig:
    data: dict = {}
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            data = json.load(fh)
    over: dict = {}

    def put(keys, value):
        if value is None:
            return
        d = over
        for k in keys[:-1]:
            d = d.setdefault(k, {})
        d[keys[-1]] = value

    put(["seed"], getattr(args, "seed", None))
    put(["workers"], getattr(args, "workers", None))
    put(["out"], getattr(args, "out", None))
    put(["scene", "path"], getattr(args, "scene", None))
    put(["scene", "clutter"], getattr(args, "clutter", None))
    put(["sigma_eta_deg"], getattr(args, "sigma_eta", None))
    nu = getattr(args, "sigma_nu", None)
    put(["sigma_nu_pt"], nu)
    put(["sigma_nu_rpt"], nu)
    put(["sigma_nu_pt"], getattr(args, "sigma_nu_pt", None))
    put(["sigma_nu_rpt"], getattr(args, "sigma_nu_rpt", None))
    put(["fusion"], getattr(args, "fusion", None))
    put(["n_rays"], getattr(args, "n_rays", None))
    put(["selection", "n_select"], getattr(args, "n_select", None))
    put(["gmm", "k_max"], getattr(args, "k_max", None))
    put(["gmm", "n_init"], getattr(args, "n_init", None))
    put(["grid", "spacing"], getattr(args, "grid_spacing", None))
    put(["n_trials"], getattr(args, "n_trials", None))
    put(["sweep"], getattr(args, "sweep", None))
    return config_mod.from_dict(config_mod.merge(data, over))


def load_measurements(path, scene) -> tuple[MeasurementSet, np.ndarray | None]:
    """Parse a measurement file; angles in degrees, lengths in meters."""
    with open(path) as fh:
        data = json.load(fh)
    known = set(scene.bs_ids)
    ms = MeasurementSet()

    def check(bs):
        if bs not in known:
            raise CliError(f"unknown BS id {bs} in measurement file")
        return bs

    try:
        for e in data.get("aoa", []):
            ms.add(AngleMeasurement(check(int(e["bs"])), math.radians(e["azimuth_deg"]),
                                    math.radians(e["elevation_deg"]), math.radians(e["sigma_deg"])))
        for e in data.get("pt", []):
            ms.add(PtMeasurement.from_length(check(int(e["bs"])), float(e["length_m"]), float(e["sigma_m"])))
        for e in data.get("rpt", []):
            ms.add(RptMeasurement((check(int(e["bs_i"])), check(int(e["bs_j"]))), float(e["delta_m"]),
                                  float(e["sigma_m"])))
    except KeyError as exc:
        raise CliError(f"measurement entry missing field {exc}") from exc
    if not ms.aoa:
        raise CliError("measurement file has no AoA entries")
    truth = data.get("ground_truth")
    return ms, (np.asarray(truth, dtype=float) if truth is not None else None)


def cmd_gen_scene(args) -> int:
    scene = generate_scene(args.width, args.length, args.height, args.clutter, args.clutter_seed)
    out = args.output or os.path.join(getattr(args, "out", "out"), "scene.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_scene(scene, out)
    print(out)
    return 0


def cmd_locate(args, cfg: RunConfig) -> int:
    trial = cfg.to_trial()
    scene = build_scene(trial.scene)
    ms, truth = load_measurements(args.measurements, scene)
    if trial.fusion == "aoa+pt" and not ms.pt:
        raise CliError("fusion mode aoa+pt requires 'pt' measurements; none given")
    if trial.fusion == "aoa+rpt" and not ms.rpt:
        raise CliError("fusion mode aoa+rpt requires 'rpt' measurements; none given")
    dumps = {d.strip() for d in args.dump.split(",") if d.strip()}
    unknown = dumps - {"clouds", "mixtures", "field"}
    if unknown:
        raise CliError(f"unknown dump kind(s): {sorted(unknown)}")
    x_hat, fld, clouds, fused, mixtures, _ = localize(scene, ms, trial, cfg.seed,
                                                       full_field="field" in dumps)
    report = {"estimate": x_hat.tolist(), "fusion": trial.fusion}
    if truth is not None:
        report["ground_truth"] = truth.tolist()
        report["error_m"] = float(np.linalg.norm(x_hat - truth))
    if dumps:
        os.makedirs(cfg.out, exist_ok=True)
    if "clouds" in dumps:
        for bs in sorted(clouds):
            write_clouds_csv([clouds[bs], fused[bs]] if fused[bs] is not clouds[bs] else [clouds[bs]],
                             os.path.join(cfg.out, f"cloud_bs{bs}.csv"))
    if "mixtures" in dumps:
        write_mixtures_json(mixtures, os.path.join(cfg.out, "mixtures.json"))
    if "field" in dumps:
        write_field_csv(fld, os.path.join(cfg.out, "field.csv"), args.field_decimate)
    print(json.dumps(report))
    return 0


def cmd_simulate(args, cfg: RunConfig) -> int:
    trial = cfg.to_trial()
    echo = config_mod.to_dict(cfg)
    if cfg.sweep:
        axis, values = config_mod.parse_sweep(cfg.sweep)
        index = {}
        for label, value in values:
            res = run_campaign(with_axis(trial, axis, value), cfg.n_trials, cfg.workers)
            suffix = f"_{axis}_{label}"
            summary = write_campaign(res, cfg.out, suffix, dict(echo, sweep_value=label))
            index[label] = summary["percentiles_m"]
            print(f"{axis}={label}: p90={summary['percentiles_m'].get('90')} "
                  f"failed={summary['n_failed']}/{summary['n_trials']}")
        with open(os.path.join(cfg.out, "sweep.json"), "w") as fh:
            json.dump({"axis": axis, "percentiles_m": index, "config": echo}, fh, indent=1)
    else:
        res = run_campaign(trial, cfg.n_trials, cfg.workers)
        summary = write_campaign(res, cfg.out, "", echo)
        print(f"p50={summary['percentiles_m'].get('50')} p90={summary['percentiles_m'].get('90')} "
              f"failed={summary['n_failed']}/{summary['n_trials']}")
    return 0


def _setup_logging() -> None:
    level = os.environ.get("NLOS_LOCATE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-scene":
            if getattr(args, "print_config", False):
                print(json.dumps({k: v for k, v in vars(args).items() if k != "print_config"}, indent=1))
                return 0
            return cmd_gen_scene(args)
        cfg = resolve_config(args)
        if getattr(args, "print_config", False):
            print(json.dumps(config_mod.to_dict(cfg), indent=1))
            return 0
        if args.command == "locate":
            return cmd_locate(args, cfg)
        return cmd_simulate(args, cfg)
    except (CliError, ConfigError, SceneError, CampaignError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
