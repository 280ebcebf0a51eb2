"""Error-CDF experiments on the canonical cluttered room.

    python3 scripts/reproduce_trends.py --experiment all --n-trials 300 --out out/trends

Experiments:
  aoa-noise  sigma_eta in {0.25, 0.5, 0.75, 1} deg, AoA only and AoA + PT (0.5 m)
  pt-noise   sigma_nu_pt in {0.2, 0.3, 0.5, 0.7, 1.0} m at sigma_eta = 1 deg
  rpt-noise  sigma_nu_rpt in {0.2, 0.3, 0.5, 0.7, 1.0} m at sigma_eta = 1 deg, with AoA-only
             and AoA + PT (0.5 m) reference curves

Each campaign writes cdf/trials/summary files under OUT/<experiment>/ and a
percentile table is printed at the end.
"""
import argparse
import json
import math
from dataclasses import replace
from pathlib import Path

from nlos_locate.config import from_dict
from nlos_locate.sim import run_campaign, write_campaign

ROOT = Path(__file__).resolve().parents[1]
ETAS_DEG = (0.25, 0.5, 0.75, 1.0)
NUS = (0.2, 0.3, 0.5, 0.7, 1.0)


def campaigns(experiment):
    """(label, overrides) pairs for one experiment."""
    if experiment == "aoa-noise":
        for fusion in ("aoa", "aoa+pt"):
            for e in ETAS_DEG:
                yield f"{fusion}_eta{e:g}deg", dict(fusion=fusion, sigma_eta=math.radians(e))
    elif experiment == "pt-noise":
        for nu in NUS:
            yield f"aoa+pt_nu{nu:g}m", dict(fusion="aoa+pt", sigma_nu_pt=nu)
    elif experiment == "rpt-noise":
        yield "aoa", dict(fusion="aoa")
        yield "aoa+pt_nu0.5m", dict(fusion="aoa+pt", sigma_nu_pt=0.5)
        for nu in NUS:
            yield f"aoa+rpt_nu{nu:g}m", dict(fusion="aoa+rpt", sigma_nu_rpt=nu)
    else:
        raise ValueError(experiment)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--experiment", choices=["aoa-noise", "pt-noise", "rpt-noise", "all"], default="all")
    ap.add_argument("--config", default=str(ROOT / "configs" / "acceptance.json"))
    ap.add_argument("--n-trials", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="out/trends")
    args = ap.parse_args(argv)

    run = from_dict(json.loads(Path(args.config).read_text()))
    base = run.to_trial()
    n = args.n_trials or run.n_trials
    names = ["aoa-noise", "pt-noise", "rpt-noise"] if args.experiment == "all" else [args.experiment]
    rows = []
    for name in names:
        for label, over in campaigns(name):
            res = run_campaign(replace(base, **over), n, args.workers)
            s = write_campaign(res, Path(args.out) / name, f"_{label}")
            pct = s["percentiles_m"]
            rows.append((name, label, pct["50"], pct["90"], s["n_failed"]))
            print(f"{name:10s} {label:22s} p50={pct['50']:.3f} p90={pct['90']:.3f} "
                  f"failed={s['n_failed']}/{s['n_trials']}", flush=True)
    print("\nexperiment  campaign                p50 [m]  p90 [m]  failed")
    for name, label, a, b, f in rows:
        print(f"{name:10s}  {label:22s} {a:7.3f}  {b:7.3f}  {f:6d}")


if __name__ == "__main__":
    main()
