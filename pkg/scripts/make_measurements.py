"""Write a measurement file for ``nlos-locate locate`` from a simulated UE drop.

    python3 scripts/make_measurements.py --seed 3 --sigma-eta 1.0 --sigma-nu 0.5 -o meas.json
    nlos-locate locate meas.json --fusion aoa+pt
"""
import argparse
import json
import math

import numpy as np

from nlos_locate.cloud import substream
from nlos_locate.measure import NoiseConfig, perturb, true_observables
from nlos_locate.sim import SceneConfig, build_scene, drop_ue


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clutter", type=int, default=6)
    ap.add_argument("--ue", type=float, nargs=3, metavar=("X", "Y", "Z"), help="UE position (default: random drop)")
    ap.add_argument("--sigma-eta", type=float, default=1.0, help="AoA error std, degrees")
    ap.add_argument("--sigma-nu", type=float, default=0.5, help="PT/RPT length error std, meters")
    ap.add_argument("-o", "--output", default="meas.json")
    args = ap.parse_args(argv)

    scene = build_scene(SceneConfig(clutter=args.clutter))
    ue = np.array(args.ue) if args.ue else drop_ue(scene, substream(args.seed, 0))
    truth = true_observables(scene, ue)
    noise = NoiseConfig(math.radians(args.sigma_eta), args.sigma_nu, args.sigma_nu)
    ms = perturb(truth, noise, np.random.default_rng(args.seed), pt=True, rpt=True)
    data = {
        "aoa": [{"bs": m.bs_id, "azimuth_deg": math.degrees(m.azimuth), "elevation_deg": math.degrees(m.elevation),
                 "sigma_deg": args.sigma_eta} for m in ms.aoa.values()],
        "pt": [{"bs": m.bs_id, "length_m": m.equivalent_length, "sigma_m": m.sigma_nu} for m in ms.pt.values()],
        "rpt": [{"bs_i": i, "bs_j": j, "delta_m": m.delta_length, "sigma_m": m.sigma_nu}
                for (i, j), m in ms.rpt.items()],
        "ground_truth": ue.tolist(),
    }
    with open(args.output, "w") as fh:
        json.dump(data, fh, indent=1)
    dropped = ", ".join(f"BS {b}: {why}" for b, why in truth.failures.items()) or "none"
    print(f"UE {np.round(ue, 3).tolist()} -> {args.output} (dropped: {dropped})")


if __name__ == "__main__":
    main()
