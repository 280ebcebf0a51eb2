"""Campaign-scale exit criteria on the canonical cluttered room.

Every criterion appends one PASS/FAIL line to the terminal summary. Campaigns
are cached per session so criteria sharing a setting share the trials.
Set ``NLOS_ACCEPT_WORKERS`` to use more processes; results do not depend on it.
"""
import json
import math
import os
import subprocess
import sys
import time
from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import pytest

from conftest import ACCEPTANCE_LINES
from nlos_locate.config import from_dict
from nlos_locate.gmm import EmConfig
from nlos_locate.sim import run_campaign, write_campaign

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]
RUN = from_dict(json.loads((ROOT / "configs" / "acceptance.json").read_text()))
BASE = RUN.to_trial()
N = RUN.n_trials
WORKERS = int(os.environ.get("NLOS_ACCEPT_WORKERS", os.cpu_count() or 1))

ETAS_DEG = (0.25, 0.5, 0.75, 1.0)
NUS = (0.2, 0.3, 0.5, 0.7, 1.0)


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@lru_cache(maxsize=None)
def campaign(fusion="aoa", eta_deg=1.0, nu=0.5, n=N, noiseless=False):
    cfg = replace(BASE, fusion=fusion, sigma_eta=math.radians(eta_deg), sigma_nu_pt=nu, sigma_nu_rpt=nu)
    if noiseless:
        # the 100-trial sanity run can afford the library's full EM budget
        cfg = replace(cfg, sigma_eta=0.0, sigma_nu_pt=0.0, sigma_nu_rpt=0.0, gmm=EmConfig())
    return run_campaign(cfg, n, WORKERS)


def p90(res):
    return res.cdf.percentile(0.9)


def fmt(xs):
    return "[" + ", ".join(f"{x:.3f}" for x in xs) + "]"


def test_1_noiseless_sanity():
    t0 = time.perf_counter()
    res = campaign(noiseless=True, n=100)
    wall = time.perf_counter() - t0
    frac = res.cdf(2 * 0.05)
    # runtime target is stated for 8 cores; scale this machine's wall time accordingly
    eight_core = wall * min(WORKERS, os.cpu_count() or 1) / 8
    ok = record(1, frac >= 0.95 and eight_core < 300,
                f"noiseless: {frac:.1%} of {len(res.cdf)} trials within 0.10 m (need >= 95%); "
                f"wall {wall:.0f} s on {WORKERS} worker(s), ~{eight_core:.0f} s at 8 cores")
    assert ok


def test_2_aoa_noise_monotonicity():
    q = [p90(campaign("aoa", e)) for e in ETAS_DEG]
    increasing = all(b > a for a, b in zip(q, q[1:]))
    ok = record(2, increasing and 1.5 * q[0] < q[-1],
                f"aoa p90 over sigma_eta {ETAS_DEG} deg = {fmt(q)} m; strictly increasing={increasing}, "
                f"p90(1deg)/p90(0.25deg) = {q[-1] / q[0]:.2f} (need > 1.5)")
    assert ok


def test_3_pt_fusion_gain():
    a, p = p90(campaign("aoa")), p90(campaign("aoa+pt"))
    ok = record(3, p <= 0.6 * a, f"p90 aoa+pt {p:.3f} m vs aoa {a:.3f} m, ratio {p / a:.2f} (need <= 0.60)")
    assert ok


def test_4_weak_pt_noise_sensitivity():
    q = [p90(campaign("aoa+pt", 1.0, nu)) for nu in NUS]
    eta = [p90(campaign("aoa", e)) for e in ETAS_DEG]
    spread, eta_spread = max(q) - min(q), max(eta) - min(eta)
    inversions = sum(b < a for a, b in zip(q, q[1:]))
    ok = record(4, spread < 0.5 * eta_spread and inversions <= 1,
                f"aoa+pt p90 over sigma_nu {NUS} m = {fmt(q)}; spread {spread:.3f} vs half AoA spread "
                f"{0.5 * eta_spread:.3f}; adjacent inversions {inversions} (max 1)")
    assert ok


def test_5_rpt_ordering():
    a, p, r = p90(campaign("aoa")), p90(campaign("aoa+pt")), p90(campaign("aoa+rpt"))
    ok = record(5, 1.05 * p <= r and 1.05 * r <= a,
                f"p90 aoa+pt {p:.3f} <= aoa+rpt {r:.3f} <= aoa {a:.3f} m with 5% margins "
                f"(rpt/pt {r / p:.2f}, aoa/rpt {a / r:.2f})")
    assert ok


def test_6_property_suites():
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           "-m", "property_suite", str(ROOT / "tests")],
                          capture_output=True, text=True, cwd=ROOT)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = record(6, proc.returncode == 0, f"property suites: {tail}")
    assert ok, proc.stdout[-3000:]


def test_7_determinism_across_workers(tmp_path):
    cfg = replace(BASE, fusion="aoa+rpt")
    outs = []
    for workers in (1, 3):
        d = tmp_path / f"w{workers}"
        write_campaign(run_campaign(cfg, 12, workers), d)
        outs.append(d)
    rerun = tmp_path / "again"
    write_campaign(run_campaign(cfg, 12, 2), rerun)
    same = all((outs[0] / f).read_bytes() == (d / f).read_bytes()
               for f in ("cdf.csv", "trials.csv") for d in (outs[1], rerun))
    ok = record(7, same, "cdf.csv and trials.csv byte-identical for workers 1, 3 and a 2-worker re-run")
    assert ok


def test_campaign_smoke_statistics():
    """Failure rate and median dominance on the shared aoa / aoa+pt campaigns."""
    a, p = campaign("aoa"), campaign("aoa+pt")
    fail = len(p.failed) / len(p.trials)
    med_a, med_p = a.cdf.percentile(0.5), p.cdf.percentile(0.5)
    record("extra", fail < 0.05 and med_p <= med_a,
           f"aoa+pt failed fraction {fail:.1%} (need < 5%); median aoa+pt {med_p:.3f} <= aoa {med_a:.3f} m")
    assert fail < 0.05
    assert med_p <= med_a
