"""Experiment harness: random UE drops, end-to-end trials, error CDFs and sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .cloud import (
    CloudError,
    RaysConfig,
    SelectionConfig,
    SelectionError,
    apply_fusion,
    generate_aoa_cloud,
    rpt_pairs,
    substream,
)
from .gmm import EmConfig, FitError, GridSpec, estimate, fit_em, posterior, posterior_argmax, select_k
from .measure import NoiseConfig, perturb, true_observables
from .scene import Scene, crossing_count, distance_to_surfaces, generate_scene, read_scene

log = logging.getLogger(__name__)

FUSION_MODES = ("aoa", "aoa+pt", "aoa+rpt")
SWEEP_AXES = ("sigma_eta", "sigma_nu_pt", "sigma_nu_rpt", "fusion")

# per-trial stream ids
_DROP, _AOA, _PT, _RPT, _CLOUD, _SELECT, _FIT = range(7)


class CampaignError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    path: str | None = None
    width: float = 8.0
    length: float = 18.0
    height: float = 2.5
    clutter: int = 6
    clutter_seed: int = 0


@dataclass(frozen=True)
class GridConfig:
    spacing: float = 0.05
    refine: bool = True
    log_floor: float = -745.0
    block: int = 8


@dataclass(frozen=True)
class TrialConfig:
    scene: SceneConfig = SceneConfig()
    sigma_eta: float = math.radians(1.0)  # rad
    sigma_nu_pt: float = 0.5  # m
    sigma_nu_rpt: float = 0.5  # m
    fusion: str = "aoa"
    n_rays: int = 500
    rays: RaysConfig = RaysConfig()
    selection: SelectionConfig = SelectionConfig()
    gmm: EmConfig = EmConfig()
    grid: GridConfig = GridConfig()
    seed: int = 0
    ue_margin: float = 0.1  # m
    truth_max_bounces: int = 2

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if min(self.sigma_eta, self.sigma_nu_pt, self.sigma_nu_rpt) < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.n_rays < 1:
            raise ValueError("n_rays must be >= 1")
        if self.rays.step <= 0 or self.rays.max_length <= 0 or self.rays.max_bounces < 0:
            raise ValueError("rays: step and max_length must be positive, max_bounces >= 0")
        if self.selection.n_select < 1:
            raise ValueError("selection.n_select must be >= 1")
        if self.gmm.k_max < 1 or (self.gmm.fixed_k is not None and self.gmm.fixed_k < 1):
            raise ValueError("gmm: K must be >= 1")
        if self.grid.spacing <= 0:
            raise ValueError("grid.spacing must be positive")


@dataclass(frozen=True)
class BsDiagnostics:
    cloud_size: int
    fit_size: int
    k: int
    log_likelihood: float


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    status: str  # "ok" | "failed"
    ue_true: np.ndarray
    ue_est: np.ndarray | None = None
    epsilon: float = float("nan")
    reason: str = ""
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def same_outcome(self, other: "TrialResult") -> bool:
        """Equality of everything but timings, bit for bit."""
        def arr(a):
            return None if a is None else np.asarray(a).tobytes()
        return (self.trial_index == other.trial_index and self.status == other.status
                and arr(self.ue_true) == arr(other.ue_true) and arr(self.ue_est) == arr(other.ue_est)
                and np.asarray(self.epsilon).tobytes() == np.asarray(other.epsilon).tobytes()
                and self.reason == other.reason and self.diagnostics == other.diagnostics)


@dataclass(frozen=True)
class ErrorCdf:
    samples: np.ndarray  # sorted

    @classmethod
    def from_errors(cls, errors) -> "ErrorCdf":
        return cls(np.sort(np.asarray(errors, dtype=float)))

    def __len__(self) -> int:
        return len(self.samples)

    def __call__(self, e) -> np.ndarray | float:
        """Fraction of samples <= e."""
        v = np.searchsorted(self.samples, e, side="right") / len(self.samples)
        return float(v) if np.ndim(v) == 0 else v

    def percentile(self, q: float) -> float:
        """The ceil(q N)-th order statistic, q in (0, 1]."""
        if not 0 < q <= 1:
            raise ValueError("q must be in (0, 1]")
        k = max(1, math.ceil(q * len(self.samples) - 1e-12))
        return float(self.samples[k - 1])


@dataclass
class CampaignResult:
    config: TrialConfig
    trials: list[TrialResult]
    wall_time: float = 0.0

    @property
    def cdf(self) -> ErrorCdf:
        return ErrorCdf.from_errors([t.epsilon for t in self.trials if t.ok])

    @property
    def failed(self) -> list[TrialResult]:
        return [t for t in self.trials if not t.ok]


MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trial_seed(campaign_seed: int, trial_index: int) -> int:
    return splitmix64((campaign_seed & MASK64) ^ splitmix64(trial_index))


@lru_cache(maxsize=8)
def build_scene(cfg: SceneConfig) -> Scene:
    if cfg.path:
        return read_scene(cfg.path)
    return generate_scene(cfg.width, cfg.length, cfg.height, cfg.clutter, cfg.clutter_seed)


def drop_ue(scene: Scene, rng: np.random.Generator, margin: float = 0.1, max_tries: int = 1000) -> np.ndarray:
    """Uniform point in free space at least ``margin`` from every surface.

    Clutter interiors are rejected by ray-crossing parity relative to a
    free reference point near the bounding-box corner.
    """
    lo, hi = scene.bbox
    ref = crossing_count(scene, lo + margin)[0] % 2
    for _ in range(max_tries):
        p = rng.uniform(lo + margin, hi - margin)
        if distance_to_surfaces(scene, p)[0] < margin:
            continue
        if crossing_count(scene, p)[0] % 2 != ref:
            continue
        return p
    raise CampaignError("could not place a UE in free space")


def fusion_flags(fusion: str) -> tuple[bool, bool]:
    return fusion == "aoa+pt", fusion == "aoa+rpt"


def reg_floor(cfg: TrialConfig) -> float:
    return cfg.gmm.reg_floor if cfg.gmm.reg_floor is not None else (cfg.rays.step / 2) ** 2


def fit_cloud(cloud, cfg: EmConfig, floor: float, rng: np.random.Generator):
    """Subsample to ``max_fit_points`` and fit (fixed K or BIC selection)."""
    pts = cloud.positions
    if cfg.max_fit_points and len(pts) > cfg.max_fit_points:
        pts = pts[np.sort(rng.choice(len(pts), cfg.max_fit_points, replace=False))]
    if cfg.fixed_k is not None:
        k = min(cfg.fixed_k, len(pts))
        return fit_em(pts, k, cfg, rng, floor), len(pts)
    _, mix = select_k(pts, cfg.k_max, cfg, rng, floor)
    return mix, len(pts)


def localize(scene: Scene, measurements, cfg: TrialConfig, seed: int, full_field: bool = False):
    """Clouds -> fusion -> per-BS fits -> posterior -> estimate.

    Returns ``(estimate, field, clouds, fused, mixtures, diagnostics)``.
    """
    ids = measurements.bs_ids
    clouds = {bs: generate_aoa_cloud(scene, bs, measurements.aoa[bs], cfg.n_rays, cfg.rays,
                                     substream(seed, _CLOUD, bs)) for bs in ids}
    fused = apply_fusion(clouds, measurements, cfg.fusion, cfg.selection, cfg.rays.step,
                         splitmix64(seed ^ _SELECT))
    floor = reg_floor(cfg)
    mixtures, diag = {}, {}
    for bs in ids:
        mix, n_fit = fit_cloud(fused[bs], cfg.gmm, floor, substream(seed, _FIT, bs))
        mixtures[bs] = mix
        diag[bs] = BsDiagnostics(len(fused[bs]), n_fit, mix.k, float(mix.log_likelihood))
    lo, hi = scene.bbox
    grid = GridSpec.covering(lo, hi, cfg.grid.spacing)
    mix_seq = [mixtures[bs] for bs in ids]
    if full_field:
        fld = posterior(mix_seq, grid, cfg.grid.log_floor)
    else:
        fld = posterior_argmax(mix_seq, grid, cfg.grid.log_floor, cfg.grid.block)
    x_hat = estimate(fld, cfg.grid.refine, (lo, hi))
    return x_hat, fld, clouds, fused, mixtures, diag


def run_trial(cfg: TrialConfig, trial_index: int, scene: Scene | None = None) -> TrialResult:
    """One UE drop, measured and localized; deterministic in (cfg.seed, trial_index)."""
    scene = scene if scene is not None else build_scene(cfg.scene)
    seed = trial_seed(cfg.seed, trial_index)
    timings = {}
    t0 = time.perf_counter()
    ue = drop_ue(scene, substream(seed, _DROP), cfg.ue_margin)
    truth = true_observables(scene, ue, cfg.truth_max_bounces)
    for bs, why in truth.failures.items():
        log.info("trial %d: BS %d dropped (%s)", trial_index, bs, why)
    timings["truth"] = time.perf_counter() - t0
    if len(truth.paths) < 2:
        return TrialResult(trial_index, "failed", ue, reason=f"only {len(truth.paths)} usable BS",
                           timings=timings)
    use_pt, use_rpt = fusion_flags(cfg.fusion)
    pairs = rpt_pairs(truth.paths, cfg.selection.rpt_topology, cfg.selection.reference_bs) if use_rpt else None
    noise = NoiseConfig(cfg.sigma_eta, cfg.sigma_nu_pt, cfg.sigma_nu_rpt)
    rngs = {"aoa": substream(seed, _AOA), "pt": substream(seed, _PT), "rpt": substream(seed, _RPT)}
    meas = perturb(truth, noise, rngs, pt=use_pt, rpt=use_rpt, rpt_pairs=pairs)
    t1 = time.perf_counter()
    try:
        x_hat, _, _, _, _, diag = localize(scene, meas, cfg, seed)
    except (SelectionError, CloudError, FitError) as exc:
        return TrialResult(trial_index, "failed", ue, reason=str(exc), timings=timings)
    timings["localize"] = time.perf_counter() - t1
    eps = float(np.linalg.norm(x_hat - ue))
    return TrialResult(trial_index, "ok", ue, x_hat, eps, "",
                       {bs: asdict(d) for bs, d in diag.items()}, timings)


def _run_chunk(args):
    cfg, indices = args
    return [run_trial(cfg, i) for i in indices]


def run_campaign(cfg: TrialConfig, n_trials: int, workers: int = 1) -> CampaignResult:
    """Run ``n_trials`` independent trials; output is independent of ``workers``."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    t0 = time.perf_counter()
    if workers <= 1:
        trials = [run_trial(cfg, i) for i in range(n_trials)]
    else:
        chunks = [(cfg, list(range(k, n_trials, workers))) for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trials = [t for part in pool.map(_run_chunk, chunks) for t in part]
    trials.sort(key=lambda t: t.trial_index)
    result = CampaignResult(cfg, trials, time.perf_counter() - t0)
    if not any(t.ok for t in trials):
        raise CampaignError(f"all {n_trials} trials failed")
    return result


def with_axis(cfg: TrialConfig, axis: str, value) -> TrialConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    return replace(cfg, **{axis: value})


def sweep(cfg: TrialConfig, axis: str, values, n_trials: int, workers: int = 1) -> dict:
    """One campaign per value, all sharing the base seed."""
    return {v: run_campaign(with_axis(cfg, axis, v), n_trials, workers) for v in values}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_campaign(result: CampaignResult, out_dir, suffix: str = "", echo: dict | None = None) -> dict:
    """Write cdf/trials CSVs and summary JSON; returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    cdf = result.cdf
    with open(os.path.join(out_dir, f"cdf{suffix}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["error_m", "cdf"])
        n = len(cdf)
        for k, e in enumerate(cdf.samples, start=1):
            w.writerow([_fmt(e), _fmt(k / n)])
    with open(os.path.join(out_dir, f"trials{suffix}.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial_index", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z",
                    "epsilon_m", "status"])
        for t in result.trials:
            est = t.ue_est if t.ue_est is not None else [float("nan")] * 3
            w.writerow([t.trial_index, *map(_fmt, t.ue_true), *map(_fmt, est), _fmt(t.epsilon),
                        t.status if t.ok else f"failed: {t.reason}"])
    summary = {
        "n_trials": len(result.trials),
        "n_ok": len(cdf),
        "n_failed": len(result.failed),
        "percentiles_m": {str(q): cdf.percentile(q / 100) for q in (50, 90, 95)} if len(cdf) else {},
        "wall_time_s": result.wall_time,
        "config": echo if echo is not None else config_to_dict(result.config),
    }
    with open(os.path.join(out_dir, f"summary{suffix}.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    return summary


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
