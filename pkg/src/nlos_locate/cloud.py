"""Monte-Carlo point clouds per base station and their down-selection by PT or RPT."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .measure import (
    AngleMeasurement,
    MeasurementSet,
    PtMeasurement,
    RptMeasurement,
    angles_to_direction,
    sample_pt_lengths,
    sample_rpt_deltas,
)
from .scene import PathPoint, Scene, discretize_bundle, trace_many


class CloudError(RuntimeError):
    pass


class SelectionError(RuntimeError):
    """A PT/RPT target could not be matched to any cloud point."""


@dataclass(frozen=True)
class RaysConfig:
    max_bounces: int = 5
    max_length: float = 100.0  # m
    step: float = 0.10  # m


@dataclass(frozen=True)
class SelectionConfig:
    n_select: int = 2000
    bin_width: float | None = None  # None: max(sigma_nu / 5, step / 2)
    fallback: bool = True
    fallback_bins: int = 3
    max_redraws: int = 10
    order: str = "bins"  # "bins" | "per-ray"
    rpt_topology: str = "all-pairs"  # "all-pairs" | "reference"
    reference_bs: int = 0


@dataclass(frozen=True, eq=False)
class PointCloud:
    bs_id: int
    positions: np.ndarray  # (N, 3)
    lengths: np.ndarray  # (N,)
    ray_index: np.ndarray  # (N,)
    provenance: str = "aoa-only"
    targets: np.ndarray | None = None  # per-point target draw after a selection

    def __len__(self) -> int:
        return len(self.lengths)

    def points(self) -> list[PathPoint]:
        return [PathPoint(p, float(l), self.bs_id, int(r))
                for p, l, r in zip(self.positions, self.lengths, self.ray_index)]

    def take(self, idx, provenance: str | None = None, targets=None) -> "PointCloud":
        idx = np.asarray(idx, dtype=int)
        return PointCloud(self.bs_id, self.positions[idx], self.lengths[idx], self.ray_index[idx],
                          provenance or self.provenance, targets)


def auto_bin_width(sigma_nu: float, step: float) -> float:
    return max(sigma_nu / 5.0, step / 2.0)


def _cloud_from_rays(scene: Scene, bs_id: int, dirs: np.ndarray, rays: RaysConfig,
                     provenance: str) -> PointCloud:
    origin = scene.station(bs_id).position
    bundle = trace_many(scene, np.broadcast_to(origin, dirs.shape), dirs,
                        rays.max_bounces, rays.max_length)
    pos, lengths, ray_index = discretize_bundle(bundle, rays.step)
    if len(lengths) == 0:
        raise CloudError(f"BS {bs_id}: empty point cloud")
    return PointCloud(bs_id, pos, lengths, ray_index, provenance)


def sample_aoa_directions(angle: AngleMeasurement, n_rays: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.normal(0.0, 1.0, size=(n_rays, 2)) * angle.sigma_eta
    return angles_to_direction(angle.azimuth + eps[:, 0], angle.elevation + eps[:, 1])


def generate_aoa_cloud(scene: Scene, bs_id: int, angle: AngleMeasurement, n_rays: int,
                       rays: RaysConfig, rng: np.random.Generator) -> PointCloud:
    """Launch ``n_rays`` rays drawn from the AoA error model and discretize them."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    dirs = sample_aoa_directions(angle, n_rays, rng)
    return _cloud_from_rays(scene, bs_id, dirs, rays, "aoa-only")


def sample_sphere(n: int, rng: np.random.Generator, hemisphere: bool = False) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    if hemisphere:
        d[:, 2] = -np.abs(d[:, 2])
    return d


def generate_isotropic_cloud(scene: Scene, bs_id: int, n_rays: int, rays: RaysConfig,
                             rng: np.random.Generator, hemisphere: bool = False) -> PointCloud:
    """Rays in all directions (or the lower hemisphere for ceiling-mounted BS)."""
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    return _cloud_from_rays(scene, bs_id, sample_sphere(n_rays, rng, hemisphere), rays, "isotropic")


@dataclass
class LengthBins:
    """Fixed-width bins over point lengths; bin ``b`` covers ``[b w, (b + 1) w)``."""

    width: float
    order: np.ndarray  # point indices sorted by bin
    bin_ids: np.ndarray  # bin id of each sorted point
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        uniq = np.unique(self.bin_ids)
        self.edges = np.append(uniq, uniq[-1] + 1) * self.width if uniq.size else np.zeros(0)

    @classmethod
    def build(cls, lengths: np.ndarray, width: float) -> "LengthBins":
        if width <= 0:
            raise ValueError("bin width must be positive")
        ids = np.floor(lengths / width).astype(np.int64)
        order = np.argsort(ids, kind="stable")
        return cls(width, order, ids[order])

    def bounds(self, b):
        lo = np.searchsorted(self.bin_ids, b, side="left")
        hi = np.searchsorted(self.bin_ids, b, side="right")
        return lo, hi

    def members(self, b: int) -> np.ndarray:
        lo, hi = self.bounds(b)
        return self.order[lo:hi]


MISSING = np.iinfo(np.int64).min


def _resolve_bins(draw, counts_of, width: float, centre: float, cfg: SelectionConfig):
    """Route target draws to populated bins following the empty-bin policy.

    ``draw(n)`` returns ``(targets, bins)``; bin ``b`` is centred on
    ``(b + centre) * width``. Without fallback, draws on empty bins are
    abandoned. With fallback, the nearest populated bin within
    ``cfg.fallback_bins`` is used, else the target is redrawn up to
    ``cfg.max_redraws`` times. Abandoned draws are marked ``MISSING``.
    """
    targets, bins = draw(None)
    chosen = np.full(bins.shape, MISSING, dtype=np.int64)
    pending = np.arange(bins.size)
    rounds = cfg.max_redraws + 1 if cfg.fallback else 1
    for attempt in range(rounds):
        if attempt > 0:
            targets[pending], bins[pending] = draw(pending.size)
        b = bins[pending]
        ok = counts_of(b) > 0
        chosen[pending[ok]] = b[ok]
        pending = pending[~ok]
        if cfg.fallback:
            for off in range(1, cfg.fallback_bins + 1):
                if pending.size == 0:
                    break
                b = bins[pending]
                lower_first = targets[pending] / width - b - centre < 0
                near = np.where(lower_first, b - off, b + off)
                ok = counts_of(near) > 0
                chosen[pending[ok]] = near[ok]
                pending, far = pending[~ok], np.where(lower_first, b + off, b - off)[~ok]
                ok = counts_of(far) > 0
                chosen[pending[ok]] = far[ok]
                pending = pending[~ok]
        if pending.size == 0:
            break
    return targets, chosen


def select_by_pt(cloud: PointCloud, pt: PtMeasurement, n_select: int, bin_width: float,
                 rng: np.random.Generator, cfg: SelectionConfig = SelectionConfig()) -> PointCloud:
    """Down-select a cloud to points whose length matches draws from p(L | PT)."""
    if len(cloud) == 0:
        raise SelectionError(f"BS {cloud.bs_id}: empty cloud")
    if cfg.order == "per-ray":
        return _select_per_ray(cloud, pt, n_select, bin_width, rng)
    bins = LengthBins.build(cloud.lengths, bin_width)

    def counts_of(b):
        lo, hi = bins.bounds(b)
        return hi - lo

    def draw(count):
        t = sample_pt_lengths(pt, n_select if count is None else count, rng)
        return t, np.floor(t / bin_width).astype(np.int64)

    targets, chosen = _resolve_bins(draw, counts_of, bin_width, 0.5, cfg)
    keep = chosen != MISSING
    if not np.any(keep):
        raise SelectionError(f"BS {cloud.bs_id}: PT inconsistent with geometry")
    lo, hi = bins.bounds(chosen[keep])
    pick = lo + np.floor(rng.random(lo.size) * (hi - lo)).astype(int)
    idx = bins.order[pick]
    return cloud.take(idx, "aoa+pt", targets[keep])


def _select_per_ray(cloud: PointCloud, pt: PtMeasurement, n_select: int, tol: float,
                    rng: np.random.Generator) -> PointCloud:
    """Alternative order: draw a ray, then a length, keep that ray's nearest point."""
    rays = np.unique(cloud.ray_index)
    order = np.lexsort((cloud.lengths, cloud.ray_index))
    r_sorted = cloud.ray_index[order]
    ray_pick = rays[rng.integers(0, rays.size, size=n_select)]
    targets = sample_pt_lengths(pt, n_select, rng)
    lo = np.searchsorted(r_sorted, ray_pick, side="left")
    hi = np.searchsorted(r_sorted, ray_pick, side="right")
    lengths_sorted = cloud.lengths[order]
    # nearest point on the ray via searchsorted inside each ray block
    key = r_sorted.astype(float) * 1e6 + lengths_sorted
    pos = np.searchsorted(key, ray_pick.astype(float) * 1e6 + targets)
    a = np.clip(pos - 1, lo, hi - 1)
    b = np.clip(pos, lo, hi - 1)
    best = np.where(np.abs(lengths_sorted[a] - targets) <= np.abs(lengths_sorted[b] - targets), a, b)
    ok = np.abs(lengths_sorted[best] - targets) <= tol
    if not np.any(ok):
        raise SelectionError(f"BS {cloud.bs_id}: PT inconsistent with geometry")
    return cloud.take(order[best[ok]], "aoa+pt", targets[ok])


@dataclass
class PairDifferenceTable:
    """Lazily binned length differences between two clouds.

    Lengths are quantized with step ``h = w / 2``; pair ``(a, b)`` belongs to
    bin ``q_a - q_b`` and therefore has ``|(L_a - L_b) - beta h| < h``. A
    target ``t`` is routed to bin ``round(t / h)`` so every selected pair lies
    within ``w`` of its target. Nothing of size ``|P_i| |P_j|`` is materialized.
    """

    width: float
    qa: np.ndarray  # populated quantized length values of cloud i
    ca: np.ndarray  # their counts
    qb: np.ndarray
    cb: np.ndarray
    order_a: np.ndarray
    order_b: np.ndarray
    start_a: np.ndarray
    start_b: np.ndarray

    @classmethod
    def build(cls, lengths_a: np.ndarray, lengths_b: np.ndarray, width: float) -> "PairDifferenceTable":
        if width <= 0:
            raise ValueError("bin width must be positive")
        h = width / 2.0
        parts = []
        for lengths in (lengths_a, lengths_b):
            q = np.floor(lengths / h).astype(np.int64)
            order = np.argsort(q, kind="stable")
            uq, start, counts = np.unique(q[order], return_index=True, return_counts=True)
            parts.append((uq, counts, order, start))
        (qa, ca, oa, sa), (qb, cb, ob, sb) = parts
        return cls(width, qa, ca, qb, cb, oa, ob, sa, sb)

    @property
    def size(self) -> int:
        return int(self.ca.sum() * self.cb.sum())

    def target_bin(self, t):
        return np.rint(np.asarray(t) / (self.width / 2.0)).astype(np.int64)

    def _bin_pairs(self, beta: int):
        """Matching quantized bins (u in a, u - beta in b) and their pair counts."""
        j = np.searchsorted(self.qb, self.qa - beta)
        j = np.minimum(j, self.qb.size - 1)
        hit = self.qb[j] == self.qa - beta
        ia = np.flatnonzero(hit)
        jb = j[hit]
        return ia, jb, self.ca[ia] * self.cb[jb]

    def count(self, beta) -> np.ndarray:
        beta = np.atleast_1d(beta)
        return np.array([self._bin_pairs(int(b))[2].sum() for b in beta], dtype=np.int64)

    def sample(self, beta: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` pairs drawn uniformly from bin ``beta`` (with replacement)."""
        ia, jb, w = self._bin_pairs(beta)
        cum = np.cumsum(w)
        r = np.floor(rng.random(n) * cum[-1]).astype(np.int64)
        k = np.searchsorted(cum, r, side="right")
        a_slot = self.start_a[ia[k]] + np.floor(rng.random(n) * self.ca[ia[k]]).astype(np.int64)
        b_slot = self.start_b[jb[k]] + np.floor(rng.random(n) * self.cb[jb[k]]).astype(np.int64)
        return self.order_a[a_slot], self.order_b[b_slot]

    def entries(self, lengths_a, lengths_b) -> np.ndarray:
        """Materialized difference table; small inputs only (tests, examples)."""
        return np.subtract.outer(lengths_a, lengths_b)


def select_by_rpt(cloud_i: PointCloud, cloud_j: PointCloud, rpt: RptMeasurement, n_select: int,
                  bin_width: float, rng: np.random.Generator,
                  cfg: SelectionConfig = SelectionConfig()) -> tuple[PointCloud, PointCloud]:
    """Select point pairs whose length difference matches draws from p(dL | RPT).

    The pair is canonicalized to ascending BS id internally, so swapping the
    clouds and negating the measurement yields mirrored selections.
    """
    if len(cloud_i) == 0 or len(cloud_j) == 0:
        raise SelectionError(f"pair {rpt.bs_pair}: empty cloud")
    if tuple(rpt.bs_pair) != (cloud_i.bs_id, cloud_j.bs_id):
        raise ValueError(f"RPT pair {rpt.bs_pair} does not match clouds "
                         f"({cloud_i.bs_id}, {cloud_j.bs_id})")
    if cloud_j.bs_id < cloud_i.bs_id:
        out_j, out_i = select_by_rpt(cloud_j, cloud_i, rpt.swapped(), n_select, bin_width, rng, cfg)
        return out_i, out_j
    table = PairDifferenceTable.build(cloud_i.lengths, cloud_j.lengths, bin_width)
    h = bin_width / 2.0
    cache: dict[int, int] = {}

    def counts_of(b):
        uniq, inv = np.unique(b, return_inverse=True)
        for beta in uniq.tolist():
            if beta not in cache:
                cache[beta] = int(table.count(beta)[0])
        return np.array([cache[beta] for beta in uniq.tolist()], dtype=np.int64)[inv]

    def draw(count):
        t = sample_rpt_deltas(rpt, n_select if count is None else count, rng)
        return t, table.target_bin(t)

    targets, chosen = _resolve_bins(draw, counts_of, h, 0.0, cfg)
    keep = np.flatnonzero(chosen != MISSING)
    if keep.size == 0:
        raise SelectionError(f"pair {rpt.bs_pair}: RPT inconsistent with geometry")
    ia = np.empty(keep.size, dtype=np.int64)
    jb = np.empty(keep.size, dtype=np.int64)
    for beta in np.unique(chosen[keep]):
        rows = np.flatnonzero(chosen[keep] == beta)
        ia[rows], jb[rows] = table.sample(int(beta), rows.size, rng)
    t = targets[keep]
    return (cloud_i.take(ia, "aoa+rpt", t), cloud_j.take(jb, "aoa+rpt", -t))


def merge_clouds(parts: list[PointCloud], provenance: str) -> PointCloud:
    bs = parts[0].bs_id
    return PointCloud(
        bs,
        np.concatenate([p.positions for p in parts]),
        np.concatenate([p.lengths for p in parts]),
        np.concatenate([p.ray_index for p in parts]),
        provenance,
        np.concatenate([p.targets for p in parts]) if all(p.targets is not None for p in parts) else None,
    )


def rpt_pairs(bs_ids, topology: str = "all-pairs", reference: int = 0) -> list[tuple[int, int]]:
    ids = sorted(bs_ids)
    if topology == "all-pairs":
        return list(itertools.combinations(ids, 2))
    if topology == "reference":
        if reference not in ids:
            raise ValueError(f"reference BS {reference} not available")
        return [(reference, j) for j in ids if j != reference]
    raise ValueError(f"unknown RPT topology {topology!r}")


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, keys...); order-independent."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, keys)]))


def apply_fusion(clouds: dict[int, PointCloud], measurements: MeasurementSet, fusion: str,
                 cfg: SelectionConfig, step: float, seed: int) -> dict[int, PointCloud]:
    """Down-select AoA clouds with PT or RPT measurements according to ``fusion``."""
    if fusion == "aoa":
        return dict(clouds)
    out = dict(clouds)
    if fusion == "aoa+pt":
        if not measurements.pt:
            raise SelectionError("fusion mode aoa+pt requires PT measurements")
        for bs in sorted(clouds):
            pt = measurements.pt.get(bs)
            if pt is None:
                continue
            w = cfg.bin_width or auto_bin_width(pt.sigma_nu, step)
            out[bs] = select_by_pt(clouds[bs], pt, cfg.n_select, w, substream(seed, bs), cfg)
        return out
    if fusion == "aoa+rpt":
        if not measurements.rpt:
            raise SelectionError("fusion mode aoa+rpt requires RPT measurements")
        parts: dict[int, list[PointCloud]] = {}
        for i, j in rpt_pairs(clouds, cfg.rpt_topology, cfg.reference_bs):
            rpt = measurements.rpt_for(i, j)
            if rpt is None:
                continue
            w = cfg.bin_width or auto_bin_width(rpt.sigma_nu, step)
            try:
                si, sj = select_by_rpt(clouds[i], clouds[j], rpt, cfg.n_select, w,
                                       substream(seed, 1000 + i, j), cfg)
            except SelectionError as exc:
                raise SelectionError(f"pair ({i}, {j}): {exc}") from exc
            parts.setdefault(i, []).append(si)
            parts.setdefault(j, []).append(sj)
        for bs, p in parts.items():
            out[bs] = merge_clouds(p, "aoa+rpt")
        return out
    raise ValueError(f"unknown fusion mode {fusion!r}")


def write_clouds_csv(clouds, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bs_id", "x", "y", "z", "length", "provenance"])
        for c in clouds:
            for p, l in zip(c.positions, c.lengths):
                w.writerow([c.bs_id, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])),
                            repr(float(l)), c.provenance])
