"""3D Gaussian mixtures: EM fitting, BIC model selection, product posterior on a grid."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2 * math.pi)
LOG_FLOOR = -745.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class EmConfig:
    k_max: int = 8
    fixed_k: int | None = None
    max_iters: int = 100
    tol: float = 1e-6  # relative change of the mean log-likelihood
    reg_floor: float | None = None  # eigenvalue floor (m^2); None: (step / 2)^2
    n_init: int = 4
    max_fit_points: int | None = 2000
    bic_patience: int | None = None  # stop the K sweep after this many BIC increases


def _chol_inv(cov: np.ndarray) -> np.ndarray:
    """Inverse Cholesky factors of (K, 3, 3) covariances."""
    return np.linalg.inv(np.linalg.cholesky(cov))


@dataclass(frozen=True, eq=False)
class GaussianMixture3:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, 3)
    covariances: np.ndarray  # (K, 3, 3)
    log_likelihood: float = field(default=float("nan"), compare=False)
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float).reshape(-1, 3)
        cov = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if not (len(w) == len(mu) == len(cov)) or len(w) == 0:
            raise ValueError("inconsistent mixture shapes")
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        linv = _chol_inv(cov)
        logdet = 2.0 * np.sum(np.log(np.diagonal(np.linalg.cholesky(cov), axis1=1, axis2=2)), axis=1)
        object.__setattr__(self, "_linv", linv)
        object.__setattr__(self, "_logc", np.log(w) - 0.5 * (3 * LOG_2PI + logdet))
        lam = np.linalg.eigvalsh(cov)
        object.__setattr__(self, "_lam_min", lam[:, 0])
        object.__setattr__(self, "_lam_max", lam[:, -1])

    @property
    def k(self) -> int:
        return len(self.weights)

    def component_log_pdf(self, x: np.ndarray) -> np.ndarray:
        """(K, N) array of log(w_k N(x; mu_k, S_k)); elementwise arithmetic only."""
        x = np.atleast_2d(x)
        a = self._linv
        mu = self.means
        d0 = x[None, :, 0] - mu[:, 0, None]
        d1 = x[None, :, 1] - mu[:, 1, None]
        d2 = x[None, :, 2] - mu[:, 2, None]
        y0 = a[:, 0, 0, None] * d0
        y1 = a[:, 1, 0, None] * d0 + a[:, 1, 1, None] * d1
        y2 = a[:, 2, 0, None] * d0 + a[:, 2, 1, None] * d1 + a[:, 2, 2, None] * d2
        return self._logc[:, None] - 0.5 * (y0 * y0 + y1 * y1 + y2 * y2)

    def log_pdf(self, x) -> np.ndarray | float:
        """log sum_k w_k N(x; mu_k, S_k) in log-sum-exp form."""
        scalar = np.ndim(x) == 1
        comps = self.component_log_pdf(np.asarray(x, dtype=float))
        top = comps[0].copy()
        for c in comps[1:]:
            np.maximum(top, c, out=top)
        safe = np.where(np.isfinite(top), top, 0.0)
        acc = np.zeros_like(top)
        for c in comps:
            acc += np.exp(c - safe)
        out = safe + np.log(acc)
        return float(out[0]) if scalar else out

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}


def floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clip eigenvalues of symmetric matrices from below (constrained covariance MLE)."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, floor)
    out = np.einsum("...ij,...j,...kj->...ik", v, w, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _points_of(points) -> np.ndarray:
    pts = getattr(points, "positions", points)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def _log_resp(x, weights, means, covs):
    """(K, N) log responsibilities and per-point log-likelihood."""
    logp = GaussianMixture3(weights, means, covs).component_log_pdf(x)
    top = logp.max(axis=0)
    lse = top + np.log(np.exp(logp - top).sum(axis=0))
    return logp - lse, lse


def _m_step(x, resp, floor):
    """M-step from (K, N) responsibilities; drops components that lost all mass."""
    nk = resp.sum(axis=1)
    live = nk > 1e-10 * len(x)
    resp, nk = resp[live], nk[live]
    means = (resp @ x) / nk[:, None]
    d = x[None] - means[:, None, :]
    cov = np.matmul(np.swapaxes(d * resp[:, :, None], 1, 2), d) / nk[:, None, None]
    return nk / len(x), means, floor_eigenvalues(cov, floor)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(x) - 1)
        centres.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centres)


def _single(x: np.ndarray, floor: float) -> GaussianMixture3:
    mu = x.mean(axis=0)
    d = x - mu
    cov = floor_eigenvalues(np.einsum("ni,nj->ij", d, d) / len(x), floor)
    mix = GaussianMixture3(np.ones(1), mu[None], cov[None])
    ll = float(np.mean(mix.log_pdf(x)))
    return GaussianMixture3(mix.weights, mix.means, mix.covariances, ll * len(x), (ll,))


def _em_once(x, k, cfg: EmConfig, floor, rng):
    centres = _kmeanspp(x, k, rng)
    d2 = np.sum((x[:, None, :] - centres[None]) ** 2, axis=2)
    resp = np.zeros((k, len(x)))
    resp[np.argmin(d2, axis=1), np.arange(len(x))] = 1.0
    weights, means, covs = _m_step(x, resp, floor)
    history = []
    for _ in range(cfg.max_iters):
        log_r, lse = _log_resp(x, weights, means, covs)
        ll = float(np.mean(lse))
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < cfg.tol * max(abs(history[-2]), 1e-300):
            break
        weights, means, covs = _m_step(x, np.exp(log_r), floor)
    else:
        _, lse = _log_resp(x, weights, means, covs)
        history.append(float(np.mean(lse)))
    return weights, means, covs, history


def fit_em(points, k: int, cfg: EmConfig = EmConfig(), rng: np.random.Generator | None = None,
           floor: float = 0.0025) -> GaussianMixture3:
    """Fit a K-component mixture by EM, best of ``cfg.n_init`` k-means++ starts.

    Covariance eigenvalues are floored at ``floor`` in every M-step, which
    keeps EM monotone for the constrained likelihood.
    """
    x = _points_of(points)
    if k < 1:
        raise FitError("K must be >= 1")
    if len(x) < k:
        raise FitError(f"need at least K={k} points, got {len(x)}")
    if k == 1:
        return _single(x, floor)
    rng = rng if rng is not None else np.random.default_rng(0)
    best = None
    for _ in range(max(cfg.n_init, 1)):
        w, mu, cov, hist = _em_once(x, k, cfg, floor, rng)
        if best is None or hist[-1] > best[3][-1]:
            best = (w, mu, cov, hist)
    w, mu, cov, hist = best
    return GaussianMixture3(w, mu, cov, hist[-1] * len(x), tuple(hist))


def bic(mix: GaussianMixture3, n: int) -> float:
    params = (mix.k - 1) + 3 * mix.k + 6 * mix.k
    return -2.0 * mix.log_likelihood + params * math.log(n)


def select_k(points, k_max: int, cfg: EmConfig = EmConfig(), rng: np.random.Generator | None = None,
             floor: float = 0.0025) -> tuple[int, GaussianMixture3]:
    """K in 1..k_max minimizing BIC; ties go to the smaller K."""
    if k_max < 1:
        raise FitError("k_max must be >= 1")
    x = _points_of(points)
    if len(x) == 0:
        raise FitError("cannot fit an empty cloud")
    if len(x) < 2:
        return 1, _single(x, floor)
    rng = rng if rng is not None else np.random.default_rng(0)
    best_k, best_mix, best_bic = 0, None, math.inf
    worse = 0
    for k in range(1, min(k_max, len(x)) + 1):
        mix = fit_em(x, k, cfg, rng, floor)
        score = bic(mix, len(x))
        if score < best_bic:
            best_k, best_mix, best_bic = mix.k, mix, score
            worse = 0
        else:
            worse += 1
            if cfg.bic_patience is not None and worse >= cfg.bic_patience:
                break
    return best_k, best_mix


# --- posterior on a grid ---------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]

    @classmethod
    def covering(cls, lo, hi, spacing: float = 0.05) -> "GridSpec":
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        dims = tuple(int(v) for v in np.ceil((hi - lo) / spacing - 1e-9).astype(int) + 1)
        return cls(lo, spacing, dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def centers(self, ijk: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(ijk) * self.spacing

    def unravel(self, linear) -> np.ndarray:
        return np.stack(np.unravel_index(linear, self.dims), axis=-1)


def cell_log_posterior(mixtures, x: np.ndarray, log_floor: float = LOG_FLOOR) -> np.ndarray:
    """Sum over BS of floored mixture log-densities at points ``x``."""
    total = np.zeros(len(x))
    for mix in mixtures:
        total += np.maximum(mix.log_pdf(x), log_floor)
    return total


@dataclass(eq=False)
class PosteriorField:
    grid: GridSpec
    mixtures: tuple
    log_floor: float
    argmax: int  # linear cell index
    max_value: float
    values: np.ndarray | None = None  # full (nx, ny, nz) field when materialized

    @property
    def argmax_center(self) -> np.ndarray:
        return self.grid.centers(self.grid.unravel(self.argmax))

    def values_at(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.atleast_2d(ijk)
        if self.values is not None:
            return self.values[tuple(ijk.T)]
        return cell_log_posterior(self.mixtures, self.grid.centers(ijk), self.log_floor)


def _argmax_lowest(values: np.ndarray, linear: np.ndarray) -> tuple[float, int]:
    top = values.max()
    return float(top), int(linear[values == top].min())


def posterior(mixtures, grid: GridSpec, log_floor: float = LOG_FLOOR,
              chunk: int = 1 << 16) -> PosteriorField:
    """Materialize the full unnormalized log-posterior on ``grid``."""
    mixtures = tuple(mixtures)
    if not mixtures:
        raise ValueError("need at least one mixture")
    out = np.empty(grid.size)
    for start in range(0, grid.size, chunk):
        lin = np.arange(start, min(start + chunk, grid.size))
        out[lin] = cell_log_posterior(mixtures, grid.centers(grid.unravel(lin)), log_floor)
    top, idx = _argmax_lowest(out, np.arange(grid.size))
    return PosteriorField(grid, mixtures, log_floor, idx, top, out.reshape(grid.dims))


def _block_bounds(mixtures, lo: np.ndarray, hi: np.ndarray, log_floor: float) -> np.ndarray:
    """Upper bound of the cell log-posterior over axis-aligned boxes [lo, hi].

    Per component the Mahalanobis distance over the box is bounded below by
    both ``d_euclid / sqrt(lam_max)`` and the centre distance minus the
    box half-diagonal scaled by ``1 / sqrt(lam_min)``.
    """
    centre = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(hi - lo, axis=1)
    total = np.zeros(len(lo))
    for mix in mixtures:
        gap = np.maximum(0.0, np.maximum(lo[:, None, :] - mix.means[None], mix.means[None] - hi[:, None, :]))
        m1 = np.sum(gap * gap, axis=2) / mix._lam_max[None]
        mc = np.sqrt(np.maximum(-2.0 * (mix.component_log_pdf(centre).T - mix._logc[None]), 0.0))
        m2 = np.maximum(mc - radius[:, None] / np.sqrt(mix._lam_min)[None], 0.0) ** 2
        comp = mix._logc[None] - 0.5 * np.maximum(m1, m2)
        top = comp.max(axis=1)
        b = top + np.log(np.exp(comp - top[:, None]).sum(axis=1))
        total += np.maximum(b, log_floor)
    return total


def posterior_argmax(mixtures, grid: GridSpec, log_floor: float = LOG_FLOOR, block: int = 8,
                     batch_cells: int = 1 << 15) -> PosteriorField:
    """Exact grid argmax by branch and bound over cell blocks.

    Returns the same cell as :func:`posterior` (including the lowest-index
    tie rule) without evaluating blocks whose bound is below the incumbent.
    """
    mixtures = tuple(mixtures)
    dims = np.array(grid.dims)
    nb = -(-dims // block)
    bijk = np.stack(np.meshgrid(*[np.arange(n) for n in nb], indexing="ij"), axis=-1).reshape(-1, 3)
    lo_idx = bijk * block
    hi_idx = np.minimum(lo_idx + block, dims) - 1
    bounds = _block_bounds(mixtures, grid.centers(lo_idx), grid.centers(hi_idx), log_floor)
    bounds += 1e-9 * (1.0 + np.abs(bounds))
    order = np.argsort(-bounds, kind="stable")
    best_val, best_idx = -np.inf, -1
    per_block = block ** 3
    step = max(1, batch_cells // per_block)
    pos = 0
    offs = np.stack(np.meshgrid(*[np.arange(block)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    while pos < len(order):
        if bounds[order[pos]] < best_val:
            break
        take = order[pos:pos + step]
        take = take[bounds[take] >= best_val]
        pos += step
        ijk = (lo_idx[take][:, None, :] + offs[None]).reshape(-1, 3)
        ijk = ijk[np.all(ijk < dims, axis=1)]
        vals = cell_log_posterior(mixtures, grid.centers(ijk), log_floor)
        lin = np.ravel_multi_index(tuple(ijk.T), grid.dims)
        v, i = _argmax_lowest(vals, lin)
        if v > best_val or (v == best_val and i < best_idx):
            best_val, best_idx = v, i
    return PosteriorField(grid, mixtures, log_floor, best_idx, best_val, None)


def estimate(field: PosteriorField, refine: bool = False, bounds=None) -> np.ndarray:
    """Argmax cell centre, optionally moved by one quadratic interpolation step."""
    ijk = field.grid.unravel(field.argmax)
    x = field.grid.centers(ijk)
    if not refine:
        return x
    dims = np.array(field.grid.dims)
    offs = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    nb = np.clip(ijk + offs, 0, dims - 1)
    f = field.values_at(nb).reshape(3, 3, 3)
    interior = (ijk > 0) & (ijk < dims - 1)
    c = f[1, 1, 1]
    g = np.array([(f[2, 1, 1] - f[0, 1, 1]) / 2, (f[1, 2, 1] - f[1, 0, 1]) / 2,
                  (f[1, 1, 2] - f[1, 1, 0]) / 2])
    h = np.empty((3, 3))
    h[0, 0] = f[2, 1, 1] - 2 * c + f[0, 1, 1]
    h[1, 1] = f[1, 2, 1] - 2 * c + f[1, 0, 1]
    h[2, 2] = f[1, 1, 2] - 2 * c + f[1, 1, 0]
    h[0, 1] = h[1, 0] = (f[2, 2, 1] - f[2, 0, 1] - f[0, 2, 1] + f[0, 0, 1]) / 4
    h[0, 2] = h[2, 0] = (f[2, 1, 2] - f[2, 1, 0] - f[0, 1, 2] + f[0, 1, 0]) / 4
    h[1, 2] = h[2, 1] = (f[1, 2, 2] - f[1, 2, 0] - f[1, 0, 2] + f[1, 0, 0]) / 4
    g = np.where(interior, g, 0.0)
    h = np.where(np.outer(interior, interior), h, 0.0)
    act = np.flatnonzero(interior)
    delta = np.zeros(3)
    if act.size:
        hs = h[np.ix_(act, act)]
        if np.all(np.isfinite(hs)) and np.all(np.linalg.eigvalsh(hs) < 0):
            delta[act] = -np.linalg.solve(hs, g[act])
        else:
            diag = np.diag(h)[act]
            delta[act] = np.where(diag < 0, -g[act] / np.where(diag < 0, diag, 1.0), 0.0)
    delta = np.clip(np.nan_to_num(delta), -0.5, 0.5)
    x = x + delta * field.grid.spacing
    if bounds is not None:
        x = np.clip(x, bounds[0], bounds[1])
    return x


def write_mixtures_json(mixtures: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump({str(bs): m.to_dict() for bs, m in mixtures.items()}, fh, indent=1)


def write_field_csv(field: PosteriorField, path, decimate: int = 1) -> None:
    if field.values is None:
        raise ValueError("field was not materialized; use posterior()")
    vals = field.values[::decimate, ::decimate, ::decimate]
    idx = np.stack(np.meshgrid(*[np.arange(0, n, decimate) for n in field.grid.dims],
                               indexing="ij"), axis=-1).reshape(-1, 3)
    xyz = field.grid.centers(idx)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "log_posterior"])
        for p, v in zip(xyz, vals.reshape(-1)):
            w.writerow([repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))])
