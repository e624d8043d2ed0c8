"""Exact discretised densities for d <= 2: closed-form merge targets, sampling-free
mirror descent, and grid divergences used for verification."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateTargetError, DimensionError, UnsupportedModeError

MASS_FLOOR = 1e-12
DEFAULT_1D = ([(-5.0, 5.0)], (201,))
DEFAULT_2D = ([(-4.0, 4.0), (-4.0, 4.0)], (101, 101))


@dataclass
class GridDensity:
    """Piecewise-constant density on a regular box.

    ``density`` holds values per cell so that ``density.sum() * cell_volume == 1``.
    """

    bounds: tuple[tuple[float, float], ...]
    resolution: tuple[int, ...]
    density: np.ndarray
    bandwidth: float | None = None

    def __post_init__(self):
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        self.resolution = tuple(int(r) for r in self.resolution)
        self.density = np.asarray(self.density, dtype=float).reshape(self.resolution)
        if len(self.bounds) != len(self.resolution):
            raise DimensionError("bounds and resolution disagree on dimension")
        if (self.density < 0).any():
            raise ValueError("grid densities must be nonnegative")

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def widths(self) -> np.ndarray:
        return np.array([(hi - lo) / r for (lo, hi), r in zip(self.bounds, self.resolution)])

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.cell_volume

    def axes(self) -> list[np.ndarray]:
        return [lo + (np.arange(r) + 0.5) * w
                for (lo, _), r, w in zip(self.bounds, self.resolution, self.widths)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def total_mass(self) -> float:
        return float(self.masses.sum())

    def normalized(self) -> "GridDensity":
        z = self.total_mass()
        if not z > 0:
            raise DegenerateTargetError("grid density has zero total mass")
        return replace(self, density=self.density / z)

    def mean(self) -> np.ndarray:
        m = self.masses.ravel()
        return m @ self.points() / m.sum()

    def same_grid(self, other: "GridDensity") -> bool:
        return self.bounds == other.bounds and self.resolution == other.resolution

    def with_density(self, density) -> "GridDensity":
        return replace(self, density=np.asarray(density, dtype=float).reshape(self.resolution))

    def expectation(self, values: np.ndarray) -> float:
        return float((self.masses * np.asarray(values).reshape(self.resolution)).sum())

    # -- CSV ------------------------------------------------------------------

    def to_csv(self, path) -> None:
        meta = {"bounds": self.bounds, "resolution": self.resolution, "bandwidth": self.bandwidth}
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(meta) + "\n")
            w = csv.writer(fh)
            w.writerow([f"x_{j}" for j in range(self.dim)] + ["mass"])
            for pt, m in zip(self.points(), self.masses.ravel()):
                w.writerow([repr(float(v)) for v in pt] + [repr(float(m))])

    @classmethod
    def from_csv(cls, path) -> "GridDensity":
        with open(path) as fh:
            meta = json.loads(fh.readline()[1:])
            rows = list(csv.reader(fh))[1:]
        masses = np.array([float(r[-1]) for r in rows])
        g = cls(meta["bounds"], meta["resolution"], np.zeros(meta["resolution"]), meta["bandwidth"])
        return g.with_density(masses.reshape(g.resolution) / g.cell_volume)


def empty_grid(bounds, resolution) -> GridDensity:
    return GridDensity(bounds, resolution, np.zeros(tuple(resolution)))


def default_grid(dim: int):
    if dim == 1:
        return DEFAULT_1D
    if dim == 2:
        return DEFAULT_2D
    raise UnsupportedModeError(f"grid oracle supports d <= 2, got d={dim}")


def scott_bandwidth(samples: np.ndarray) -> float:
    n, d = samples.shape
    spread = float(np.mean(np.std(samples, axis=0, ddof=1))) if n > 1 else 1.0
    return spread * n ** (-1.0 / (d + 4))


def smooth(grid: GridDensity, bandwidth: float) -> GridDensity:
    """Convolve with an isotropic Gaussian kernel and renormalise."""
    if bandwidth <= 0:
        return grid
    dens = gaussian_filter(grid.density, sigma=bandwidth / grid.widths, mode="constant",
                           truncate=5.0)
    return replace(grid, density=dens, bandwidth=bandwidth).normalized()


def density_from_samples(samples, bounds=None, resolution=None,
                         bandwidth: float | str = "scott") -> GridDensity:
    """Gaussian-smoothed histogram of ``samples`` (points outside the box are dropped).

    ``bandwidth=0`` gives the plain normalised histogram.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if samples.shape[0] == 0:
        raise ValueError("density_from_samples needs at least one sample")
    if bounds is None:
        bounds, resolution = default_grid(samples.shape[1])
    if len(bounds) != samples.shape[1]:
        raise DimensionError("sample dimension does not match grid bounds")
    if bandwidth == "scott":
        bandwidth = scott_bandwidth(samples)
    if not bandwidth >= 0:
        raise ValueError("bandwidth must be non-negative")
    hist, _ = np.histogramdd(samples, bins=resolution, range=bounds)
    grid = GridDensity(bounds, resolution, hist, bandwidth)
    if hist.sum() == 0:
        raise ValueError("no samples fall inside the grid bounds")
    if bandwidth == 0:
        return grid.normalized()
    dens = gaussian_filter(hist, sigma=bandwidth / grid.widths, mode="constant", truncate=5.0)
    return replace(grid, density=dens).normalized()


def sample_kl(samples, reference: GridDensity, bandwidth: float | str = "scott") -> float:
    """grid_kl(KDE(samples) || reference), smoothing the reference with the same kernel.

    Smoothing both sides removes the kernel's variance inflation from the
    comparison, so a perfect sampler scores close to zero.
    """
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    if bandwidth == "scott":
        bandwidth = scott_bandwidth(samples)
    p = density_from_samples(samples, reference.bounds, reference.resolution, bandwidth)
    return grid_kl(p, smooth(reference, bandwidth))


def analytic_grid(logpdf: Callable[[np.ndarray], np.ndarray], bounds=None, resolution=None,
                  dim: int | None = None) -> GridDensity:
    """Evaluate a density at cell centres and renormalise on the box."""
    if bounds is None:
        bounds, resolution = default_grid(dim)
    g = empty_grid(bounds, resolution)
    lp = np.asarray(logpdf(g.points()), dtype=float).reshape(g.resolution)
    return g.with_density(np.exp(lp - lp.max())).normalized()


def _check(p: GridDensity, q: GridDensity):
    if not p.same_grid(q):
        raise DimensionError("grid densities live on different grids")


def grid_kl(p: GridDensity, q: GridDensity, floor: float = MASS_FLOOR) -> float:
    """KL(p || q) as a Riemann sum over cells; q's masses are floored."""
    _check(p, q)
    mp = p.masses.ravel() / p.total_mass()
    mq = np.maximum(q.masses.ravel() / q.total_mass(), floor)
    nz = mp > 0
    return max(0.0, float(np.sum(mp[nz] * (np.log(mp[nz]) - np.log(mq[nz])))))


def grid_w1_1d(p: GridDensity, q: GridDensity) -> float:
    """W1 in 1D as the L1 distance between CDFs."""
    _check(p, q)
    if p.dim != 1:
        raise UnsupportedModeError("grid W1 is implemented for d = 1 only")
    fp = np.cumsum(p.masses) / p.total_mass()
    fq = np.cumsum(q.masses) / q.total_mass()
    return float(np.abs(fp - fq).sum() * p.widths[0])


def sup_norm(p: GridDensity, q: GridDensity) -> float:
    _check(p, q)
    return float(np.abs(p.density - q.density).max())


# -- merge targets -------------------------------------------------------------

def _log_masses(g: GridDensity) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(g.masses / g.total_mass())


def product_target(grids: Sequence[GridDensity], alphas, reward: np.ndarray | None = None) -> GridDensity:
    """Normalised prod_i p_i^(alpha_i / sum alpha) * exp(f / sum alpha)."""
    alphas = np.asarray(alphas, float)
    w = alphas / alphas.sum()
    logp = sum(wi * _log_masses(g) for wi, g in zip(w, grids))
    if reward is not None:
        logp = logp + np.asarray(reward).reshape(logp.shape) / alphas.sum()
    if not np.isfinite(logp).any():
        raise DegenerateTargetError("intersection target vanishes: priors have disjoint support")
    logp = np.where(np.isfinite(logp), logp, -np.inf)
    mass = np.exp(logp - logsumexp(logp))
    return grids[0].with_density(mass / grids[0].cell_volume)


def mixture_target(grids: Sequence[GridDensity], alphas) -> GridDensity:
    alphas = np.asarray(alphas, float)
    dens = sum(a * g.normalized().density for a, g in zip(alphas, grids)) / alphas.sum()
    return grids[0].with_density(dens)


def w1_barycenter_1d(grids: Sequence[GridDensity], alphas) -> GridDensity:
    """argmin_p sum_i alpha_i W1(p, p_i) in 1D.

    Since W1 = integral |F_p - F_i|, the minimiser's CDF is the pointwise
    weighted median of the prior CDFs.  Where the median is not unique
    (weight exactly split) the midpoint of the median interval is taken.
    """
    if grids[0].dim != 1:
        raise UnsupportedModeError("W1 barycenter target is available for d = 1 only")
    alphas = np.asarray(alphas, float)
    cdfs = np.stack([np.cumsum(g.masses) / g.total_mass() for g in grids])  # (n, cells)
    order = np.argsort(cdfs, axis=0, kind="stable")
    vals = np.take_along_axis(cdfs, order, axis=0)
    cw = np.cumsum(alphas[order], axis=0) / alphas.sum()
    tol = 1e-12
    lower_idx = np.argmax(cw >= 0.5 - tol, axis=0)
    upper_idx = np.argmax(cw > 0.5 + tol, axis=0)
    cols = np.arange(cdfs.shape[1])
    lower = vals[lower_idx, cols]
    upper = vals[upper_idx, cols]
    tie = np.abs(cw[lower_idx, cols] - 0.5) <= tol
    med = np.where(tie, 0.5 * (lower + upper), lower)
    med = np.maximum.accumulate(np.clip(med, 0.0, 1.0))
    mass = np.diff(np.concatenate([[0.0], med]))
    return grids[0].with_density(mass / grids[0].cell_volume).normalized()


def quantile_average_1d(grids: Sequence[GridDensity], alphas, levels: int = 20001) -> GridDensity:
    """W2 barycenter in 1D (alpha-weighted average of quantile functions)."""
    g0 = grids[0]
    alphas = np.asarray(alphas, float) / np.sum(alphas)
    u = (np.arange(levels) + 0.5) / levels
    edges = np.linspace(g0.bounds[0][0], g0.bounds[0][1], g0.resolution[0] + 1)
    qs = []
    for g in grids:
        cdf = np.concatenate([[0.0], np.cumsum(g.masses) / g.total_mass()])
        qs.append(np.interp(u, cdf, edges))
    qbar = sum(a * q for a, q in zip(alphas, qs))
    hist, _ = np.histogram(qbar, bins=edges)
    return g0.with_density(hist / (levels * g0.cell_volume))


def closed_form_target(divergences: Sequence[str], grids: Sequence[GridDensity], alphas,
                       reward: np.ndarray | None = None) -> GridDensity:
    """Analytic optimum of the merge objective for homogeneous divergences."""
    kinds = set(divergences)
    if len(kinds) != 1 or len(divergences) != len(grids):
        raise UnsupportedModeError("closed-form targets need one homogeneous divergence per prior")
    kind = kinds.pop()
    if kind == "forward-kl":
        return product_target(grids, alphas, reward)
    if reward is not None:
        raise UnsupportedModeError(f"no closed form for reward-guided {kind}")
    if kind == "reverse-kl":
        return mixture_target(grids, alphas)
    if kind == "w1":
        return w1_barycenter_1d(grids, alphas)
    raise ConfigError(f"unknown divergence {kind!r}")


# -- exact mirror descent ------------------------------------------------------

def divergence(kind: str, p: GridDensity, q: GridDensity) -> float:
    """D(p || q) for the three supported divergence tags."""
    if kind == "forward-kl":
        return grid_kl(p, q)
    if kind == "reverse-kl":
        return grid_kl(q, p)
    if kind == "w1":
        return grid_w1_1d(p, q)
    raise ConfigError(f"unknown divergence {kind!r}")


def first_variation(kind: str, p: GridDensity, q: GridDensity, floor: float = MASS_FLOOR) -> np.ndarray:
    """delta/delta p of D(p || q), evaluated per cell."""
    mp = np.maximum(p.masses / p.total_mass(), floor)
    mq = np.maximum(q.masses / q.total_mass(), floor)
    if kind == "forward-kl":
        return np.log(mp / mq) + 1.0
    if kind == "reverse-kl":
        return -mq / mp
    if kind == "w1":
        if p.dim != 1:
            raise UnsupportedModeError("grid W1 first variation is available for d = 1 only")
        # Kantorovich potential: phi' = -sign(F_p - F_q), integrated from the left edge
        fp = np.cumsum(p.masses) / p.total_mass()
        fq = np.cumsum(q.masses) / q.total_mass()
        slope = -np.sign(fp - fq)
        w = p.widths[0]
        phi = np.concatenate([[0.0], np.cumsum(slope[:-1])]) * w + 0.5 * w * slope
        return phi
    raise ConfigError(f"unknown divergence {kind!r}")


@dataclass
class MirrorDescentResult:
    iterates: list[GridDensity]
    objective: list[float]  # G(p_k)
    divergence_sum: list[float]  # sum_i alpha_i D_i(p_k || p_i)
    reward_term: list[float] = field(default_factory=list)

    @property
    def final(self) -> GridDensity:
        return self.iterates[-1]


def merge_objective(p: GridDensity, grids, divergences, alphas, reward=None):
    div = float(sum(a * divergence(k, p, g) for a, k, g in zip(alphas, divergences, grids)))
    rew = p.expectation(reward) if reward is not None else 0.0
    return rew - div, div, rew


def exact_mirror_descent(grids: Sequence[GridDensity], divergences: Sequence[str], alphas,
                         gamma, steps: int, reward: np.ndarray | None = None,
                         init: int | GridDensity = 0,
                         max_log_step: float | None = None,
                         line_search: bool = False) -> MirrorDescentResult:
    """Sampling-free mirror ascent on G(p) = E_p f - sum_i alpha_i D_i(p || p_i).

    Each step is the exact maximiser of <dG(p_{k-1}), p> - KL(p || p_{k-1}) / gamma_k
    over grid densities: p_k proportional to p_{k-1} exp(gamma_k dG(p_{k-1})).
    ``gamma`` is a constant or a callable ``k -> gamma_k`` (k starting at 1).
    ``max_log_step`` caps gamma_k so that no cell's log-density moves by more
    than that amount relative to the others (a trust-region safeguard needed
    by reverse-KL variations, which blow up where p_{k-1} is small).
    With ``line_search`` the step is halved until G does not decrease; the
    W1 objective is only piecewise linear, so plain subgradient steps overshoot.
    """
    if len(grids) != len(divergences) or len(grids) != len(alphas):
        raise ConfigError("grids, divergences and alphas must have equal length")
    if any(a <= 0 for a in alphas):
        raise ConfigError("weights alpha must be positive")
    step_size = gamma if callable(gamma) else (lambda k: gamma)
    p = (grids[init] if isinstance(init, (int, np.integer)) else init).normalized()
    res = MirrorDescentResult([p], [], [], [])

    def record(p):
        g, d, r = merge_objective(p, grids, divergences, alphas, reward)
        res.objective.append(g)
        res.divergence_sum.append(d)
        res.reward_term.append(r)

    record(p)
    for k in range(1, steps + 1):
        dg = np.zeros(p.resolution) if reward is None else np.asarray(reward, float).reshape(p.resolution).copy()
        for a, kind, g in zip(alphas, divergences, grids):
            dg -= a * first_variation(kind, p, g)
        gk = step_size(k)
        if max_log_step is not None:
            spread = float(dg.max() - dg.min())
            if spread > 0:
                gk = min(gk, max_log_step / spread)
        if gk == 0:
            res.iterates.append(p)
            record(p)
            continue
        with np.errstate(divide="ignore"):
            logp0 = np.log(p.masses)
        current = res.objective[-1]
        for _ in range(60 if line_search else 1):
            logp = np.where(np.isfinite(logp0), logp0 + gk * dg, -np.inf)
            cand = p.with_density(np.exp(logp - logsumexp(logp)) / p.cell_volume)
            if not line_search or merge_objective(cand, grids, divergences, alphas, reward)[0] >= current:
                break
            gk *= 0.5
        else:
            cand = p
        p = cand
        res.iterates.append(p)
        record(p)
    return res
