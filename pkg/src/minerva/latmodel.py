"""Flattening-time distributions: grid recursion, Monte Carlo, and the
standard-vs-fat comparison.

Lookup delays are iid draws from one ``LatencyDistribution``. In a standard
tree a node finishes one lookup after the slowest of its children, so the
root time is ``t + max_k(child times)`` applied level by level; in a fat tree
it is ``t + max_{ceil(N/k)}(t)``. The provider phase adds ``max_N(t)``.

Grids hold probability mass on the points ``i * dt``. Maxima use exact
discrete order statistics (differences of the CDF raised to the k-th power)
and sums use FFT convolution, renormalised after truncation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .dhtnet import LatencyDistribution, LatencyKind
from .errors import InvalidArgument, ResolutionError, OrderingViolation
from .merkle import Shape, tree_height

GRID_POINTS = 2 ** 14
TRUNCATION_LIMIT = 1e-4


@dataclass(frozen=True)
class FlattenModelParams:
    n_chunks: int
    fanout: int
    dist: LatencyDistribution
    network_size: int = 8  # documentation only; the iid model ignores it

    def __post_init__(self):
        if self.n_chunks < 1:
            raise InvalidArgument("n_chunks must be >= 1")
        if self.fanout < 2:
            raise InvalidArgument("fanout must be >= 2")

    @property
    def height(self) -> int:
        return tree_height(self.n_chunks, self.fanout)

    @property
    def perfect(self) -> bool:
        return self.fanout ** (self.height - 1) == self.n_chunks

    @property
    def middle_nodes(self) -> int:
        return -(-self.n_chunks // self.fanout)


@dataclass
class DistributionGrid:
    dt: float
    mass: np.ndarray  # probability on points i * dt
    truncated: float = 0.0  # mass dropped beyond the last point, cumulative

    def __post_init__(self):
        self.mass = np.asarray(self.mass, dtype=float)

    @property
    def n(self) -> int:
        return len(self.mass)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.n) * self.dt

    @property
    def t_max(self) -> float:
        return (self.n - 1) * self.dt

    @property
    def pdf(self) -> np.ndarray:
        """Density values: mass per unit time."""
        return self.mass / self.dt

    @property
    def cdf(self) -> np.ndarray:
        return np.minimum(np.cumsum(self.mass), 1.0)

    @property
    def mean(self) -> float:
        return float(self.support @ self.mass)

    @property
    def std(self) -> float:
        m = self.mean
        return float(math.sqrt(max(((self.support - m) ** 2) @ self.mass, 0.0)))

    def total(self) -> float:
        return float(self.mass.sum())

    def quantile(self, q: float) -> float:
        return float(np.searchsorted(self.cdf, q) * self.dt)

    @classmethod
    def delta(cls, at: float, dt: float, n: int = GRID_POINTS) -> "DistributionGrid":
        i = int(round(at / dt))
        if not 0 <= i < n:
            raise ResolutionError(f"point mass at {at} lies outside the grid")
        mass = np.zeros(n)
        mass[i] = 1.0
        return cls(dt, mass)

    @classmethod
    def from_cdf(cls, cdf, dt: float, n: int = GRID_POINTS) -> "DistributionGrid":
        """Mass of ``[(i - 1/2) dt, (i + 1/2) dt)`` placed on point i."""
        edges = (np.arange(n + 1) - 0.5) * dt
        c = np.asarray(cdf(edges), dtype=float)
        c[0] = 0.0
        mass = np.clip(np.diff(c), 0.0, None)
        tail = max(1.0 - float(c[-1]), 0.0)
        return cls(dt, mass / mass.sum(), tail)

    @classmethod
    def from_samples(cls, samples, dt: float, n: int = GRID_POINTS) -> "DistributionGrid":
        idx = np.rint(np.asarray(samples, dtype=float) / dt).astype(int)
        inside = idx < n
        mass = np.bincount(idx[inside], minlength=n).astype(float)
        return cls(dt, mass / mass.sum(), 1.0 - inside.mean())


def base_grid(dist: LatencyDistribution, dt: float, n: int = GRID_POINTS) -> DistributionGrid:
    """Discretise one lookup delay onto the grid."""
    if dist.kind is LatencyKind.CONSTANT:
        return DistributionGrid.delta(dist.params[0], dt, n)
    if dist.kind is LatencyKind.EMPIRICAL:
        return DistributionGrid.from_samples(dist.params, dt, n)
    return DistributionGrid.from_cdf(dist.cdf, dt, n)


def auto_step(dist: LatencyDistribution, height: int, n: int = GRID_POINTS) -> float:
    """Grid step for a tree of ``height`` levels.

    The grid spans 1.5 * (height + 1) base widths of ``mean + 6 sd``; the
    step divides that width exactly so a constant delay lands on a point.
    """
    width = dist.mean + 6 * dist.std
    if width <= 0:
        width = 1.0
    per_width = max(int(n // (1.5 * (height + 1))), 1)
    return width / per_width


def _check(grid: DistributionGrid) -> DistributionGrid:
    if grid.truncated > TRUNCATION_LIMIT:
        raise ResolutionError(
            f"{grid.truncated:.2e} of the probability mass lies beyond t = {grid.t_max:.1f}; "
            "use a larger grid")
    return grid


def pdf_level_max(child: DistributionGrid, k: int) -> DistributionGrid:
    """Distribution of the maximum of ``k`` iid copies of ``child``."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    if k == 1:
        return DistributionGrid(child.dt, child.mass.copy(), child.truncated)
    cdf = np.minimum(np.cumsum(child.mass), 1.0)
    top = cdf ** k
    mass = np.diff(top, prepend=0.0)
    mass = np.clip(mass, 0.0, None)
    total = mass.sum()
    truncated = 1.0 - (1.0 - child.truncated) ** k
    return _check(DistributionGrid(child.dt, mass / total, truncated))


def pdf_convolve(a: DistributionGrid, b: DistributionGrid) -> DistributionGrid:
    """Distribution of the sum of independent ``a`` and ``b``."""
    if a.n != b.n or not math.isclose(a.dt, b.dt, rel_tol=1e-12):
        raise InvalidArgument("grids differ in step or length")
    full = signal.fftconvolve(a.mass, b.mass)
    full = np.clip(full, 0.0, None)
    kept = full[:a.n]
    lost = float(full[a.n:].sum())
    total = float(full.sum())
    truncated = a.truncated + b.truncated + (lost / total if total else 0.0)
    # fft noise below the float floor shows up as tiny negative/positive mass
    kept[kept < 1e-300] = 0.0
    return _check(DistributionGrid(a.dt, kept / kept.sum(), truncated))


@dataclass
class ModelResult:
    grid: DistributionGrid
    mean: float


def flatten_time_std(params: FlattenModelParams, n: int = GRID_POINTS) -> ModelResult:
    """Hash-flattening time of a perfect standard tree, by the level recursion."""
    if not params.perfect:
        raise InvalidArgument(
            f"{params.n_chunks} leaves do not form a perfect {params.fanout}-ary tree; "
            "use monte_carlo_flatten")
    h = params.height
    dt = auto_step(params.dist, h, n)
    f = _check(base_grid(params.dist, dt, n))
    level = f
    for _ in range(h - 1):
        level = pdf_convolve(pdf_level_max(level, params.fanout), f)
    return ModelResult(level, level.mean)


def flatten_time_fmt(params: FlattenModelParams, n: int = GRID_POINTS) -> ModelResult:
    """Hash-flattening time of a fat tree: root lookup, then the middle layer."""
    dt = auto_step(params.dist, 3, n)
    f = _check(base_grid(params.dist, dt, n))
    if params.n_chunks <= params.fanout:
        return ModelResult(f, f.mean)
    grid = pdf_convolve(pdf_level_max(f, params.middle_nodes), f)
    return ModelResult(grid, grid.mean)


def provider_phase(dist: LatencyDistribution, n_chunks: int, height: int = 3,
                   n: int = GRID_POINTS) -> ModelResult:
    """One parallel provider lookup per chunk: the max of ``n_chunks`` delays."""
    f = _check(base_grid(dist, auto_step(dist, height, n), n))
    grid = pdf_level_max(f, n_chunks)
    return ModelResult(grid, grid.mean)


# -- Monte Carlo -----------------------------------------------------------------

@dataclass
class MonteCarloResult:
    mean: float
    ci_low: float
    ci_high: float
    trials: int
    samples: np.ndarray | None = None

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2

    def overlaps(self, other: "MonteCarloResult") -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def _std_trial_batch(dist, n_chunks, k, rng, trials) -> np.ndarray:
    times = np.asarray(dist.sample(rng, (trials, n_chunks)), dtype=float)
    while times.shape[1] > 1:
        starts = np.arange(0, times.shape[1], k)
        parents = np.maximum.reduceat(times, starts, axis=1)
        times = parents + dist.sample(rng, parents.shape)
    return times[:, 0]


def _fmt_trial_batch(dist, n_chunks, k, rng, trials) -> np.ndarray:
    root = np.asarray(dist.sample(rng, trials), dtype=float)
    if n_chunks <= k:
        return root
    middle = -(-n_chunks // k)
    return root + np.asarray(dist.sample(rng, (trials, middle))).max(axis=1)


def monte_carlo_flatten(params: FlattenModelParams, shape: Shape | str = Shape.STANDARD,
                        trials: int = 10_000, seed: int = 0, *, providers: bool = False,
                        keep_samples: bool = False, batch_cells: int = 4_000_000
                        ) -> MonteCarloResult:
    """Sample flattening times directly; returns the mean and a 99% interval.

    With ``providers`` the parallel provider phase (max over all chunks) is
    added to each trial.
    """
    if trials < 1:
        raise InvalidArgument("trials must be >= 1")
    shape = Shape(shape)
    rng = np.random.default_rng(seed)
    sim = _fmt_trial_batch if shape is Shape.FAT else _std_trial_batch
    n, k, dist = params.n_chunks, params.fanout, params.dist
    per_batch = max(1, batch_cells // (2 * n))
    out = []
    done = 0
    while done < trials:
        m = min(per_batch, trials - done)
        t = sim(dist, n, k, rng, m)
        if providers:
            t = t + np.asarray(dist.sample(rng, (m, n))).max(axis=1)
        out.append(t)
        done += m
    samples = np.concatenate(out)
    mean = float(samples.mean())
    if trials == 1:
        return MonteCarloResult(mean, mean, mean, 1, samples if keep_samples else None)
    z = stats.norm.ppf(0.995)
    half = z * float(samples.std(ddof=1)) / math.sqrt(trials)
    return MonteCarloResult(mean, mean - half, mean + half, trials,
                            samples if keep_samples else None)


# -- the standard-vs-fat comparison -------------------------------------------------

def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


@dataclass
class SpeedupReport:
    params: FlattenModelParams
    std_analytic: float | None
    fmt_analytic: float
    std_mc: MonteCarloResult
    fmt_mc: MonteCarloResult
    max_all: float  # expected max of N delays
    max_middle: float  # expected max of ceil(N/k) delays

    @property
    def gap(self) -> float:
        return self.std_mc.mean - self.fmt_mc.mean

    @property
    def separated(self) -> bool:
        return self.std_mc.ci_low > self.fmt_mc.ci_high

    def rows(self) -> list[tuple[str, float]]:
        out = [("E[T_std] monte carlo", self.std_mc.mean),
               ("E[T_fmt] monte carlo", self.fmt_mc.mean),
               ("E[T_fmt] grid", self.fmt_analytic),
               ("E[max of N]", self.max_all),
               ("E[max of N/k]", self.max_middle),
               ("gap", self.gap)]
        if self.std_analytic is not None:
            out.insert(2, ("E[T_std] grid", self.std_analytic))
        return out


def expected_max(dist: LatencyDistribution, n: int, trials: int = 20_000, seed: int = 1) -> float:
    """Mean of the max of ``n`` iid delays (closed form where one exists)."""
    if dist.kind is LatencyKind.EXPONENTIAL:
        return dist.params[0] * harmonic(n)
    if dist.kind is LatencyKind.CONSTANT:
        return dist.params[0]
    rng = np.random.default_rng(seed)
    return float(np.asarray(dist.sample(rng, (trials, n))).max(axis=1).mean())


def verify_fat_speedup(params: FlattenModelParams, trials: int = 10_000, seed: int = 0
                    ) -> SpeedupReport:
    """Check that a standard tree flattens no faster than the fat tree.

    Raises OrderingViolation when the ordering fails: the Monte Carlo means
    (or, for constant delays, the exact values) compare the wrong way, the
    grid means do, or the max-of-N bound is reversed.
    """
    if params.n_chunks <= params.fanout:
        raise InvalidArgument("need more chunks than the fanout for the trees to differ")
    std_a = flatten_time_std(params).mean if params.perfect else None
    fmt_a = flatten_time_fmt(params).mean
    std_mc = monte_carlo_flatten(params, Shape.STANDARD, trials, seed)
    fmt_mc = monte_carlo_flatten(params, Shape.FAT, trials, seed + 1)
    report = SpeedupReport(params, std_a, fmt_a, std_mc, fmt_mc,
                           expected_max(params.dist, params.n_chunks),
                           expected_max(params.dist, params.middle_nodes))
    if std_mc.mean < fmt_mc.mean:
        raise OrderingViolation(report)
    if std_a is not None and std_a < fmt_a:
        raise OrderingViolation(report)
    if report.max_all < report.max_middle:
        raise OrderingViolation(report)
    return report


verify_theorem1 = verify_fat_speedup


def reduction_ratio(params: FlattenModelParams, trials: int = 4_000, seed: int = 0,
                    providers: bool = True) -> float:
    """Relative flattening-time saving of the fat tree over the standard tree."""
    std = monte_carlo_flatten(params, Shape.STANDARD, trials, seed, providers=providers)
    fmt = monte_carlo_flatten(params, Shape.FAT, trials, seed + 1, providers=providers)
    return 1.0 - fmt.mean / std.mean
