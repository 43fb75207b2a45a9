"""Monte-Carlo harnesses for the masking theory at desk scale.

All experiments here use coordinate-level masks (block size 1) with mask
ratio 0.5, the regime in which the closed-form mean/variance results are
derived. The trainer uses patch masks; the two deliberately differ.

Closed forms checked:
  - complementary pair: IP = 0 identically (pointwise products vanish),
    so mean and variance are both exactly 0;
  - independent random pair: E[IP] = 1/4 and
    Var(IP) = (3/16) * sum(x_i^4) / ||x||^4;
  - K-way exact partition: the stated prediction E[MIP] = 1/K^2
    conflicts with the disjoint-support identity MIP = 0; both values are
    reported and the discrepancy is flagged, never asserted either way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .seeds import child_rng

_CHUNK = 20_000  # trials per vectorized block


# -- synthetic visual data model --------------------------------------

@dataclass(frozen=True)
class DataModelSpec:
    """Additive model: sparse component + low-frequency pattern + noise."""

    dims: tuple[int, ...]
    sparse_support: int = 0
    sparse_amplitude: tuple[float, float] = (1.0, 2.0)  # |value| range, random sign
    env_norm: float = 0.0  # Frobenius norm target of the pattern
    env_freq: float = 1.0  # cycles across each extent
    sigma: float = 0.0

    def __post_init__(self):
        size = int(np.prod(self.dims))
        if not 0 <= self.sparse_support <= size:
            raise ValueError("sparse support must fit in the grid")
        if self.sigma < 0 or self.env_norm < 0:
            raise ValueError("sigma and env_norm must be non-negative")

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def _env_pattern(spec: DataModelSpec) -> np.ndarray:
    if spec.env_norm == 0.0:
        return np.zeros(spec.dims)
    grids = np.meshgrid(*[np.arange(d) / d for d in spec.dims], indexing="ij")
    pattern = np.ones(spec.dims)
    for axis, g in enumerate(grids):
        # alternate sin/cos so the pattern is not separable-degenerate
        wave = np.sin if axis % 2 == 0 else np.cos
        pattern = pattern * wave(2.0 * math.pi * spec.env_freq * g + 0.3)
    norm = np.linalg.norm(pattern)
    if norm == 0.0:
        raise ValueError("degenerate environmental pattern (zero norm)")
    return pattern * (spec.env_norm / norm)


def synth_components(spec: DataModelSpec, seed: int):
    """The three addends (sparse, environmental, noise), separately."""
    rng = child_rng(seed, 0)
    s = np.zeros(spec.size)
    if spec.sparse_support > 0:
        support = rng.choice(spec.size, size=spec.sparse_support, replace=False)
        lo, hi = spec.sparse_amplitude
        amps = rng.uniform(lo, hi, size=spec.sparse_support)
        amps *= rng.choice([-1.0, 1.0], size=spec.sparse_support)
        s[support] = amps
    s = s.reshape(spec.dims)
    e = _env_pattern(spec)
    n = rng.normal(0.0, spec.sigma, size=spec.dims) if spec.sigma > 0 else np.zeros(spec.dims)
    return s, e, n


def synth_sample(spec: DataModelSpec, seed: int) -> np.ndarray:
    s, e, n = synth_components(spec, seed)
    return s + e + n


# -- information preservation -----------------------------------------

def ip_metric(x1: np.ndarray, x2: np.ndarray, x: np.ndarray) -> float:
    """Inner product of the two views, normalized by ||x||^2."""
    x1, x2, x = (np.asarray(a, dtype=np.float64) for a in (x1, x2, x))
    if not (x1.shape == x2.shape == x.shape):
        raise ValueError("view and reference shapes must agree")
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("zero reference norm")
    return float(np.sum(x1 * x2) / ref)


@dataclass(frozen=True)
class IPStats:
    kind: str
    trials: int
    mean: float
    variance: float
    predicted_mean: float
    predicted_variance: float
    discrepancy: bool = False

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.trials) if self.trials > 1 else 0.0


def _sample_stats(values: np.ndarray) -> tuple[float, float]:
    mean = float(values.mean())
    var = float(values.var(ddof=1)) if len(values) > 1 else 0.0
    return mean, var


def ip_experiment(x: np.ndarray, kind: str, trials: int, seed: int) -> IPStats:
    """Sample coordinate-level mask pairs (ratio 0.5) and measure IP on x."""
    if trials < 1:
        raise ValueError("need at least one trial")
    if kind not in ("complementary", "random"):
        raise ValueError(f"unknown kind '{kind}'")
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("zero reference norm")
    x2 = x * x
    quartic = float(np.sum(x2 * x2) / ref ** 2)

    values = np.empty(trials)
    done = 0
    block = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        rng = child_rng(seed, block)
        d1 = rng.random((m, x.size)) < 0.5
        if kind == "complementary":
            d2 = ~d1
        else:
            d2 = rng.random((m, x.size)) < 0.5
        values[done:done + m] = ((d1 & d2) * x2).sum(axis=1) / ref
        done += m
        block += 1

    mean, var = _sample_stats(values)
    if kind == "complementary":
        pred_mean, pred_var = 0.0, 0.0
    else:
        pred_mean, pred_var = 0.25, (3.0 / 16.0) * quartic
    return IPStats(kind, trials, mean, var, pred_mean, pred_var)


def multiview_experiment(x: np.ndarray, k: int, trials: int, seed: int) -> IPStats:
    """Average pairwise IP over a K-way exact partition of coordinates.

    The prediction 1/K^2 is emitted alongside the measurement; disjoint
    supports force the measured value to 0, so the discrepancy flag is
    expected to be set.
    """
    if k < 2:
        raise ValueError(f"need K >= 2, got {k}")
    if trials < 1:
        raise ValueError("need at least one trial")
    x = np.asarray(x, dtype=np.float64).ravel()
    ref = float(np.sum(x * x))
    if ref == 0.0:
        raise ValueError("zero reference norm")
    x2 = x * x
    quartic = float(np.sum(x2 * x2) / ref ** 2)

    values = np.empty(trials)
    done = 0
    block = 0
    norm = 1.0 / (k * (k - 1))
    while done < trials:
        m = min(_CHUNK, trials - done)
        rng = child_rng(seed, block)
        owner = rng.integers(0, k, size=(m, x.size))
        # Disjoint supports make every elementwise product exactly zero, so
        # summing the pairwise inner products directly keeps the measured
        # value exact instead of leaving summation-order roundoff behind.
        views = [(owner == view) * x for view in range(k)]
        acc = np.zeros(m)
        for i in range(k):
            for j in range(i + 1, k):
                acc += (views[i] * views[j]).sum(axis=1)
        values[done:done + m] = 2.0 * norm * acc / ref
        done += m
        block += 1

    mean, var = _sample_stats(values)
    pred_mean = 1.0 / k ** 2
    pred_var = (k - 1) / k ** 3 * quartic
    se = math.sqrt(var / trials) if trials > 1 else 0.0
    discrepancy = abs(mean - pred_mean) > 3.0 * se + 1e-9
    return IPStats("multiview", trials, mean, var, pred_mean, pred_var, discrepancy)


# -- feature maps and consistency -------------------------------------

@dataclass(frozen=True)
class FeatureMapSpec:
    kind: str = "linear"  # linear | linear+relu
    out_dim: int = 16
    weight_seed: int = 0
    beta: float = 1.0  # operator-norm cap of the linear part

    def __post_init__(self):
        if self.kind not in ("linear", "linear+relu"):
            raise ValueError(f"unknown feature map kind '{self.kind}'")
        if self.out_dim < 1 or self.beta <= 0:
            raise ValueError("out_dim must be >= 1 and beta positive")

    def weight(self, in_dim: int) -> np.ndarray:
        """Gaussian matrix rescaled to spectral norm exactly beta."""
        rng = child_rng(self.weight_seed, in_dim)
        w = rng.normal(size=(self.out_dim, in_dim))
        return w * (self.beta / np.linalg.norm(w, 2))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map one sample (any shape) or a batch of flat rows to features."""
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        flat = x if batched else x.reshape(1, -1)
        w = self.weight(flat.shape[1])
        out = flat @ w.T
        if self.kind == "linear+relu":
            out = np.maximum(out, 0.0)
        return out if batched else out[0]


def fce(fmap: FeatureMapSpec, x1: np.ndarray, x2: np.ndarray) -> float:
    """Euclidean distance between the features of two views."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError("view shapes must agree")
    return float(np.linalg.norm(fmap.apply(x1) - fmap.apply(x2)))


@dataclass(frozen=True)
class FceKindStats:
    kind: str
    mean: float
    variance: float
    p95: float


@dataclass(frozen=True)
class FceSummary:
    trials: int
    stats: tuple[FceKindStats, ...]
    sigma: float
    env_norm: float
    feature_dim: int
    input_dim: int
    delta: float
    bound_complementary: str
    bound_random: str
    bound_complementary_unit: float  # numeric value with unit constants
    bound_random_unit: float


def fce_experiment(model: DataModelSpec, fmap: FeatureMapSpec, trials: int,
                   seed: int, delta: float = 0.05) -> FceSummary:
    """Distribution of the consistency error per mask kind, on shared samples."""
    if trials < 1:
        raise ValueError("need at least one trial")
    d = model.size
    w = fmap.weight(d)
    values = {"complementary": np.empty(trials), "random": np.empty(trials)}

    done = 0
    block = 0
    while done < trials:
        m = min(_CHUNK // 4 + 1, trials - done)
        xs = np.stack([synth_sample(model, _mix(seed, 1, block, i)).ravel()
                       for i in range(m)])
        rng = child_rng(seed, 2, block)
        d1 = (rng.random((m, d)) < 0.5).astype(np.float64)
        r1 = (rng.random((m, d)) < 0.5).astype(np.float64)
        r2 = (rng.random((m, d)) < 0.5).astype(np.float64)
        for kind, a, b in (("complementary", d1, 1.0 - d1), ("random", r1, r2)):
            f1 = (xs * a) @ w.T
            f2 = (xs * b) @ w.T
            if fmap.kind == "linear+relu":
                f1 = np.maximum(f1, 0.0)
                f2 = np.maximum(f2, 0.0)
            values[kind][done:done + m] = np.linalg.norm(f1 - f2, axis=1)
        done += m
        block += 1

    stats = tuple(
        FceKindStats(kind, float(v.mean()),
                     float(v.var(ddof=1)) if trials > 1 else 0.0,
                     float(np.percentile(v, 95)))
        for kind, v in values.items())
    log_term = math.sqrt(fmap.out_dim * math.log(d / delta))
    unit_c = model.sigma * log_term
    unit_r = unit_c + model.env_norm * log_term / math.sqrt(d)
    return FceSummary(
        trials=trials, stats=stats, sigma=model.sigma, env_norm=model.env_norm,
        feature_dim=fmap.out_dim, input_dim=d, delta=delta,
        bound_complementary=(
            f"C1 * {model.sigma:g} * sqrt({fmap.out_dim} * log({d}/{delta:g}))"),
        bound_random=(
            f"C2 * ({model.sigma:g} * sqrt({fmap.out_dim} * log({d}/{delta:g}))"
            f" + {model.env_norm:g} * sqrt({fmap.out_dim} * log({d}/{delta:g}) / {d}))"),
        bound_complementary_unit=unit_c, bound_random_unit=unit_r)


def _mix(seed: int, *key: int) -> int:
    from .seeds import child_int
    return child_int(seed, *key)


# -- empirical generalization gap -------------------------------------

def bounded_pair_loss(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1 - exp(-||a - b||): bounded in [0, 1) and 1-Lipschitz per argument."""
    return 1.0 - np.exp(-np.linalg.norm(a - b, axis=-1))


@dataclass(frozen=True)
class GapRow:
    kind: str
    n: int
    mean_gap: float


@dataclass(frozen=True)
class GapTable:
    rows: tuple[GapRow, ...]
    slopes: dict = field(default_factory=dict)  # kind -> fitted log-log slope
    population: dict = field(default_factory=dict)  # kind -> reference loss

    def gaps(self, kind: str) -> list[tuple[int, float]]:
        return [(r.n, r.mean_gap) for r in self.rows if r.kind == kind]


def gap_experiment(fmap: FeatureMapSpec, loss, n_values: list[int], trials: int,
                   seed: int, dim: int = 64, reference_samples: int = 1_000_000,
                   kinds: tuple[str, ...] = ("complementary", "random")) -> GapTable:
    """Mean |population - empirical| pairwise loss vs sample count n.

    Inputs are standard Gaussian vectors; views come from coordinate
    masks at ratio 0.5. The population loss is a fixed large reference
    draw per kind; each (repetition, n) cell uses a fresh derived seed.
    """
    n_values = sorted(int(n) for n in n_values)
    if not n_values or n_values[0] < 1:
        raise ValueError("n_values must be positive")
    if trials < 1:
        raise ValueError("need at least one repetition")
    w_cache = fmap.weight(dim)

    def features(v: np.ndarray) -> np.ndarray:
        out = v @ w_cache.T
        if fmap.kind == "linear+relu":
            out = np.maximum(out, 0.0)
        return out

    def mean_loss(kind: str, rng: np.random.Generator, count: int) -> float:
        total = 0.0
        left = count
        while left > 0:
            m = min(100_000, left)
            xs = rng.normal(size=(m, dim))
            d1 = rng.random((m, dim)) < 0.5
            if kind == "complementary":
                d2 = ~d1
            else:
                d2 = rng.random((m, dim)) < 0.5
            ls = loss(features(xs * d1), features(xs * d2))
            total += float(np.sum(ls))
            left -= m
        return total / count

    rows = []
    slopes = {}
    population = {}
    for ki, kind in enumerate(kinds):
        pop = mean_loss(kind, child_rng(seed, ki, 0), reference_samples)
        population[kind] = pop
        mean_gaps = []
        for nj, n in enumerate(n_values):
            gaps = [abs(pop - mean_loss(kind, child_rng(seed, ki, 1 + rep, nj), n))
                    for rep in range(trials)]
            mean_gaps.append(float(np.mean(gaps)))
            rows.append(GapRow(kind, n, mean_gaps[-1]))
        logn = np.log(np.asarray(n_values, dtype=np.float64))
        logg = np.log(np.maximum(np.asarray(mean_gaps), 1e-300))
        slopes[kind] = float(np.polyfit(logn, logg, 1)[0])
    return GapTable(tuple(rows), slopes, population)
