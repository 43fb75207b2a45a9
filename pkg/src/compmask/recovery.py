"""Compressed-sensing harness over masked measurements.

Row masks (block size 1) select partial observations of x = M z + noise;
the selected rows of M stack into an effective system y = A z + eta.
Complementary mask pairs cover every row of M exactly once; independent
random pairs may duplicate or omit rows.

Solvers:
  - bpdn_solve: basis pursuit denoising via its penalized (lasso) form,
    accelerated proximal gradient with monotone restart, with the penalty
    weight searched so the residual meets the constraint within 1%;
  - omp_solve: greedy orthogonal matching pursuit, used as an independent
    cross-check on small instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import masks as mk
from .seeds import child_int, child_rng


@dataclass(frozen=True)
class RecoveryInstance:
    dictionary: np.ndarray  # d x n, unit-norm columns
    code: np.ndarray        # true n-vector, k-sparse
    sigma: float
    noise: np.ndarray       # realized d-vector
    observed: np.ndarray    # dictionary @ code + noise

    @property
    def d(self) -> int:
        return self.dictionary.shape[0]

    @property
    def n(self) -> int:
        return self.dictionary.shape[1]

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.code))


@dataclass(frozen=True)
class MeasurementSystem:
    matrix: np.ndarray  # stacked selected rows of the dictionary
    y: np.ndarray
    noise: np.ndarray   # realized stacked noise
    kind: str


@dataclass(frozen=True)
class RecoveryResult:
    estimate: np.ndarray
    residual_norm: float
    iterations: int
    error: float
    converged: bool = True


def gen_instance(d: int, n: int, k: int, sigma: float, seed: int,
                 dictionary: str = "gaussian") -> RecoveryInstance:
    """Gaussian (or identity) dictionary with a k-sparse +-uniform[1,2] code."""
    if k > n:
        raise ValueError(f"sparsity {k} exceeds code length {n}")
    if d < 1:
        raise ValueError("need at least one measurement row")
    rng = child_rng(seed, 0)
    if dictionary == "identity":
        if d != n:
            raise ValueError("identity dictionary needs d == n")
        m = np.eye(d)
    else:
        m = rng.normal(size=(d, n))
        m /= np.linalg.norm(m, axis=0, keepdims=True)
    z = np.zeros(n)
    if k > 0:
        support = rng.choice(n, size=k, replace=False)
        z[support] = rng.uniform(1.0, 2.0, size=k) * rng.choice([-1.0, 1.0], size=k)
    noise = rng.normal(0.0, sigma, size=d) if sigma > 0 else np.zeros(d)
    return RecoveryInstance(m, z, sigma, noise, m @ z + noise)


def build_measurement(instance: RecoveryInstance, pair: mk.MaskedPair) -> MeasurementSystem:
    """Stack the rows of the dictionary selected by each mask in order."""
    rows_a, rows_y, rows_eta = [], [], []
    for mask in pair.masks:
        if mask.dims != (instance.d,) or mask.patch != 1:
            raise ValueError("masks must be 1D with block size 1 over the d coordinates")
        sel = mask.bits.astype(bool)
        if not sel.any():
            raise ValueError("mask selects no coordinates")
        rows_a.append(instance.dictionary[sel])
        rows_y.append(instance.observed[sel])
        rows_eta.append(instance.noise[sel])
    return MeasurementSystem(np.vstack(rows_a), np.concatenate(rows_y),
                             np.concatenate(rows_eta), pair.kind)


def _soft(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _fista(a, y, lam, u0, step, max_iters, tol):
    """Monotone accelerated proximal gradient for 0.5||y-Au||^2 + lam||u||_1."""

    def objective(u):
        r = y - a @ u
        return 0.5 * float(r @ r) + lam * float(np.abs(u).sum())

    u = u0.copy()
    v = u.copy()
    t = 1.0
    f_u = objective(u)
    iters = 0
    converged = False
    for iters in range(1, max_iters + 1):
        grad = a.T @ (a @ v - y)
        u_new = _soft(v - step * grad, step * lam)
        if objective(u_new) > f_u:
            # restart momentum: plain proximal step from the last accepted point
            grad = a.T @ (a @ u - y)
            u_new = _soft(u - step * grad, step * lam)
            t = 1.0
        f_new = objective(u_new)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = u_new + ((t - 1.0) / t_new) * (u_new - u)
        delta = float(np.max(np.abs(u_new - u)))
        u, f_u, t = u_new, f_new, t_new
        if delta < tol:
            converged = True
            break
    return u, iters, converged


def bpdn_solve(system: MeasurementSystem, eps: float, max_iters: int = 2000,
               tol: float = 1e-10, max_bisections: int = 40) -> RecoveryResult:
    """min ||u||_1 subject to ||y - A u||_2 <= eps, via penalized form.

    The penalty weight starts at the value that zeroes the solution and is
    searched (geometric descent, then bisection) until the residual lands
    within 1% of eps or the bisection budget runs out. Non-convergence of
    the inner solver is reported via the converged flag, never hidden.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    a, y = system.matrix, system.y
    n = a.shape[1]
    ynorm = float(np.linalg.norm(y))
    if ynorm <= eps:
        # zero is feasible and minimizes the l1 norm
        return RecoveryResult(np.zeros(n), ynorm, 0, float("nan"), True)

    step = 1.0 / float(np.linalg.norm(a, 2)) ** 2
    lam_hi = float(np.max(np.abs(a.T @ y)))  # residual ynorm > eps here
    u = np.zeros(n)
    total_iters = 0
    all_converged = True

    def solve_at(lam, u0):
        nonlocal total_iters, all_converged
        sol, iters, conv = _fista(a, y, lam, u0, step, max_iters, tol)
        total_iters += iters
        all_converged = all_converged and conv
        return sol, float(np.linalg.norm(y - a @ sol))

    # geometric descent until the residual reaches the target band
    lam = lam_hi
    res = ynorm
    best = None  # (u, res) at the largest penalty meeting the constraint
    budget = max_bisections
    while budget > 0 and res > eps * 1.01:
        budget -= 1
        lam_hi = lam
        lam /= 4.0
        u, res = solve_at(lam, u)
        if res <= eps * 1.01:
            best = (u.copy(), res)
    if best is None:
        best = (u.copy(), res)

    # bisect back up into [0.99 eps, 1.01 eps] when we overshot below
    lam_lo = lam
    if eps > 0.0 and res < eps * 0.99:
        while budget > 0:
            budget -= 1
            lam_mid = math.sqrt(lam_lo * lam_hi) if lam_lo > 0 else 0.5 * lam_hi
            u, res = solve_at(lam_mid, u)
            if res > eps * 1.01:
                lam_hi = lam_mid
            else:
                best = (u.copy(), res)
                if res < eps * 0.99:
                    lam_lo = lam_mid
                else:
                    break

    u, _ = best
    res = float(np.linalg.norm(y - a @ u))
    return RecoveryResult(u, res, total_iters, float("nan"), all_converged)


def omp_solve(system: MeasurementSystem, k: int) -> RecoveryResult:
    """k rounds of max-correlation atom selection with least-squares refit."""
    a, y = system.matrix, system.y
    n = a.shape[1]
    if k > n:
        raise ValueError(f"sparsity {k} exceeds code length {n}")
    support: list[int] = []
    residual = y.copy()
    coef = np.zeros(0)
    for _ in range(k):
        corr = np.abs(a.T @ residual)
        corr[support] = -1.0
        support.append(int(np.argmax(corr)))
        sub = a[:, support]
        if np.linalg.matrix_rank(sub) < len(support):
            raise np.linalg.LinAlgError(
                f"rank-deficient selected submatrix, support {sorted(support)}")
        coef, *_ = np.linalg.lstsq(sub, y, rcond=None)
        residual = y - sub @ coef
    estimate = np.zeros(n)
    estimate[support] = coef
    return RecoveryResult(estimate, float(np.linalg.norm(residual)), k, float("nan"))


def with_error(result: RecoveryResult, z: np.ndarray) -> RecoveryResult:
    return RecoveryResult(result.estimate, result.residual_norm,
                          result.iterations, float(np.linalg.norm(result.estimate - z)),
                          result.converged)


def restricted_condition(a: np.ndarray, k: int, supports: int, seed: int) -> dict:
    """Empirical conditioning of random 2k-column submatrices of A.

    RIP certification is intractable; this reports the spread of singular
    values over sampled supports instead.
    """
    rng = child_rng(seed, 0)
    n = a.shape[1]
    ratios = np.empty(supports)
    cols = a / np.maximum(np.linalg.norm(a, axis=0, keepdims=True), 1e-300)
    for i in range(supports):
        sel = rng.choice(n, size=min(2 * k, n), replace=False)
        s = np.linalg.svd(cols[:, sel], compute_uv=False)
        ratios[i] = s[0] / max(s[-1], 1e-300)
    return {"median": float(np.median(ratios)),
            "p95": float(np.percentile(ratios, 95)),
            "max": float(np.max(ratios))}


DEFAULT_GRID = {"sigma": (0.0, 0.02, 0.05, 0.1), "k": (2, 5, 8), "trials": 200}


@dataclass(frozen=True)
class SweepCell:
    d: int
    n: int
    k: int
    sigma: float
    kind: str
    trial: int
    error: float
    iterations: int
    converged: bool
    theory_rate: float


def theory_rate(sigma: float, k: int, n: int, d: int, delta: float = 0.05) -> float:
    """Reference noise-scaling rate sigma * sqrt(k log(n/delta) / d)."""
    return sigma * math.sqrt(k * math.log(n / delta) / d)


def sweep_compare(grid: dict | None = None, seed: int = 0, d: int = 128,
                  n: int = 256, eps_multiplier: float = 1.0) -> list[SweepCell]:
    """Recovery error per (sigma, k, kind, trial) at equal row budget 2m = d.

    Complementary pairs partition the d rows; random pairs draw two
    independent half-density masks. eps defaults to the realized noise
    norm times eps_multiplier.
    """
    grid = dict(DEFAULT_GRID if grid is None else grid)
    sigmas, ks, trials = grid["sigma"], grid["k"], int(grid["trials"])
    if not sigmas or not ks or trials < 1:
        raise ValueError("grid must be non-empty")
    config = mk.MaskConfig((d,), 1, 0.5)
    cells = []
    for si, sigma in enumerate(sigmas):
        for kj, k in enumerate(ks):
            for trial in range(trials):
                inst = gen_instance(d, n, k, sigma, child_int(seed, si, kj, trial, 0))
                rate = theory_rate(sigma, k, n, d)
                for kind in ("complementary", "random"):
                    pair = _nonempty_pair(config, kind, seed, (si, kj, trial))
                    system = build_measurement(inst, pair)
                    eps = eps_multiplier * float(np.linalg.norm(system.noise))
                    result = with_error(bpdn_solve(system, eps), inst.code)
                    cells.append(SweepCell(d, n, k, float(sigma), kind, trial,
                                           result.error, result.iterations,
                                           result.converged, rate))
    return cells


def _nonempty_pair(config, kind, seed, key) -> mk.MaskedPair:
    # resample on the (vanishingly rare) empty-mask draw so build_measurement
    # always has rows to select
    for attempt in range(64):
        pair = mk.sample_pair(config, kind, child_int(seed, *key, 1 + attempt))
        if all(m.bits.any() for m in pair.masks):
            return pair
    raise RuntimeError("could not sample non-empty masks")


def sweep_medians(cells: list[SweepCell]) -> dict:
    """(sigma, k, kind) -> (median error, IQR)."""
    groups: dict = {}
    for c in cells:
        groups.setdefault((c.sigma, c.k, c.kind), []).append(c.error)
    return {key: (float(np.median(v)),
                  float(np.percentile(v, 75) - np.percentile(v, 25)))
            for key, v in groups.items()}
