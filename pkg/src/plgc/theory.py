"""Closed-form concentration quantities and their Monte Carlo validation.

The guarantees under test, for K well-separated centers (pairwise gap Delta)
and per-direction sigma-sub-Gaussian cluster noise, with s_k points assigned
to cluster k:

  (i)   the assignment-weighted mean of cluster k deviates from its center
        by at most eps_k = 4*sigma*sqrt((d + log(2K/delta)) / s_k), for all
        k simultaneously with probability >= 1 - delta;
  (ii)  on that event, every point within Delta/2 - eps_k of its center is
        strictly nearest to its own empirical centroid;
  (iii) s_k >= (16 sigma^2 beta^2 / Delta^2) (d + log(2K/delta)) forces
        eps_max <= Delta/beta and centroid separation >= (1 - 2/beta) Delta.

Trials sample isotropic Gaussian clusters (sigma-sub-Gaussian in every
direction) with the true memberships as assignments, so (ii) and (iii) are
deterministic consequences whenever (i) holds: the validator demands zero
exceptions there and a binomial-slack bound on the (i) failure rate. The
bounds use the *claimed* sigma; passing a noise_scale != 1 samples with a
different true scale, which is the negative control that makes (i) fail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import count, product

import numpy as np

from .tensor import row_l2_normalize


def epsilon_k(sigma: float, d: int, k: int, delta: float, s_k: int) -> float:
    """Deviation radius 4*sigma*sqrt((d + log(2K/delta)) / s_k)."""
    if s_k < 1:
        raise ValueError("cluster sample count must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("failure probability must lie in (0, 1)")
    return 4.0 * sigma * math.sqrt((d + math.log(2.0 * k / delta)) / s_k)


def sample_complexity(
    sigma: float, beta: float, separation: float, d: int, k: int, delta: float
) -> int:
    """Smallest s_k with eps_k <= separation/beta: ceil of the closed form, >= 1."""
    if separation <= 0.0 or beta <= 0.0:
        raise ValueError("separation and beta must be positive")
    bound = (16.0 * sigma**2 * beta**2 / separation**2) * (d + math.log(2.0 * k / delta))
    return max(1, math.ceil(bound))


def net_size_bound(d: int) -> int:
    """Cardinality bound 5^d of a half-net on the unit sphere, as an exact int.

    Raises OverflowError once 5^d exceeds the signed 64-bit range (d >= 28).
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    value = 5**d
    if value > 2**63 - 1:
        raise OverflowError(f"5^{d} exceeds the 64-bit integer range")
    return value


def lattice_centers(k: int, d: int, separation: float) -> np.ndarray:
    """K points of the integer lattice scaled by the separation.

    Distinct integer points differ by at least 1 in Euclidean norm, so every
    pairwise distance is >= separation, with equality attained by adjacent
    points: the minimum gap is exactly the requested one for k >= 2.
    """
    if k < 1 or d < 1 or separation <= 0:
        raise ValueError("need k >= 1, d >= 1, separation > 0")
    points: list[tuple[int, ...]] = []
    for radius in count(0):
        shell = [p for p in product(range(radius + 1), repeat=d) if max(p) == radius]
        points.extend(sorted(shell, key=lambda p: (sum(p), p)))
        if len(points) >= k:
            break
    return separation * np.array(points[:k], dtype=np.float64)


@dataclass
class TheoremParams:
    sigma: float
    delta: float
    beta: float
    centers: np.ndarray  # K x d
    s: np.ndarray  # per-cluster sample counts

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2:
            raise ValueError("centers must be a K x d matrix")
        self.s = np.asarray(self.s, dtype=np.int64)
        if self.s.shape != (self.k,):
            raise ValueError("need one sample count per cluster")
        if np.any(self.s < 1):
            raise ValueError("sample counts must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.beta <= 2.0:
            raise ValueError("beta must exceed 2 for a positive separation bound")
        if self.min_sep <= 0.0:
            raise ValueError("centers must be pairwise distinct")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def min_sep(self) -> float:
        diffs = self.centers[:, None, :] - self.centers[None, :, :]
        dists = np.sqrt(np.sum(diffs**2, axis=-1))
        return float(np.min(dists[np.triu_indices(self.k, k=1)])) if self.k > 1 else math.inf

    def epsilons(self) -> np.ndarray:
        return np.array(
            [epsilon_k(self.sigma, self.d, self.k, self.delta, int(s)) for s in self.s]
        )


def default_theorem_params(
    sigma: float = 1.0,
    d: int = 2,
    k: int = 4,
    separation: float = 6.0,
    delta: float = 0.05,
    beta: float = 4.0,
) -> TheoremParams:
    """Centers on a scaled lattice; s_k at exactly the sample-complexity bound."""
    s = sample_complexity(sigma, beta, separation, d, k, delta)
    return TheoremParams(
        sigma=sigma,
        delta=delta,
        beta=beta,
        centers=lattice_centers(k, d, separation),
        s=np.full(k, s, dtype=np.int64),
    )


@dataclass
class TrialOutcome:
    deviations: np.ndarray  # ||centroid_k - mu_k|| per cluster (unnormalized mean)
    epsilons: np.ndarray
    interior_total: int
    interior_correct: int
    min_separation: float  # min pairwise centroid distance
    normalized_deviations: np.ndarray  # ||centroid/||centroid|| - mu_k||, report only

    @property
    def concentration_holds(self) -> bool:
        return bool(np.all(self.deviations <= self.epsilons))

    @property
    def interior_fraction(self) -> float:
        return 1.0 if self.interior_total == 0 else self.interior_correct / self.interior_total


def run_concentration_trial(p: TheoremParams, seed: int, noise_scale: float = 1.0) -> TrialOutcome:
    """One Monte Carlo draw: Gaussian clusters, true-membership centroids.

    Points are sampled z ~ N(mu_k, (sigma*noise_scale)^2 I); the bounds keep
    the claimed sigma, so noise_scale > 1 stresses them. Interior points are
    those within Delta/2 - eps_k of their own center; correctness means the
    nearest centroid is their own.
    """
    rng = np.random.default_rng(seed)
    eps = p.epsilons()
    centroids = np.empty_like(p.centers)
    clusters = []
    for k in range(p.k):
        pts = p.centers[k] + p.sigma * noise_scale * rng.standard_normal((int(p.s[k]), p.d))
        clusters.append(pts)
        centroids[k] = pts.sum(axis=0) / p.s[k]
    deviations = np.linalg.norm(centroids - p.centers, axis=1)

    interior_total = interior_correct = 0
    half_gap = p.min_sep / 2.0
    for k, pts in enumerate(clusters):
        radius = half_gap - eps[k]
        if radius <= 0.0:
            continue
        own_dist = np.linalg.norm(pts - p.centers[k], axis=1)
        interior = pts[own_dist < radius]
        if len(interior) == 0:
            continue
        interior_total += len(interior)
        d_all = np.linalg.norm(interior[:, None, :] - centroids[None, :, :], axis=2)
        interior_correct += int(np.sum(np.argmin(d_all, axis=1) == k))

    if p.k > 1:
        diffs = centroids[:, None, :] - centroids[None, :, :]
        dists = np.sqrt(np.sum(diffs**2, axis=-1))
        min_separation = float(np.min(dists[np.triu_indices(p.k, k=1)]))
    else:
        min_separation = math.inf
    norms = np.linalg.norm(centroids, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    normalized_deviations = np.linalg.norm(centroids / safe[:, None] - p.centers, axis=1)
    return TrialOutcome(deviations, eps, interior_total, interior_correct, min_separation, normalized_deviations)


@dataclass
class TheoryReport:
    trials: int
    base_seed: int
    noise_scale: float
    concentration_violation_rate: float
    concentration_threshold: float  # delta + two binomial sigmas
    interior_violations: int
    separation_violations: int
    separation_bound: float  # (1 - 2/beta) * Delta
    passed: bool
    params: dict = field(default_factory=dict)
    trial_summaries: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "base_seed": self.base_seed,
            "noise_scale": self.noise_scale,
            "concentration_violation_rate": self.concentration_violation_rate,
            "concentration_threshold": self.concentration_threshold,
            "interior_violations": self.interior_violations,
            "separation_violations": self.separation_violations,
            "separation_bound": self.separation_bound,
            "passed": self.passed,
            "params": self.params,
            "trial_summaries": self.trial_summaries,
        }


def validate_theorem(
    p: TheoremParams, trials: int = 500, base_seed: int = 0, noise_scale: float = 1.0
) -> TheoryReport:
    """Monte Carlo check of (i)-(iii) with per-trial seeds base_seed + t.

    Passes when the simultaneous-concentration failure rate stays within
    delta plus two binomial standard deviations, and neither interior
    recovery nor the separation bound fails in any concentration-holding
    trial.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials for a meaningful rate")
    sep_bound = (1.0 - 2.0 / p.beta) * p.min_sep
    violations = 0
    interior_bad = 0
    separation_bad = 0
    summaries = []
    for t in range(trials):
        out = run_concentration_trial(p, base_seed + t, noise_scale)
        holds = out.concentration_holds
        if not holds:
            violations += 1
        else:
            if out.interior_correct != out.interior_total:
                interior_bad += 1
            if out.min_separation < sep_bound:
                separation_bad += 1
        summaries.append(
            {
                "seed": base_seed + t,
                "max_deviation": float(np.max(out.deviations)),
                "concentration_holds": holds,
                "interior_total": out.interior_total,
                "interior_correct": out.interior_correct,
                "min_separation": out.min_separation,
                "max_normalized_deviation": float(np.max(out.normalized_deviations)),
            }
        )
    rate = violations / trials
    slack = 2.0 * math.sqrt(p.delta * (1.0 - p.delta) / trials)
    threshold = p.delta + slack
    passed = rate <= threshold and interior_bad == 0 and separation_bad == 0
    return TheoryReport(
        trials=trials,
        base_seed=base_seed,
        noise_scale=noise_scale,
        concentration_violation_rate=rate,
        concentration_threshold=threshold,
        interior_violations=interior_bad,
        separation_violations=separation_bad,
        separation_bound=sep_bound,
        passed=passed,
        params={
            "sigma": p.sigma,
            "delta": p.delta,
            "beta": p.beta,
            "d": p.d,
            "k": p.k,
            "min_sep": p.min_sep,
            "s": p.s.tolist(),
            "epsilons": p.epsilons().tolist(),
        },
        trial_summaries=summaries,
    )


@dataclass
class StationarityReport:
    cosines: list[float]  # worst per-trial cosine over live prototypes
    excluded: int  # degenerate prototypes (vanishing weighted sum) skipped
    all_converged: bool


def stationarity_trial(
    z: np.ndarray,
    assign: np.ndarray,
    k: int,
    protos_init: np.ndarray,
    steps: int = 400,
    lr: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (Z, Q): descend unit prototypes on the alignment objective.

    Minimizes -sum_ik q_ik z_i^T y_k by gradient steps with re-normalization.
    Returns (cosine(y_k, sum_i q_ik z_i) per prototype, live mask); prototypes
    whose weighted sum vanishes (degenerate, e.g. two equal-assigned antipodal
    points) are excluded via the mask and keep cosine NaN.
    """
    targets = np.stack([z[assign == j].sum(axis=0) for j in range(k)])
    norms = np.linalg.norm(targets, axis=1)
    live = norms > 1e-9
    protos = row_l2_normalize(np.asarray(protos_init, dtype=np.float64))
    for _ in range(steps):
        # gradient of -sum q z.y wrt y_k is -target_k; step then project back
        stepped = protos + lr * targets
        stepped[~live] = protos[~live]
        protos = row_l2_normalize(stepped)
    cos = np.full(k, np.nan)
    cos[live] = np.sum(protos[live] * (targets[live] / norms[live, None]), axis=1)
    return cos, live


def validate_stationarity(
    trials: int = 20,
    seed: int = 0,
    d: int = 5,
    k: int = 3,
    n: int = 40,
    steps: int = 400,
    lr: float = 0.5,
) -> StationarityReport:
    """Random (Z, Q) draws must all converge to the stationarity fixed point.

    Every live prototype must end with cosine >= 1 - 1e-6 against its
    assignment-weighted embedding sum.
    """
    if trials < 10:
        raise ValueError("need at least 10 trials")
    rng = np.random.default_rng(seed)
    cosines = []
    excluded = 0
    for _ in range(trials):
        z = row_l2_normalize(rng.standard_normal((n, d)))
        assign = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        assign = assign[rng.permutation(n)]
        protos_init = rng.standard_normal((k, d))
        cos, live = stationarity_trial(z, assign, k, protos_init, steps, lr)
        excluded += int(np.sum(~live))
        cosines.append(float(np.min(cos[live])) if live.any() else 1.0)
    return StationarityReport(cosines, excluded, all(c >= 1.0 - 1e-6 for c in cosines))
