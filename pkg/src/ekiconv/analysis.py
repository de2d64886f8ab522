"""Error processes, stopping times and Monte Carlo estimators for refinement studies."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Iterable, Optional, Sequence

import numpy as np

from .schemes import CSV_SCHEMA_VERSION, Trajectory, interpolate_all
from .noise import NoiseLattice

DEFAULT_GAMMA = 0.45
HORIZON, RADIUS, ERROR = "horizon", "radius", "error"
Z95 = NormalDist().inv_cdf(0.975)


@dataclass
class ErrorSample:
    sup_error: float
    moment_curve: Optional[np.ndarray]
    tau: float
    tau_trigger: str
    exploded: bool


def default_radius(x0_norm: float) -> float:
    return 10.0 * (1.0 + x0_norm)


def stacked_norms(states: np.ndarray) -> np.ndarray:
    """Euclidean norm of each ensemble viewed as a vector in R^{pJ}."""
    return np.sqrt(np.sum(states * states, axis=(-2, -1)))


def _check_pair(reference: Trajectory, approx: Trajectory, lattice: NoiseLattice):
    if reference.level != lattice.levels:
        raise ValueError("reference must live on the finest lattice level")
    if approx.level > reference.level:
        raise ValueError("approximation is finer than the reference")
    for tr in (reference, approx):
        if tr.seed is not None and tr.seed != lattice.seed:
            raise ValueError("trajectory was generated from a different lattice seed")
        if tr.batch_shape != lattice.batch_shape:
            raise ValueError("trajectory and lattice replica axes differ")
    if not np.array_equal(reference.states[0], approx.states[0]):
        raise ValueError("reference and approximation start from different ensembles")


def error_norms(reference: Trajectory, approx: Trajectory, lattice: NoiseLattice):
    """(||x(t)||, ||E(t)||) at every finest node, each of shape (2**L + 1, *batch).

    Nodes after an explosion of either path hold NaN in the error curve.
    """
    _check_pair(reference, approx, lattice)
    X = interpolate_all(reference, lattice)
    Y = interpolate_all(approx, lattice)
    return stacked_norms(X), stacked_norms(X - Y)


def stopping_time(x_norm: np.ndarray, e_norm: np.ndarray, R: float, times: np.ndarray):
    """tau = T ^ inf{t : ||x(t)|| > R - 1 or ||E(t)|| > 1} on the given grid.

    Returns ``(tau, trigger)``; the radius condition wins ties.  A NaN error
    (exploded approximation) counts as an error violation.
    """
    x_norm = np.asarray(x_norm, dtype=float)
    e_norm = np.asarray(e_norm, dtype=float)
    if not R > 1.0 + x_norm[0]:
        raise ValueError(f"R={R} must exceed 1 + ||x(0)|| = {1.0 + x_norm[0]}")
    radius = x_norm > R - 1.0
    err = ~(e_norm <= 1.0)
    hit = np.flatnonzero(radius | err)
    if hit.size == 0:
        return float(times[-1]), HORIZON
    k = int(hit[0])
    return float(times[k]), RADIUS if radius[k] else ERROR


def error_process(reference: Trajectory, approx: Trajectory, lattice: NoiseLattice,
                  R: Optional[float] = None, keep_curve: bool = True):
    """Error samples between the reference and the interpolated approximation.

    Returns one ErrorSample for an unbatched pair and a list (one per replica)
    for a batched pair.
    """
    x, e = error_norms(reference, approx, lattice)
    times = np.arange(x.shape[0]) * lattice.h_min
    exploded = approx.exploded | reference.exploded
    if not lattice.batch_shape:
        return _sample(x, e, times, R, bool(exploded), keep_curve)
    return [_sample(x[:, i], e[:, i], times, R, bool(exploded[i]), keep_curve)
            for i in range(x.shape[1])]


def _sample(x, e, times, R, exploded, keep_curve):
    R = default_radius(float(x[0])) if R is None else R
    tau, trig = stopping_time(x, e, R, times)
    sup = np.inf if exploded or not np.all(np.isfinite(e)) else float(np.max(e))
    return ErrorSample(sup, e.copy() if keep_curve else None, tau, trig, exploded)


def wilson_interval(k: int, n: int, z: float = Z95):
    if n <= 0:
        raise ValueError("need at least one sample")
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return p, max(0.0, centre - half), min(1.0, centre + half)


def estimate_probability(samples: Sequence[ErrorSample], gamma_exponent: float = DEFAULT_GAMMA,
                         h: float = 1.0):
    """Fraction of samples with sup ||E|| > h**gamma (explosions count) and its Wilson 95% CI."""
    if not samples:
        raise ValueError("no samples")
    thr = h ** gamma_exponent
    k = sum(1 for s in samples if s.exploded or not s.sup_error <= thr)
    return wilson_interval(k, len(samples))


@dataclass
class MomentEstimate:
    value: float
    se: float
    argmax: int
    n_used: int
    n_exploded: int


class MomentAccumulator:
    """Running sums of ||E(t)||^theta and its square over non-exploded replicas.

    Feed curves in replica-index order; per-batch sums use numpy's pairwise
    reduction, so results do not depend on how batches are scheduled, only
    on how they are cut.
    """

    def __init__(self, theta: float):
        if not 0 < theta <= 2:
            raise ValueError("theta must lie in (0, 2]")
        self.theta = theta
        self.s1 = None
        self.s2 = None
        self.n = 0
        self.n_exploded = 0

    def add(self, curves: np.ndarray, exploded: np.ndarray) -> None:
        """``curves`` has shape (n_nodes, batch)."""
        exploded = np.asarray(exploded, dtype=bool)
        self.n_exploded += int(exploded.sum())
        # replicas along the contiguous axis so the reduction is pairwise
        good = np.ascontiguousarray(np.asarray(curves)[:, ~exploded]) ** self.theta
        if good.shape[1] == 0:
            return
        s1 = good.sum(axis=1)
        s2 = (good * good).sum(axis=1)
        self.s1 = s1 if self.s1 is None else self.s1 + s1
        self.s2 = s2 if self.s2 is None else self.s2 + s2
        self.n += good.shape[1]

    def result(self) -> MomentEstimate:
        if self.n == 0:
            return MomentEstimate(float("nan"), float("nan"), -1, 0, self.n_exploded)
        mean = self.s1 / self.n
        k = int(np.argmax(mean))
        if self.n > 1:
            var = max(0.0, (self.s2[k] - self.n * mean[k] ** 2) / (self.n - 1))
            se = float(np.sqrt(var / self.n))
        else:
            se = float("nan")
        return MomentEstimate(float(mean[k]), se, k, self.n, self.n_exploded)


def estimate_moment(samples: Sequence[ErrorSample], theta: float) -> MomentEstimate:
    """sup_t of the sample mean of ||E(t)||^theta; exploded samples are only counted."""
    acc = MomentAccumulator(theta)
    curves = [s.moment_curve for s in samples if not s.exploded]
    n_exp = sum(1 for s in samples if s.exploded)
    acc.n_exploded = n_exp
    if curves:
        acc.add(np.stack(curves, axis=1), np.zeros(len(curves), dtype=bool))
    return acc.result()


def fit_order(h: Sequence[float], errors: Sequence[float]):
    """Least-squares slope of log(error) against log(h) and the RMS log residual."""
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if h.size < 3 or h.shape != errors.shape:
        raise ValueError("need at least three (h, error) pairs")
    if np.any(~np.isfinite(errors)) or np.any(errors <= 0) or np.any(h <= 0):
        raise ValueError("errors and step sizes must be positive and finite")
    x, y = np.log(h), np.log(errors)
    slope, icpt = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + icpt)) ** 2)))
    return float(slope), resid


@dataclass
class Census:
    exploded: int
    total: int
    earliest: Optional[float]

    @property
    def fraction(self) -> float:
        return self.exploded / self.total if self.total else 0.0


def explosion_census(trajectories: Iterable) -> Census:
    """Count exploded paths among trajectories (batched ones contribute every replica).

    A path whose stored states contain non-finite entries counts as exploded
    even if ``exploded_at`` was never set.
    """
    times = []
    total = 0
    for tr in trajectories:
        at = np.atleast_1d(np.asarray(np.nan if tr.exploded_at is None else tr.exploded_at,
                                      dtype=float))
        ok = np.all(np.isfinite(tr.states), axis=(-2, -1)).reshape(tr.states.shape[0], -1)
        for i, t in enumerate(at):
            if not np.isfinite(t) and not ok[:, i].all():
                t = np.argmin(ok[:, i]) * tr.h
            if np.isfinite(t):
                times.append(float(t))
        total += at.size
    return Census(len(times), total, min(times) if times else None)


REPORT_FIELDS = ("h", "mean_sup_err", "se", "moment_theta", "p_hat", "ci_low", "ci_high",
                 "exploded_frac")


@dataclass
class LevelSummary:
    level: int
    h: float
    mean_sup_err: float
    se: float
    moment_theta: float
    moment_se: float
    p_hat: float
    ci_low: float
    ci_high: float
    exploded_frac: float
    max_second_moment: float = float("nan")


def summarize_level(level: int, h: float, sup_errors: np.ndarray, exploded: np.ndarray,
                    moment: MomentEstimate, gamma_exponent: float,
                    max_second_moment: float = float("nan")) -> LevelSummary:
    """Per-level statistics; any explosion makes the mean sup-error infinite."""
    sup_errors = np.asarray(sup_errors, dtype=float)
    exploded = np.asarray(exploded, dtype=bool)
    n = sup_errors.size
    if exploded.any() or not np.all(np.isfinite(sup_errors)):
        mean, se = float("inf"), float("nan")
    else:
        mean = float(np.mean(sup_errors))
        se = float(np.std(sup_errors, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    thr = h ** gamma_exponent
    k = int(np.sum(exploded | ~(sup_errors <= thr)))
    p, lo, hi = wilson_interval(k, n)
    return LevelSummary(level, h, mean, se, moment.value, moment.se, p, lo, hi,
                        float(exploded.mean()), max_second_moment)


@dataclass
class ConvergenceReport:
    levels: list
    per_level: list
    replicas: int
    theta: float
    gamma_exponent: float
    fitted_order: Optional[float] = None
    fit_residual: Optional[float] = None
    meta: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict, repr=False)   # level -> sup errors; not serialised

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be strictly increasing")
        for s in self.per_level:
            if not 0.0 <= s.ci_low <= s.ci_high <= 1.0:
                raise ValueError("confidence bounds must lie in [0, 1]")
        if self.fitted_order is None and len(self.levels) >= 3:
            errs = [s.mean_sup_err for s in self.per_level]
            if all(np.isfinite(e) and e > 0 for e in errs):
                self.fitted_order, self.fit_residual = fit_order([s.h for s in self.per_level], errs)

    @property
    def mean_sup_error(self) -> list:
        return [s.mean_sup_err for s in self.per_level]

    @property
    def prob_exceed(self) -> list:
        return [(s.p_hat, s.ci_low, s.ci_high) for s in self.per_level]

    def payload(self) -> dict:
        """JSON-safe content; infinities become the string 'inf'."""
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return "nan" if np.isnan(v) else ("inf" if v > 0 else "-inf")
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v
        return clean({
            "schema_version": CSV_SCHEMA_VERSION,
            "levels": list(self.levels),
            "replicas": self.replicas,
            "theta": self.theta,
            "gamma_exponent": self.gamma_exponent,
            "fitted_order": self.fitted_order,
            "fit_residual": self.fit_residual,
            "per_level": [asdict(s) for s in self.per_level],
            "meta": self.meta,
        })

    def to_json(self) -> str:
        return json.dumps(self.payload(), indent=2, sort_keys=True)

    @classmethod
    def from_payload(cls, d: dict) -> "ConvergenceReport":
        def num(v):
            return float(v) if isinstance(v, str) else v
        per = [LevelSummary(**{k: num(v) for k, v in s.items()}) for s in d["per_level"]]
        for s in per:
            s.level = int(s.level)
        return cls(list(d["levels"]), per, d["replicas"], d["theta"], d["gamma_exponent"],
                   num(d.get("fitted_order")), num(d.get("fit_residual")), d.get("meta", {}))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("schema_version", "level") + REPORT_FIELDS)
            for s in self.per_level:
                w.writerow([CSV_SCHEMA_VERSION, s.level] + [repr(float(getattr(s, f)))
                                                           for f in ("h", "mean_sup_err", "se")]
                           + [repr(float(s.moment_theta)), repr(float(s.p_hat)),
                              repr(float(s.ci_low)), repr(float(s.ci_high)),
                              repr(float(s.exploded_frac))])
