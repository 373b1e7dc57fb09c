"""Learn-Then-Test threshold selection and the calibrated set predictor.

For each physical step k, candidate thresholds on a uniform grid over the
calibration scores are tested with Hoeffding-Bentkus p-values at the
per-step budget delta/K.  The selected threshold q_k is the smallest
candidate whose p-value passes; the predicted reachable set at step k is
the q_k-sublevel set of the score.
"""

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import diffusion
from .errors import CalibrationInfeasibleError, ConfigurationError, DegenerateGridError
from .hashing import crc64


@dataclass(frozen=True)
class RiskBudget:
    """Risk level alpha and confidence delta split evenly over K steps."""

    alpha: float
    delta: float
    n_steps: int

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")

    @property
    def per_step_budget(self):
        return self.delta / self.n_steps


def min_calibration_size(alpha, per_step_budget):
    """Smallest n for which a zero-miss calibration set can pass the test."""
    return int(math.ceil(math.log(per_step_budget) / math.log1p(-alpha)))


def empirical_risk(scores, lam):
    """Fraction of scores strictly greater than ``lam``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    return float(np.count_nonzero(scores > lam) / scores.size)


@lru_cache(maxsize=32)
def _binom_logcdf_table(n, alpha):
    """log P[Bin(n, alpha) <= m] for m = 0..n, by log-space summation.

    Accumulated in extended precision so the CDF is accurate to ~1e-15
    even for n = 10^4.
    """
    one = np.longdouble(1.0)
    a = np.longdouble(alpha)
    log_a = np.log(a)
    log_1a = np.log1p(-a)
    ks = np.arange(n, dtype=np.longdouble)
    ratios = np.log(n - ks) - np.log(ks + one) + log_a - log_1a
    logpmf = np.empty(n + 1, dtype=np.longdouble)
    logpmf[0] = n * log_1a
    logpmf[1:] = logpmf[0] + np.cumsum(ratios)
    return np.logaddexp.accumulate(logpmf)


def _ceil_count(r_hat, n):
    """ceil(n * r_hat) with a guard for counts that are integral up to fp noise."""
    nr = n * r_hat
    nearest = round(nr)
    if abs(nr - nearest) <= 1e-9 * max(1.0, abs(nr)):
        m = int(nearest)
    else:
        m = int(math.ceil(nr))
    return min(max(m, 0), n)


def _h1(a, b):
    """Bernoulli KL divergence h1(a, b) with the 0*log(0) = 0 convention."""
    a = np.asarray(a, dtype=np.float64)
    first = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0) / b), 0.0)
    second = np.where(a < 1, (1.0 - a) * np.log((1.0 - a) / (1.0 - b)), 0.0)
    return first + second


def hb_pvalue(r_hat, n, alpha):
    """Hoeffding-Bentkus p-value for H0: true risk > alpha.

    min of exp(-n*h1(min(r_hat, alpha), alpha)) and
    e * P[Bin(n, alpha) <= ceil(n*r_hat)], clipped to (0, 1].
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= r_hat <= 1:
        raise ValueError("r_hat must lie in [0, 1]")
    hoeffding = math.exp(-n * float(_h1(min(r_hat, alpha), alpha)))
    table = _binom_logcdf_table(int(n), float(alpha))
    bentkus = math.e * float(np.exp(table[_ceil_count(r_hat, n)]))
    return min(1.0, hoeffding, bentkus)


def _hb_pvalues_for_counts(counts, n, alpha):
    """Vectorized HB p-values where r_hat = counts / n exactly."""
    counts = np.asarray(counts, dtype=np.int64)
    r_hat = counts / n
    hoeffding = np.exp(-n * _h1(np.minimum(r_hat, alpha), alpha))
    table = _binom_logcdf_table(int(n), float(alpha))
    bentkus = math.e * np.exp(table[counts]).astype(np.float64)
    return np.minimum(1.0, np.minimum(hoeffding, bentkus))


@dataclass(frozen=True)
class ThresholdGrid:
    """Ascending candidate thresholds spanning the calibration scores at k."""

    step: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.size < 2 or np.any(np.diff(values) <= 0):
            raise ConfigurationError("grid must hold >= 2 strictly ascending values")
        object.__setattr__(self, "values", values)


def build_grid(cal_scores, grid_size=2000, step=0):
    """Uniform partition of [min(scores), max(scores)] into grid_size points."""
    scores = np.asarray(cal_scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        raise DegenerateGridError(
            f"all {scores.size} calibration scores at step {step} equal {lo!r}"
        )
    return ThresholdGrid(step=step, values=np.linspace(lo, hi, grid_size))


@dataclass(frozen=True)
class StepCalibration:
    step: int
    n_samples: int
    grid: np.ndarray
    empirical_risks: np.ndarray
    p_values: np.ndarray
    threshold: float | None


def select_threshold(grid, cal_scores, budget):
    """Smallest grid value whose HB p-value meets the per-step budget.

    Returns a StepCalibration; its threshold is None when no candidate
    passes.  Empirical risk (hence the p-value) is non-increasing along the
    ascending grid, so the first passing index is the minimizer.
    """
    scores = np.sort(np.asarray(cal_scores, dtype=np.float64))
    n = scores.size
    counts_above = n - np.searchsorted(scores, grid.values, side="right")
    p_values = _hb_pvalues_for_counts(counts_above, n, budget.alpha)
    passing = np.nonzero(p_values <= budget.per_step_budget)[0]
    threshold = float(grid.values[passing[0]]) if passing.size else None
    return StepCalibration(
        step=grid.step,
        n_samples=n,
        grid=grid.values,
        empirical_risks=counts_above / n,
        p_values=p_values,
        threshold=threshold,
    )


@dataclass
class CalibrationResult:
    """Per-step audit records plus the (alpha, delta, K) budget."""

    steps: list
    budget: RiskBudget
    score_config_hash: int = 0
    model_hash: int = 0

    @property
    def thresholds(self):
        return np.array(
            [np.nan if s.threshold is None else s.threshold for s in self.steps]
        )

    def threshold(self, k):
        record = self.steps[k]
        if record.step != k:
            record = next(s for s in self.steps if s.step == k)
        if record.threshold is None:
            raise CalibrationInfeasibleError(f"step {k} has no calibrated threshold")
        return record.threshold

    def to_json(self):
        payload = {
            "budget": {
                "alpha": self.budget.alpha,
                "delta": self.budget.delta,
                "n_steps": self.budget.n_steps,
            },
            "score_config_hash": self.score_config_hash,
            "model_hash": self.model_hash,
            "steps": [
                {
                    "step": s.step,
                    "n_samples": s.n_samples,
                    "grid": s.grid.tolist(),
                    "empirical_risks": s.empirical_risks.tolist(),
                    "p_values": s.p_values.tolist(),
                    "threshold": s.threshold,
                }
                for s in self.steps
            ],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        budget = RiskBudget(**payload["budget"])
        steps = [
            StepCalibration(
                step=s["step"],
                n_samples=s["n_samples"],
                grid=np.array(s["grid"]),
                empirical_risks=np.array(s["empirical_risks"]),
                p_values=np.array(s["p_values"]),
                threshold=s["threshold"],
            )
            for s in payload["steps"]
        ]
        return cls(
            steps=steps,
            budget=budget,
            score_config_hash=payload["score_config_hash"],
            model_hash=payload["model_hash"],
        )


def calibrate_scores(scores_by_step, budget, grid_size=2000):
    """LTT over precomputed per-step calibration scores.

    Raises CalibrationInfeasibleError naming the failing step and the
    minimum zero-miss sample count when any step finds no threshold.
    """
    if len(scores_by_step) != budget.n_steps:
        raise ConfigurationError(
            f"budget covers {budget.n_steps} steps but {len(scores_by_step)} were scored"
        )
    steps = []
    for k, scores in enumerate(scores_by_step):
        scores = np.asarray(scores)
        if scores.size < 1:
            raise ConfigurationError(f"step {k} has no calibration scores")
        record = select_threshold(build_grid(scores, grid_size, step=k), scores, budget)
        if record.threshold is None:
            n_min = min_calibration_size(budget.alpha, budget.per_step_budget)
            raise CalibrationInfeasibleError(
                f"no threshold passes at step {k} with n={scores.size}; "
                f"a zero-miss pass needs n >= {n_min} at alpha={budget.alpha}, "
                f"per-step budget {budget.per_step_budget:g}"
            )
        steps.append(record)
    return CalibrationResult(steps=steps, budget=budget)


def score_config_hash(cfg):
    return crc64(
        json.dumps(
            {
                "taus": list(cfg.taus),
                "repeats": cfg.repeats,
                "weighting": cfg.weighting,
                "seed": cfg.seed,
            },
            sort_keys=True,
        ).encode()
    )


def calibrate_all(dataset, cal_ids, model, schedule, score_cfg, budget,
                  grid_size=2000, model_hash=0):
    """Score the calibration split at every step and run LTT per step."""
    cal_ids = np.asarray(cal_ids)
    if budget.n_steps != dataset.n_steps:
        raise ConfigurationError(
            f"budget n_steps={budget.n_steps} != dataset n_steps={dataset.n_steps}"
        )
    scores_by_step = [
        diffusion.score_states(
            dataset.states_at(k, cal_ids), k, model, schedule, model.normalizer,
            score_cfg, domain=diffusion.DOMAIN_CAL,
        )
        for k in range(dataset.n_steps)
    ]
    result = calibrate_scores(scores_by_step, budget, grid_size)
    result.score_config_hash = score_config_hash(score_cfg)
    result.model_hash = model_hash
    return result


@dataclass
class ReachPredictor:
    """Denoiser, schedule, score config, and thresholds answering membership."""

    model: object
    schedule: object
    score_config: object
    calibration: CalibrationResult

    @property
    def normalizer(self):
        return self.model.normalizer

    @property
    def n_steps(self):
        return self.calibration.budget.n_steps

    def score_states(self, X, k, domain=diffusion.DOMAIN_QUERY, start_index=0):
        return diffusion.score_states(
            X, k, self.model, self.schedule, self.normalizer, self.score_config,
            domain=domain, start_index=start_index,
        )

    def membership(self, X, k, domain=diffusion.DOMAIN_QUERY, start_index=0):
        """Boolean membership in the predicted set at step k, plus raw scores."""
        q = self.calibration.threshold(k)
        scores = self.score_states(X, k, domain=domain, start_index=start_index)
        return scores <= q, scores


def membership(x, k, predictor, domain=diffusion.DOMAIN_QUERY, index=0):
    """Single-state membership query; returns (accepted, score)."""
    accepted, scores = predictor.membership(
        np.atleast_2d(np.asarray(x, dtype=np.float64)), k,
        domain=domain, start_index=index,
    )
    return bool(accepted[0]), float(scores[0])
