"""Reference sets, tightness metrics, repeated-split validation, volume
bound, and perturbation sensitivity.

Reference reachable sets are occupancy masks on a regular grid: a cell is
reachable when at least one test state falls inside it.  Predicted masks
evaluate membership at cell centers.  All masks share one grid so the
metrics of different predictors are comparable.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import calibration as cal_mod
from .diffusion import DOMAIN_GRID, DOMAIN_SENSITIVITY, DOMAIN_TEST
from .errors import ConfigurationError

OUT_OF_BOUNDS_TOLERANCE = 0.01


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned evaluation grid: per-axis bounds and cell counts."""

    lower: np.ndarray
    upper: np.ndarray
    cells: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
            and np.array_equal(self.cells, other.cells)
        )

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        cells = np.asarray(self.cells, dtype=np.int64)
        if not (lower.shape == upper.shape == cells.shape) or lower.ndim != 1:
            raise ConfigurationError("lower, upper, cells must be matching 1-D arrays")
        if np.any(cells < 2):
            raise ConfigurationError("need >= 2 cells per axis")
        if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
            raise ConfigurationError("grid bounds must be finite")
        if np.any(lower >= upper):
            raise ConfigurationError("grid needs lower < upper per axis")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_states(cls, states, cells=128, inflate=0.05):
        """Bounding box of ``states`` inflated by ``inflate`` per side."""
        states = np.asarray(states, dtype=np.float64).reshape(-1, np.shape(states)[-1])
        lo = states.min(axis=0)
        hi = states.max(axis=0)
        pad = inflate * np.maximum(hi - lo, 1e-12)
        n = states.shape[1]
        cells = np.full(n, cells) if np.ndim(cells) == 0 else np.asarray(cells)
        return cls(lower=lo - pad, upper=hi + pad, cells=cells)

    @property
    def n_dims(self):
        return self.lower.size

    @property
    def steps(self):
        return (self.upper - self.lower) / self.cells

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    @property
    def cell_volume(self):
        return float(np.prod(self.steps))

    def centers(self):
        """Cell centers as an (n_cells, n_dims) array, C-order over axes."""
        axes = [
            self.lower[d] + (np.arange(self.cells[d]) + 0.5) * self.steps[d]
            for d in range(self.n_dims)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def locate(self, states):
        """Flat cell index per state; -1 when out of bounds."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        idx = np.floor((states - self.lower) / self.steps).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.cells), axis=1)
        flat = np.ravel_multi_index(
            tuple(np.clip(idx[:, d], 0, self.cells[d] - 1) for d in range(self.n_dims)),
            tuple(self.cells),
        )
        return np.where(inside, flat, -1)


@dataclass(frozen=True, eq=False)
class MembershipMask:
    """Boolean reachability labels on a grid at one physical step."""

    values: np.ndarray
    grid: GridSpec
    step: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=bool).reshape(-1)
        if values.size != self.grid.n_cells:
            raise ConfigurationError("mask size does not match the grid")
        object.__setattr__(self, "values", values)

    @property
    def count(self):
        return int(self.values.sum())


def build_reference_mask(states, grid, step=0):
    """Occupancy mask: a cell is reachable if any state falls inside it."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    flat = grid.locate(states)
    n_out = int(np.count_nonzero(flat < 0))
    if n_out > OUT_OF_BOUNDS_TOLERANCE * states.shape[0]:
        raise ConfigurationError(
            f"{n_out}/{states.shape[0]} states fall outside the grid; enlarge it"
        )
    values = np.zeros(grid.n_cells, dtype=bool)
    values[flat[flat >= 0]] = True
    return MembershipMask(values=values, grid=grid, step=step)


def predict_mask(predictor, k, grid):
    """Membership of every cell center under the fixed per-cell noise rule."""
    accepted, _ = predictor.membership(grid.centers(), k, domain=DOMAIN_GRID)
    return MembershipMask(values=accepted, grid=grid, step=k)


def predict_mask_projected(predictor, k, grid, states, dims):
    """Projected predicted mask for states scored in their full dimension.

    A cell is predicted reachable when at least one probe state whose
    ``dims``-projection falls inside it is accepted.  Probes are the test
    states themselves; cells without probes stay unreachable.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    accepted, _ = predictor.membership(states, k, domain=DOMAIN_GRID)
    projected = states[:, list(dims)]
    return build_reference_mask(projected[accepted], grid, step=k)


def iou_precision(pred, ref):
    """Intersection-over-union and precision of cell counts.

    Empty union gives IoU 1 (both empty agree exactly); an empty prediction
    against a nonempty reference gives (0, 0).
    """
    if pred.grid != ref.grid:
        raise ConfigurationError("masks use different grids")
    inter = int(np.count_nonzero(pred.values & ref.values))
    union = int(np.count_nonzero(pred.values | ref.values))
    if union == 0:
        return 1.0, 1.0
    iou = inter / union
    precision = inter / pred.count if pred.count else 0.0
    return iou, precision


def recall(pred, ref):
    if ref.count == 0:
        return 1.0
    return int(np.count_nonzero(pred.values & ref.values)) / ref.count


def fnr_from_scores(scores_by_step, thresholds):
    """Per-step fraction of scores above the threshold, plus the max."""
    per_step = np.array(
        [
            np.count_nonzero(np.asarray(s) > q) / np.asarray(s).size
            for s, q in zip(scores_by_step, thresholds)
        ]
    )
    return per_step, float(per_step.max())


def fnr(dataset, test_ids, predictor):
    """Test false-negative rate per step and its max over the horizon."""
    test_ids = np.asarray(test_ids)
    scores = [
        predictor.score_states(dataset.states_at(k, test_ids), k, domain=DOMAIN_TEST)
        for k in range(dataset.n_steps)
    ]
    thresholds = [predictor.calibration.threshold(k) for k in range(dataset.n_steps)]
    return fnr_from_scores(scores, thresholds)


@dataclass
class PacValidation:
    pass_rate: float
    records: list

    def passed(self, floor):
        return self.pass_rate >= floor


def pac_validate(pool_scores_by_step, budget, n_splits, seed=0,
                 grid_size=2000, cal_fraction=0.5):
    """Repeated cal/test re-splits of a fixed score pool.

    Each split calibrates thresholds on its calibration half and measures
    the max-over-k FNR on its test half; a split passes when that FNR is
    at most alpha.  Infeasible calibrations count as failures with a
    recorded reason.  n_splits=1 degenerates to a single fnr measurement.
    """
    pool = [np.asarray(s, dtype=np.float64) for s in pool_scores_by_step]
    n_pool = pool[0].size
    if any(s.size != n_pool for s in pool):
        raise ConfigurationError("score pool must be rectangular across steps")
    n_cal = int(round(cal_fraction * n_pool))
    if not 0 < n_cal < n_pool:
        raise ConfigurationError("cal_fraction leaves an empty half")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xBAC)))
    records = []
    for split_idx in range(n_splits):
        perm = rng.permutation(n_pool)
        cal_sel, test_sel = perm[:n_cal], perm[n_cal:]
        record = {"split": split_idx, "seed_perm_first": int(perm[0])}
        try:
            result = cal_mod.calibrate_scores(
                [s[cal_sel] for s in pool], budget, grid_size
            )
        except cal_mod.CalibrationInfeasibleError as exc:
            record.update({"pass": False, "max_fnr": None, "reason": str(exc)})
            records.append(record)
            continue
        per_step, max_fnr = fnr_from_scores(
            [s[test_sel] for s in pool], result.thresholds
        )
        record.update(
            {
                "pass": bool(max_fnr <= budget.alpha),
                "max_fnr": max_fnr,
                "per_step_fnr": per_step.tolist(),
                "reason": "",
            }
        )
        records.append(record)
    pass_rate = sum(r["pass"] for r in records) / len(records)
    return PacValidation(pass_rate=pass_rate, records=records)


@dataclass(frozen=True)
class VolumeBoundInput:
    """Inputs of the missed-volume bound alpha * J_k / c0, J_k = exp(-c t)."""

    c0: float
    divergence: float
    t_k: float
    alpha: float

    def __post_init__(self):
        if self.c0 <= 0:
            raise ConfigurationError("c0 must be > 0")

    @property
    def bound(self):
        return self.alpha * np.exp(-self.divergence * self.t_k) / self.c0


def volume_bound_check(pred, ref, vb):
    """Measured missed volume (ref cells not predicted) against the bound."""
    if pred.grid != ref.grid:
        raise ConfigurationError("masks use different grids")
    missed_cells = int(np.count_nonzero(ref.values & ~pred.values))
    measured = missed_cells * pred.grid.cell_volume
    return measured, float(vb.bound)


def sensitivity_curve(predictor, states, sigmas, sigma_px, k, seed=0):
    """Acceptance rate of in-set states under growing Gaussian corruption.

    Perturbations share one base noise draw across sigma values (paired
    comparison); per-query score noise reuses the same streams for every
    sigma, so the curve differences reflect the perturbation scale only.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    sigma_px = np.asarray(sigma_px, dtype=np.float64)
    base = np.random.default_rng(
        np.random.SeedSequence((int(seed), 0x5E45))
    ).standard_normal(states.shape)
    curve = []
    for sigma in sigmas:
        perturbed = states + float(sigma) * sigma_px * base
        accepted, _ = predictor.membership(perturbed, k, domain=DOMAIN_SENSITIVITY)
        curve.append((float(sigma), float(np.mean(accepted))))
    return curve


def write_metrics_csv(path, rows, fieldnames, header_comments=()):
    """Plot-ready CSV with '#'-prefixed provenance comments."""
    with open(path, "w", newline="") as fh:
        for comment in header_comments:
            fh.write(f"# {comment}\n")
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_mask_pgm(mask, path):
    """Binary PGM (P5): 255 marks member cells.

    Rows scan the second grid axis from high to low (image convention);
    columns scan the first axis upward.  Only 2-D grids are supported.
    """
    grid = mask.grid
    if grid.n_dims != 2:
        raise ConfigurationError("PGM export needs a 2-D grid")
    img = mask.values.reshape(tuple(grid.cells))
    img = np.flip(img.T, axis=0)
    data = np.where(img, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_mask_csv(mask, path, header_comments=()):
    """Member-cell center coordinates for plotting."""
    centers = mask.grid.centers()[mask.values]
    fieldnames = [f"x{d}" for d in range(mask.grid.n_dims)]
    rows = [dict(zip(fieldnames, map(float, c))) for c in centers]
    write_metrics_csv(path, rows, fieldnames, header_comments)
