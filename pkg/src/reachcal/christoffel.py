"""Christoffel-function baseline score.

The score of a state is the quadratic form z(x)^T (M + ridge I)^{-1} z(x),
where z is the monomial basis up to a total degree and M the empirical
moment matrix of the fitting samples.  Sublevel sets approximate the data
support; thresholds come from the same LTT calibration as the main score,
making the comparison apples-to-apples.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import calibration
from .errors import NumericError


def monomial_exponents(n_dims, degree):
    """Exponent matrix (basis_size, n_dims) in graded-lexicographic order."""
    rows = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_dims), total):
            exp = [0] * n_dims
            for idx in combo:
                exp[idx] += 1
            rows.append(exp)
    return np.array(rows, dtype=np.int64).reshape(len(rows), n_dims)


def monomial_basis(x, degree):
    """All monomials of total degree <= degree; (m, basis) for batched x."""
    single = np.asarray(x).ndim == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m, n = x.shape
    exps = monomial_exponents(n, degree)
    max_pow = int(exps.max(initial=0))
    powers = np.ones((n, m, max_pow + 1))
    for p in range(1, max_pow + 1):
        powers[:, :, p] = powers[:, :, p - 1] * x.T
    basis = np.ones((m, exps.shape[0]))
    for dim in range(n):
        basis *= powers[dim][:, exps[:, dim]]
    return basis[0] if single else basis


@dataclass
class ChristoffelModel:
    """Empirical moment matrix of the monomial basis, ridge-regularized."""

    degree: int
    n_dims: int
    moment: np.ndarray
    ridge: float
    _factor: tuple

    @property
    def basis_size(self):
        return self.moment.shape[0]

    def score(self, x):
        single = np.asarray(x).ndim == 1
        z = np.atleast_2d(monomial_basis(x, self.degree))
        values = np.einsum("ij,ij->i", z, cho_solve(self._factor, z.T).T)
        return float(values[0]) if single else values


def christoffel_fit(samples, degree, ridge=None):
    """Fit the moment matrix M = mean z z^T; ``ridge=None`` picks the default
    1e-10 * tr(M) / basis_size.  A singular M with ridge=0 raises."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    z = monomial_basis(samples, degree)
    moment = z.T @ z / z.shape[0]
    basis_size = moment.shape[0]
    if ridge is None:
        ridge = 1e-10 * np.trace(moment) / basis_size
    ridge = float(ridge)
    try:
        factor = cho_factor(moment + ridge * np.eye(basis_size))
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"moment matrix is singular with ridge={ridge:g}; "
            "pass a positive ridge"
        ) from exc
    return ChristoffelModel(
        degree=degree,
        n_dims=samples.shape[1],
        moment=moment,
        ridge=ridge,
        _factor=factor,
    )


def christoffel_score(x, model):
    return model.score(x)


@dataclass
class ChristoffelPredictor:
    """Per-step Christoffel models with LTT-calibrated thresholds.

    Exposes the same membership surface as the diffusion ReachPredictor so
    evaluation code treats either interchangeably.  ``dims`` restricts the
    score to a projection of the state (used for the 6-D quadrotor, scored
    on its (x, h) plane).
    """

    models: list
    calibration: calibration.CalibrationResult
    dims: tuple | None = None

    @property
    def n_steps(self):
        return len(self.models)

    def _project(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X if self.dims is None else X[:, list(self.dims)]

    def score_states(self, X, k, domain=None, start_index=0):
        return self.models[k].score(self._project(X))

    def membership(self, X, k, domain=None, start_index=0):
        q = self.calibration.threshold(k)
        scores = self.score_states(X, k)
        return scores <= q, scores


def fit_christoffel_predictor(dataset, train_ids, cal_ids, degree, budget,
                              grid_size=2000, ridge=None, dims=None):
    """Fit per-step moment matrices on the training split and calibrate."""
    cols = None if dims is None else list(dims)
    models = []
    scores_by_step = []
    for k in range(dataset.n_steps):
        train_states = dataset.states_at(k, train_ids)
        cal_states = dataset.states_at(k, cal_ids)
        if cols is not None:
            train_states = train_states[:, cols]
            cal_states = cal_states[:, cols]
        model = christoffel_fit(train_states, degree, ridge=ridge)
        models.append(model)
        scores_by_step.append(model.score(cal_states))
    result = calibration.calibrate_scores(scores_by_step, budget, grid_size)
    return ChristoffelPredictor(models=models, calibration=result, dims=dims)
