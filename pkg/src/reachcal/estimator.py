"""Scikit-learn style estimators wrapping the full pipeline.

``fit`` consumes trajectories shaped (N, K, n), splits them at the
trajectory level, trains or fits the score model on the training split,
and calibrates per-step thresholds on the calibration split.  ``predict``
answers time-indexed membership queries; thresholds carry the PAC
guarantee of the LTT calibration.
"""

import numpy as np
from sklearn.base import BaseEstimator

from . import calibration, christoffel, datastore, denoiser, diffusion
from .hashing import config_hash
from .validation import as_states, as_trajectories, check_fitted, check_step


class _ReachabilityMixin:
    """Shared post-fit query surface for reachability estimators."""

    def score_samples(self, X, k):
        """Raw nonconformity scores of states ``X`` at physical step ``k``."""
        check_fitted(self, "predictor_")
        k = check_step(k, self.n_steps_)
        X = as_states(X, self.n_dims_)
        return self.predictor_.score_states(X, k)

    def decision_function(self, X, k):
        """Signed margin q_k - score; nonnegative inside the predicted set."""
        return self.thresholds_[check_step(k, self.n_steps_)] - self.score_samples(X, k)

    def predict(self, X, k):
        """Boolean membership of states ``X`` in the predicted set at step k."""
        check_fitted(self, "predictor_")
        k = check_step(k, self.n_steps_)
        X = as_states(X, self.n_dims_)
        accepted, _ = self.predictor_.membership(X, k)
        return accepted

    def _split_dataset(self, X):
        if isinstance(X, datastore.Dataset):
            ds = X
        else:
            ds = datastore.Dataset(states=as_trajectories(X), dt=self.dt)
        parts = datastore.split(ds, self.split_ratios, seed=self.split_seed)
        return ds, parts


class DiffusionReachability(_ReachabilityMixin, BaseEstimator):
    """Reachable-set predictor scored by denoising reconstruction error.

    Parameters follow the desk-scale defaults: a 128x2 FiLM-MLP, linear
    beta schedule over 1000 steps, score on tau in {1, 2, 3} with 8
    repeats, and LTT calibration at (alpha, delta) over a 2000-point
    threshold grid.
    """

    def __init__(self, *, alpha=0.05, delta=0.2,
                 split_ratios=(0.6, 0.2, 0.2), split_seed=0, dt=1.0,
                 hidden_dim=128, layers=2, embed_dim=64,
                 lr=5e-4, weight_decay=0.01, batch_size=1024, epochs=60,
                 train_seed=0, dtype="float64",
                 schedule_steps=1000, beta_start=1e-4, beta_end=0.02,
                 taus=(1, 2, 3), repeats=8, weighting="uniform", score_seed=0,
                 grid_size=2000):
        self.alpha = alpha
        self.delta = delta
        self.split_ratios = split_ratios
        self.split_seed = split_seed
        self.dt = dt
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.embed_dim = embed_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.train_seed = train_seed
        self.dtype = dtype
        self.schedule_steps = schedule_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.taus = taus
        self.repeats = repeats
        self.weighting = weighting
        self.score_seed = score_seed
        self.grid_size = grid_size

    def _denoiser_config(self):
        return denoiser.DenoiserConfig(
            hidden_dim=self.hidden_dim,
            layers=self.layers,
            embed_dim=self.embed_dim,
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.train_seed,
            dtype=self.dtype,
        )

    def _score_config(self):
        return diffusion.ScoreConfig(
            taus=tuple(self.taus),
            repeats=self.repeats,
            weighting=self.weighting,
            seed=self.score_seed,
        )

    def fit(self, X, y=None):
        ds, parts = self._split_dataset(X)
        schedule = diffusion.make_schedule(
            self.schedule_steps, self.beta_start, self.beta_end
        )
        normalizer = datastore.fit_normalizer(ds, parts.train_ids)
        model = denoiser.train_denoiser(
            ds, parts.train_ids, schedule, self._denoiser_config(), normalizer
        )
        budget = calibration.RiskBudget(
            alpha=self.alpha, delta=self.delta, n_steps=ds.n_steps
        )
        score_cfg = self._score_config()
        result = calibration.calibrate_all(
            ds, parts.cal_ids, model, schedule, score_cfg, budget,
            grid_size=self.grid_size,
            model_hash=config_hash(model.config.to_dict()),
        )
        self.split_ = parts
        self.normalizer_ = normalizer
        self.schedule_ = schedule
        self.model_ = model
        self.n_dims_ = ds.n_dims
        self.n_steps_ = ds.n_steps
        self.thresholds_ = result.thresholds
        self.predictor_ = calibration.ReachPredictor(
            model=model, schedule=schedule, score_config=score_cfg,
            calibration=result,
        )
        return self


class ChristoffelReachability(_ReachabilityMixin, BaseEstimator):
    """Baseline predictor scored by the Christoffel function.

    ``dims`` restricts scoring to a projection of the state; ``ridge=None``
    uses the trace-scaled default regularization.
    """

    def __init__(self, *, degree=11, ridge=None, dims=None,
                 alpha=0.05, delta=0.2,
                 split_ratios=(0.6, 0.2, 0.2), split_seed=0, dt=1.0,
                 grid_size=2000):
        self.degree = degree
        self.ridge = ridge
        self.dims = dims
        self.alpha = alpha
        self.delta = delta
        self.split_ratios = split_ratios
        self.split_seed = split_seed
        self.dt = dt
        self.grid_size = grid_size

    def fit(self, X, y=None):
        ds, parts = self._split_dataset(X)
        budget = calibration.RiskBudget(
            alpha=self.alpha, delta=self.delta, n_steps=ds.n_steps
        )
        predictor = christoffel.fit_christoffel_predictor(
            ds, parts.train_ids, parts.cal_ids, self.degree, budget,
            grid_size=self.grid_size, ridge=self.ridge,
            dims=None if self.dims is None else tuple(self.dims),
        )
        self.split_ = parts
        self.n_dims_ = ds.n_dims
        self.n_steps_ = ds.n_steps
        self.thresholds_ = predictor.calibration.thresholds
        self.predictor_ = predictor
        return self
