"""Time-conditioned noise-prediction network, trained from scratch.

The network is a FiLM-MLP: a stack of dense layers whose pre-activations
are modulated per layer by (scale, shift) vectors computed from a shared
two-layer projection of the condition embedding.  Conditioning combines the
diffusion step tau and the physical step k through sinusoidal embeddings.
Gradients are accumulated by hand (reverse mode); the optimizer is AdamW
with decoupled weight decay.

Parameters are stored as float32 (the checkpoint precision); all forward
and backward arithmetic runs in float64.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .diffusion import noisify
from .errors import ConfigurationError, NumericError, TrainingError
from .hashing import crc64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_INIT_STREAM = 0
_TRAIN_STREAM = 1


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_dim: int = 128
    layers: int = 2
    embed_dim: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 1024
    epochs: int = 60
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.layers < 1 or self.hidden_dim < 1:
            raise ConfigurationError("layers and hidden_dim must be >= 1")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigurationError("embed_dim must be an even count >= 2")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return {
            "hidden_dim": self.hidden_dim,
            "layers": self.layers,
            "embed_dim": self.embed_dim,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "dtype": self.dtype,
        }


# paper-scale reference configurations, recorded as presets only
PRESET_DUFFING_FULL = DenoiserConfig(hidden_dim=2048, layers=12, embed_dim=128,
                                     lr=5e-4, batch_size=131072, epochs=100)
PRESET_QUADROTOR_FULL = DenoiserConfig(hidden_dim=512, layers=6, embed_dim=64,
                                       lr=5e-4, batch_size=65536, epochs=500)


def _frequencies(n_freq):
    if n_freq == 1:
        return np.array([1.0])
    return np.power(10.0, 4.0 * np.arange(n_freq) / (n_freq - 1))


def embed_scalar(u, embed_dim):
    """Sinusoidal features of u in [0, 1]: embed_dim/2 (sin, cos) pairs."""
    freqs = _frequencies(embed_dim // 2)
    phase = np.asarray(u, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def embed_condition(tau, k, n_diffusion, n_horizon, embed_dim):
    """Condition vector for (tau, k): concatenated scalar embeddings.

    1 <= tau <= n_diffusion and 0 <= k < n_horizon; both scalars or arrays.
    """
    tau = np.asarray(tau)
    k = np.asarray(k)
    if np.any(tau < 1) or np.any(tau > n_diffusion):
        raise ValueError(f"tau out of range [1, {n_diffusion}]")
    if np.any(k < 0) or np.any(k >= n_horizon):
        raise ValueError(f"k out of range [0, {n_horizon})")
    return np.concatenate(
        [
            embed_scalar(tau / n_diffusion, embed_dim),
            embed_scalar(k / n_horizon, embed_dim),
        ],
        axis=-1,
    )


def _silu(a):
    """Returns (silu(a), sigmoid(a)); the sigmoid is reused in backward."""
    s = expit(a)
    return a * s, s


def _silu_prime(a, s):
    return s * (1.0 + a * (1.0 - s))


def init_params(config, n_dims, rng):
    """Kaiming-uniform weights, zero biases, zero-initialized output layer.

    Draw order: hidden layers, output layer, FiLM projection layers.
    """
    H, L = config.hidden_dim, config.layers
    cond_dim = 2 * config.embed_dim

    def kaiming(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)

    params = {}
    in_dim = n_dims
    for layer in range(L):
        params[f"hidden{layer}.weight"] = kaiming(in_dim, H)
        params[f"hidden{layer}.bias"] = np.zeros(H, dtype=np.float32)
        in_dim = H
    params["out.weight"] = np.zeros((H, n_dims), dtype=np.float32)
    params["out.bias"] = np.zeros(n_dims, dtype=np.float32)
    params["film0.weight"] = kaiming(cond_dim, H)
    params["film0.bias"] = np.zeros(H, dtype=np.float32)
    params["film1.weight"] = kaiming(H, L * 2 * H)
    params["film1.bias"] = np.zeros(L * 2 * H, dtype=np.float32)
    return params


def parameter_names(config):
    """Canonical parameter order used by checkpoints and the optimizer."""
    names = []
    for layer in range(config.layers):
        names += [f"hidden{layer}.weight", f"hidden{layer}.bias"]
    names += ["out.weight", "out.bias", "film0.weight", "film0.bias",
              "film1.weight", "film1.bias"]
    return names


@dataclass
class DenoiserModel:
    """Trained noise predictor with its normalizer and conditioning ranges."""

    params: dict
    config: DenoiserConfig
    normalizer: object
    n_dims: int
    n_horizon: int
    n_diffusion: int
    schedule_hash: int = 0
    loss_curve: list = field(default_factory=list)

    def _forward_cached(self, x, tau, k):
        dtype = self.config.np_dtype
        p = {name: arr.astype(dtype, copy=False) for name, arr in self.params.items()}
        H, L = self.config.hidden_dim, self.config.layers
        x = np.atleast_2d(np.asarray(x)).astype(dtype, copy=False)
        m = x.shape[0]
        tau = np.broadcast_to(np.asarray(tau), (m,))
        k = np.broadcast_to(np.asarray(k), (m,))

        cond = embed_condition(tau, k, self.n_diffusion, self.n_horizon,
                               self.config.embed_dim).astype(dtype, copy=False)
        p1 = cond @ p["film0.weight"] + p["film0.bias"]
        u, u_sig = _silu(p1)
        film = u @ p["film1.weight"] + p["film1.bias"]

        cache = {"x": x, "cond": cond, "p1": p1, "u": u, "u_sig": u_sig,
                 "film": film, "z": [], "a": [], "sig": [], "h": [x], "p": p}
        h = x
        for layer in range(L):
            z = h @ p[f"hidden{layer}.weight"] + p[f"hidden{layer}.bias"]
            s = film[:, layer * 2 * H : layer * 2 * H + H]
            t = film[:, layer * 2 * H + H : (layer + 1) * 2 * H]
            a = (1.0 + s) * z + t
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite activations in hidden layer {layer}")
            h, sig = _silu(a)
            cache["z"].append(z)
            cache["a"].append(a)
            cache["sig"].append(sig)
            cache["h"].append(h)
        y = h @ p["out.weight"] + p["out.bias"]
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite activations in output layer")
        return y, cache

    def forward(self, x, tau, k):
        """Predicted noise for normalized inputs ``x`` (batched or single).

        Inference groups rows by their (tau, k) condition: the FiLM path
        runs once per distinct condition and broadcasts over the group,
        which dominates the cost of scoring large query batches.
        """
        single = np.asarray(x).ndim == 1
        dtype = self.config.np_dtype
        x = np.atleast_2d(np.asarray(x)).astype(dtype, copy=False)
        m = x.shape[0]
        tau = np.broadcast_to(np.asarray(tau), (m,))
        k = np.broadcast_to(np.asarray(k), (m,))
        conditions = np.stack([tau, k], axis=1)
        uniq, inverse = np.unique(conditions, axis=0, return_inverse=True)
        if uniq.shape[0] > max(64, m // 8):
            y, _ = self._forward_cached(x, tau, k)
            return y[0] if single else y

        p = {name: arr.astype(dtype, copy=False) for name, arr in self.params.items()}
        H, L = self.config.hidden_dim, self.config.layers
        cond = embed_condition(uniq[:, 0], uniq[:, 1], self.n_diffusion,
                               self.n_horizon, self.config.embed_dim).astype(dtype, copy=False)
        u, _ = _silu(cond @ p["film0.weight"] + p["film0.bias"])
        film = u @ p["film1.weight"] + p["film1.bias"]

        y = np.empty((m, p["out.weight"].shape[1]), dtype=dtype)
        for g in range(uniq.shape[0]):
            rows = np.nonzero(inverse == g)[0]
            h = x[rows]
            for layer in range(L):
                z = h @ p[f"hidden{layer}.weight"] + p[f"hidden{layer}.bias"]
                s = film[g, layer * 2 * H : layer * 2 * H + H]
                t = film[g, layer * 2 * H + H : (layer + 1) * 2 * H]
                a = (1.0 + s) * z + t
                if not np.all(np.isfinite(a)):
                    raise NumericError(f"non-finite activations in hidden layer {layer}")
                h, _ = _silu(a)
            y[rows] = h @ p["out.weight"] + p["out.bias"]
        if not np.all(np.isfinite(y)):
            raise NumericError("non-finite activations in output layer")
        return y[0] if single else y

    __call__ = forward

    def _backward(self, cache, g_y):
        H, L = self.config.hidden_dim, self.config.layers
        p = cache["p"]
        film = cache["film"]
        grads = {}
        grads["out.weight"] = cache["h"][L].T @ g_y
        grads["out.bias"] = g_y.sum(axis=0)
        g_h = g_y @ p["out.weight"].T
        g_film = np.zeros_like(film)
        for layer in range(L - 1, -1, -1):
            s = film[:, layer * 2 * H : layer * 2 * H + H]
            g_a = g_h * _silu_prime(cache["a"][layer], cache["sig"][layer])
            g_z = g_a * (1.0 + s)
            g_film[:, layer * 2 * H : layer * 2 * H + H] = g_a * cache["z"][layer]
            g_film[:, layer * 2 * H + H : (layer + 1) * 2 * H] = g_a
            grads[f"hidden{layer}.weight"] = cache["h"][layer].T @ g_z
            grads[f"hidden{layer}.bias"] = g_z.sum(axis=0)
            g_h = g_z @ p[f"hidden{layer}.weight"].T
        grads["film1.weight"] = cache["u"].T @ g_film
        grads["film1.bias"] = g_film.sum(axis=0)
        g_u = g_film @ p["film1.weight"].T
        g_p1 = g_u * _silu_prime(cache["p1"], cache["u_sig"])
        grads["film0.weight"] = cache["cond"].T @ g_p1
        grads["film0.bias"] = g_p1.sum(axis=0)
        return grads


def loss_and_grad(model, x0, ks, schedule, rng, tau=None, eps=None):
    """DDPM objective on one batch: mean ||eps_hat - eps||^2 and gradients.

    tau ~ Uniform{1..T} and eps ~ N(0, I) per sample unless supplied
    explicitly (uniform loss weighting across tau).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    m = x0.shape[0]
    if m < 1:
        raise ValueError("batch must be nonempty")
    if tau is None:
        tau = rng.integers(1, schedule.n_steps + 1, size=m)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    x_tau = noisify(x0, tau, eps, schedule)
    y, cache = model._forward_cached(x_tau, tau, ks)
    resid = (y - eps).astype(model.config.np_dtype, copy=False)
    loss = float((resid.astype(np.float64) ** 2).sum() / m)
    grads = model._backward(cache, (2.0 / m) * resid)
    return loss, grads


class AdamW:
    """Decoupled weight decay Adam; moments kept in float64."""

    def __init__(self, params, lr, weight_decay=0.0,
                 betas=(ADAM_BETA1, ADAM_BETA2), eps=ADAM_EPS):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros(arr.shape) for name, arr in params.items()}
        self.v = {name: np.zeros(arr.shape) for name, arr in params.items()}

    def step(self, params, grads):
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p32 in params.items():
            g = grads[name].astype(np.float64, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = p32.astype(np.float64)
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] = p.astype(np.float32)


def train_denoiser(dataset, ids, schedule, config, normalizer, log=None):
    """Fit the denoiser on the training-split states of ``dataset``.

    Shuffled mini-batches with AdamW; deterministic under config.seed.
    Returns the model with its per-epoch loss curve attached.
    """
    states = dataset.states[np.asarray(ids)]
    n_traj, n_horizon, n_dims = states.shape
    if n_traj < 1:
        raise ConfigurationError("training split is empty")
    x0 = normalizer.apply(states.reshape(-1, n_dims))
    ks = np.tile(np.arange(n_horizon), n_traj)

    rng_init = np.random.default_rng(
        np.random.SeedSequence((config.seed, _INIT_STREAM))
    )
    params = init_params(config, n_dims, rng_init)
    model = DenoiserModel(
        params=params,
        config=config,
        normalizer=normalizer,
        n_dims=n_dims,
        n_horizon=n_horizon,
        n_diffusion=schedule.n_steps,
        schedule_hash=crc64(schedule.tobytes()),
    )
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TRAIN_STREAM)))

    n_samples = x0.shape[0]
    batch = min(config.batch_size, n_samples)
    for epoch in range(config.epochs):
        perm = rng.permutation(n_samples)
        epoch_losses = []
        for start in range(0, n_samples, batch):
            sel = perm[start : start + batch]
            loss, grads = loss_and_grad(model, x0[sel], ks[sel], schedule, rng)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"NaN loss at epoch {epoch}, batch {start // batch}"
                )
            optimizer.step(params, grads)
            epoch_losses.append(loss)
        model.loss_curve.append(float(np.mean(epoch_losses)))
        if log is not None:
            log.debug("epoch %d loss %.6f", epoch, model.loss_curve[-1])
    return model
