"""Diffusion testbed whose terminal marginal is a product of 1-D Gaussian mixtures.

The base model is the exact time reversal of the forward noising SDE
``dx = k(t) x / 2 dt + sqrt(k(t)) dw`` with ``k(t) = 1/t``, so its drift is
available in closed form from the mixture's forward marginal::

    p_t(x) = sum_c pi_c N(x | sqrt(t) mu_c, (1 - t) + t var_c)

The fine-tuned drift subtracts ``sigma(t)^2 u_theta(x, t)`` from the base drift.
Paths are simulated with Euler-Maruyama, and density ratios between the model
and base are those of the two discrete Gaussian transition chains.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, ndtr

from .mlp import (MlpSpec, ParamVector, backward_from_cache, forward_with_cache, mlp_forward,
                  sinusoidal_embed)


@dataclass
class GmmSpec:
    """Independent per-coordinate mixtures; arrays have shape ``(k, C)``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if not (self.weights.shape == self.means.shape == self.variances.shape):
            raise ValueError("weights, means and variances must share a shape")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("mixture weights must sum to one in every dimension")
        if np.any(self.variances <= 0):
            raise ValueError("component variances must be positive")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def product(cls, k: int, weights, means, variances) -> "GmmSpec":
        """``k`` independent copies of one 1-D mixture."""
        row = [np.asarray(a, dtype=np.float64) for a in (weights, means, variances)]
        return cls(*(np.tile(a, (k, 1)) for a in row))

    def prob_above(self, thresholds=0.0) -> np.ndarray:
        """``P(x[i] > thresholds[i])`` under the terminal mixture, per coordinate."""
        tau = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (self.dim,))
        z = (self.means - tau[:, None]) / np.sqrt(self.variances)
        return np.sum(self.weights * ndtr(z), axis=1)

    def sample(self, n: int, rng) -> np.ndarray:
        """Exact draws from the terminal mixture, shape ``(n, k)``."""
        rng = np.random.default_rng(rng)
        u = rng.random((n, self.dim, 1))
        comp = (u > np.cumsum(self.weights, axis=1)[None, :, :-1]).sum(axis=2)
        rows = np.arange(self.dim)
        mu = self.means[rows, comp]
        sd = np.sqrt(self.variances[rows, comp])
        return mu + sd * rng.standard_normal((n, self.dim))

    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.means, axis=1)

    def variance(self) -> np.ndarray:
        m = self.mean()
        second = np.sum(self.weights * (self.variances + self.means ** 2), axis=1)
        return second - m ** 2


def symmetric_preset(k: int = 1, separation: float = 2.0, variance: float = 0.25) -> GmmSpec:
    """Two equal modes at ``-separation`` and ``+separation`` in each coordinate."""
    return GmmSpec.product(k, [0.5, 0.5], [-separation, separation], [variance, variance])


def rare_preset(pi: float, k: int = 1, separation: float = 2.0, variance: float = 0.25) -> GmmSpec:
    """Like :func:`symmetric_preset` but the right mode carries weight ``pi``."""
    if not 0 < pi < 1:
        raise ValueError("pi must lie in (0, 1)")
    return GmmSpec.product(k, [1 - pi, pi], [-separation, separation], [variance, variance])


@dataclass(frozen=True)
class SdeSchedule:
    """Uniform time grid on ``[0, 1]`` with ``kappa(t) = min(1/t, kappa_max)``."""

    steps: int = 128
    kappa_max: Optional[float] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.kappa_max is None:
            object.__setattr__(self, "kappa_max", float(self.steps))
        if self.kappa_max <= 0:
            raise ValueError("kappa_max must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.steps + 1)

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.grid)

    def kappa(self, t):
        t = np.asarray(t, dtype=np.float64)
        with np.errstate(divide="ignore"):
            k = np.where(t > 0, 1.0 / np.where(t > 0, t, 1.0), np.inf)
        return np.minimum(k, self.kappa_max)

    def sigma(self, t):
        return np.sqrt(self.kappa(t))


def _marginal_params(gmm: GmmSpec, t: float):
    m = np.sqrt(t)
    mean = m * gmm.means
    var = (1.0 - t) + t * gmm.variances
    return mean, var


def forward_marginal_logpdf(gmm: GmmSpec, x, t: float) -> np.ndarray:
    """Log density of the forward marginal at time ``t``, summed over coordinates."""
    x = np.asarray(x, dtype=np.float64)
    mean, var = _marginal_params(gmm, t)
    d = x[..., None] - mean
    logc = np.log(gmm.weights) - 0.5 * np.log(2 * np.pi * var) - 0.5 * d ** 2 / var
    return logsumexp(logc, axis=-1).sum(axis=-1)


def forward_marginal_score(gmm: GmmSpec, x, t: float) -> np.ndarray:
    """Gradient in ``x`` of the forward-marginal log density (coordinatewise)."""
    x = np.asarray(x, dtype=np.float64)
    mean, var = _marginal_params(gmm, t)
    d = x[..., None] - mean
    logc = np.log(gmm.weights) - 0.5 * np.log(var) - 0.5 * d ** 2 / var
    logc -= logc.max(axis=-1, keepdims=True)
    resp = np.exp(logc)
    return -np.sum(resp * d / var, axis=-1) / resp.sum(axis=-1)


def base_drift(gmm: GmmSpec, schedule: SdeSchedule, x, t: float) -> np.ndarray:
    kappa = float(schedule.kappa(t))
    x = np.asarray(x, dtype=np.float64)
    return kappa * forward_marginal_score(gmm, x, t) + 0.5 * kappa * x


def euler_maruyama(x0, drift_fn: Callable, sigma, grid, rng: np.random.Generator,
                   keep_paths: bool = True, on_step: Optional[Callable] = None):
    """Simulate ``x <- x + dt * drift_fn(x, j) + sigma[j] sqrt(dt) z``.

    ``sigma`` holds one diffusion coefficient per step. Returns the terminal
    states, and if ``keep_paths`` the ``(M, T+1, k)`` states and ``(M, T, k)``
    noise draws (otherwise ``None`` for both). ``on_step(j, x, z)`` is called
    before each update.
    """
    x = np.array(x0, dtype=np.float64)
    n_steps = len(grid) - 1
    states = np.empty((x.shape[0], n_steps + 1, x.shape[1])) if keep_paths else None
    noise = np.empty((x.shape[0], n_steps, x.shape[1])) if keep_paths else None
    if keep_paths:
        states[:, 0] = x
    for j in range(n_steps):
        dt = grid[j + 1] - grid[j]
        b = drift_fn(x, j)
        z = rng.standard_normal(x.shape)
        if on_step is not None:
            on_step(j, x, z)
        x = x + dt * b + sigma[j] * np.sqrt(dt) * z
        if keep_paths:
            states[:, j + 1] = x
            noise[:, j] = z
    return x, states, noise


@dataclass
class PathBatch:
    """Sampled trajectories plus the per-path quantities gathered on the way.

    ``log_ratio`` is ``log p_theta / p_base`` of each path under the sampling
    parameters and ``kl_terms`` its ``sum_t dt/2 |u_t|^2`` part.
    """

    terminal: np.ndarray
    log_ratio: np.ndarray
    kl_terms: np.ndarray
    schedule: SdeSchedule
    seed: object
    states: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    path_index: np.ndarray = field(default=None)
    activations: Optional["StepActivations"] = None
    activation_token: object = None

    def __post_init__(self):
        if self.path_index is None:
            self.path_index = np.arange(self.terminal.shape[0])

    @property
    def size(self) -> int:
        return self.terminal.shape[0]

    def write_terminal_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(self.terminal.shape[1])])
            for row in self.terminal:
                w.writerow([repr(float(v)) for v in row])


class StepActivations:
    """Network activations of every sampling step, stored ``(T, M, width)``.

    Filled by :meth:`DiffusionModel.sample` so that the score pass can skip
    the forward recomputation when it runs at the sampling parameters. One
    store can be handed to successive ``sample`` calls to recycle its
    buffers; only the batch that filled it last may then use it.
    """

    def __init__(self):
        self.param_values = None
        self.token = None
        self.shape = None

    def start(self, params: ParamVector, n_steps: int, m: int, mlp: MlpSpec):
        shape = (n_steps, m, mlp.state_dim, mlp.hidden_dims)
        if shape != self.shape:
            self.inputs = np.empty((n_steps, m, mlp.state_dim))
            self.hidden = [(np.empty((n_steps, m, h)), np.empty((n_steps, m, h)))
                           for h in mlp.hidden_dims]
            self.drift = np.empty((n_steps, m, mlp.state_dim))
            self.shape = shape
        self.param_values = params.values.copy()
        self.token = object()
        return self.token

    def step_buffers(self, j: int):
        return [(act[j], deriv[j]) for act, deriv in self.hidden]

    def valid_for(self, token, params: ParamVector) -> bool:
        return (token is not None and token is self.token
                and np.array_equal(self.param_values, params.values))

    def view(self, steps: slice, rows: slice):
        """Backward-pass cache layers and drifts for a block of steps and paths."""
        acts = [self.inputs[steps, rows]] + [act[steps, rows] for act, _ in self.hidden]
        derivs = [deriv[steps, rows] for _, deriv in self.hidden] + [None]
        return list(zip(acts, derivs)), self.drift[steps, rows]

    @property
    def nbytes(self) -> int:
        if self.shape is None:
            return 0
        return (self.inputs.nbytes + self.drift.nbytes
                + sum(a.nbytes + d.nbytes for a, d in self.hidden))


class DiffusionModel:
    """Base GMM diffusion plus the learned residual ``u_theta``.

    ``cond`` is an optional fixed vector appended to the network input (used
    to share one network across several calibration conditions).
    """

    def __init__(self, gmm: GmmSpec, schedule: SdeSchedule, mlp: MlpSpec, cond=None):
        if mlp.state_dim != gmm.dim:
            raise ValueError("network state dimension does not match the mixture")
        self.gmm = gmm
        self.schedule = schedule
        self.mlp = mlp
        if mlp.cond_dim:
            if cond is None:
                raise ValueError("conditional network needs a condition vector")
            cond = np.asarray(cond, dtype=np.float64)
            if cond.shape != (mlp.cond_dim,):
                raise ValueError("condition vector has the wrong length")
        elif cond is not None:
            raise ValueError("network has no condition input")
        self.cond = cond
        grid = schedule.grid
        self._t = grid[:-1]
        self._dt = np.diff(grid)
        self._kappa = schedule.kappa(self._t)
        self._sigma = np.sqrt(self._kappa)
        emb = sinusoidal_embed(self._t, mlp.embed_dim)
        if cond is not None:
            emb = np.concatenate([emb, np.broadcast_to(cond, (emb.shape[0], cond.size))], axis=1)
        # non-state network inputs, identical for every path at a given step
        self._shared = emb

    def with_condition(self, cond) -> "DiffusionModel":
        return DiffusionModel(self.gmm, self.schedule, self.mlp, cond)

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def residual_net(self, params: ParamVector, x, j: int):
        """``u_theta`` at grid index ``j`` for a batch of states, with cache."""
        return forward_with_cache(self.mlp, params, x, self._shared[j])

    def base_drift_at(self, x, j: int) -> np.ndarray:
        t = self._t[j]
        kappa = self._kappa[j]
        return kappa * forward_marginal_score(self.gmm, x, t) + 0.5 * kappa * x

    def drift_at(self, params: ParamVector, x, j: int) -> np.ndarray:
        u, _ = self.residual_net(params, x, j)
        return self.base_drift_at(x, j) - self._kappa[j] * u

    def drift(self, params: ParamVector, x, t: float) -> np.ndarray:
        """Model drift at an arbitrary time (not only grid points)."""
        x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = mlp_forward(self.mlp, params, x2, t, self.cond)
        kappa = float(self.schedule.kappa(t))
        out = base_drift(self.gmm, self.schedule, x2, t) - kappa * u
        return out[0] if np.ndim(x) == 1 else out

    def sample(self, params: ParamVector, m: int, seed, keep_paths: bool = True,
               keep_activations=False) -> PathBatch:
        """Draw ``m`` paths from ``p_theta``; fully determined by ``(params, seed)``.

        ``keep_activations`` (``True`` or a :class:`StepActivations` to
        refill; requires ``keep_paths``) records the network activations of
        every step for reuse by :meth:`accumulate_scores`.
        """
        if m < 1:
            raise ValueError("need at least one path")
        if keep_activations and not keep_paths:
            raise ValueError("keeping activations requires keeping paths")
        rng = np.random.default_rng(seed)
        x0 = rng.standard_normal((m, self.dim))
        log_ratio = np.zeros(m)
        kl_terms = np.zeros(m)
        girsanov_u = {}
        store = None
        if isinstance(keep_activations, StepActivations):
            store = keep_activations
        elif keep_activations:
            store = StepActivations()
        n_steps = self.schedule.steps
        token = store.start(params, n_steps, m, self.mlp) if store is not None else None

        def drift_fn(x, j):
            if store is None:
                u, _ = self.residual_net(params, x, j)
            else:
                store.inputs[j] = x
                u, _ = forward_with_cache(self.mlp, params, store.inputs[j], self._shared[j],
                                          out=store.step_buffers(j))
            girsanov_u[j] = -self._sigma[j] * u
            drift = self.base_drift_at(x, j) - self._kappa[j] * u
            if store is not None:
                store.drift[j] = drift
            return drift

        def on_step(j, x, z):
            ug = girsanov_u.pop(j)
            dt = self._dt[j]
            sq = 0.5 * dt * np.sum(ug * ug, axis=1)
            log_ratio[:] += np.sqrt(dt) * np.sum(ug * z, axis=1) + sq
            kl_terms[:] += sq

        terminal, states, noise = euler_maruyama(
            x0, drift_fn, self._sigma, self.schedule.grid, rng, keep_paths, on_step)
        return PathBatch(terminal, log_ratio, kl_terms, self.schedule, seed, states, noise,
                         activations=store, activation_token=token)

    def log_density_ratio(self, params: ParamVector, batch: PathBatch, index=None) -> np.ndarray:
        """Exact ``log p_theta / p_base`` of the stored discrete paths.

        Unlike ``batch.log_ratio`` this is recomputed from the states and so is
        valid for parameters other than those the batch was sampled with.
        """
        if batch.states is None:
            raise ValueError("batch was sampled without keeping paths")
        if params.layout != self.mlp.layout():
            raise ValueError("parameter layout does not match the model")
        states = batch.states if index is None else batch.states[np.atleast_1d(index)]
        out = np.zeros(states.shape[0])
        for j in range(self.schedule.steps):
            x, x_next = states[:, j], states[:, j + 1]
            dt, kappa = self._dt[j], self._kappa[j]
            b0 = self.base_drift_at(x, j)
            u, _ = self.residual_net(params, x, j)
            r_model = x_next - x - dt * (b0 - kappa * u)
            r_base = x_next - x - dt * b0
            out += (np.sum(r_base ** 2, axis=1) - np.sum(r_model ** 2, axis=1)) / (2 * kappa * dt)
        return out if index is None or np.ndim(index) else out[0]

    def accumulate_scores(self, params: ParamVector, batch: PathBatch, coeffs,
                          chunk_size: Optional[int] = None, sub_batch: Optional[int] = None
                          ) -> ParamVector:
        """``sum_m coeffs[m] * grad_theta log p_theta(path_m)``.

        Work proceeds over path sub-batches and, inside each, over chunks of at
        most ``chunk_size`` time steps whose activations are held at once.
        Per-step contributions are always added in the same order, so the
        result does not depend on ``chunk_size``. If the batch carries
        activations recorded at exactly these parameters they are used instead
        of a fresh forward pass.
        """
        if batch.states is None:
            raise ValueError("batch was sampled without keeping paths")
        if params.layout != self.mlp.layout():
            raise ValueError("parameter layout does not match the model")
        n_steps = self.schedule.steps
        chunk_size = n_steps if chunk_size is None else int(chunk_size)
        if chunk_size < 1:
            raise ValueError("chunk_size must be at least 1")
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (batch.size,):
            raise ValueError("need one coefficient per path")
        sub_batch = batch.size if sub_batch is None else int(sub_batch)
        reuse = (batch.activations is not None
                 and batch.activations.valid_for(batch.activation_token, params))
        grad = params.zeros_like()
        for start in range(0, batch.size, sub_batch):
            sl = slice(start, start + sub_batch)
            states = batch.states[sl]
            c = coeffs[sl, None]
            for j0 in range(0, n_steps, chunk_size):
                js = np.arange(j0, min(j0 + chunk_size, n_steps))
                x = np.ascontiguousarray(states[:, js].transpose(1, 0, 2))
                x_next = states[:, js + 1].transpose(1, 0, 2)
                shared = self._shared[js]
                if reuse:
                    layers, drift = batch.activations.view(slice(j0, js[-1] + 1), sl)
                    cache = (layers, shared)
                else:
                    u, cache = forward_with_cache(self.mlp, params, x, shared)
                    drift = np.stack([self.base_drift_at(x[i], j) for i, j in enumerate(js)])
                    drift -= self._kappa[js, None, None] * u
                resid = x_next - x - self._dt[js, None, None] * drift
                backward_from_cache(self.mlp, params, cache, -c * resid, grad)
        return grad

    def grad_log_density_ratio(self, params: ParamVector, batch: PathBatch, index: int,
                               chunk_size: Optional[int] = None) -> ParamVector:
        coeffs = np.zeros(batch.size)
        coeffs[index] = 1.0
        return self.accumulate_scores(params, batch, coeffs, chunk_size)

    def sample_terminal(self, params: ParamVector, m: int, seed, block_size: int = 8192
                        ) -> PathBatch:
        """Paths-free sampling in blocks of ``block_size`` (faster for large ``m``).

        Block ``i`` is seeded by the ``i``-th child of ``SeedSequence(seed)``,
        so results depend on ``block_size`` but are deterministic given it.
        """
        if m < 1:
            raise ValueError("need at least one path")
        if block_size < 1:
            raise ValueError("block_size must be at least 1")
        sizes = [min(block_size, m - s) for s in range(0, m, block_size)]
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        # children built explicitly: ``spawn`` would mutate a caller-owned SeedSequence
        children = [np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (i,),
                                           pool_size=root.pool_size)
                    for i in range(len(sizes))]
        parts = [self.sample(params, n, child, keep_paths=False) for n, child in zip(sizes, children)]
        return PathBatch(np.concatenate([b.terminal for b in parts]),
                         np.concatenate([b.log_ratio for b in parts]),
                         np.concatenate([b.kl_terms for b in parts]),
                         self.schedule, seed)

    def kl_to_base(self, params: ParamVector, m_eval: int, seed) -> tuple[float, float]:
        """Monte-Carlo ``KL(p_theta | p_base)`` and its standard error."""
        batch = self.sample_terminal(params, m_eval, seed)
        kl = batch.kl_terms
        se = kl.std(ddof=1) / np.sqrt(m_eval) if m_eval > 1 else np.nan
        return float(kl.mean()), float(se)
