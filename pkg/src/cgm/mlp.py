"""Drift residual network with hand-written reverse-mode gradients.

The network maps ``concat(x, embed(t), cond)`` through SiLU hidden layers to a
``k``-vector. Parameters live in one flat float64 array described by a layout
table, so snapshots and optimizer state are plain array copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    state_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    embed_dim: int = 32
    cond_dim: int = 0

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even integer >= 2")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be non-negative")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.embed_dim + self.cond_dim

    @property
    def output_dim(self) -> int:
        return self.state_dim

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        out = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            out.append((f"W{i}", (a, b)))
            out.append((f"b{i}", (b,)))
        return tuple(out)


@dataclass
class ParamVector:
    """Flat parameter array plus the ``(name, shape)`` table that slices it."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        self.layout = tuple((str(n), tuple(int(s) for s in shp)) for n, shp in self.layout)
        expected = sum(int(np.prod(shp)) for _, shp in self.layout)
        if expected != self.values.size:
            raise ValueError(
                f"layout describes {expected} values but array has {self.values.size}"
            )

    def __len__(self):
        return self.values.size

    def tensors(self) -> dict[str, np.ndarray]:
        """Named views into ``values`` (writes go through to the flat array)."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = self.values[offset:offset + n].reshape(shape)
            offset += n
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def check_compatible(self, other: "ParamVector"):
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")


def sinusoidal_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features with frequencies ``10000**(-2j/dim)``.

    ``t`` may be a scalar (returns shape ``(dim,)``) or an array (returns
    ``t.shape + (dim,)``).
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dimension must be even and >= 2, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    j = np.arange(dim // 2)
    freqs = 10000.0 ** (-2.0 * j / dim)
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def init_params(spec: MlpSpec, rng: np.random.Generator | int | None = None) -> ParamVector:
    """Uniform fan-in init for hidden layers, zero biases, zero output layer."""
    rng = np.random.default_rng(rng)
    layout = spec.layout()
    params = ParamVector(np.zeros(sum(int(np.prod(s)) for _, s in layout)), layout)
    t = params.tensors()
    n_layers = len(spec.hidden_dims) + 1
    for i in range(n_layers - 1):
        w = t[f"W{i}"]
        bound = (1.0 / w.shape[0]) ** 0.5
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def _matmul(a, w, out=None):
    """``a @ w``; a contraction of length one becomes a broadcast product,
    which numpy's matmul handles far more slowly than BLAS-sized shapes."""
    if a.shape[-1] == 1:
        return np.multiply(a, w[0], out=out)
    return np.matmul(a, w, out=out)


def _silu_inplace(z, deriv):
    """Overwrite ``z`` with SiLU(z) and fill ``deriv`` with SiLU'(z)."""
    sig = deriv
    np.negative(z, out=sig)
    np.exp(sig, out=sig)
    sig += 1.0
    np.reciprocal(sig, out=sig)
    z *= sig
    # SiLU'(z) = sig + z sig (1 - sig) = sig + act - act * sig
    tmp = z * sig
    sig += z
    sig -= tmp


def _split_inputs(spec: MlpSpec, x, t, cond):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[-1] != spec.state_dim:
        raise ValueError(f"expected state dimension {spec.state_dim}, got {x2.shape[-1]}")
    n = x2.shape[0]
    emb = sinusoidal_embed(t, spec.embed_dim)
    if emb.ndim == 1:
        emb = np.broadcast_to(emb, (n, spec.embed_dim))
    elif emb.shape != (n, spec.embed_dim):
        raise ValueError("time array does not match the batch size")
    parts = [x2, emb]
    if spec.cond_dim:
        if cond is None:
            raise ValueError("conditional network requires a condition input")
        c = np.asarray(cond, dtype=np.float64)
        c = np.broadcast_to(c, (n, spec.cond_dim)) if c.ndim == 1 else c
        if c.shape != (n, spec.cond_dim):
            raise ValueError("condition input has the wrong shape")
        parts.append(c)
    elif cond is not None and np.size(cond):
        raise ValueError("network has no condition input")
    return np.concatenate(parts, axis=1), single


def _check_params(spec: MlpSpec, params: ParamVector):
    if params.layout != spec.layout():
        raise ValueError("parameter layout does not match the network spec")


def forward_with_cache(spec: MlpSpec, params: ParamVector, inputs: np.ndarray, shared=None,
                       out=None):
    """Run the network on a batch, keeping what the backward pass needs.

    With ``shared=None`` ``inputs`` is the full ``(n, input_dim)`` matrix.
    Otherwise ``inputs`` holds only the state columns and ``shared`` the
    remaining input features (time embedding, condition), which are common to
    every row of a group: either ``inputs`` is ``(n, k)`` with ``shared`` of
    shape ``(d,)``, or ``inputs`` is ``(G, n, k)`` with ``shared`` ``(G, d)``.
    The shared part then enters the first layer as one bias per group.

    ``out`` optionally supplies one ``(activation, derivative)`` pair of
    preallocated arrays per hidden layer to write into.
    """
    t = params.tensors()
    n_layers = len(spec.hidden_dims) + 1
    cache = []
    a = inputs
    for i in range(n_layers - 1):
        w = t[f"W{i}"]
        if i == 0 and shared is not None:
            w = w[:inputs.shape[-1]]
        if out is None:
            z = _matmul(a, w)
            deriv = np.empty_like(z)
        else:
            z, deriv = out[i]
            _matmul(a, w, out=z)
        if i == 0 and shared is not None:
            w_sh = t["W0"][inputs.shape[-1]:]
            if z.ndim == 3:
                # one matrix-vector product per group keeps each group's bias
                # independent of how many groups are stacked
                z += np.stack([sh @ w_sh for sh in shared])[:, None, :] + t["b0"]
            else:
                z += shared @ w_sh + t["b0"]
        else:
            z += t[f"b{i}"]
        _silu_inplace(z, deriv)
        cache.append((a, deriv))
        a = z
    result = _matmul(a, t[f"W{n_layers - 1}"]) + t[f"b{n_layers - 1}"]
    cache.append((a, None))
    return result, (cache, shared)


def _add_weight_grad(gw, a, delta):
    if a.ndim == 2:
        gw += a.T @ delta
        return
    # per-group products, added in group order so that splitting a stack into
    # smaller stacks gives bit-identical sums
    for prod in np.matmul(a.transpose(0, 2, 1), delta):
        gw += prod


def backward_from_cache(spec: MlpSpec, params: ParamVector, cache, upstream: np.ndarray,
                        grad: ParamVector):
    """Accumulate ``d(sum(upstream * out))/dtheta`` into ``grad`` in place."""
    layers, shared = cache
    t = params.tensors()
    g = grad.tensors()
    n_layers = len(spec.hidden_dims) + 1
    delta = upstream
    for i in range(n_layers - 1, -1, -1):
        a, _ = layers[i]
        col = delta.sum(axis=-2)
        if i == 0 and shared is not None:
            k = a.shape[-1]
            _add_weight_grad(g["W0"][:k], a, delta)
            if col.ndim == 1:
                g["W0"][k:] += np.outer(shared, col)
            else:
                for sh, cg in zip(shared, col):
                    g["W0"][k:] += np.outer(sh, cg)
        else:
            _add_weight_grad(g[f"W{i}"], a, delta)
        if col.ndim == 1:
            g[f"b{i}"] += col
        else:
            for cg in col:
                g[f"b{i}"] += cg
        if i == 0:
            break
        delta = _matmul(delta, t[f"W{i}"].T)
        delta *= layers[i - 1][1]
    return grad


def mlp_forward(spec: MlpSpec, params: ParamVector, x, t, cond=None) -> np.ndarray:
    """Evaluate ``u_theta(x, t)`` for one state (``(k,)``) or a batch (``(n, k)``)."""
    _check_params(spec, params)
    inputs, single = _split_inputs(spec, x, t, cond)
    out, _ = forward_with_cache(spec, params, inputs)
    return out[0] if single else out


def mlp_grad_params(spec: MlpSpec, params: ParamVector, x, t, upstream, cond=None) -> ParamVector:
    """Gradient of ``sum(upstream * u_theta(x, t))`` with respect to the parameters.

    For a batch the contributions of all rows are summed.
    """
    _check_params(spec, params)
    inputs, _ = _split_inputs(spec, x, t, cond)
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (inputs.shape[0], spec.output_dim):
        raise ValueError("upstream shape does not match the network output")
    _, cache = forward_with_cache(spec, params, inputs)
    return backward_from_cache(spec, params, cache, up, params.zeros_like())
