"""Spatial jets of network outputs and parameter gradients of losses built on them.

Spatial derivatives up to second order are pushed forward through the network
layer by layer (value, gradient and Hessian of every pre-activation).  The
result is an ordinary differentiable JAX computation, so parameter gradients
of any loss assembled from jets, including ones that contain the Laplacian,
come from reverse accumulation over the jet evaluation.

Canonical parameter order (``flatten_params``): for each network in turn and
for each layer ``i`` in order, ``W_i`` row-major (shape fan_in x fan_out), then
``b_i``, then the slope ``alpha_i`` if layer ``i`` is hidden.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from pfxpinn.errors import InputShapeError, NumericalFailure
from pfxpinn.network import NetworkParams, activation_derivatives


class Jet2(NamedTuple):
    """Value, spatial gradient and spatial Hessian.

    Shapes for a batch of N points and m outputs in d dimensions:
    value (N, m), grad (N, m, d), hess (N, m, d, d).  Components that were
    not requested are zero.
    """

    value: jnp.ndarray
    grad: jnp.ndarray
    hess: jnp.ndarray

    def output(self, k: int) -> "Jet2":
        return Jet2(self.value[..., k], self.grad[..., k, :], self.hess[..., k, :, :])


def _input_map(params: NetworkParams, d: int):
    if params.domain_lo is None or params.domain_hi is None:
        return jnp.ones(d), jnp.zeros(d)
    lo = jnp.asarray(params.domain_lo)
    hi = jnp.asarray(params.domain_hi)
    a = 2.0 / (hi - lo)
    return a, -1.0 - a * lo


def eval_jet2(params: NetworkParams, x, order: int = 2) -> Jet2:
    """Evaluate the raw network and its spatial derivatives at ``x``.

    ``x`` is a single point of shape (d,) or a batch (N, d).  A single point
    yields a jet without the leading batch axis.
    """
    if order not in (0, 1, 2):
        raise ValueError(f"order must be 0, 1 or 2, got {order}")
    x = jnp.asarray(x, dtype=jnp.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise InputShapeError(
            f"points of shape {tuple(x.shape)} do not match network input dimension {params.input_dim}"
        )
    n, d = x.shape
    a, c = _input_map(params, d)
    z = x * a + c
    dz = jnp.broadcast_to(jnp.diag(a), (n, d, d)) if order >= 1 else None
    d2z = jnp.zeros((n, d, d, d)) if order >= 2 else None

    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = z @ w + b
        dpre = dz @ w if order >= 1 else None
        d2pre = d2z @ w if order >= 2 else None
        if i == n_layers - 1:
            z, dz, d2z = pre, dpre, d2pre
            break
        slope = params.slopes[i]
        if not params.train_slopes:
            slope = jax.lax.stop_gradient(slope)
        s = params.scale * slope
        t0, t1, t2 = activation_derivatives(s * pre, params.activation)
        z = t0
        if order >= 1:
            g1 = s * t1
            dz = g1[:, None, :] * dpre
        if order >= 2:
            g2 = (s * s) * t2
            d2z = g2[:, None, None, :] * dpre[:, :, None, :] * dpre[:, None, :, :] + g1[:, None, None, :] * d2pre

    m = z.shape[1]
    value = z
    grad = jnp.swapaxes(dz, 1, 2) if order >= 1 else jnp.zeros((n, m, d))
    hess = jnp.moveaxis(d2z, 3, 1) if order >= 2 else jnp.zeros((n, m, d, d))
    if single:
        return Jet2(value[0], grad[0], hess[0])
    return Jet2(value, grad, hess)


def eval_value_grad_lap(params: NetworkParams, x):
    """Batched value (N, m), gradient (N, m, d) and Laplacian (N, m) of the raw network.

    Cheaper than the full Hessian: only the trace is carried through the
    layers, which is all the fourth-order crack density needs.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise InputShapeError(
            f"points of shape {tuple(x.shape)} do not match network input dimension {params.input_dim}"
        )
    n, d = x.shape
    a, c = _input_map(params, d)
    z = x * a + c
    dz = jnp.broadcast_to(jnp.diag(a), (n, d, d))
    lz = jnp.zeros((n, d))
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = z @ w + b
        dpre = dz @ w
        lpre = lz @ w
        if i == n_layers - 1:
            z, dz, lz = pre, dpre, lpre
            break
        slope = params.slopes[i]
        if not params.train_slopes:
            slope = jax.lax.stop_gradient(slope)
        s = params.scale * slope
        t0, t1, t2 = activation_derivatives(s * pre, params.activation)
        g1 = s * t1
        z = t0
        lz = (s * s) * t2 * jnp.sum(dpre * dpre, axis=1) + g1 * lpre
        dz = g1[:, None, :] * dpre
    return z, jnp.swapaxes(dz, 1, 2), lz


# -- flattening ------------------------------------------------------------------------


def _as_list(params):
    return [params] if isinstance(params, NetworkParams) else list(params)


def flatten_params(params) -> np.ndarray:
    """Concatenate parameters of one network or a list of networks in canonical order."""
    parts = []
    for p in _as_list(params):
        n_layers = len(p.weights)
        for i in range(n_layers):
            parts.append(np.asarray(p.weights[i], dtype=np.float64).ravel())
            parts.append(np.asarray(p.biases[i], dtype=np.float64).ravel())
            if i < n_layers - 1:
                parts.append(np.atleast_1d(np.asarray(p.slopes[i], dtype=np.float64)))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def trainable_mask(params) -> np.ndarray:
    """Boolean mask over the flat vector; frozen activation slopes are ``False``."""
    parts = []
    for p in _as_list(params):
        n_layers = len(p.weights)
        for i in range(n_layers):
            parts.append(np.ones(int(np.size(p.weights[i])) + int(np.size(p.biases[i])), dtype=bool))
            if i < n_layers - 1:
                parts.append(np.array([bool(p.train_slopes)]))
    if not parts:
        return np.zeros(0, dtype=bool)
    return np.concatenate(parts)


def unflatten_params(flat, templates):
    """Inverse of :func:`flatten_params`; works on traced arrays inside ``jit``.

    Returns a single ``NetworkParams`` when ``templates`` is one network.
    """
    single = isinstance(templates, NetworkParams)
    out = []
    pos = 0
    for t in _as_list(templates):
        ws, bs, al = [], [], []
        sizes = t.layer_sizes
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            ws.append(flat[pos : pos + fi * fo].reshape(fi, fo))
            pos += fi * fo
            bs.append(flat[pos : pos + fo])
            pos += fo
            if i < len(sizes) - 2:
                al.append(flat[pos])
                pos += 1
        out.append(t.replace(weights=tuple(ws), biases=tuple(bs), slopes=tuple(al)))
    return out[0] if single else out


def param_gradient_tree_to_flat(grad_tree) -> np.ndarray:
    return flatten_params(grad_tree)


# -- parameter gradients ---------------------------------------------------------------


def _locate_nonfinite(params, points):
    if points is None:
        return None
    for p, pts in zip(_as_list(params), points if isinstance(points, (list, tuple)) else [points]):
        jet = eval_jet2(p, jnp.atleast_2d(jnp.asarray(pts)), 2)
        bad = ~(
            jnp.all(jnp.isfinite(jet.value), axis=1)
            & jnp.all(jnp.isfinite(jet.grad), axis=(1, 2))
            & jnp.all(jnp.isfinite(jet.hess), axis=(1, 2, 3))
        )
        idx = np.flatnonzero(np.asarray(bad))
        if idx.size:
            return tuple(np.asarray(pts)[idx[0]].tolist())
    return None


def loss_param_gradient(loss: Callable, params, points=None) -> np.ndarray:
    """Exact gradient of ``loss(params)`` with respect to every trainable entry.

    ``params`` is one network or a list of networks; the result is flattened
    in canonical order.  ``points`` (optional, per network) is only used to
    name an offending location when the loss is not finite.
    """
    value, grads = jax.value_and_grad(loss)(params)
    if not np.isfinite(float(value)):
        raise NumericalFailure(
            f"loss is not finite ({float(value)})", point=_locate_nonfinite(params, points)
        )
    return flatten_params(grads)


def fd_check(params, loss: Callable, step: float = 1e-4, indices=None) -> float:
    """Largest relative gap between analytic and central-difference parameter gradients.

    For every entry: ``|g - fd| / (|g| + |fd| + eps)``.  Non-finite gaps
    count as ``inf``; no parameters gives 0.  ``indices`` restricts the
    comparison to a subset of flat positions (all trainable ones by default;
    frozen slopes have a zero gradient by construction and are skipped).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    templates = params
    flat0 = flatten_params(params)
    if flat0.size == 0:
        return 0.0
    try:
        analytic = np.asarray(flatten_params(jax.grad(loss)(params)))
    except FloatingPointError:
        return float("inf")
    f = jax.jit(lambda v: loss(unflatten_params(v, templates)))
    idx = np.flatnonzero(trainable_mask(params)) if indices is None else np.asarray(indices, dtype=int)
    if idx.size == 0:
        return 0.0
    analytic = analytic[idx]
    fd = np.empty(idx.size)
    for k, i in enumerate(idx):
        e = np.zeros_like(flat0)
        e[i] = step
        fd[k] = (float(f(jnp.asarray(flat0 + e))) - float(f(jnp.asarray(flat0 - e)))) / (2.0 * step)
    eps = np.finfo(np.float64).eps
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + eps)
    rel = np.where(np.isfinite(rel), rel, np.inf)
    return float(rel.max())


def value_and_flat_grad(loss: Callable, templates: Sequence[NetworkParams]):
    """Jitted ``flat -> (loss, flat_grad)`` for optimizers working on one vector."""

    def f(flat, *args):
        return loss(unflatten_params(flat, templates), *args)

    return jax.jit(jax.value_and_grad(f))
