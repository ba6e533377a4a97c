"""Dense networks with adaptive activations and hard Dirichlet ansaetze.

Each subdomain owns one network mapping a spatial point to the raw
displacement components followed by the phase field.  Hidden layer ``i``
computes ``tau(scale * slope_i * (z W_i + b_i))``; the output layer is affine.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Sequence

import jax
import jax.numpy as jnp
import numpy as np

from pfxpinn.errors import ConfigError, InputShapeError, OutputError

ACTIVATIONS = ("tanh", "swish")
ANSATZ_KINDS = ("bar1d", "sen_tension", "eccentric_hole")


@jax.tree_util.register_pytree_node_class
@dataclasses.dataclass(frozen=True)
class NetworkParams:
    """Trainable weights of one subdomain network plus its fixed settings.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` so a layer is ``z @ W + b``.
    ``slopes`` holds one trainable scalar per hidden layer.  ``domain_lo`` and
    ``domain_hi`` define a fixed affine map of the input box onto [-1, 1]^d;
    the defaults leave inputs unchanged.
    """

    layer_sizes: tuple[int, ...]
    weights: tuple
    biases: tuple
    slopes: tuple
    scale: float = 10.0
    activation: str = "tanh"
    train_slopes: bool = True
    domain_lo: tuple[float, ...] | None = None
    domain_hi: tuple[float, ...] | None = None

    def tree_flatten(self):
        children = (self.weights, self.biases, self.slopes)
        aux = (
            self.layer_sizes,
            self.scale,
            self.activation,
            self.train_slopes,
            self.domain_lo,
            self.domain_hi,
        )
        return children, aux

    @classmethod
    def tree_unflatten(cls, aux, children):
        weights, biases, slopes = children
        layer_sizes, scale, activation, train_slopes, lo, hi = aux
        return cls(layer_sizes, weights, biases, slopes, scale, activation, train_slopes, lo, hi)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def n_params(self) -> int:
        return param_count(self.layer_sizes)

    def replace(self, **changes) -> "NetworkParams":
        return dataclasses.replace(self, **changes)


def param_count(layer_sizes: Sequence[int]) -> int:
    n = sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))
    return n + len(layer_sizes) - 2


def _check_layer_sizes(layer_sizes):
    layer_sizes = tuple(int(n) for n in layer_sizes)
    if len(layer_sizes) < 3:
        raise ConfigError(
            f"network needs at least 3 layers (input, hidden, output), got {list(layer_sizes)}",
            field="network.layers",
        )
    if any(n < 1 for n in layer_sizes):
        raise ConfigError(f"layer sizes must be positive: {list(layer_sizes)}", field="network.layers")
    if layer_sizes[0] not in (1, 2):
        raise ConfigError("input layer size is the spatial dimension (1 or 2)", field="network.layers")
    if layer_sizes[-1] != layer_sizes[0] + 1:
        raise ConfigError(
            "output layer size must be spatial dimension + 1 (displacements and phase field)",
            field="network.layers",
        )
    return layer_sizes


def init_xavier(
    layer_sizes: Sequence[int],
    activation: str = "tanh",
    scale: float = 10.0,
    seed: int = 0,
    *,
    train_slopes: bool = True,
    domain_lo=None,
    domain_hi=None,
) -> NetworkParams:
    """Gaussian Xavier initialization: ``W ~ N(0, 2 / (fan_in + fan_out))``, zero biases.

    Slopes start at ``1 / scale`` so every hidden layer initially applies the
    plain activation.
    """
    layer_sizes = _check_layer_sizes(layer_sizes)
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}", field="network.activation")
    if not scale >= 1.0:
        raise ConfigError("activation scale must be >= 1", field="network.scale")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(jnp.asarray(rng.normal(0.0, std, size=(fan_in, fan_out))))
        biases.append(jnp.zeros(fan_out))
    slopes = tuple(jnp.asarray(1.0 / scale) for _ in range(len(layer_sizes) - 2))
    lo = None if domain_lo is None else tuple(float(v) for v in domain_lo)
    hi = None if domain_hi is None else tuple(float(v) for v in domain_hi)
    return NetworkParams(
        layer_sizes,
        tuple(weights),
        tuple(biases),
        slopes,
        float(scale),
        activation,
        bool(train_slopes),
        lo,
        hi,
    )


def fixed_activation(params: NetworkParams) -> NetworkParams:
    """Same weights with ``scale * slope == 1`` frozen (a plain activation network)."""
    return params.replace(
        scale=1.0,
        slopes=tuple(jnp.asarray(1.0) for _ in params.slopes),
        train_slopes=False,
    )


def activation_derivatives(s, kind: str):
    """Return ``tau(s), tau'(s), tau''(s)`` elementwise."""
    if kind == "tanh":
        t = jnp.tanh(s)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    if kind == "swish":
        sig = jax.nn.sigmoid(s)
        y = s * sig
        ds = sig * (1.0 - sig)
        return y, sig + s * ds, ds * (2.0 + s * (1.0 - 2.0 * sig))
    raise ConfigError(f"unknown activation {kind!r}", field="network.activation")


def adaptive_activation(z, scale: float, slope, kind: str = "tanh"):
    """``tau(scale * slope * z)`` for ``tau`` in {tanh, swish}."""
    s = scale * slope * jnp.asarray(z)
    if kind == "tanh":
        return jnp.tanh(s)
    if kind == "swish":
        return s * jax.nn.sigmoid(s)
    raise ConfigError(f"unknown activation {kind!r}", field="network.activation")


# -- hard boundary-condition ansaetze ------------------------------------------------


@dataclasses.dataclass(frozen=True)
class BcAnsatz:
    """Output transform that enforces a preset's Dirichlet conditions exactly.

    ``disp_scale`` multiplies the raw displacement outputs before the
    transform; it rescales network outputs to the displacement magnitude of
    the problem and does not touch the boundary values.
    """

    kind: str
    applied_displacement: float = 0.0
    disp_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ANSATZ_KINDS:
            raise ConfigError(f"unknown ansatz {self.kind!r}", field="preset")


def _ansatz_terms(kind, x, applied):
    """Per displacement component: (B, dB, d2B, C, dC, d2C) with u = B*raw + C.

    ``x`` has shape (N, d).  Gradients have shape (N, d), Hessians (N, d, d).
    """
    n, d = x.shape
    zero = jnp.zeros(n)
    zg = jnp.zeros((n, d))
    zh = jnp.zeros((n, d, d))
    if kind == "bar1d":
        xx = x[:, 0]
        b = (xx + 1.0) * (xx - 1.0)
        return [(b, (2.0 * xx)[:, None], jnp.full((n, 1, 1), 2.0), zero, zg, zh)]
    xx, yy = x[:, 0], x[:, 1]
    ones = jnp.ones(n)
    if kind == "sen_tension":
        bu = xx * (1.0 - xx)
        dbu = jnp.stack([1.0 - 2.0 * xx, zero], axis=-1)
        d2bu = jnp.zeros((n, 2, 2)).at[:, 0, 0].set(-2.0)
    elif kind == "eccentric_hole":
        bu = xx
        dbu = jnp.stack([ones, zero], axis=-1)
        d2bu = zh
    else:
        raise ConfigError(f"unknown ansatz {kind!r}", field="preset")
    bv = yy * (yy - 1.0)
    dbv = jnp.stack([zero, 2.0 * yy - 1.0], axis=-1)
    d2bv = jnp.zeros((n, 2, 2)).at[:, 1, 1].set(2.0)
    cv = yy * applied
    dcv = jnp.stack([zero, ones * applied], axis=-1)
    return [(bu, dbu, d2bu, zero, zg, zh), (bv, dbv, d2bv, cv, dcv, zh)]


def apply_ansatz(kind, x, raw, applied, disp_scale=1.0, order=2):
    """Transform raw output jets into constrained displacement jets.

    ``raw`` is a :class:`~pfxpinn.autodiff.Jet2` with value (N, m), grad
    (N, m, d), hess (N, m, d, d).  Returns ``(u_jet, phi_jet)`` where ``u_jet``
    covers the d displacement components and ``phi_jet`` the last output.
    """
    from pfxpinn.autodiff import Jet2

    x = jnp.atleast_2d(jnp.asarray(x))
    d = x.shape[1]
    vals, grads, hesses = [], [], []
    for k, (b, db, d2b, c, dc, d2c) in enumerate(_ansatz_terms(kind, x, applied)):
        r = disp_scale * raw.value[:, k]
        vals.append(b * r + c)
        if order >= 1:
            rg = disp_scale * raw.grad[:, k, :]
            grads.append(db * r[:, None] + b[:, None] * rg + dc)
        if order >= 2:
            rh = disp_scale * raw.hess[:, k, :, :]
            h = (
                d2b * r[:, None, None]
                + db[:, :, None] * rg[:, None, :]
                + rg[:, :, None] * db[:, None, :]
                + b[:, None, None] * rh
                + d2c
            )
            hesses.append(h)
    n = x.shape[0]
    value = jnp.stack(vals, axis=1)
    grad = jnp.stack(grads, axis=1) if order >= 1 else jnp.zeros((n, d, d))
    hess = jnp.stack(hesses, axis=1) if order >= 2 else jnp.zeros((n, d, d, d))
    u = Jet2(value, grad, hess)
    phi = Jet2(raw.value[:, d], raw.grad[:, d, :], raw.hess[:, d, :, :])
    return u, phi


def forward_constrained(params: NetworkParams, ansatz: BcAnsatz, x, order: int = 1):
    """Constrained displacement and raw phase field at points ``x`` (N, d).

    Returns ``(u, phi)`` jets; ``u.value`` has shape (N, d), ``phi.value`` (N,).
    """
    from pfxpinn.autodiff import eval_jet2

    raw = eval_jet2(params, x, order)
    return apply_ansatz(
        ansatz.kind,
        x,
        raw,
        ansatz.applied_displacement,
        ansatz.disp_scale,
        order,
    )


# -- checkpoints -----------------------------------------------------------------------


def save_checkpoint(path, params_list: Sequence[NetworkParams], seed: int | None = None) -> None:
    """Write a text checkpoint: one JSON header line then the flat parameter vector.

    The vector is the layer-major concatenation of every network in order
    (see :func:`pfxpinn.autodiff.flatten_params`), one value per line with 17
    significant digits.
    """
    from pfxpinn.autodiff import flatten_params

    header = {
        "format": "pfxpinn-checkpoint-v1",
        "seed": seed,
        "networks": [
            {
                "layer_sizes": list(p.layer_sizes),
                "activation": p.activation,
                "scale": p.scale,
                "train_slopes": p.train_slopes,
                "domain_lo": p.domain_lo,
                "domain_hi": p.domain_hi,
            }
            for p in params_list
        ],
    }
    flat = flatten_params(list(params_list))
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for v in flat:
                fh.write(f"{v:.17g}\n")
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint {path}: {exc}", path=str(path)) from exc


def load_checkpoint(path) -> tuple[list[NetworkParams], int | None]:
    from pfxpinn.autodiff import unflatten_params

    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    flat = np.array([float(v) for v in lines[1:]])
    templates = [
        init_xavier(
            n["layer_sizes"],
            n["activation"],
            max(n["scale"], 1.0),
            0,
            train_slopes=n["train_slopes"],
            domain_lo=n["domain_lo"],
            domain_hi=n["domain_hi"],
        ).replace(scale=n["scale"])
        for n in header["networks"]
    ]
    expected = sum(t.n_params for t in templates)
    if flat.size != expected:
        raise InputShapeError(f"checkpoint holds {flat.size} values, header implies {expected}")
    return unflatten_params(flat, templates), header.get("seed")
