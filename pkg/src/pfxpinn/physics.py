"""Continuum quantities of the phase-field model and the composite training loss.

Units follow the benchmarks: lengths in mm, Lame constants and energy
densities in kN/mm^2, toughness in kN/mm.  All array functions are written in
``jax.numpy`` and accept a leading batch axis.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from pfxpinn.errors import ConfigError, NumericalFailure
from pfxpinn.autodiff import Jet2, eval_value_grad_lap
from pfxpinn.network import BcAnsatz, NetworkParams, apply_ansatz, forward_constrained


@dataclasses.dataclass(frozen=True)
class MaterialModel:
    lam: float
    mu: float
    gc: float
    l0: float
    order: int = 4
    dim: int = 2

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ConfigError("phase-field order must be 2 or 4", field="material.order")
        if not self.mu > 0:
            raise ConfigError("mu must be positive", field="material.mu")
        if not self.lam > -(2.0 / self.dim) * self.mu:
            raise ConfigError("lam must exceed -(2/d) mu", field="material.lam")
        if not self.gc > 0:
            raise ConfigError("gc must be positive", field="material.gc")
        if not self.l0 > 0:
            raise ConfigError("l0 must be positive", field="material.l0")


@dataclasses.dataclass(frozen=True)
class PenaltyWeights:
    w1: float = 1.0
    w2: float = 1.0
    reg: float = 0.0

    def __post_init__(self):
        for name in ("w1", "w2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"penalty {name} must be finite and positive", field=f"penalty.{name}")
        if not (np.isfinite(self.reg) and self.reg >= 0):
            raise ConfigError("regularization weight must be >= 0", field="penalty.reg")


class SplitEnergy(NamedTuple):
    psi_plus: jnp.ndarray
    psi_minus: jnp.ndarray


# -- pointwise constitutive functions ---------------------------------------------------


def strain(grad_u):
    """Small-strain tensor from the displacement gradient ``grad_u[..., i, j] = du_i/dx_j``."""
    grad_u = jnp.asarray(grad_u)
    return 0.5 * (grad_u + jnp.swapaxes(grad_u, -1, -2))


def _safe_sqrt(q):
    pos = q > 0.0
    return jnp.where(pos, jnp.sqrt(jnp.where(pos, q, 1.0)), 0.0)


def principal_strains(eps):
    """Eigenvalues of symmetric 1x1 or 2x2 strains, shape (..., d)."""
    eps = jnp.asarray(eps)
    d = eps.shape[-1]
    if d == 1:
        return eps[..., 0, :]
    a, b, c = eps[..., 0, 0], eps[..., 0, 1], eps[..., 1, 1]
    m = 0.5 * (a + c)
    r = _safe_sqrt((0.5 * (a - c)) ** 2 + b * b)
    return jnp.stack([m + r, m - r], axis=-1)


def _pos(a):
    return 0.5 * (a + jnp.abs(a))


def _neg(a):
    return 0.5 * (a - jnp.abs(a))


def psi0(eps, material: MaterialModel):
    """Undegraded density ``lam/2 tr(eps)^2 + mu tr(eps^2)``."""
    eps = jnp.asarray(eps)
    tr = jnp.trace(eps, axis1=-2, axis2=-1)
    return 0.5 * material.lam * tr**2 + material.mu * jnp.sum(eps * eps, axis=(-2, -1))


def split_energy(eps, material: MaterialModel) -> SplitEnergy:
    """Spectral tension-compression split of the strain energy density.

    ``psi_pm = lam/2 <tr eps>_pm^2 + mu sum_i <eps_i>_pm^2`` over the
    principal strains ``eps_i``.
    """
    eps = jnp.asarray(eps)
    ev = principal_strains(eps)
    tr = jnp.sum(ev, axis=-1)
    lam, mu = material.lam, material.mu
    plus = 0.5 * lam * _pos(tr) ** 2 + mu * jnp.sum(_pos(ev) ** 2, axis=-1)
    minus = 0.5 * lam * _neg(tr) ** 2 + mu * jnp.sum(_neg(ev) ** 2, axis=-1)
    return SplitEnergy(plus, minus)


def degradation(phi):
    """``g = (1 - phi)^2`` and its derivative."""
    phi = jnp.asarray(phi)
    return (1.0 - phi) ** 2, -2.0 * (1.0 - phi)


def _spectral_parts(eps):
    """Positive and negative strain parts ``sum <eps_i>_pm n_i (x) n_i``."""
    d = eps.shape[-1]
    if d == 1:
        return _pos(eps), _neg(eps)
    a, b, c = eps[..., 0, 0], eps[..., 0, 1], eps[..., 1, 1]
    theta = 0.5 * jnp.arctan2(2.0 * b, a - c)
    n1 = jnp.stack([jnp.cos(theta), jnp.sin(theta)], axis=-1)
    n2 = jnp.stack([-jnp.sin(theta), jnp.cos(theta)], axis=-1)
    ev = principal_strains(eps)
    p1 = n1[..., :, None] * n1[..., None, :]
    p2 = n2[..., :, None] * n2[..., None, :]
    e1 = ev[..., 0][..., None, None]
    e2 = ev[..., 1][..., None, None]
    return _pos(e1) * p1 + _pos(e2) * p2, _neg(e1) * p1 + _neg(e2) * p2


def degraded_stress(eps, phi, material: MaterialModel):
    """``sigma = g(phi) d(psi+)/d(eps) + d(psi-)/d(eps)``."""
    eps = jnp.asarray(eps)
    d = eps.shape[-1]
    g, _ = degradation(phi)
    eye = jnp.eye(d)
    tr = jnp.trace(eps, axis1=-2, axis2=-1)
    ep, en = _spectral_parts(eps)
    lam, mu = material.lam, material.mu
    s_plus = lam * _pos(tr)[..., None, None] * eye + 2.0 * mu * ep
    s_minus = lam * _neg(tr)[..., None, None] * eye + 2.0 * mu * en
    return jnp.asarray(g)[..., None, None] * s_plus + s_minus


def stress_components(sigma):
    """(N, 1) for 1D or (N, 3) as (xx, yy, xy) for 2D."""
    sigma = jnp.asarray(sigma)
    if sigma.shape[-1] == 1:
        return sigma[..., 0, :]
    return jnp.stack([sigma[..., 0, 0], sigma[..., 1, 1], sigma[..., 0, 1]], axis=-1)


def crack_density(phi, grad_phi, lap_phi, material: MaterialModel):
    """Crack density integrand: ``(phi^2 + l0^2/2 |grad phi|^2 [+ l0^4/16 (lap phi)^2]) / (2 l0)``."""
    l0 = material.l0
    phi = jnp.asarray(phi)
    inner = phi**2 + 0.5 * l0**2 * jnp.sum(jnp.asarray(grad_phi) ** 2, axis=-1)
    if material.order == 4:
        if lap_phi is None:
            raise ConfigError("fourth-order crack density needs the Laplacian of phi", field="material.order")
        inner = inner + (l0**4 / 16.0) * jnp.asarray(lap_phi) ** 2
    return inner / (2.0 * l0)


# -- strain history ----------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CrackGeometry:
    """Initial cracks as straight segments (a point in 1D is a degenerate segment)."""

    segments: tuple[tuple[tuple[float, ...], tuple[float, ...]], ...] = ()

    def distance(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.segments:
            return np.full(x.shape[0], np.inf)
        dist = np.full(x.shape[0], np.inf)
        for a, b in self.segments:
            a = np.asarray(a, float)
            b = np.asarray(b, float)
            ab = b - a
            L2 = float(ab @ ab)
            if L2 == 0.0:
                t = np.zeros(x.shape[0])
            else:
                t = np.clip((x - a) @ ab / L2, 0.0, 1.0)
            proj = a + t[:, None] * ab
            dist = np.minimum(dist, np.linalg.norm(x - proj, axis=1))
        return dist


def history_init(x, crack: CrackGeometry, B: float, material: MaterialModel, rule: str = "linear", step_value=1000.0):
    """Initial history field seeding the initial crack.

    ``rule="linear"``: ``B gc / (2 l0) (1 - 2 d / l0)`` for ``d <= l0 / 2``;
    ``rule="step"``: ``step_value`` for ``d <= l0``.  Zero elsewhere.
    """
    d = crack.distance(x)
    l0 = material.l0
    if rule == "linear":
        h = B * material.gc / (2.0 * l0) * (1.0 - 2.0 * d / l0)
        return np.where(d <= 0.5 * l0, np.maximum(h, 0.0), 0.0)
    if rule == "step":
        return np.where(d <= l0, float(step_value), 0.0)
    raise ConfigError(f"unknown history rule {rule!r}")


def history_update(H_prev, psi_plus):
    """Irreversible history: pointwise running maximum."""
    return np.maximum(np.asarray(H_prev, dtype=float), np.asarray(psi_plus, dtype=float))


# -- body forces -----------------------------------------------------------------------


def body_force(kind: str | None, x):
    """Body force field (N, d); ``"sine"`` is ``sin(pi x)`` along the bar."""
    x = jnp.asarray(x)
    if kind in (None, "none"):
        return jnp.zeros_like(x)
    if kind == "sine":
        return jnp.sin(jnp.pi * x)
    raise ConfigError(f"unknown body force {kind!r}", field="loading.body_force")


# -- loss assembly -----------------------------------------------------------------------


def _density(u_value, u_grad, phi, grad_phi, lap_phi, H, x, material, force):
    eps = strain(u_grad)
    sp = split_energy(eps, material)
    g, _ = degradation(phi)
    gamma = crack_density(phi, grad_phi, lap_phi, material)
    dens = g * sp.psi_plus + sp.psi_minus + material.gc * gamma + g * H
    if force not in (None, "none"):
        dens = dens - jnp.sum(body_force(force, x) * u_value, axis=-1)
    return dens


def energy_density(u, phi, H, x, material: MaterialModel, force: str | None = None):
    """Integrand ``g psi+ + psi- + gc Gamma + g H - f.u`` from constrained field jets."""
    lap = jnp.trace(phi.hess, axis1=-2, axis2=-1) if material.order == 4 else None
    return _density(u.value, u.grad, phi.value, phi.grad, lap, H, x, material, force)


def interior_energy(params: NetworkParams, ansatz: BcAnsatz, x, w, H, material: MaterialModel, force=None):
    """Quadrature sum of the energy integrand for one network (jit-friendly)."""
    x = jnp.asarray(x)
    value, grad, lap = eval_value_grad_lap(params, x)
    raw = Jet2(value, grad, jnp.zeros(grad.shape + (x.shape[1],)))
    u, _ = apply_ansatz(ansatz.kind, x, raw, ansatz.applied_displacement, ansatz.disp_scale, 1)
    d = x.shape[1]
    lap_phi = lap[:, d] if material.order == 4 else None
    dens = _density(u.value, u.grad, value[:, d], grad[:, d, :], lap_phi, H, x, material, force)
    return jnp.sum(w * dens)


def interior_loss(subdomain, params: NetworkParams, material: MaterialModel, ansatz: BcAnsatz, force=None) -> float:
    """Quadrature of the energy integrand over one subdomain's active points."""
    x, w, H = subdomain.quadrature()
    order = 2 if material.order == 4 else 1
    u, phi = forward_constrained(params, ansatz, x, order)
    dens = np.asarray(energy_density(u, phi, jnp.asarray(H), x, material, force))
    bad = ~np.isfinite(dens)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NumericalFailure(f"non-finite energy integrand at {x[k].tolist()}", point=tuple(x[k].tolist()))
    return float(np.sum(w * dens))


def interface_jump(params_i: NetworkParams, params_j: NetworkParams, ansatz: BcAnsatz, points, penalties: PenaltyWeights):
    points = jnp.atleast_2d(jnp.asarray(points))
    ui, phii = forward_constrained(params_i, ansatz, points, 0)
    uj, phij = forward_constrained(params_j, ansatz, points, 0)
    n = points.shape[0]
    du = jnp.sum((ui.value - uj.value) ** 2) / n
    dphi = jnp.sum((phii.value - phij.value) ** 2) / n
    return penalties.w1 * du + penalties.w2 * dphi


def interface_loss(sub_i, sub_j, params_i, params_j, ansatz: BcAnsatz, penalties: PenaltyWeights) -> float:
    """Mean-squared displacement and phase-field jumps over the shared collocation points."""
    itf = sub_i.interface_with(sub_j.id)
    if itf is None or itf.points.shape[0] == 0:
        raise ConfigError(f"subdomains {sub_i.id} and {sub_j.id} share no collocation points")
    return float(interface_jump(params_i, params_j, ansatz, itf.points, penalties))


def regularization(params_list: Sequence[NetworkParams]):
    total = 0.0
    for p in params_list:
        for w, b in zip(p.weights, p.biases):
            total = total + jnp.sum(w * w) + jnp.sum(b * b)
    return total


def make_total_loss(
    material: MaterialModel,
    penalties: PenaltyWeights,
    ansatz_kind: str,
    pair_index: Sequence[tuple[int, int]] = (),
    disp_scale=1.0,
    force=None,
):
    """Build ``loss(params_list, applied, quad, iface_points)``.

    ``quad`` is a tuple of per-subdomain ``(x, w, H)`` arrays and
    ``iface_points`` one point array per entry of ``pair_index``.  Only arrays
    are passed at call time, so the function can be jitted and reused across
    load steps without recompiling.
    """
    pair_index = tuple((int(i), int(j)) for i, j in pair_index)

    def loss(params_list, applied, quad, iface_points):
        ansatz = BcAnsatz(ansatz_kind, applied, disp_scale)
        total = 0.0
        for p, (x, w, H) in zip(params_list, quad):
            total = total + interior_energy(p, ansatz, x, w, H, material, force)
        for (i, j), pts in zip(pair_index, iface_points):
            total = total + interface_jump(params_list[i], params_list[j], ansatz, pts, penalties)
        if penalties.reg > 0:
            total = total + penalties.reg * regularization(params_list)
        return total

    return loss


def loss_inputs(subdomains):
    """``(pair_index, quad, iface_points)`` for :func:`make_total_loss` from the current mesh."""
    from pfxpinn.mesh import interface_pairs

    quad = tuple(tuple(jnp.asarray(a) for a in s.quadrature()) for s in subdomains)
    pairs = interface_pairs(subdomains)
    pair_index = tuple((i, j) for i, j, _ in pairs)
    iface = tuple(jnp.asarray(pts) for _, _, pts in pairs)
    return pair_index, quad, iface


def total_loss(subdomains, params_list, material, penalties, ansatz: BcAnsatz, force=None) -> float:
    """Sum of all interior energies, interface penalties and the optional regularization."""
    pair_index, quad, iface = loss_inputs(subdomains)
    loss = make_total_loss(material, penalties, ansatz.kind, pair_index, ansatz.disp_scale, force)
    value = float(loss(list(params_list), ansatz.applied_displacement, quad, iface))
    if not np.isfinite(value):
        raise NumericalFailure("total loss is not finite")
    return value


def fields_at(params: NetworkParams, ansatz: BcAnsatz, x, material: MaterialModel):
    """Displacement, phase field, strain, split energies and degraded stress at points."""
    u, phi = forward_constrained(params, ansatz, jnp.atleast_2d(jnp.asarray(x)), 1)
    eps = strain(u.grad)
    sp = split_energy(eps, material)
    sigma = degraded_stress(eps, phi.value, material)
    return {
        "u": np.asarray(u.value),
        "phi": np.asarray(phi.value),
        "eps": np.asarray(eps),
        "psi_plus": np.asarray(sp.psi_plus),
        "psi_minus": np.asarray(sp.psi_minus),
        "sigma": np.asarray(sigma),
    }


StressFn = Callable[[int, np.ndarray], np.ndarray]
