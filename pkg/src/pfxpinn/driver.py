"""Quasi-static displacement-controlled load stepping and benchmark presets.

Each load step trains all subdomain networks jointly on the total loss,
updates the strain history, refines the quadrature where the crack or the
recovered stress error demands it, retrains once on the refined mesh and
records observables.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from pfxpinn.autodiff import flatten_params, unflatten_params
from pfxpinn.errors import ConfigError, GeometryError, NumericalFailure
from pfxpinn.mesh import (
    Geometry,
    Hole,
    RefineReport,
    Subdomain,
    SubdomainBox,
    interface_pairs,
    partition,
    _replace_with_children,
    refine,
)
from pfxpinn.network import BcAnsatz, fixed_activation, forward_constrained, init_xavier
from pfxpinn.optimize import OptimizeResult, OptimizerConfig, TraceRow, adam_minimize, lbfgs_minimize
from pfxpinn.physics import (
    CrackGeometry,
    MaterialModel,
    PenaltyWeights,
    degraded_stress,
    history_init,
    history_update,
    make_total_loss,
    split_energy,
    strain,
    stress_components,
)

log = logging.getLogger(__name__)

PRESETS = ("bar1d", "sen_tension", "eccentric_hole")
PAD = 128


@dataclasses.dataclass(frozen=True)
class ProblemSpec:
    preset: str
    material: MaterialModel
    geometry: Geometry
    layout: tuple[SubdomainBox, ...]
    layers: tuple[int, ...]
    activation: str = "tanh"
    scale: float = 10.0
    train_slopes: bool = True
    n_gauss: int = 2
    interface_points: int = 1600
    du: float = 1e-3
    n_steps: int = 10
    phi_thres: float = 0.2
    rho: float = 0.25
    max_level: int = 2
    refine_cycles: int = 1
    quadrature_schedule: tuple[int, ...] | None = None
    crack: CrackGeometry = CrackGeometry()
    crack_prerefine: int = 0
    history_rule: str = "linear"
    history_B: float = 1e3
    history_step_value: float = 1000.0
    body_force: str = "none"
    disp_scale: float = 1.0
    penalties: PenaltyWeights = PenaltyWeights()
    optimizer: OptimizerConfig = OptimizerConfig()
    retrain: OptimizerConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}", field="preset")
        if self.n_steps < 0:
            raise ConfigError("n_steps must be >= 0", field="loading.n_steps")
        if self.preset == "bar1d":
            if self.n_steps > 1:
                raise ConfigError("bar1d is a static problem: n_steps must be 0 or 1", field="loading.n_steps")
        elif not self.du > 0:
            raise ConfigError("du must be positive for 2D presets", field="loading.du")
        if self.layers[0] != self.geometry.dim:
            raise ConfigError("network input size must equal the spatial dimension", field="network.layers")
        if self.material.dim != self.geometry.dim:
            raise ConfigError("material dimension must match geometry", field="material")
        if not 0.0 < self.phi_thres < 1.0:
            raise ConfigError("phi_thres must lie in (0, 1)", field="mesh.phi_thres")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError("rho must lie in (0, 1]", field="mesh.rho")
        if self.max_level < 0:
            raise ConfigError("max_level must be >= 0", field="mesh.max_level")
        if not 0 <= self.refine_cycles <= 3:
            raise ConfigError("refine_cycles must lie in 0..3", field="mesh.refine_cycles")
        if self.n_gauss < 1:
            raise ConfigError("n_gauss must be >= 1", field="mesh.n_gauss")
        if self.interface_points < 1:
            raise ConfigError("interface_points must be >= 1", field="mesh.interface_points")
        if self.quadrature_schedule is not None and len(self.quadrature_schedule) != len(self.layout):
            raise ConfigError("quadrature_schedule needs one total per subdomain", field="mesh.quadrature_schedule")
        if not 1.0 <= self.scale <= 10.0:
            raise ConfigError("activation scale must lie in [1, 10]", field="network.scale")
        if self.history_rule not in ("linear", "step"):
            raise ConfigError("history rule must be 'linear' or 'step'", field="loading.history_rule")
        if self.disp_scale <= 0:
            raise ConfigError("disp_scale must be positive", field="network.disp_scale")

    @property
    def dim(self) -> int:
        return self.geometry.dim

    @property
    def retrain_config(self) -> OptimizerConfig:
        return self.retrain if self.retrain is not None else self.optimizer


@dataclasses.dataclass
class StepResult:
    step: int
    applied: float
    loss: float
    force: float
    fields: dict
    errors: dict | None
    mesh_stats: dict
    trace: list[TraceRow]
    mesh_rows: list
    refine_reports: list[RefineReport]
    history: dict | None = None
    loss_start: float | None = None
    wall_time: float = 0.0


# -- presets ---------------------------------------------------------------------------------


def _grid_boxes(xs, ys, counts):
    boxes = []
    for j in range(len(ys) - 1):
        for i in range(len(xs) - 1):
            n = counts[j][i]
            boxes.append(SubdomainBox((xs[i], ys[j]), (xs[i + 1], ys[j + 1]), (n, n)))
    return tuple(boxes)


def preset_layout(preset: str, n_subdomains: int) -> tuple[tuple[SubdomainBox, ...], int, tuple[int, ...] | None]:
    """Subdomain boxes, interface-point budget and quadrature schedule of a preset."""
    if preset == "bar1d":
        if n_subdomains == 2:
            # 800 + 800 points with 5 per element
            return (SubdomainBox((-1.0,), (0.0,), (160,)), SubdomainBox((0.0,), (1.0,), (160,))), 1, None
        if n_subdomains == 4:
            edges = (-1.0, -0.5, 0.0, 0.5, 1.0)
            counts = (20, 50, 50, 20)  # 100-250-250-100 points
            boxes = tuple(SubdomainBox((edges[k],), (edges[k + 1],), (counts[k],)) for k in range(4))
            return boxes, 1, (250, 600, 600, 250)
        raise ConfigError("bar1d supports 2 or 4 subdomains", field="mesh.subdomains")
    h = 0.5
    if preset == "sen_tension":
        if n_subdomains == 4:
            return _grid_boxes((0, h, 1), (0, h, 1), ((11, 11), (11, 11))), 1600, None
        if n_subdomains == 8:
            ys = (0, 0.25, 0.5, 0.75, 1)
            return _grid_boxes((0, h, 1), ys, ((9, 9), (16, 16), (16, 16), (9, 9))), 1000, None
        if n_subdomains == 12:
            xs = (0, 1 / 3, 2 / 3, 1)
            ys = (0, 0.25, 0.5, 0.75, 1)
            counts = ((6, 6, 6), (8, 14, 14), (8, 14, 14), (6, 6, 6))
            return _grid_boxes(xs, ys, counts), 800, None
        raise ConfigError("sen_tension supports 4, 8 or 12 subdomains", field="mesh.subdomains")
    if preset == "eccentric_hole":
        if n_subdomains == 4:
            return _grid_boxes((0, h, 1), (0, h, 1), ((12, 12), (12, 12))), 1600, None
        if n_subdomains == 8:
            ys = (0, 0.25, 0.5, 0.75, 1)
            return _grid_boxes((0, h, 1), ys, ((8, 8), (8, 8), (14, 14), (14, 14))), 1000, None
        raise ConfigError("eccentric_hole supports 4 or 8 subdomains", field="mesh.subdomains")
    raise ConfigError(f"unknown preset {preset!r}", field="preset")


def preset_problem(preset: str, n_subdomains: int | None = None, **overrides) -> ProblemSpec:
    """Default problem of a benchmark; keyword overrides replace any field."""
    if preset == "bar1d":
        n = n_subdomains or 4
        layout, ipts, sched = preset_layout(preset, n)
        base = dict(
            preset=preset,
            material=MaterialModel(lam=0.0, mu=0.5, gc=1.0, l0=1.0 / 80.0, order=4, dim=1),
            geometry=Geometry((-1.0,), (1.0,)),
            layout=layout,
            layers=(1, 10, 10, 10, 2),
            activation="tanh",
            scale=10.0,
            n_gauss=5,
            interface_points=ipts,
            du=0.0,
            n_steps=1,
            phi_thres=0.2,
            rho=0.25,
            max_level=3,
            refine_cycles=1 if sched is not None else 0,
            quadrature_schedule=sched,
            crack=CrackGeometry((((0.0,), (0.0,)),)),
            history_rule="step",
            history_step_value=1000.0,
            body_force="sine",
            disp_scale=1.0,
            penalties=PenaltyWeights(100.0, 100.0, 0.0),
            optimizer=OptimizerConfig(adam_steps=2000, adam_lr=1e-3, lbfgs_max_iters=10000),
        )
    elif preset == "sen_tension":
        n = n_subdomains or 4
        layout, ipts, sched = preset_layout(preset, n)
        base = dict(
            preset=preset,
            material=MaterialModel(lam=121.15, mu=80.77, gc=2.7e-3, l0=0.0125, order=4, dim=2),
            geometry=Geometry((0.0, 0.0), (1.0, 1.0)),
            layout=layout,
            layers=(2, 50, 50, 50, 50, 3),
            activation="tanh",
            scale=10.0,
            n_gauss=2,
            interface_points=ipts,
            du=1e-3,
            n_steps=10,
            max_level=2,
            crack=CrackGeometry((((0.0, 0.5), (0.5, 0.5)),)),
            crack_prerefine=2,
            history_rule="linear",
            history_B=1e3,
            disp_scale=1e-2,
            penalties=PenaltyWeights(1e3, 1.0, 0.0),
            optimizer=OptimizerConfig(adam_steps=1000, adam_lr=1e-3, lbfgs_max_iters=1000),
        )
    elif preset == "eccentric_hole":
        n = n_subdomains or 4
        layout, ipts, sched = preset_layout(preset, n)
        base = dict(
            preset=preset,
            material=MaterialModel(lam=121.154, mu=80.77, gc=2.7e-3, l0=0.02, order=4, dim=2),
            geometry=Geometry((0.0, 0.0), (1.0, 1.0), Hole((0.6, 0.7), 0.15)),
            layout=layout,
            layers=(2, 50, 50, 50, 3),
            activation="swish",
            scale=10.0,
            n_gauss=2,
            interface_points=ipts,
            du=1e-3,
            n_steps=10,
            max_level=2,
            crack=CrackGeometry(()),
            history_rule="linear",
            disp_scale=1e-2,
            penalties=PenaltyWeights(1e3, 1.0, 0.0),
            optimizer=OptimizerConfig(adam_steps=1000, adam_lr=1e-3, lbfgs_max_iters=1000),
        )
    else:
        raise ConfigError(f"unknown preset {preset!r}", field="preset")
    base.update(overrides)
    return ProblemSpec(**base)


# -- closed-form 1D reference and error metric ---------------------------------------------------


def exact_bar_solution(x, l0: float = 1.0 / 80.0):
    """Displacement and phase field of the cracked bar under ``f = sin(pi x)``."""
    x = np.asarray(x, dtype=float)
    s = np.sin(np.pi * x) / np.pi**2
    u = np.where(x < 0.0, s - (1.0 + x) / np.pi, s + (1.0 - x) / np.pi)
    phi = np.exp(-np.abs(x) / l0)
    return u, phi


def relative_l2(pred, exact) -> float:
    """``100 ||pred - exact|| / ||exact||`` in percent."""
    pred = np.asarray(pred, dtype=float).ravel()
    exact = np.asarray(exact, dtype=float).ravel()
    if pred.shape != exact.shape:
        raise ValueError("prediction and reference must have the same number of samples")
    ref = float(np.linalg.norm(exact))
    if ref == 0.0:
        raise ValueError("relative L2 error is undefined for a zero reference")
    return 100.0 * float(np.linalg.norm(pred - exact)) / ref


BAR_GRID = 2001


# -- solver state ---------------------------------------------------------------------------------


def _owner(subdomains: Sequence[Subdomain], x):
    """Index of the subdomain owning each point (-1 if none).

    Boxes are half-open, ``lo <= x < hi``, except on the outer boundary of the
    domain where they are closed.  A point on an interface therefore belongs to
    the subdomain above/right of it, matching the right-continuous convention
    of the closed-form bar solution at the crack.
    """
    x = np.atleast_2d(x)
    own = np.full(x.shape[0], -1)
    top = np.max([s.hi for s in subdomains], axis=0)
    tol = 1e-14
    for s in subdomains:
        below_hi = (x < s.hi - tol) | ((s.hi >= top - tol) & (x <= s.hi + tol))
        inside = np.all((x >= s.lo - tol) & below_hi, axis=1) & (own < 0)
        own[inside] = s.id
    return own


def _pad(x, w, H, lo, hi):
    n = x.shape[0]
    m = max(PAD, int(math.ceil(n / PAD)) * PAD)
    if m == n:
        return x, w, H
    fill = np.broadcast_to(0.5 * (lo + hi), (m - n, x.shape[1]))
    return np.vstack([x, fill]), np.concatenate([w, np.zeros(m - n)]), np.concatenate([H, np.zeros(m - n)])


class Solver:
    """Holds mesh, networks and the compiled loss of one run."""

    def __init__(self, problem: ProblemSpec):
        self.problem = problem
        p = problem
        self.h0_fn = self._make_h0()
        self.subdomains = partition(p.geometry, p.layout, p.n_gauss, p.interface_points, self._h0_rule)
        self.params = []
        for s in self.subdomains:
            net = init_xavier(
                p.layers,
                p.activation,
                p.scale,
                p.seed * 1000 + s.id,
                train_slopes=p.train_slopes,
                domain_lo=tuple(s.lo),
                domain_hi=tuple(s.hi),
            )
            if not p.train_slopes:
                net = fixed_activation(net)
            self.params.append(net)
        self.templates = list(self.params)
        self.pairs = interface_pairs(self.subdomains)
        pair_index = tuple((i, j) for i, j, _ in self.pairs)
        self.iface = tuple(jnp.asarray(pts) for _, _, pts in self.pairs)
        loss = make_total_loss(p.material, p.penalties, p.preset, pair_index, p.disp_scale, p.body_force)
        self.loss_fn = loss
        templates = self.templates

        def flat_loss(theta, applied, quad, iface):
            return loss(unflatten_params(theta, templates), applied, quad, iface)

        self._vg = jax.jit(jax.value_and_grad(flat_loss))
        self._value = jax.jit(flat_loss)
        self.applied = 0.0
        if p.crack_prerefine > 0 and p.crack.segments:
            self._prerefine()

    # history ------------------------------------------------------------------------------

    def _make_h0(self):
        p = self.problem

        def h0(x):
            return history_init(x, p.crack, p.history_B, p.material, p.history_rule, p.history_step_value)

        return h0

    def _h0_rule(self, x, sub_id):
        return self.h0_fn(x)

    def _history_rule(self, x, sub_id):
        h = self.h0_fn(x)
        if self.problem.history_rule == "step":
            return h
        f = self.fields(sub_id, x)
        return np.maximum(h, f["psi_plus"])

    def _prerefine(self):
        """Split elements within ``l0`` of the initial crack so the seeded history is sampled."""
        p = self.problem
        for _ in range(p.crack_prerefine):
            for s in self.subdomains:
                for e in list(s.active_elements()):
                    if e.level < p.max_level and _box_distance_to_crack(e.lo, e.hi, p.crack) <= p.material.l0:
                        _replace_with_children(s, e, self._h0_rule)

    # evaluation ---------------------------------------------------------------------------

    def ansatz(self, applied=None) -> BcAnsatz:
        a = self.applied if applied is None else applied
        return BcAnsatz(self.problem.preset, float(a), self.problem.disp_scale)

    def fields(self, sub_id: int, x, applied=None) -> dict:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 0:
            d = self.problem.dim
            return {
                "u": np.zeros((0, d)),
                "phi": np.zeros(0),
                "psi_plus": np.zeros(0),
                "sigma": np.zeros((0, d, d)),
            }
        u, phi = forward_constrained(self.params[sub_id], self.ansatz(applied), x, 1)
        eps = strain(u.grad)
        sp = split_energy(eps, self.problem.material)
        sigma = degraded_stress(eps, phi.value, self.problem.material)
        return {
            "u": np.asarray(u.value),
            "phi": np.asarray(phi.value),
            "psi_plus": np.asarray(sp.psi_plus),
            "sigma": np.asarray(sigma),
        }

    def phi_fn(self, sub_id, x):
        return self.fields(sub_id, x)["phi"]

    def stress_fn(self, sub_id, x):
        return np.asarray(stress_components(self.fields(sub_id, x)["sigma"]))

    def sample(self, grid: int) -> dict:
        """Fields on a uniform grid (``grid`` points per axis), row-major, NaN in holes."""
        g = self.problem.geometry
        if g.dim == 1:
            x = np.linspace(g.lo[0], g.hi[0], grid)[:, None]
        else:
            xs = np.linspace(g.lo[0], g.hi[0], grid)
            ys = np.linspace(g.lo[1], g.hi[1], grid)
            yy, xx = np.meshgrid(ys, xs, indexing="ij")
            x = np.stack([xx.ravel(), yy.ravel()], axis=-1)
        own = _owner(self.subdomains, x)
        d = g.dim
        u = np.full((x.shape[0], d), np.nan)
        phi = np.full(x.shape[0], np.nan)
        for s in self.subdomains:
            m = own == s.id
            if g.hole is not None:
                m &= ~g.hole.contains(x)
            if m.any():
                f = self.fields(s.id, x[m])
                u[m] = f["u"]
                phi[m] = f["phi"]
        return {"x": x, "u": u, "phi": phi}

    # training -----------------------------------------------------------------------------

    def quad_arrays(self):
        out = []
        for s in self.subdomains:
            x, w, H = s.quadrature()
            out.append(tuple(jnp.asarray(a) for a in _pad(x, w, H, s.lo, s.hi)))
        return tuple(out)

    def loss_value(self, theta=None) -> float:
        theta = flatten_params(self.params) if theta is None else theta
        return float(self._value(jnp.asarray(theta), self.applied, self.quad_arrays(), self.iface))

    def train(self, config: OptimizerConfig) -> OptimizeResult:
        quad = self.quad_arrays()
        applied = self.applied

        def fun(theta):
            v, g = self._vg(jnp.asarray(theta), applied, quad, self.iface)
            return float(v), np.asarray(g)

        theta0 = flatten_params(self.params)
        first = adam_minimize(fun, theta0, config)
        if first.failed:
            raise NumericalFailure("non-finite loss during Adam stage")
        second = lbfgs_minimize(fun, first.theta, config, start_iteration=len(first.trace))
        if second.failed:
            raise NumericalFailure("non-finite loss during L-BFGS stage")
        self.params = unflatten_params(jnp.asarray(second.theta), self.templates)
        return OptimizeResult(
            second.theta, second.loss, first.trace + second.trace, second.reason, first.iterations + second.iterations
        )

    def update_history(self) -> None:
        if self.problem.history_rule == "step":
            return
        for s in self.subdomains:
            x, w, H = s.quadrature()
            psi = self.fields(s.id, x)["psi_plus"]
            s.set_history(history_update(H, psi))

    def refine(self) -> RefineReport:
        p = self.problem
        return refine(
            self.subdomains,
            self.phi_fn,
            self.stress_fn,
            p.phi_thres,
            p.rho,
            p.max_level,
            self._history_rule,
            p.quadrature_schedule,
        )

    def history_snapshot(self) -> dict:
        return {(s.id, e.id): e.H[e.inside].copy() for s in self.subdomains for e in s.active_elements()}

    def mesh_rows(self) -> list:
        rows = []
        for s in self.subdomains:
            for e in s.active_elements():
                ylo = e.lo[1] if e.lo.shape[0] > 1 else 0.0
                yhi = e.hi[1] if e.hi.shape[0] > 1 else 0.0
                rows.append((e.id, s.id, e.level, float(e.lo[0]), float(ylo), float(e.hi[0]), float(yhi), int(e.inside.sum())))
        return rows

    def mesh_stats(self) -> dict:
        return {
            "points": [s.n_points for s in self.subdomains],
            "elements": [len(s.active_elements()) for s in self.subdomains],
        }


def _box_distance_to_crack(lo, hi, crack: CrackGeometry) -> float:
    """Distance from a box to the crack segments (0 if they intersect), sampled finely."""
    best = np.inf
    for a, b in crack.segments:
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        t = np.linspace(0.0, 1.0, 513)
        pts = a + t[:, None] * (b - a)
        nearest = np.clip(pts, lo, hi)
        best = min(best, float(np.min(np.linalg.norm(pts - nearest, axis=1))))
    return best


# -- observables ------------------------------------------------------------------------------------

EDGES = ("top", "bottom", "left", "right")


def reaction_force(subdomains, params_list, ansatz: BcAnsatz, material: MaterialModel, edge="top", n_points: int = 64) -> float:
    """Resultant of the traction component along the loading direction on a boundary edge.

    For 2D the load direction is the edge normal's axis (``top``/``bottom``:
    y, ``left``/``right``: x) and the result is ``int sigma_nn ds`` per unit
    thickness.  For 1D the edge is an end point and the result is the axial
    stress there.  ``edge`` is one of top/bottom/left/right or, in 2D, a
    segment ``((x0, y0), (x1, y1))`` lying on the boundary.
    """
    lo = np.min([s.lo for s in subdomains], axis=0)
    hi = np.max([s.hi for s in subdomains], axis=0)
    d = lo.shape[0]
    if d == 1:
        if edge in ("right", "top"):
            xe = hi
        elif edge in ("left", "bottom"):
            xe = lo
        else:
            raise GeometryError(f"unknown edge {edge!r}")
        own = _owner(subdomains, xe[None, :])[0]
        u, phi = forward_constrained(params_list[own], ansatz, xe[None, :], 1)
        sig = degraded_stress(strain(u.grad), phi.value, material)
        return float(sig[0, 0, 0])
    if isinstance(edge, str):
        if edge not in EDGES:
            raise GeometryError(f"unknown edge {edge!r}")
        seg = {
            "top": ((lo[0], hi[1]), (hi[0], hi[1])),
            "bottom": ((lo[0], lo[1]), (hi[0], lo[1])),
            "left": ((lo[0], lo[1]), (lo[0], hi[1])),
            "right": ((hi[0], lo[1]), (hi[0], hi[1])),
        }[edge]
    else:
        seg = edge
    a = np.asarray(seg[0], float)
    b = np.asarray(seg[1], float)
    axis = None
    for k in range(2):
        if abs(a[k] - b[k]) < 1e-14 and (abs(a[k] - lo[k]) < 1e-12 or abs(a[k] - hi[k]) < 1e-12):
            axis = k
    if axis is None:
        raise GeometryError(f"edge {seg} does not lie on the domain boundary")
    along = 1 - axis
    t, wt = np.polynomial.legendre.leggauss(n_points)
    total = 0.0
    # integrate piecewise per owning subdomain so each piece is smooth
    cuts = sorted({float(a[along]), float(b[along])} | {float(v) for s in subdomains for v in (s.lo[along], s.hi[along])})
    s0, s1 = sorted((float(a[along]), float(b[along])))
    cuts = [c for c in cuts if s0 - 1e-14 <= c <= s1 + 1e-14]
    for c0, c1 in zip(cuts[:-1], cuts[1:]):
        if c1 - c0 <= 0:
            continue
        pts = np.empty((n_points, 2))
        pts[:, along] = 0.5 * (c0 + c1) + 0.5 * (c1 - c0) * t
        pts[:, axis] = a[axis]
        own = _owner(subdomains, np.array([[0.5 * (c0 + c1) if k == along else a[axis] for k in range(2)]]))[0]
        u, phi = forward_constrained(params_list[own], ansatz, pts, 1)
        sig = np.asarray(degraded_stress(strain(u.grad), phi.value, material))
        total += float(np.sum(0.5 * (c1 - c0) * wt * sig[:, axis, axis]))
    return total


def _bar_errors(solver: Solver, grid: int) -> dict:
    smp = solver.sample(grid)
    u_ex, phi_ex = exact_bar_solution(smp["x"][:, 0], solver.problem.material.l0)
    return {"u": relative_l2(smp["u"][:, 0], u_ex), "phi": relative_l2(smp["phi"], phi_ex)}


def run(
    problem: ProblemSpec,
    grid: int | None = None,
    keep_history: bool = False,
    on_step: Callable[[StepResult], None] | None = None,
    solver: Solver | None = None,
) -> list[StepResult]:
    """Run all load steps and return one :class:`StepResult` per completed step.

    On a numerical failure the steps completed so far are returned and the
    exception is re-raised with them attached as ``exc.results``.
    """
    solver = solver if solver is not None else Solver(problem)
    p = problem
    if grid is None:
        grid = BAR_GRID if p.dim == 1 else 101
    results: list[StepResult] = []
    edge = "right" if p.dim == 1 else "top"
    for k in range(1, p.n_steps + 1):
        t0 = time.perf_counter()
        solver.applied = k * p.du if p.dim > 1 else 0.0
        loss_start = solver.loss_value()
        res = _train(solver, p.optimizer, results)
        trace = list(res.trace)
        solver.update_history()
        reports = []
        for _ in range(p.refine_cycles):
            rep = solver.refine()
            reports.append(rep)
            if not rep.changed:
                break
            res = _train(solver, p.retrain_config, results, offset=len(trace))
            trace.extend(res.trace)
            solver.update_history()
        force = reaction_force(solver.subdomains, solver.params, solver.ansatz(), p.material, edge)
        smp = solver.sample(grid)
        errors = _bar_errors(solver, BAR_GRID) if p.preset == "bar1d" else None
        step = StepResult(
            step=k,
            applied=solver.applied,
            loss=res.loss,
            force=force,
            fields=smp,
            errors=errors,
            mesh_stats=solver.mesh_stats(),
            trace=trace,
            mesh_rows=solver.mesh_rows(),
            refine_reports=reports,
            history=solver.history_snapshot() if keep_history else None,
            loss_start=loss_start,
            wall_time=time.perf_counter() - t0,
        )
        log.info(
            "step %d applied=%.6g loss=%.10g force=%.6g points=%s (%.1fs)",
            k,
            step.applied,
            step.loss,
            force,
            step.mesh_stats["points"],
            step.wall_time,
        )
        results.append(step)
        if on_step is not None:
            on_step(step)
    run.last_solver = solver
    return results


def _train(solver, config, results, offset=0):
    try:
        res = solver.train(config)
    except NumericalFailure as exc:
        exc.results = results
        raise
    if offset:
        for row in res.trace:
            row.iteration += offset
    return res
