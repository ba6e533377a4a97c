import math

import jax.numpy as jnp
import numpy as np
import pytest

from pfxpinn.driver import (
    Solver,
    exact_bar_solution,
    preset_problem,
    reaction_force,
    relative_l2,
    run,
)
from pfxpinn.errors import ConfigError, GeometryError
from pfxpinn.mesh import partition
from pfxpinn.network import BcAnsatz, init_xavier
from pfxpinn.optimize import OptimizerConfig

TINY = OptimizerConfig(adam_steps=5, lbfgs_max_iters=5)


def test_exact_bar_solution():
    u, phi = exact_bar_solution(np.array([-1.0, 0.0, 1.0]))
    assert u[0] == pytest.approx(0.0, abs=1e-16) and u[2] == pytest.approx(0.0, abs=1e-16)
    assert phi[1] == 1.0
    left, _ = exact_bar_solution(np.array([-1e-15]))
    right, _ = exact_bar_solution(np.array([0.0]))
    assert right[0] - left[0] == pytest.approx(2 / math.pi, rel=1e-12)
    x = np.linspace(-1, 1, 101)
    u, _ = exact_bar_solution(x)
    # -u'' = sin(pi x) away from the crack
    h = 1e-4
    xs = np.array([-0.6, -0.3, 0.2, 0.7])
    d2 = (exact_bar_solution(xs + h)[0] - 2 * exact_bar_solution(xs)[0] + exact_bar_solution(xs - h)[0]) / h**2
    assert np.allclose(-d2, np.sin(np.pi * xs), atol=1e-5)


def test_relative_l2():
    x = np.linspace(-1, 1, 2001)
    u, _ = exact_bar_solution(x)
    assert relative_l2(u, u) == 0.0
    assert relative_l2(1.01 * u, u) == pytest.approx(1.0, rel=1e-12)
    c = 0.05
    brute = 100 * math.sqrt(sum(c * c for _ in u)) / math.sqrt(sum(v * v for v in u))
    assert relative_l2(u + c, u) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        relative_l2(u, np.zeros_like(u))


def test_problem_validation():
    with pytest.raises(ConfigError):
        preset_problem("sen_tension", du=0.0)
    with pytest.raises(ConfigError):
        preset_problem("bar1d", n_steps=3)
    with pytest.raises(ConfigError):
        preset_problem("sen_tension", 5)
    with pytest.raises(ConfigError):
        preset_problem("plate")
    p = preset_problem("bar1d")
    assert p.material.l0 == pytest.approx(1 / 80) and p.layers == (1, 10, 10, 10, 2) and p.activation == "tanh"


def test_zero_steps_give_no_results():
    p = preset_problem("bar1d", 2, n_steps=0)
    assert run(p) == []


def _zero_nets(subs, layers, phi_bias=0.0):
    nets = []
    for s in subs:
        n = init_xavier(layers, seed=s.id, domain_lo=tuple(s.lo), domain_hi=tuple(s.hi))
        ws = tuple(w * 0 for w in n.weights)
        bs = list(b * 0 for b in n.biases)
        bs[-1] = bs[-1].at[-1].set(phi_bias)
        nets.append(n.replace(weights=ws, biases=tuple(bs)))
    return nets


def test_reaction_force_uniform_and_cracked():
    p = preset_problem("sen_tension", 4)
    subs = partition(p.geometry, p.layout, 2, 10)
    m = p.material
    du = 1e-3
    nets = _zero_nets(subs, (2, 5, 5, 3))
    assert reaction_force(subs, nets, BcAnsatz("sen_tension", 0.0), m) == 0.0
    f = reaction_force(subs, nets, BcAnsatz("sen_tension", du), m)
    assert f == pytest.approx((m.lam + 2 * m.mu) * du * 1.0, rel=1e-8)
    cracked = _zero_nets(subs, (2, 5, 5, 3), phi_bias=1.0)
    assert abs(reaction_force(subs, cracked, BcAnsatz("sen_tension", du), m)) < 1e-12
    # a sub-segment of the top edge
    half = reaction_force(subs, nets, BcAnsatz("sen_tension", du), m, edge=((0.0, 1.0), (0.5, 1.0)))
    assert half == pytest.approx(0.5 * f, rel=1e-10)
    with pytest.raises(GeometryError):
        reaction_force(subs, nets, BcAnsatz("sen_tension", du), m, edge=((0.0, 0.4), (1.0, 0.4)))
    with pytest.raises(GeometryError):
        reaction_force(subs, nets, BcAnsatz("sen_tension", du), m, edge="diagonal")


def test_quadrature_padding_does_not_change_the_loss():
    from pfxpinn.physics import total_loss

    p = preset_problem("sen_tension", 4, layers=(2, 6, 6, 3), optimizer=TINY, crack_prerefine=1)
    s = Solver(p)
    s.applied = 1e-3
    direct = total_loss(s.subdomains, s.params, p.material, p.penalties, s.ansatz(), p.body_force)
    assert s.loss_value() == pytest.approx(direct, rel=1e-12)
    assert all(x.shape[0] % 128 == 0 for x, _, _ in s.quad_arrays())


def test_prerefinement_samples_the_seeded_history():
    p = preset_problem("sen_tension", 4, layers=(2, 6, 6, 3))
    s = Solver(p)
    H = np.concatenate([sub.quadrature()[2] for sub in s.subdomains])
    assert H.max() > 0.0
    levels = {e.level for sub in s.subdomains for e in sub.active_elements()}
    assert levels == {0, 1, 2}


@pytest.fixture(scope="module")
def short_sen_run():
    p = preset_problem(
        "sen_tension",
        4,
        layers=(2, 8, 8, 3),
        n_steps=3,
        optimizer=OptimizerConfig(adam_steps=20, lbfgs_max_iters=20),
        max_level=1,
        crack_prerefine=1,
    )
    return p, run(p, grid=11, keep_history=True)


def test_short_run_invariants(short_sen_run):
    p, results = short_sen_run
    assert [r.step for r in results] == [1, 2, 3]
    assert np.allclose([r.applied for r in results], [1e-3, 2e-3, 3e-3], rtol=0, atol=1e-15)
    assert all(np.isfinite(r.force) for r in results)
    for r in results:
        assert r.fields["x"].shape == (121, 2)
        losses = [row.loss for row in r.trace if row.stage == "lbfgs"]
        assert losses
    # history never decreases on points that survive between steps
    for a, b in zip(results, results[1:]):
        for key, h in a.history.items():
            if key in b.history:
                assert np.all(b.history[key] >= h)


def test_warm_start_continuity(short_sen_run):
    _, results = short_sen_run
    for a, b in zip(results, results[1:]):
        if not a.refine_reports or not a.refine_reports[-1].changed:
            assert b.loss_start <= 10 * max(a.loss, 1e-300)


def test_bar_static_single_step():
    p = preset_problem("bar1d", 2, optimizer=TINY)
    res = run(p)
    assert len(res) == 1
    r = res[0]
    assert r.applied == 0.0 and r.errors is not None
    assert r.fields["x"].shape == (2001, 1)
    assert set(r.errors) == {"u", "phi"}
