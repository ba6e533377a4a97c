import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfxpinn.driver import preset_layout
from pfxpinn.errors import ConfigError, GeometryError, OutputError
from pfxpinn.mesh import (
    Geometry,
    Hole,
    SubdomainBox,
    box_outside_area,
    dorfler_mark,
    export_mesh_csv,
    gauss_points,
    interface_pairs,
    partition,
    recovery_error_indicator,
    refine,
    total_weight,
)

UNIT = Geometry((0.0, 0.0), (1.0, 1.0))
BAR = Geometry((-1.0,), (1.0,))


def test_two_point_rule_on_reference_interval():
    x, w, inside = gauss_points((-1.0,), (1.0,), 2)
    assert np.allclose(np.sort(x[:, 0]), [-1 / math.sqrt(3), 1 / math.sqrt(3)], atol=1e-15)
    assert np.allclose(w, [1.0, 1.0])
    assert inside.all()


@given(st.floats(-5, 5), st.floats(0.01, 3))
@settings(max_examples=30, deadline=None)
def test_two_point_rule_integrates_cubic(a, h):
    b = a + h
    x, w, _ = gauss_points((a,), (b,), 2)
    exact = (b**4 - a**4) / 4.0
    assert np.sum(w * x[:, 0] ** 3) == pytest.approx(exact, rel=1e-13, abs=1e-13)


def test_unit_element_weights_sum_to_one():
    for n in (1, 2, 3, 5):
        _, w, _ = gauss_points((0.0, 0.0), (1.0, 1.0), n)
        assert w.sum() == pytest.approx(1.0, abs=1e-14)


def test_cut_element_weights_match_exact_area():
    hole = Hole((0.6, 0.7), 0.15)
    lo, hi = (0.5, 0.5), (0.625, 0.625)
    x, w, inside = gauss_points(lo, hi, 2, hole)
    assert not np.any(hole.contains(x[inside]))
    assert np.all(w[~inside] == 0.0)
    assert w.sum() == pytest.approx(box_outside_area(lo, hi, hole), rel=1e-12)


def test_hole_domain_measure():
    g = Geometry((0.0, 0.0), (1.0, 1.0), Hole((0.6, 0.7), 0.15))
    assert g.measure == pytest.approx(1.0 - math.pi * 0.15**2, rel=1e-12)
    layout, ipts, _ = preset_layout("eccentric_hole", 4)
    subs = partition(g, layout, 2, ipts)
    assert total_weight(subs) == pytest.approx(g.measure, rel=1e-10)
    for _, _, pts in interface_pairs(subs):
        assert not np.any(g.hole.contains(pts))


def test_bar_two_subdomains_single_interface():
    layout, ipts, _ = preset_layout("bar1d", 2)
    subs = partition(BAR, layout, 5, ipts)
    pairs = interface_pairs(subs)
    assert len(pairs) == 1
    i, j, pts = pairs[0]
    assert (i, j) == (0, 1)
    assert pts.tolist() == [[0.0]]
    assert [s.n_points for s in subs] == [800, 800]


def test_unit_square_four_interfaces_meet_at_center():
    layout, ipts, _ = preset_layout("sen_tension", 4)
    subs = partition(UNIT, layout, 2, ipts)
    pairs = interface_pairs(subs)
    assert len(pairs) == 4
    ends = set()
    for s in subs:
        for itf in s.interfaces:
            ends.add(tuple(np.round(itf.a, 12)))
            ends.add(tuple(np.round(itf.b, 12)))
    assert (0.5, 0.5) in ends
    assert [s.n_points for s in subs] == [484] * 4
    assert total_weight(subs) == pytest.approx(1.0, abs=1e-13)


def test_twelve_subdomain_element_counts():
    layout, _, _ = preset_layout("sen_tension", 12)
    assert len(layout) == 12
    assert {b.elements[0] for b in layout} <= {6, 8, 14}
    subs = partition(UNIT, layout, 2, 800)
    assert total_weight(subs) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "boxes",
    [
        [SubdomainBox((0, 0), (0.6, 1), (2, 2)), SubdomainBox((0.5, 0), (1, 1), (2, 2))],
        [SubdomainBox((0, 0), (0.5, 1), (2, 2)), SubdomainBox((0.6, 0), (1, 1), (2, 2))],
        [SubdomainBox((0, 0), (1.2, 1), (2, 2))],
    ],
)
def test_bad_tilings(boxes):
    with pytest.raises(GeometryError):
        partition(UNIT, boxes, 2)


def _small_unit(n=4, n_sub_rows=1):
    return partition(UNIT, [SubdomainBox((0, 0), (1, 1), (n, n))], 2, 100)


def test_uniform_and_linear_stress_give_zero_indicator():
    subs = _small_unit(5)
    eta = recovery_error_indicator(subs, lambda sid, x: np.tile([1.0, 2.0, 0.5], (x.shape[0], 1)))
    assert max(eta.values()) == 0.0 or max(eta.values()) < 1e-28
    lin = lambda sid, x: np.stack([1 + 2 * x[:, 0], 3 * x[:, 1] - x[:, 0], 0.5 * x[:, 1]], axis=-1)
    eta = recovery_error_indicator(subs, lin)
    assert max(eta.values()) <= 1e-10


def test_stress_jump_element_has_largest_indicator():
    subs = _small_unit(6)
    target = subs[0].active_elements()[14]
    lo, hi = target.lo, target.hi

    def jump(sid, x):
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        s = np.zeros((x.shape[0], 3))
        s[inside, 1] = 1.0
        return s

    eta = recovery_error_indicator(subs, jump)
    best = max(eta, key=eta.get)
    assert best == (0, target.id)


def test_dorfler_marking():
    eta = {("a", 1): 5.0, ("a", 2): 3.0, ("a", 3): 1.0, ("a", 4): 1.0}
    assert dorfler_mark(eta, 0.25) == {("a", 1)}
    assert dorfler_mark(eta, 0.6) == {("a", 1), ("a", 2)}
    assert dorfler_mark(eta, 1.0) == set(eta)
    assert dorfler_mark({("a", 1): 0.0}, 0.5) == set()


def _zero(sid, x):
    return np.zeros(x.shape[0])


def test_zero_phase_field_triggers_no_refinement():
    layout, ipts, _ = preset_layout("bar1d", 4)
    subs = partition(BAR, layout, 5, ipts)
    rep = refine(subs, _zero, None, 0.2, 0.25, 3)
    assert not rep.changed
    assert rep.points_after == rep.points_before == [100, 250, 250, 100]


def _crack_phi(sid, x):
    return np.exp(-np.abs(x[:, 0]) / (1 / 80))


def test_bar_refinement_is_confined_to_center_and_follows_schedule():
    layout, ipts, sched = preset_layout("bar1d", 4)
    subs = partition(BAR, layout, 5, ipts)
    rep = refine(subs, _crack_phi, None, 0.2, 0.25, 3)
    assert {sid for sid, _ in rep.refined} == {1, 2}
    subs = partition(BAR, layout, 5, ipts)
    rep = refine(subs, _crack_phi, None, 0.2, 0.25, 3, targets=sched)
    assert {sid for sid, _ in rep.refined} == {1, 2}
    assert set(rep.retiled) == {0, 3}
    assert rep.points_before == [100, 250, 250, 100]
    assert rep.points_after[0] == 250 and rep.points_after[3] == 250
    assert 600 <= rep.points_after[1] <= 600 + 5 and 600 <= rep.points_after[2] <= 600 + 5
    assert total_weight(subs) == pytest.approx(2.0, abs=1e-13)


def test_max_level_is_never_exceeded_and_history_is_evaluated():
    subs = _small_unit(2)
    one = lambda sid, x: np.ones(x.shape[0])
    calls = []

    def rule(x, sid):
        calls.append(x.shape[0])
        return np.full(x.shape[0], 7.0)

    for _ in range(4):
        refine(subs, one, None, 0.2, 0.25, 2, rule)
    levels = [e.level for e in subs[0].active_elements()]
    assert max(levels) == 2 and min(levels) == 2
    assert calls
    x, w, H = subs[0].quadrature()
    assert np.all(H == 7.0)
    assert w.sum() == pytest.approx(1.0, abs=1e-13)


def test_refine_rejects_bad_parameters():
    subs = _small_unit(2)
    with pytest.raises(ConfigError):
        refine(subs, _zero, None, 1.0, 0.25, 2)
    with pytest.raises(ConfigError):
        refine(subs, _zero, None, 0.2, 0.0, 2)


def test_mesh_csv(tmp_path):
    subs = _small_unit(3)
    path = tmp_path / "mesh.csv"
    export_mesh_csv(path, subs)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["element_id", "subdomain_id", "level", "x_min", "y_min", "x_max", "y_max", "n_points"]
    assert len(rows) == 10
    with pytest.raises(OutputError):
        export_mesh_csv(tmp_path / "missing" / "m.csv", subs)
