"""Subdomain partition, element quadrature and adaptive h-refinement.

The domain is an axis-aligned box (an interval in 1D), optionally with a
circular hole.  Subdomains are non-overlapping boxes tiled by elements; every
element carries a tensor-product Gauss-Legendre rule.  Holes are handled by
masking: Gauss points inside the hole get zero weight, and the weights of the
remaining points of a cut element are rescaled to the exact area of the
element outside the hole.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from pfxpinn.errors import ConfigError, GeometryError, OutputError

TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class Hole:
    center: tuple[float, float]
    radius: float

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        c = np.asarray(self.center)
        return np.sum((x - c) ** 2, axis=1) < self.radius**2

    @property
    def area(self) -> float:
        return math.pi * self.radius**2


@dataclasses.dataclass(frozen=True)
class Geometry:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    hole: Hole | None = None

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def measure(self) -> float:
        m = float(np.prod(np.subtract(self.hi, self.lo)))
        if self.hole is not None:
            m -= box_outside_area(self.lo, self.hi, self.hole, complement=True)
        return m


@dataclasses.dataclass(frozen=True)
class SubdomainBox:
    """Layout entry: a subdomain box and its uniform element grid."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    elements: tuple[int, ...]


@dataclasses.dataclass
class Element:
    id: int
    lo: np.ndarray
    hi: np.ndarray
    level: int
    x: np.ndarray
    w: np.ndarray
    H: np.ndarray
    inside: np.ndarray
    active: bool = True
    parent: int | None = None

    @property
    def n_points(self) -> int:
        return int(self.x.shape[0])

    @property
    def measure(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclasses.dataclass
class Interface:
    neighbor: int
    a: np.ndarray
    b: np.ndarray
    points: np.ndarray


@dataclasses.dataclass
class Subdomain:
    id: int
    lo: np.ndarray
    hi: np.ndarray
    elements: list[Element]
    interfaces: list[Interface]
    n_gauss: int
    hole: Hole | None = None
    network_id: int | None = None
    id_counter: "_Ids" = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        if self.network_id is None:
            self.network_id = self.id
        if self.id_counter is None:
            self.id_counter = _Ids(10**6 * (self.id + 1))

    @property
    def dim(self) -> int:
        return int(self.lo.shape[0])

    def active_elements(self) -> list[Element]:
        return [e for e in self.elements if e.active]

    def quadrature(self):
        """Stacked ``(x, w, H)`` over all active elements, masked points dropped."""
        xs, ws, hs = [], [], []
        for e in self.active_elements():
            m = e.inside
            xs.append(e.x[m])
            ws.append(e.w[m])
            hs.append(e.H[m])
        if not xs:
            d = self.dim
            return np.zeros((0, d)), np.zeros(0), np.zeros(0)
        return np.concatenate(xs), np.concatenate(ws), np.concatenate(hs)

    def set_history(self, H: np.ndarray) -> None:
        """Scatter a stacked history array (order of :meth:`quadrature`) back to elements."""
        pos = 0
        for e in self.active_elements():
            m = e.inside
            k = int(m.sum())
            h = e.H.copy()
            h[m] = H[pos : pos + k]
            e.H = h
            pos += k
        if pos != H.shape[0]:
            raise ValueError("history array length does not match quadrature points")

    @property
    def n_points(self) -> int:
        return int(sum(int(e.inside.sum()) for e in self.active_elements()))

    def interface_with(self, other_id: int) -> Interface | None:
        for itf in self.interfaces:
            if itf.neighbor == other_id:
                return itf
        return None


# -- geometry helpers ----------------------------------------------------------------


def _disc_chord_overlap(x, y0, y1, cx, cy, r):
    s = math.sqrt(max(r * r - (x - cx) ** 2, 0.0))
    return max(0.0, min(y1, cy + s) - max(y0, cy - s))


def box_outside_area(lo, hi, hole: Hole, complement: bool = False) -> float:
    """Area of the box outside the hole (or inside it when ``complement``)."""
    x0, y0 = lo
    x1, y1 = hi
    cx, cy = hole.center
    r = hole.radius
    a, b = max(x0, cx - r), min(x1, cx + r)
    inside = 0.0
    if b > a:
        breaks = [a, b]
        for yb in (y0, y1):
            dy = yb - cy
            if abs(dy) < r:
                dx = math.sqrt(r * r - dy * dy)
                breaks.extend([cx - dx, cx + dx])
        breaks = sorted({min(max(t, a), b) for t in breaks})
        for p, q in zip(breaks[:-1], breaks[1:]):
            if q - p > 0:
                val, _ = integrate.quad(
                    _disc_chord_overlap, p, q, args=(y0, y1, cx, cy, r), epsabs=1e-15, epsrel=1e-13, limit=200
                )
                inside += val
    if complement:
        return inside
    return (x1 - x0) * (y1 - y0) - inside


def _box_relation(lo, hi, hole: Hole | None) -> str:
    """'outside', 'inside' or 'cut' relative to the hole disc."""
    if hole is None:
        return "outside"
    c = np.asarray(hole.center)
    nearest = np.clip(c, lo, hi)
    if np.sum((nearest - c) ** 2) >= hole.radius**2:
        return "outside"
    corners = np.array(list(itertools.product(*zip(lo, hi))))
    if np.all(np.sum((corners - c) ** 2, axis=1) <= hole.radius**2):
        return "inside"
    return "cut"


# -- quadrature ----------------------------------------------------------------------


def gauss_legendre(n: int):
    if n < 1:
        raise ConfigError("need at least one Gauss point per axis", field="mesh.n_gauss")
    return np.polynomial.legendre.leggauss(n)


def gauss_points(lo, hi, n_per_axis: int, hole: Hole | None = None):
    """Tensor-product Gauss-Legendre rule on the box ``[lo, hi]``.

    Returns ``(x, w, inside)``.  Points inside ``hole`` have ``inside=False``
    and zero weight; for a cut box the surviving weights are rescaled so they
    sum to the box area outside the hole.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.shape[0]
    relation = _box_relation(lo, hi, hole)
    n = n_per_axis
    while True:
        t, wt = gauss_legendre(n)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        grids = np.meshgrid(*[mid[k] + half[k] * t for k in range(d)], indexing="ij")
        x = np.stack([g.ravel() for g in grids], axis=-1)
        wg = np.meshgrid(*[half[k] * wt for k in range(d)], indexing="ij")
        w = np.prod(np.stack([g.ravel() for g in wg], axis=-1), axis=1)
        if relation == "outside":
            return x, w, np.ones(x.shape[0], dtype=bool)
        inside = ~hole.contains(x)
        if relation == "inside":
            return x, np.zeros_like(w), np.zeros(x.shape[0], dtype=bool)
        target = box_outside_area(lo, hi, hole)
        if target <= TOL * np.prod(hi - lo):
            return x, np.zeros_like(w), np.zeros(x.shape[0], dtype=bool)
        if inside.any():
            w = np.where(inside, w, 0.0)
            w = w * (target / w.sum())
            return x, w, inside
        n += 2


# -- partition -------------------------------------------------------------------------


def _check_tiling(geometry: Geometry, boxes: Sequence[SubdomainBox]):
    glo, ghi = np.asarray(geometry.lo, float), np.asarray(geometry.hi, float)
    scale = float(np.prod(ghi - glo))
    total = 0.0
    for i, b in enumerate(boxes):
        lo, hi = np.asarray(b.lo, float), np.asarray(b.hi, float)
        if lo.shape != glo.shape or hi.shape != glo.shape:
            raise GeometryError(f"subdomain {i} has wrong dimension")
        if np.any(hi <= lo):
            raise GeometryError(f"subdomain {i} has empty extent")
        if np.any(lo < glo - TOL) or np.any(hi > ghi + TOL):
            raise GeometryError(f"subdomain {i} leaves the domain")
        if len(b.elements) != glo.shape[0] or any(int(n) < 1 for n in b.elements):
            raise GeometryError(f"subdomain {i} needs a positive element count per axis")
        total += float(np.prod(hi - lo))
    for i, j in itertools.combinations(range(len(boxes)), 2):
        lo = np.maximum(boxes[i].lo, boxes[j].lo)
        hi = np.minimum(boxes[i].hi, boxes[j].hi)
        if np.all(hi - lo > 1e-10):
            raise GeometryError(f"subdomains {i} and {j} overlap")
    if abs(total - scale) > 1e-10 * scale:
        raise GeometryError("subdomains leave gaps in the domain")


def _shared_segment(a: SubdomainBox, b: SubdomainBox):
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    ext = hi - lo
    d = len(a.lo)
    touching = np.abs(ext) <= 1e-12
    if touching.sum() != 1 or np.any(ext < -1e-12):
        return None
    if d == 2 and np.max(ext) <= 1e-12:
        return None
    return lo, hi


def _tile(lo, hi, counts):
    edges = [np.linspace(lo[k], hi[k], counts[k] + 1) for k in range(len(lo))]
    for idx in itertools.product(*[range(c) for c in counts]):
        elo = np.array([edges[k][i] for k, i in enumerate(idx)])
        ehi = np.array([edges[k][i + 1] for k, i in enumerate(idx)])
        yield elo, ehi


class _Ids:
    def __init__(self, start=0):
        self.next = start

    def __call__(self):
        v = self.next
        self.next += 1
        return v


def _make_element(ids, lo, hi, level, n_gauss, hole, history_rule, sub_id, parent=None):
    x, w, inside = gauss_points(lo, hi, n_gauss, hole)
    active = _box_relation(lo, hi, hole) != "inside"
    H = np.zeros(x.shape[0])
    if history_rule is not None and inside.any():
        H[inside] = np.asarray(history_rule(x[inside], sub_id), dtype=float)
    return Element(ids(), np.asarray(lo, float), np.asarray(hi, float), level, x, w, H, inside, active, parent)


def partition(
    geometry: Geometry,
    boxes: Sequence[SubdomainBox],
    n_gauss: int,
    interface_points: int = 1000,
    history_rule: Callable | None = None,
) -> list[Subdomain]:
    """Build subdomains, their element grids and interface collocation points.

    ``interface_points`` is the per-subdomain budget; it is split evenly over
    a subdomain's interfaces and each interface takes the smaller share of
    its two owners.  1D interfaces are single points.
    """
    _check_tiling(geometry, boxes)
    ids = _Ids()
    subs = []
    for s, b in enumerate(boxes):
        elems = [
            _make_element(ids, lo, hi, 0, n_gauss, geometry.hole, history_rule, s)
            for lo, hi in _tile(np.asarray(b.lo, float), np.asarray(b.hi, float), [int(n) for n in b.elements])
        ]
        subs.append(
            Subdomain(s, np.asarray(b.lo, float), np.asarray(b.hi, float), elems, [], n_gauss, geometry.hole, id_counter=ids)
        )
    pairs = []
    for i, j in itertools.combinations(range(len(boxes)), 2):
        seg = _shared_segment(boxes[i], boxes[j])
        if seg is not None:
            pairs.append((i, j, seg))
    degree = np.zeros(len(boxes), dtype=int)
    for i, j, _ in pairs:
        degree[i] += 1
        degree[j] += 1
    for i, j, (a, b) in pairs:
        if geometry.dim == 1:
            pts = a[None, :].copy()
        else:
            n = max(1, min(interface_points // degree[i], interface_points // degree[j]))
            t = (np.arange(n) + 0.5) / n
            pts = a[None, :] + t[:, None] * (b - a)[None, :]
            if geometry.hole is not None:
                pts = pts[~geometry.hole.contains(pts)]
        subs[i].interfaces.append(Interface(j, a, b, pts))
        subs[j].interfaces.append(Interface(i, a, b, pts))
    return subs


def interface_pairs(subdomains: Sequence[Subdomain]):
    """Each interface once, as ``(i, j, points)`` with ``i < j``."""
    out = []
    for s in subdomains:
        for itf in s.interfaces:
            if s.id < itf.neighbor:
                out.append((s.id, itf.neighbor, itf.points))
    return out


# -- error indicator and refinement --------------------------------------------------


def _face_neighbors(elems: Sequence[Element]) -> list[list[int]]:
    if not elems:
        return []
    lo = np.array([e.lo for e in elems])
    hi = np.array([e.hi for e in elems])
    n, d = lo.shape
    size = np.min(hi - lo)
    tol = 1e-9 * max(size, 1e-300)
    olo = np.maximum(lo[:, None, :], lo[None, :, :])
    ohi = np.minimum(hi[:, None, :], hi[None, :, :])
    ext = ohi - olo
    touch = np.abs(ext) <= tol
    positive = ext > tol
    if d == 1:
        adj = touch[:, :, 0]
    else:
        adj = (touch[:, :, 0] & positive[:, :, 1]) | (touch[:, :, 1] & positive[:, :, 0])
    np.fill_diagonal(adj, False)
    return [list(np.flatnonzero(adj[i])) for i in range(n)]


def _patch_fit(xp, sp, xe):
    """Least-squares linear fit of ``sp`` over patch points ``xp``, evaluated at ``xe``."""
    c = xp.mean(axis=0)
    scale = np.maximum(np.ptp(xp, axis=0), 1e-300)
    A = np.hstack([np.ones((xp.shape[0], 1)), (xp - c) / scale])
    Ae = np.hstack([np.ones((xe.shape[0], 1)), (xe - c) / scale])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        return np.broadcast_to(sp.mean(axis=0), (xe.shape[0], sp.shape[1]))
    coef, *_ = np.linalg.lstsq(A, sp, rcond=None)
    return Ae @ coef


def recovery_error_indicator(subdomains: Sequence[Subdomain], stress_fn: Callable) -> dict:
    """Per-element ``sum_q w_q |sigma*(x_q) - sigma(x_q)|^2`` with patch-recovered ``sigma*``.

    ``stress_fn(subdomain_id, x)`` returns stress components of shape (N, k);
    for 2D the components are (xx, yy, xy) and the shear is counted twice in
    the norm.  ``sigma*`` is the least-squares linear fit over the element and
    its face neighbours in the same subdomain, so constant and linear stress
    fields are recovered exactly.  Returns ``{(subdomain_id, element_id): eta}``.
    """
    out = {}
    for sub in subdomains:
        elems = sub.active_elements()
        if not elems:
            continue
        xs = [e.x[e.inside] for e in elems]
        counts = [x.shape[0] for x in xs]
        allx = np.concatenate(xs)
        sig = np.asarray(stress_fn(sub.id, allx), dtype=float)
        if sig.ndim == 1:
            sig = sig[:, None]
        norm_w = np.ones(sig.shape[1])
        if sig.shape[1] == 3:
            norm_w[2] = 2.0
        offsets = np.concatenate([[0], np.cumsum(counts)])
        per = [sig[offsets[k] : offsets[k + 1]] for k in range(len(elems))]
        nbrs = _face_neighbors(elems)
        for k, e in enumerate(elems):
            if not nbrs[k] or counts[k] == 0:
                out[(sub.id, e.id)] = 0.0
                continue
            patch = [k] + nbrs[k]
            xp = np.concatenate([xs[m] for m in patch])
            sp = np.concatenate([per[m] for m in patch])
            rec = _patch_fit(xp, sp, xs[k])
            diff2 = ((rec - per[k]) ** 2) @ norm_w
            out[(sub.id, e.id)] = float(np.sum(e.w[e.inside] * diff2))
    return out


def dorfler_mark(indicators: dict, fraction: float) -> set:
    """Smallest set of largest indicators whose sum reaches ``fraction`` of the total."""
    items = sorted(indicators.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(v for _, v in items)
    marked = set()
    if total <= 0.0:
        return marked
    acc = 0.0
    for key, v in items:
        if acc >= fraction * total or v <= 0.0:
            break
        marked.add(key)
        acc += v
    return marked


@dataclasses.dataclass
class RefineReport:
    refined: list[tuple[int, int]]
    retiled: list[int]
    points_before: list[int]
    points_after: list[int]

    @property
    def changed(self) -> bool:
        return bool(self.refined or self.retiled)


def _split(sub: Subdomain, e: Element, history_rule):
    mid = 0.5 * (e.lo + e.hi)
    children = []
    d = e.lo.shape[0]
    for corner in itertools.product((0, 1), repeat=d):
        c = np.array(corner)
        lo = np.where(c == 0, e.lo, mid)
        hi = np.where(c == 0, mid, e.hi)
        children.append(_make_element(sub.id_counter, lo, hi, e.level + 1, sub.n_gauss, sub.hole, history_rule, sub.id, e.id))
    return children


def _element_phi_max(sub, e, phi_fn):
    if not e.inside.any():
        return 0.0
    phi = np.clip(np.asarray(phi_fn(sub.id, e.x[e.inside]), dtype=float), 0.0, 1.0)
    return float(phi.max())


def refine(
    subdomains: Sequence[Subdomain],
    phi_fn: Callable,
    stress_fn: Callable | None,
    phi_thres: float,
    rho: float,
    max_level: int,
    history_rule: Callable | None = None,
    targets: Sequence[int] | None = None,
) -> RefineReport:
    """One adaptive h-refinement pass.

    An element below ``max_level`` is split into ``2^d`` children when its
    largest clipped phase field exceeds ``phi_thres`` or when it belongs to the
    largest recovery-error indicators that together carry ``rho`` (a fraction
    in (0, 1]) of the total.  New points get their history from
    ``history_rule(x, subdomain_id)``.

    ``targets`` optionally fixes per-subdomain quadrature-point totals (a
    configured schedule): subdomains with marked elements keep splitting,
    highest priority first, until their total reaches the target; subdomains
    without marked elements are uniformly re-tiled to the target.
    """
    if not 0.0 < phi_thres < 1.0:
        raise ConfigError("phi_thres must lie in (0, 1)", field="mesh.phi_thres")
    if not 0.0 < rho <= 1.0:
        raise ConfigError("rho must lie in (0, 1]", field="mesh.rho")
    before = [s.n_points for s in subdomains]
    indicators = recovery_error_indicator(subdomains, stress_fn) if stress_fn is not None else {}
    err_marked = dorfler_mark(indicators, rho)
    refined, retiled = [], []
    for sub in subdomains:
        cand = []
        for e in sub.active_elements():
            if e.level >= max_level:
                continue
            pm = _element_phi_max(sub, e, phi_fn)
            mark = pm > phi_thres or (sub.id, e.id) in err_marked
            eta = indicators.get((sub.id, e.id), 0.0)
            cand.append((mark, pm, eta, e))
        marked = [c for c in cand if c[0]]
        target = None if targets is None else int(targets[sub.id])
        if not marked:
            if target is not None and sub.n_points < target:
                _retile(sub, target, history_rule)
                retiled.append(sub.id)
            continue
        if target is None:
            chosen = [c[3] for c in marked]
            for e in chosen:
                _replace_with_children(sub, e, history_rule)
                refined.append((sub.id, e.id))
            continue
        _refine_to_target(sub, phi_fn, indicators, max_level, target, history_rule, refined)
    return RefineReport(refined, retiled, before, [s.n_points for s in subdomains])


def _replace_with_children(sub, e, history_rule):
    children = _split(sub, e, history_rule)
    e.active = False
    idx = sub.elements.index(e)
    sub.elements[idx + 1 : idx + 1] = children
    return children


def _refine_to_target(sub, phi_fn, indicators, max_level, target, history_rule, refined):
    per_split = (2 ** sub.dim - 1) * sub.n_gauss ** sub.dim
    while sub.n_points < target:
        cand = [e for e in sub.active_elements() if e.level < max_level]
        if not cand:
            break
        scored = sorted(
            cand,
            key=lambda e: (
                -_element_phi_max(sub, e, phi_fn),
                -indicators.get((sub.id, e.id), 0.0),
                -e.level,
                e.id,
            ),
        )
        need = int(math.ceil((target - sub.n_points) / per_split))
        for e in scored[:need]:
            _replace_with_children(sub, e, history_rule)
            refined.append((sub.id, e.id))


def _retile(sub, target, history_rule):
    d = sub.dim
    per_el = sub.n_gauss**d
    n_el = max(1, int(round(target / per_el)))
    per_axis = max(1, int(round(n_el ** (1.0 / d))))
    counts = [per_axis] * d
    for e in sub.elements:
        e.active = False
    sub.elements = [
        _make_element(sub.id_counter, lo, hi, 0, sub.n_gauss, sub.hole, history_rule, sub.id)
        for lo, hi in _tile(sub.lo, sub.hi, counts)
    ]


def export_mesh_csv(path, subdomains: Sequence[Subdomain]) -> None:
    """Columns: element_id, subdomain_id, level, x_min, y_min, x_max, y_max, n_points."""
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["element_id", "subdomain_id", "level", "x_min", "y_min", "x_max", "y_max", "n_points"])
            for s in subdomains:
                for e in s.active_elements():
                    ylo = e.lo[1] if e.lo.shape[0] > 1 else 0.0
                    yhi = e.hi[1] if e.hi.shape[0] > 1 else 0.0
                    wr.writerow(
                        [
                            e.id,
                            s.id,
                            e.level,
                            f"{e.lo[0]:.17g}",
                            f"{ylo:.17g}",
                            f"{e.hi[0]:.17g}",
                            f"{yhi:.17g}",
                            int(e.inside.sum()),
                        ]
                    )
    except OSError as exc:
        raise OutputError(f"cannot write mesh snapshot {path}: {exc}", path=str(path)) from exc


def total_weight(subdomains: Sequence[Subdomain]) -> float:
    return float(sum(np.sum(e.w) for s in subdomains for e in s.active_elements()))
