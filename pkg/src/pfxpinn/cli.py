"""Command-line entry point: TOML configuration, runs and CSV export.

Configuration schema (every key optional except ``preset``; defaults come
from the preset)::

    preset = "bar1d" | "sen_tension" | "eccentric_hole"
    subdomains = 4
    seed = 0

    [material]   lam, mu, gc, l0, order (2 or 4)
    [geometry]   hole_center = [x, y], hole_radius, crack = [[x0, y0, x1, y1], ...]
    [network]    layers, activation, scale, train_slopes, disp_scale
    [mesh]       elements (one count per subdomain, used on every axis), n_gauss, interface_points,
                 phi_thres, rho, max_level, refine_cycles, quadrature_schedule,
                 crack_prerefine
    [loading]    du, n_steps, history_rule, history_B, history_step_value, body_force
    [penalties]  w1, w2, reg
    [optimizer]  adam_steps, adam_lr, lbfgs_max_iters, lbfgs_memory, grad_tol, loss_tol
    [retrain]    same keys as [optimizer]; used after a refinement
    [output]     dir, grid, verbosity

The last line printed by every subcommand is a single JSON object with a
``status`` field, so scripts can parse the outcome.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys
from pathlib import Path

import tomli
import tomli_w

from pfxpinn.errors import ConfigError, OutputError, PfxError

log = logging.getLogger("pfxpinn")
LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)

SECTIONS = {
    "material": ("lam", "mu", "gc", "l0", "order"),
    "geometry": ("hole_center", "hole_radius", "crack"),
    "network": ("layers", "activation", "scale", "train_slopes", "disp_scale"),
    "mesh": (
        "elements",
        "n_gauss",
        "interface_points",
        "phi_thres",
        "rho",
        "max_level",
        "refine_cycles",
        "quadrature_schedule",
        "crack_prerefine",
    ),
    "loading": ("du", "n_steps", "history_rule", "history_B", "history_step_value", "body_force"),
    "penalties": ("w1", "w2", "reg"),
    "optimizer": ("adam_steps", "adam_lr", "lbfgs_max_iters", "lbfgs_memory", "grad_tol", "loss_tol"),
    "retrain": ("adam_steps", "adam_lr", "lbfgs_max_iters", "lbfgs_memory", "grad_tol", "loss_tol"),
    "output": ("dir", "grid", "verbosity"),
}
TOP_KEYS = ("preset", "subdomains", "seed")
FLOAT_KEYS = {
    "lam", "mu", "gc", "l0", "hole_radius", "scale", "disp_scale", "phi_thres", "rho", "du",
    "history_B", "history_step_value", "w1", "w2", "reg", "adam_lr", "grad_tol", "loss_tol",
}  # fmt: skip


@dataclasses.dataclass(frozen=True)
class RunConfig:
    problem: object
    output_dir: str = "out"
    grid: int = 0
    verbosity: int = 1
    document: dict = dataclasses.field(default_factory=dict, compare=False, repr=False)

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return (self.problem, self.output_dir, self.grid, self.verbosity) == (
            other.problem,
            other.output_dir,
            other.grid,
            other.verbosity,
        )

    __hash__ = None


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Line number (1-based) where ``key`` is assigned inside ``section``."""
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([A-Za-z_]+)\]", s)
        if m:
            current = m.group(1)
            continue
        if current == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _resolved_document(problem, output_dir, grid, verbosity, n_sub) -> dict:
    """Full configuration document (every key present) describing ``problem``."""
    p = problem
    geo = {}
    if p.geometry.hole is not None:
        geo["hole_center"] = [float(v) for v in p.geometry.hole.center]
        geo["hole_radius"] = float(p.geometry.hole.radius)
    geo["crack"] = [[float(v) for v in a] + [float(v) for v in b] for a, b in p.crack.segments]

    def opt(c):
        return {f.name: getattr(c, f.name) for f in dataclasses.fields(c)}

    doc = {
        "preset": p.preset,
        "subdomains": n_sub,
        "seed": p.seed,
        "material": {
            "lam": p.material.lam,
            "mu": p.material.mu,
            "gc": p.material.gc,
            "l0": p.material.l0,
            "order": p.material.order,
        },
        "geometry": geo,
        "network": {
            "layers": list(p.layers),
            "activation": p.activation,
            "scale": p.scale,
            "train_slopes": p.train_slopes,
            "disp_scale": p.disp_scale,
        },
        "mesh": {
            "elements": [int(b.elements[0]) for b in p.layout],
            "n_gauss": p.n_gauss,
            "interface_points": p.interface_points,
            "phi_thres": p.phi_thres,
            "rho": p.rho,
            "max_level": p.max_level,
            "refine_cycles": p.refine_cycles,
            "quadrature_schedule": list(p.quadrature_schedule) if p.quadrature_schedule else [],
            "crack_prerefine": p.crack_prerefine,
        },
        "loading": {
            "du": p.du,
            "n_steps": p.n_steps,
            "history_rule": p.history_rule,
            "history_B": p.history_B,
            "history_step_value": p.history_step_value,
            "body_force": p.body_force,
        },
        "penalties": {"w1": p.penalties.w1, "w2": p.penalties.w2, "reg": p.penalties.reg},
        "optimizer": opt(p.optimizer),
        "output": {"dir": output_dir, "grid": grid, "verbosity": verbosity},
    }
    if p.retrain is not None:
        doc["retrain"] = opt(p.retrain)
    return doc


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a TOML run configuration."""
    from pfxpinn.driver import preset_layout, preset_problem
    from pfxpinn.mesh import Geometry, Hole, SubdomainBox
    from pfxpinn.optimize import OptimizerConfig
    from pfxpinn.physics import CrackGeometry, MaterialModel, PenaltyWeights

    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed configuration: {exc}", line=line) from None

    def fail(msg, section, key):
        field = f"{section}.{key}" if section else key
        raise ConfigError(msg, field=field, line=_key_line(text, section, key))

    for key, val in doc.items():
        if isinstance(val, dict):
            if key not in SECTIONS:
                raise ConfigError(f"unknown section [{key}]", field=key, line=_section_line(text, key))
            for sub in val:
                if sub not in SECTIONS[key]:
                    fail(f"unknown key {sub!r} in [{key}]", key, sub)
        elif key not in TOP_KEYS:
            fail(f"unknown key {key!r}", None, key)
    if "preset" not in doc:
        raise ConfigError("missing required key 'preset'", field="preset")

    # type coercion: integers are accepted where floats are expected
    for section, keys in SECTIONS.items():
        for k in keys:
            v = doc.get(section, {}).get(k)
            if v is None:
                continue
            if k in FLOAT_KEYS:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    fail(f"{section}.{k} must be a number", section, k)
                doc[section][k] = float(v)

    preset = doc["preset"]
    if not isinstance(preset, str):
        fail("preset must be a string", None, "preset")
    n_sub = doc.get("subdomains")
    try:
        from pfxpinn.driver import PRESETS

        if preset not in PRESETS:
            fail(f"unknown preset {preset!r}; choose one of {', '.join(PRESETS)}", None, "preset")
        if n_sub is None:
            n_sub = 4
        if not isinstance(n_sub, int) or isinstance(n_sub, bool):
            fail("subdomains must be an integer", None, "subdomains")
        layout, _, _ = preset_layout(preset, n_sub)
        base = preset_problem(preset, n_sub)
    except ConfigError as exc:
        if exc.line is None and exc.field:
            exc.line = _key_line(text, None, exc.field)
        raise

    over: dict = {}
    seed = doc.get("seed", base.seed)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        fail("seed must be a non-negative integer", None, "seed")
    over["seed"] = seed

    sec = doc.get("material", {})
    m = base.material
    try:
        over["material"] = MaterialModel(
            lam=sec.get("lam", m.lam),
            mu=sec.get("mu", m.mu),
            gc=sec.get("gc", m.gc),
            l0=sec.get("l0", m.l0),
            order=sec.get("order", m.order),
            dim=m.dim,
        )
    except ConfigError as exc:
        _relocate(exc, text, "material")
        raise

    sec = doc.get("geometry", {})
    geo = base.geometry
    if "hole_center" in sec or "hole_radius" in sec:
        if preset != "eccentric_hole":
            fail("only the eccentric_hole preset has a hole", "geometry", "hole_center" if "hole_center" in sec else "hole_radius")
        c = sec.get("hole_center", list(geo.hole.center))
        r = sec.get("hole_radius", geo.hole.radius)
        if not (isinstance(c, list) and len(c) == 2):
            fail("hole_center must be [x, y]", "geometry", "hole_center")
        if not 0 < r:
            fail("hole_radius must be positive", "geometry", "hole_radius")
        geo = Geometry(geo.lo, geo.hi, Hole(tuple(float(v) for v in c), float(r)))
        over["geometry"] = geo
    if "crack" in sec:
        segs = []
        d = geo.dim
        for s in sec["crack"]:
            if not (isinstance(s, list) and len(s) == 2 * d):
                fail(f"each crack entry needs {2 * d} coordinates", "geometry", "crack")
            segs.append((tuple(float(v) for v in s[:d]), tuple(float(v) for v in s[d:])))
        over["crack"] = CrackGeometry(tuple(segs))

    sec = doc.get("network", {})
    for k in ("layers", "activation", "scale", "train_slopes", "disp_scale"):
        if k in sec:
            over[k] = tuple(sec[k]) if k == "layers" else sec[k]
    if "layers" in sec:
        if not all(isinstance(v, int) and v > 0 for v in sec["layers"]):
            fail("layers must be positive integers", "network", "layers")
    if "activation" in sec and sec["activation"] not in ("tanh", "swish"):
        fail("activation must be 'tanh' or 'swish'", "network", "activation")
    if "train_slopes" in sec and not isinstance(sec["train_slopes"], bool):
        fail("train_slopes must be true or false", "network", "train_slopes")

    sec = doc.get("mesh", {})
    if "elements" in sec:
        counts = sec["elements"]
        if not (isinstance(counts, list) and len(counts) == len(layout)):
            fail(f"elements needs one count per subdomain ({len(layout)})", "mesh", "elements")
        if not all(isinstance(c, int) and c > 0 for c in counts):
            fail("element counts must be positive integers", "mesh", "elements")
        layout = tuple(SubdomainBox(b.lo, b.hi, (c,) * len(b.lo)) for b, c in zip(layout, counts))
        over["layout"] = layout
    for k in ("n_gauss", "interface_points", "phi_thres", "rho", "max_level", "refine_cycles", "crack_prerefine"):
        if k in sec:
            over[k] = sec[k]
    if "quadrature_schedule" in sec:
        qs = sec["quadrature_schedule"]
        if not isinstance(qs, list) or not all(isinstance(v, int) and v > 0 for v in qs):
            fail("quadrature_schedule must be a list of positive integers", "mesh", "quadrature_schedule")
        over["quadrature_schedule"] = tuple(qs) if qs else None

    sec = doc.get("loading", {})
    for k in ("du", "n_steps", "history_rule", "history_B", "history_step_value", "body_force"):
        if k in sec:
            over[k] = sec[k]
    if "body_force" in sec and sec["body_force"] not in ("none", "sine"):
        fail("body_force must be 'none' or 'sine'", "loading", "body_force")

    sec = doc.get("penalties", {})
    try:
        pw = base.penalties
        over["penalties"] = PenaltyWeights(sec.get("w1", pw.w1), sec.get("w2", pw.w2), sec.get("reg", pw.reg))
    except ConfigError as exc:
        _relocate(exc, text, "penalties")
        raise

    for name, attr in (("optimizer", "optimizer"), ("retrain", "retrain")):
        if name not in doc and attr == "retrain":
            continue
        sec = doc.get(name, {})
        ref = over.get("optimizer", base.optimizer)
        vals = {f.name: sec.get(f.name, getattr(ref, f.name)) for f in dataclasses.fields(OptimizerConfig)}
        for k in ("adam_steps", "lbfgs_max_iters", "lbfgs_memory"):
            if not isinstance(vals[k], int) or isinstance(vals[k], bool):
                fail(f"{k} must be an integer", name, k)
        try:
            over[attr] = OptimizerConfig(**vals)
        except ConfigError as exc:
            _relocate(exc, text, name)
            raise

    sec = doc.get("output", {})
    out_dir = sec.get("dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        fail("output.dir must be a non-empty string", "output", "dir")
    default_grid = 2001 if base.dim == 1 else 101
    grid = sec.get("grid", default_grid)
    if not isinstance(grid, int) or isinstance(grid, bool) or grid < 2:
        fail("grid must be an integer >= 2", "output", "grid")
    verbosity = sec.get("verbosity", 1)
    if not isinstance(verbosity, int) or not 0 <= verbosity <= 2:
        fail("verbosity must be 0, 1 or 2", "output", "verbosity")

    for key in ("n_gauss", "interface_points", "max_level", "refine_cycles", "crack_prerefine", "n_steps"):
        v = over.get(key)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
            section = "loading" if key == "n_steps" else "mesh"
            fail(f"{key} must be an integer", section, key)

    try:
        problem = dataclasses.replace(base, **over)
    except ConfigError as exc:
        if exc.field and "." in exc.field:
            s, k = exc.field.split(".", 1)
            exc.line = _key_line(text, s, k)
        raise
    except TypeError as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from None
    resolved = _resolved_document(problem, out_dir, grid, verbosity, n_sub)
    return RunConfig(problem, out_dir, grid, verbosity, resolved)


def _section_line(text, section):
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip().startswith(f"[{section}]"):
            return n
    return None


def _relocate(exc: ConfigError, text: str, section: str):
    key = (exc.field or "").split(".")[-1]
    exc.field = f"{section}.{key}" if key else section
    exc.line = _key_line(text, section, key) if key else _section_line(text, section)


def serialize_config(config: RunConfig) -> str:
    """TOML text that parses back to an equal :class:`RunConfig`."""
    return tomli_w.dumps(config.document)


# -- export --------------------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    return format(float(v), ".17g")


def _write_rows(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}", path=str(path)) from None


def export_step(out: Path, result) -> None:
    """``fields_k.csv``, ``loss_k.csv`` and ``mesh_k.csv`` of one step."""
    k = result.step
    f = result.fields
    x, u, phi = f["x"], f["u"], f["phi"]
    if x.shape[1] == 1:
        rows = ((x[i, 0], u[i, 0], phi[i]) for i in range(x.shape[0]))
        _write_rows(out / f"fields_{k}.csv", ("x", "u", "phi"), rows)
    else:
        rows = ((x[i, 0], x[i, 1], u[i, 0], u[i, 1], phi[i]) for i in range(x.shape[0]))
        _write_rows(out / f"fields_{k}.csv", ("x", "y", "u", "v", "phi"), rows)
    _write_rows(
        out / f"loss_{k}.csv",
        ("iteration", "loss", "grad_inf_norm", "stage"),
        ((r.iteration, r.loss, r.grad_inf_norm, r.stage) for r in result.trace),
    )
    _write_rows(
        out / f"mesh_{k}.csv",
        ("element_id", "subdomain_id", "level", "x_min", "y_min", "x_max", "y_max", "n_points"),
        result.mesh_rows,
    )


def export_fields(results, out_dir) -> None:
    """Write every step's CSVs plus ``load_disp.csv`` into ``out_dir``."""
    out = Path(out_dir)
    for r in results:
        export_step(out, r)
    export_load_disp(out, results)


def export_load_disp(out: Path, results) -> None:
    _write_rows(Path(out) / "load_disp.csv", ("step", "u_applied", "force"), ((r.step, r.applied, r.force) for r in results))


def _prepare_output(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc.strerror or exc}", path=str(out)) from None
    return out


# -- subcommands --------------------------------------------------------------------------------


def _read_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc.strerror or exc}", path=path) from None
    return parse_config(text)


def _emit(status: dict) -> None:
    print(json.dumps(status, sort_keys=True))


def cmd_validate(args) -> dict:
    cfg = _read_config(args.config)
    if args.print_resolved:
        print(serialize_config(cfg), end="")
    return {"status": "ok", "preset": cfg.problem.preset}


def cmd_run(args) -> dict:
    from pfxpinn.driver import Solver, run
    from pfxpinn.network import save_checkpoint

    cfg = _read_config(args.config)
    log.setLevel(LEVELS[min(cfg.verbosity + args.verbose, 2)])
    out = _prepare_output(args.output or cfg.output_dir)
    (out / "config.toml").write_text(serialize_config(cfg))
    solver = Solver(cfg.problem)
    done = []

    def on_step(r):
        export_step(out, r)
        done.append(r)
        export_load_disp(out, done)

    try:
        results = run(cfg.problem, grid=cfg.grid, on_step=on_step, solver=solver)
    finally:
        export_load_disp(out, done)
    save_checkpoint(out / "params_final.txt", solver.params, cfg.problem.seed)
    status = {"status": "ok", "steps": len(results), "output": str(out)}
    if results:
        status["final_loss"] = results[-1].loss
        if results[-1].errors:
            status["rel_l2_u"] = results[-1].errors["u"]
            status["rel_l2_phi"] = results[-1].errors["phi"]
    return status


def cmd_check_gradients(args) -> dict:
    import numpy as np

    from pfxpinn.autodiff import fd_check, trainable_mask
    from pfxpinn.driver import Solver

    cfg = _read_config(args.config)
    solver = Solver(cfg.problem)
    solver.applied = cfg.problem.du if cfg.problem.dim > 1 else 0.0
    quad = solver.quad_arrays()
    loss = solver.loss_fn

    def f(params_list):
        return loss(params_list, solver.applied, quad, solver.iface)

    free = np.flatnonzero(trainable_mask(solver.params))
    n = free.size
    indices = None
    if args.sample and args.sample < n:
        indices = np.sort(np.random.default_rng(args.seed).choice(free, args.sample, replace=False))
    gap = fd_check(solver.params, f, args.step, indices=indices)
    print(f"max relative gradient discrepancy: {gap:.3e} over {n if indices is None else len(indices)} parameters")
    if not gap <= args.tolerance:
        from pfxpinn.errors import NumericalFailure

        raise NumericalFailure(f"gradient discrepancy {gap:.3e} exceeds {args.tolerance:.1e}")
    return {"status": "ok", "max_discrepancy": gap}


def cmd_export_exact(args) -> dict:
    import numpy as np

    from pfxpinn.driver import exact_bar_solution

    if args.grid < 2:
        raise ConfigError("grid must be >= 2", field="grid")
    if not args.l0 > 0:
        raise ConfigError("l0 must be positive", field="l0")
    out = _prepare_output(args.output)
    x = np.linspace(-1.0, 1.0, args.grid)
    u, phi = exact_bar_solution(x, args.l0)
    path = out / "exact_bar.csv"
    _write_rows(path, ("x", "u", "phi"), zip(x, u, phi))
    return {"status": "ok", "path": str(path), "rows": int(args.grid)}


def _defaults_text() -> str:
    """Per-preset defaults, generated from the parser so the help never drifts."""
    from pfxpinn.driver import PRESETS

    def show(v):
        if isinstance(v, float):
            return f"{v:g}"
        if isinstance(v, list):
            return "[" + ", ".join(show(x) for x in v) + "]"
        return str(v)

    lines = ["Defaults per preset:"]
    for name in PRESETS:
        doc = parse_config(f'preset = "{name}"\n').document
        lines.append("")
        lines.append(f"  {name} (subdomains = {doc['subdomains']}, seed = {doc['seed']})")
        for section, body in doc.items():
            if isinstance(body, dict):
                items = ", ".join(f"{k}={show(v)}" for k, v in body.items())
                lines.append(f"    [{section}] {items}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pfxpinn",
        description="Phase-field fracture with domain-decomposed energy-minimizing neural networks.",
        epilog=__doc__.split("\n\n", 1)[1] + "\n" + _defaults_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    ap.add_argument("--threads", type=int, default=None, help="cap on CPU threads used for loss assembly")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train through all load steps and write CSV outputs")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides [output].dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-config", help="parse and validate a configuration file")
    p.add_argument("config")
    p.add_argument("--print-resolved", action="store_true", help="print the configuration with all defaults filled in")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("check-gradients", help="compare parameter gradients with central differences at initialization")
    p.add_argument("config")
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--sample", type=int, default=0, help="check a random subset of this many parameters (0 = all)")
    p.add_argument("--seed", type=int, default=0, help="seed of the parameter subset")
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("export-exact", help="write the closed-form 1D bar solution on a uniform grid")
    p.add_argument("-o", "--output", default="out")
    p.add_argument("--grid", type=int, default=2001)
    p.add_argument("--l0", type=float, default=1.0 / 80.0)
    p.set_defaults(func=cmd_export_exact)
    return ap


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1", field="threads")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = f"{flags} --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}".strip()
    os.environ["OMP_NUM_THREADS"] = str(n)


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            _emit({"status": "error", "code": "USAGE_ERROR", "exit": 1, "message": "invalid command line"})
            return 1
        return 0
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(LEVELS[min(1 + args.verbose, 2)])
    try:
        _set_threads(args.threads)
        status = args.func(args)
    except PfxError as exc:
        info = {"status": "error", "code": exc.code, "exit": exc.exit_code, "message": str(exc)}
        for attr in ("field", "line", "path", "point"):
            v = getattr(exc, attr, None)
            if v is not None:
                info[attr] = v
        _emit(info)
        return exc.exit_code
    _emit(status)
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
