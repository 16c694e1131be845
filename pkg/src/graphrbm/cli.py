"""``graphrbm`` command line: solve | rbm | sweep | control | report.

Settings come from built-in defaults, then ``--preset``, then the
``key = value`` file given by ``--config``, then ``--seed/--jobs/--out``.
Every run writes ``config.resolved.txt`` next to its artifacts.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import control as oc
from .decompose import PRESETS, PlanError, build_nonoverlapping, build_overlapping, load_plan, preset
from .fem import AssemblyError, Mesh1D, assemble
from .graph import GraphError, build_paper_graph, load_graph, validate
from .rbm import (DecompositionError, bound_trajectory, c_of_m, inv_mass_stiffness_norm,
                  stability_lines, summary_lines, variance)
from .timestep import (NumericalError, TimeGrid, Trajectory, run_ensemble, solve_full,
                       write_probes_csv, write_trajectory_csv)
from .verification import (SweepConfig, ErrorEvaluator, align_dt, check_compatibility,
                           count_inversions, delta_for, fit_observed_order, paper_case,
                           run_convergence_sweep, write_sweep_csv)

log = logging.getLogger("graphrbm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NONCONVERGED = 0, 2, 3, 4

# key -> (type, default)
SCHEMA = {
    "graph": (str, "paper"),
    "N": (int, 300),
    "zeta": (int, 201),
    "T": (float, 1.0),
    "L": (float, 1.0),
    "decomposition": (str, "paper_overlap_3"),
    "delta": (float, None),
    "epsilon": (float, None),
    "realizations": (int, 30),
    "seed": (int, 0),
    "jobs": (int, 1),
    "case": (str, "manufactured"),
    "source": (float, 0.0),
    "initial": (float, 0.0),
    "y_d": (float, 1.0),
    "tol": (float, 1e-8),
    "max_iter": (int, 500),
    "N_list": (str, "1,2,3,4,6"),
    "dt_target": (float, 0.005),
    "metric": (str, "error_of_mean"),
    "probe_x": (float, None),
    "write_states": (bool, False),
    "out": (str, "out"),
}

PRESET_SETTINGS = {
    "paper": {},
    "paper_overlap_3": {"decomposition": "paper_overlap_3"},
    "paper_nonoverlap_3": {"decomposition": "paper_nonoverlap_3"},
}

COMMAND_DEFAULTS = {
    "rbm": {"delta": 0.01},
    "control": {"N": 30, "zeta": 300, "realizations": 20, "decomposition": "paper_nonoverlap_3"},
}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw):
    typ = SCHEMA[key][0]
    if raw is None or isinstance(raw, typ) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {typ.__name__}") from None
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve(command: str, preset_name: str | None, file_values: dict, overrides: dict) -> dict:
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    if preset_name:
        if preset_name not in PRESET_SETTINGS:
            raise ConfigError(f"unknown preset {preset_name!r}")
        cfg.update(PRESET_SETTINGS[preset_name])
    cfg.update(file_values)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if file_values.get("delta") is not None and file_values.get("epsilon") is not None:
        raise ConfigError("give either delta or epsilon, not both")
    if cfg.get("epsilon") is not None and "delta" not in file_values:
        cfg["delta"] = None
    _validate(command, cfg)
    return cfg


def _validate(command: str, cfg: dict) -> None:
    for key in ("N", "zeta", "realizations", "jobs"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be positive, got {cfg[key]}")
    if cfg["zeta"] < 2:
        raise ConfigError("zeta must be at least 2")
    for key in ("T", "L", "tol", "dt_target"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive, got {cfg[key]}")
    if cfg["max_iter"] < 0:
        raise ConfigError("max_iter must be nonnegative")
    if cfg["case"] not in ("manufactured", "constant"):
        raise ConfigError("case must be manufactured or constant")
    if command in ("rbm", "control"):
        if (cfg["delta"] is None) == (cfg["epsilon"] is None) and command == "rbm":
            raise ConfigError("rbm needs exactly one of delta or epsilon")
        for key in ("delta", "epsilon"):
            if cfg[key] is not None and not cfg[key] > 0:
                raise ConfigError(f"{key} must be positive")
    if cfg["metric"] not in ("error_of_mean", "mean_of_errors"):
        raise ConfigError("metric must be error_of_mean or mean_of_errors")


def write_resolved(cfg: dict, out: Path, extra: dict | None = None) -> None:
    lines = [f"{k} = {'' if v is None else v}" for k, v in cfg.items()]
    for k, v in (extra or {}).items():
        lines.append(f"# resolved {k} = {v}")
    (out / "config.resolved.txt").write_text("\n".join(lines) + "\n")


# -- setup helpers --------------------------------------------------------------

def _graph(cfg):
    if cfg["graph"] == "paper":
        return build_paper_graph(cfg["L"])
    path = Path(cfg["graph"])
    if not path.exists():
        raise ConfigError(f"graph file {path} not found")
    g = load_graph(path)
    problems = validate(g)
    if problems:
        raise ConfigError("invalid graph: " + "; ".join(problems))
    return g


def _system(cfg):
    g = _graph(cfg)
    lengths = {e.length for e in g.edges}
    if len(lengths) != 1:
        raise ConfigError("all edges must share one length for a uniform mesh")
    L = lengths.pop()
    return assemble(g, Mesh1D.for_length(L, cfg["N"]))


def _case(cfg, system):
    if cfg["case"] == "manufactured":
        if cfg["graph"] != "paper" or cfg["L"] != 1.0:
            raise ConfigError("the manufactured case needs the reference graph with L = 1")
        return paper_case(cfg["T"])
    return None


def _data(cfg, system, case):
    """(load, initial) for the configured case."""
    if case is not None:
        return case.load(system), case.y0
    c_f, c_0 = cfg["source"], cfg["initial"]
    return (lambda e, x, t: np.full_like(x, c_f)), (lambda e, x, t=0.0: np.full_like(x, c_0))


def _decomposition(cfg, system):
    name = cfg["decomposition"]
    if name in PRESETS:
        return preset(name, system)
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"unknown decomposition {name!r}; choose {PRESETS} or a plan file")
    plan = load_plan(path, system.graph)
    build = build_overlapping if plan.style == "overlapping" else build_nonoverlapping
    return build(system, plan)


def _probe_points(cfg, system, default_fraction):
    L = system.graph.edges[0].length
    x = cfg["probe_x"] if cfg["probe_x"] is not None else default_fraction * L
    return [(e.id, x) for e in system.graph.edges]


def _lines_to(path: Path, lines):
    path.write_text("\n".join(lines) + "\n")


# -- commands --------------------------------------------------------------------

def cmd_solve(cfg, out: Path) -> int:
    system = _system(cfg)
    case = _case(cfg, system)
    f, y0 = _data(cfg, system, case)
    grid = TimeGrid(cfg["T"], cfg["zeta"])
    write_resolved(cfg, out, {"dt": grid.dt, "n_dof": system.n_dof})
    traj = solve_full(system, f, y0, grid)
    lines = [f"n_dof={system.n_dof}", f"dt={grid.dt:.17g}",
             f"time_solve_s={traj.solve_seconds:.6f}  # monotonic clock, solver loop only"]
    if case is not None:
        ev = ErrorEvaluator(system, case)
        err = max(ev(t, traj.states[:, j]) for j, t in enumerate(traj.times))
        lines.append(f"err_full={err:.10e}")
        rep = check_compatibility(case, system.graph)
        lines += [f"kirchhoff.v{v}={s:.3e}" for v, s in rep.kirchhoff.items()]
    write_probes_csv(traj.probes(system, _probe_points(cfg, system, 0.5)), out / "probes.csv")
    if cfg["write_states"]:
        write_trajectory_csv(traj, out / "trajectory.csv")
    _lines_to(out / "report.txt", lines)
    print("\n".join(lines))
    return EXIT_OK


def _delta(cfg, system):
    if cfg["delta"] is not None:
        return cfg["delta"]
    return delta_for(system.h, cfg["epsilon"])


def cmd_rbm(cfg, out: Path) -> int:
    system = _system(cfg)
    case = _case(cfg, system)
    f, y0 = _data(cfg, system, case)
    dec = _decomposition(cfg, system)
    grid = TimeGrid(cfg["T"], cfg["zeta"])
    delta = _delta(cfg, system)
    extra = {"delta": delta}
    q = delta / grid.dt
    if abs(q - round(q)) > 1e-9 * max(1.0, q) or round(q) < 1:
        dt, q = align_dt(delta, grid.dt)
        grid = TimeGrid.from_dt(dt, cfg["T"])
        extra.update({"dt_aligned": dt, "horizon": grid.T, "zeta_aligned": grid.zeta})
        log.info("delta %.6g not a multiple of dt; using dt=%.6g over %d steps", delta, dt, grid.steps)
    write_resolved(cfg, out, extra)
    ev = ErrorEvaluator(system, case) if case is not None else None
    res = run_ensemble(system, dec, delta, grid, y0, f, cfg["realizations"], cfg["seed"],
                       error=ev, jobs=cfg["jobs"], variance_of="state")
    lines = [f"n_dof={system.n_dof}", f"delta={delta:.17g}", f"dt={grid.dt:.17g}",
             f"realizations={res.realizations}", f"seed={res.seed}",
             f"time_rbm_mean_s={res.solve_seconds.mean():.6f}  # monotonic clock, solver loop only"]
    if dec.is_degenerate:
        lines.append("note=degenerate law; equals full solve")
    if ev is not None:
        err_of_mean = max(ev(t, res.mean[:, j]) for j, t in enumerate(res.times))
        lines += [f"err_rbm.error_of_mean={err_of_mean:.10e}",
                  f"err_rbm.mean_of_errors={res.expected_error:.10e}"]
        with open(out / "realization_errors.csv", "w") as fh:
            fh.write("realization,err_max\n")
            for k, e in enumerate(res.errors.max(axis=1)):
                fh.write(f"{k},{e!r}\n")
    with open(out / "variance.csv", "w") as fh:
        fh.write("t,variance\n")
        for t, v in zip(res.times, res.variance):
            fh.write(f"{float(t)!r},{float(v)!r}\n")
    mean_traj = Trajectory(grid, res.mean, np.arange(grid.zeta))
    write_probes_csv(mean_traj.probes(system, _probe_points(cfg, system, 0.5)), out / "probes_mean.csv")

    lines += summary_lines(dec, c_of_m(dec, system.h))
    lines += stability_lines(dec, system.E, grid.dt)
    lines += _bound_lines(system, dec, y0, f, grid, delta)
    _lines_to(out / "report.txt", lines)
    print("\n".join(lines))
    return EXIT_OK


def _bound_lines(system, dec, y0, f, grid, delta):
    from .fem import mass_eigen_bounds
    from .timestep import as_initial, as_load
    import scipy.sparse.linalg as spla
    lam, _ = mass_eigen_bounds(system)
    lu = spla.splu(system.E.tocsc())
    y = as_initial(system, y0)
    load = as_load(system, f)
    f_l1 = sum(np.linalg.norm(lu.solve(load(t))) for t in grid.times()[1:]) * grid.dt
    rep = bound_trajectory(lam_min_E=lam, norm_Einv_R=inv_mass_stiffness_norm(system.E, system.R),
                           norm_Einv_y0=float(np.linalg.norm(lu.solve(y))), norm_Einv_f_L1=f_l1,
                           var=variance(dec), delta=delta, T=grid.T, h=system.h,
                           c_m=c_of_m(dec, system.h))
    return rep.as_lines()


def cmd_sweep(cfg, out: Path) -> int:
    try:
        N_list = [int(s) for s in cfg["N_list"].split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"N_list must be comma-separated integers, got {cfg['N_list']!r}") from None
    eps = cfg["epsilon"] if cfg["epsilon"] is not None else 1e-4
    sc = SweepConfig(N_list=N_list, epsilon=eps, realizations=cfg["realizations"], seed=cfg["seed"],
                     preset=cfg["decomposition"], T=cfg["T"], L=cfg["L"], dt_target=cfg["dt_target"],
                     jobs=cfg["jobs"], metric=cfg["metric"])
    write_resolved(cfg, out, {"epsilon": eps})
    rows = run_convergence_sweep(sc)
    write_sweep_csv(rows, out / "sweep.csv")
    lines = [f"row.{i}.dt={r.dt:.6e} horizon={r.horizon:.12g}" for i, r in enumerate(rows)]
    if len(rows) >= 3:
        fit = fit_observed_order([r.err_rbm for r in rows], [r.delta for r in rows])
        lines += [f"order={fit.slope:.6f}", f"order.points={fit.used}",
                  f"order.excluded_coarsest={fit.excluded_coarsest}"]
    lines.append(f"inversions={count_inversions([r.err_rbm for r in reversed(sorted(rows, key=lambda r: r.delta))])}")
    _lines_to(out / "summary.txt", lines)
    print((out / "sweep.csv").read_text() + "\n".join(lines))
    return EXIT_OK


def cmd_control(cfg, out: Path) -> int:
    system = _system(cfg)
    grid = TimeGrid(cfg["T"], cfg["zeta"])
    # the control problem starts from the constant ``initial`` (zero by default)
    problem = oc.ControlProblem.build(system, grid, lambda e, x, t=0.0: np.full_like(x, cfg["y_d"]),
                                      lambda e, x, t=0.0: np.full_like(x, cfg["initial"]))
    delta = cfg["delta"] if cfg["delta"] is not None else grid.dt
    write_resolved(cfg, out, {"delta": delta, "dt": grid.dt})
    det = oc.solve_deterministic(problem, cfg["tol"], cfg["max_iter"])
    oc.write_convergence_log(det, out / "control_log.csv")
    pts = _probe_points(cfg, system, 1.0)
    idx = np.arange(grid.zeta)
    write_probes_csv(Trajectory(grid, det.state, idx).probes(system, pts), out / "state_probes.csv")
    write_probes_csv(Trajectory(grid, det.control, idx).probes(system, pts), out / "control_probes.csv")
    lines = [f"deterministic.J={det.J:.10e}", f"deterministic.iterations={det.iterations}",
             f"deterministic.converged={det.converged}", f"deterministic.grad_norm={det.grad_norm:.3e}"]
    converged = det.converged
    if cfg["realizations"] > 0 and cfg["max_iter"] > 0:
        dec = _decomposition(cfg, system)
        lines += stability_lines(dec, system.E, grid.dt)
        ens = oc.solve_random(problem, dec, delta, cfg["tol"], cfg["max_iter"], cfg["realizations"],
                              cfg["seed"], cfg["jobs"])
        write_probes_csv(Trajectory(grid, ens.mean_state, idx).probes(system, pts), out / "state_probes_rbm.csv")
        write_probes_csv(Trajectory(grid, ens.mean_control, idx).probes(system, pts),
                         out / "control_probes_rbm.csv")
        with open(out / "realizations.csv", "w") as fh:
            fh.write("realization,iterations,J,converged\n")
            for k, it in enumerate(ens.iterates):
                fh.write(f"{k},{it.iterations},{it.J!r},{it.converged}\n")
        gap = oc.norm(problem, ens.mean_control - det.control)
        lines += [f"rbm.realizations={ens.realizations}", f"rbm.all_converged={ens.all_converged}",
                  f"rbm.control_gap={gap:.6e}",
                  f"rbm.control_gap_relative={gap / max(oc.norm(problem, det.control), 1e-300):.6e}"]
        if not all(np.isfinite(it.J) for it in ens.iterates):
            raise NumericalError("random control iterates are not finite")
        converged = converged and ens.all_converged
    lines.append(f"status={'converged' if converged else 'nonconverged'}")
    _lines_to(out / "report.txt", lines)
    print("\n".join(lines))
    return EXIT_OK if converged else EXIT_NONCONVERGED


# reference values and relative bands, applied only to runs at the reference settings
_TABLE_SETTINGS = {"N": "300", "zeta": "201", "T": "1.0", "L": "1.0", "graph": "paper"}
_REFERENCE = {
    ("err_full", None): (9.6152e-3, 0.9, 1.1),
    ("err_rbm.error_of_mean", "paper_overlap_3"): (9.3951e-3, 0.5, 2.0),
    ("err_rbm.error_of_mean", "paper_nonoverlap_3"): (1.2896e-2, 0.5, 2.0),
}
ORDER_BAND = (0.1, 0.3)


def _read_resolved(folder: Path) -> dict:
    path = folder / "config.resolved.txt"
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _band(key: str, cfg: dict):
    """``(lo, hi)`` acceptance band for ``key`` in a run with settings ``cfg``."""
    if key == "order":
        return ORDER_BAND
    if any(cfg.get(k) != v for k, v in _TABLE_SETTINGS.items()):
        return None
    ref = _REFERENCE.get((key, None)) or _REFERENCE.get((key, cfg.get("decomposition")))
    if ref is None:
        return None
    value, lo, hi = ref
    return value * lo, value * hi


def cmd_report(cfg, out: Path) -> int:
    """Collect ``key=value`` lines from the run directories below ``out``."""
    if not out.exists():
        raise ConfigError(f"{out} does not exist")
    lines = []
    for path in sorted(out.rglob("report.txt")) + sorted(out.rglob("summary.txt")):
        run_cfg = _read_resolved(path.parent)
        for line in path.read_text().splitlines():
            key, _, value = line.partition("=")
            value = value.split("#")[0].strip()
            band = _band(key, run_cfg)
            tag = ""
            if band is not None:
                try:
                    tag = " PASS" if band[0] <= float(value) <= band[1] else " FAIL"
                except ValueError:
                    pass
            if key in ("err_full", "order") or key.startswith(("err_rbm", "status", "note")):
                lines.append(f"{path.parent.name}.{key}={value}{tag}")
    print("\n".join(lines) if lines else "no reports found")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "rbm": cmd_rbm, "sweep": cmd_sweep, "control": cmd_control,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphrbm", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--preset", choices=sorted(PRESET_SETTINGS))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = parse_config_text(args.config.read_text()) if args.config else {}
        extra = parse_config_text("\n".join(args.set))
        file_values.update(extra)
        cfg = resolve(args.command, args.preset, file_values,
                      {"seed": args.seed, "jobs": args.jobs,
                       "out": str(args.out) if args.out else None})
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, GraphError, PlanError, DecompositionError, AssemblyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
