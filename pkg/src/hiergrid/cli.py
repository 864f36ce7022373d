"""Command-line entry point.

Subcommands write their artifacts into ``--out`` (created if missing); every
file is written to a temporary name and renamed into place.  Exit codes: 0 on
success, 1 on a domain error (structured JSON message on stderr), 2 on a
usage error.

Option values resolve as: command-line flag, then the ``--config`` JSON file
(keys are the long option names with dashes replaced by underscores), then the
built-in default.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

log = logging.getLogger("hiergrid")


class ArtifactError(RuntimeError):
    pass


class UsageError(Exception):
    pass


DEFAULTS: dict[str, dict[str, Any]] = {
    "eig": {"flex": 0.0},
    "tlopt": {"flex": 0.10, "kmax": 20, "rho": 0.0, "objective": "max-min-damping", "workers": 1},
    "feeder": {"step": 0.05, "duration": 10.0, "gain": None, "random": None, "seed": 0},
    "building": {"target": None, "duration": 30.0, "latency": 0.0, "no_battery": False},
    "simulate": {"horizon": None, "no_support": False, "window": 2.0},
    "cosim": {"horizon": 120.0, "cycle": 60.0, "threshold": 0.05, "ramp": 30.0, "flex": 0.10, "kmax": 5,
              "load_ramp": None},
}


# ---- output helpers --------------------------------------------------------

def write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def dump_json(obj: Any, schema: str | None = None) -> str:
    if schema is not None:
        obj = {"schema": f"hiergrid-{schema}/1", **obj}
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _finite(obj):
    """Replace non-finite floats by None so JSON stays strict."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


# ---- loaders ---------------------------------------------------------------

def _bundled(ref: str) -> bool:
    """A reference names bundled data when no such file exists and the stem is a bundled name."""
    p = Path(ref)
    return not p.exists() and p.parent == Path(".") and (Path(__file__).parent / "data" / f"{p.stem}.json").exists()


def _case(ref: str):
    from .netcase import builtin_case, load_case

    return builtin_case(Path(ref).stem) if _bundled(ref) else load_case(ref)


def _feeder(ref: str | None):
    from .dlctrl import builtin_feeder, load_feeder

    if ref is None:
        return builtin_feeder()
    return builtin_feeder(Path(ref).stem) if _bundled(ref) else load_feeder(ref)


def _fleet(ref: str | None):
    from .blsched import builtin_fleet, load_fleet

    if ref is None:
        return builtin_fleet()
    return builtin_fleet(Path(ref).stem) if _bundled(ref) else load_fleet(ref)


def _attach(items: list[str] | None, loader) -> dict[int, Any]:
    out = {}
    for it in items or []:
        bus, sep, ref = it.partition("=")
        if not sep or not bus.strip().isdigit():
            raise UsageError(f"expected BUS=FILE, got {it!r}")
        out[int(bus)] = loader(ref or None)
    return out


# ---- subcommands -------------------------------------------------------------

def cmd_validate(a, out: Path) -> dict[str, Any]:
    case = _case(a.case)
    summary = {"name": case.name, "buses": case.n_bus, "branches": len(case.branches), "generators": case.n_gen,
               "loads": len(case.loads), "base_mva": case.base_mva}
    print(dump_json(summary), end="")
    return summary


def cmd_eig(a, out: Path) -> dict[str, Any]:
    from .acpf import solve_powerflow
    from .smallsignal import modal_analysis

    case = _case(a.case)
    if a.flex:
        case = case.with_load_flexibility(a.flex)
    modal = modal_analysis(case, solve_powerflow(case))
    write_atomic(out / "eig.csv", modal.to_csv())
    summary = {"xi_min": modal.xi_min, "n_modes": int(len(modal.lam)),
               "n_oscillatory": int(modal.oscillatory_mask.sum())}
    write_atomic(out / "eig.json", dump_json(summary, "eig"))
    print(f"xi_min = {modal.xi_min:.6f}")
    return summary


def cmd_tlopt(a, out: Path) -> dict[str, Any]:
    from .acpf import solve_powerflow
    from .smallsignal import modal_analysis
    from .tlopt import SnlpConfig, snlp

    case = _case(a.case).with_load_flexibility(a.flex)
    res = snlp(case, SnlpConfig(k_max=a.kmax, rho=a.rho, objective=a.objective, workers=a.workers))
    write_atomic(out / "snlp.json", dump_json(_finite(res.to_dict()), "snlp"))
    write_atomic(out / "eig_before.csv", modal_analysis(case, solve_powerflow(case)).to_csv())
    write_atomic(out / "eig_after.csv", modal_analysis(case, res.V_hat).to_csv())
    print(f"xi_min {res.xi_min_before:.6f} -> {res.xi_min_after:.6f} in {len(res.iterates)} iterations")
    return {"xi_min_before": res.xi_min_before, "xi_min_after": res.xi_min_after}


def cmd_feeder(a, out: Path) -> dict[str, Any]:
    import warnings

    from .dlctrl import AssumptionViolated, DlCtrlConfig, random_feeder, run_tracking, solve_distflow

    if a.random is not None:
        feeder = random_feeder(np.random.default_rng(a.seed), a.random)
    else:
        feeder = _feeder(a.feeder)
    flow = solve_distflow(feeder, feeder.p_init, feeder.q_init)
    cfg = DlCtrlConfig(k_I=a.gain, p0_target=flow.P0 * (1 + a.step), q0_target=flow.Q0 * (1 + a.step))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AssumptionViolated)
        res = run_tracking(feeder, cfg, a.duration)
    write_atomic(out / "feeder.csv", res.to_csv())
    summary = {"feeder": feeder.name, "buildings": feeder.n_building, "p0_target": res.p0_target,
               "final_error": float(abs(res.P0[-1] - res.p0_target)), "max_violation": float(res.violation.max()),
               "guard_events": res.guard_events, "warnings": sorted({str(w.message) for w in caught})}
    write_atomic(out / "feeder.json", dump_json(summary, "feeder"))
    print(f"P0 {res.P0[0]:.6g} -> {res.P0[-1]:.6g} (target {res.p0_target:.6g})")
    return summary


def cmd_building(a, out: Path) -> dict[str, Any]:
    from .blsched import bl_control_loop

    fleet = _fleet(a.fleet)
    target = a.target if a.target is not None else fleet.baseline + 0.5 * (
        sum(d.rated for d in fleet.type1 if d.available) + sum(d.v_max for d in fleet.type2 if d.available))
    tr = bl_control_loop(fleet, target, a.duration, milp_latency=a.latency, use_battery=not a.no_battery)
    write_atomic(out / "building.csv", tr.to_csv())
    summary = {"target": target, "steady_error": tr.steady_error(), "shortfalls": len(tr.shortfalls),
               "schedules": len(tr.schedules)}
    write_atomic(out / "building.json", dump_json(summary, "building"))
    print(f"steady-state error {summary['steady_error']:.3g} kW")
    return summary


def cmd_simulate(a, out: Path) -> dict[str, Any]:
    from .dynsim import PoorFit, fit_ringdown, frequency_event, load_scenario, ringdown_signal, run_scenario

    scn = load_scenario(a.scenario)
    if a.horizon is not None:
        scn.horizon = a.horizon
    case = scn.load_case(Path(a.scenario).parent)
    summary: dict[str, Any] = {"scenario": scn.to_dict()}
    if scn.kind == "generation-loss" and scn.agc is not None:
        r = frequency_event(case, scn, demand_support=not a.no_support)
        traj = r.trajectory
        summary.update(nadir_hz=r.nadir, t_nadir=r.t_nadir, rocof_hz_s=r.rocof)
    else:
        traj = run_scenario(scn, case)
    if scn.kind == "three-phase-fault":
        t, y, k = ringdown_signal(traj, scn.t_on + scn.clearing + a.window)
        try:
            fit = fit_ringdown(t, y)
            summary["ringdown"] = {"gen": k, "sigma": fit.sigma, "beta": fit.beta, "xi": fit.xi, "r2": fit.r2}
        except PoorFit as exc:
            summary["ringdown"] = {"gen": k, "error": str(exc)}
    write_atomic(out / "trajectory.csv", traj.to_csv())
    write_atomic(out / "simulate.json", dump_json(_finite(summary), "simulate"))
    return summary


def cmd_cosim(a, out: Path) -> dict[str, Any]:
    from .dynsim import CosimConfig, cosim_run

    case = _case(a.case)
    feeders = _attach(a.feeder, _feeder)
    fleets = _attach(a.fleet, _fleet)
    lr = tuple(a.load_ramp) if a.load_ramp else None
    cfg = CosimConfig(horizon=a.horizon, cycle=a.cycle, threshold=a.threshold, ramp=a.ramp, flexibility=a.flex,
                      k_max=a.kmax, load_ramp=lr)
    r = cosim_run(case, feeders, fleets, cfg)
    write_atomic(out / "episode.jsonl", r.to_jsonl())
    write_atomic(out / "episode.csv", r.to_csv())
    summary = {"fired": r.fired(), "xi_min": r.xi_min, "target_change": {str(k): v for k, v in
                                                                       sorted(r.target_change.items())}}
    write_atomic(out / "cosim.json", dump_json(_finite(summary), "cosim"))
    print(f"optimizer fired at {r.fired()}")
    return summary


def cmd_plot(a, out: Path) -> dict[str, Any]:
    written = emit_plots(Path(a.artifacts), out)
    for p in written:
        print(p)
    return {"written": [str(p) for p in written]}


# ---- plots -----------------------------------------------------------------

def _read_csv(path: Path) -> dict[str, np.ndarray]:
    text = path.read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2:
        raise ArtifactError(f"{path.name}: no data rows")
    head, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(head):
        try:
            cols[name] = np.array([float(r[j]) for r in body])
        except ValueError:
            continue
    return cols


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hiergrid"
    plt.rcParams["svg.fonttype"] = "path"
    fig, ax = plt.subplots(figsize=(6, 4))
    return plt, fig, ax


def _save(plt, fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    write_atomic(path, buf.getvalue())
    return path


def _plot_eig(frames: dict[str, dict[str, np.ndarray]], path: Path) -> Path:
    plt, fig, ax = _figure()
    for label, d in frames.items():
        osc = d["oscillatory"] > 0
        ax.plot(d["re"][osc], d["im"][osc], "o" if label != "after" else "x", ms=4, label=label)
    lim = max(float(np.max(np.abs(d["im"][d["oscillatory"] > 0]), initial=1.0)) for d in frames.values())
    xi = 0.03
    slope = np.sqrt(1 - xi ** 2) / xi
    r = lim / slope
    ax.plot([0, -r], [0, lim], "b-.", lw=1)
    ax.plot([0, -r], [0, -lim], "b-.", lw=1, label="3% damping")
    ax.set_xlabel("Re(lambda) [1/s]")
    ax.set_ylabel("Im(lambda) [rad/s]")
    ax.legend(loc="best")
    return _save(plt, fig, path)


def _plot_series(t, series: dict[str, np.ndarray], ylabel: str, path: Path, annotate_min: str | None = None) -> Path:
    plt, fig, ax = _figure()
    for label, y in series.items():
        ax.plot(t, y, lw=1, label=label)
    if annotate_min:
        y = series[annotate_min]
        k = int(np.nanargmin(y))
        ax.annotate(f"nadir {y[k]:.4f}", (t[k], y[k]), xytext=(10, -15), textcoords="offset points")
        ax.plot([t[k]], [y[k]], "kv")
    ax.set_xlabel("t [s]")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(loc="best")
    return _save(plt, fig, path)


def emit_plots(src: Path, dst: Path | None = None) -> list[Path]:
    """Render SVG panels for every known artifact CSV found in ``src``."""
    dst = dst or src
    if not src.is_dir():
        raise ArtifactError(f"artifact directory {src} not found")
    written: list[Path] = []
    eig = {n: src / f"{f}.csv" for n, f in (("before", "eig_before"), ("after", "eig_after"), ("case", "eig"))}
    present = {n: p for n, p in eig.items() if p.exists()}
    if present:
        written.append(_plot_eig({n: _read_csv(p) for n, p in present.items()}, dst / "eig.svg"))
    p = src / "trajectory.csv"
    if p.exists():
        d = _read_csv(p)
        written.append(_plot_series(d["t"], {"f_coi": d["f_coi_hz"]}, "frequency deviation [Hz]",
                                    dst / "frequency.svg", annotate_min="f_coi"))
        deltas = [k for k in d if k.startswith("delta")]
        rel = np.array([d[k] for k in deltas])
        rel = rel - rel.mean(axis=0)
        written.append(_plot_series(d["t"], {k: r for k, r in zip(deltas, rel)}, "relative rotor angle [rad]",
                                    dst / "ringdown.svg"))
    p = src / "episode.csv"
    if p.exists():
        d = _read_csv(p)
        errs = {k[4:]: v for k, v in d.items() if k.startswith("err_")}
        written.append(_plot_series(d["t"], errs, "normalized control error", dst / "control_error.svg"))
    p = src / "feeder.csv"
    if p.exists():
        d = _read_csv(p)
        written.append(_plot_series(d["t"], {"P0": d["P0"]}, "PCC active power [p.u.]", dst / "feeder.svg"))
    p = src / "building.csv"
    if p.exists():
        d = _read_csv(p)
        written.append(_plot_series(d["t"], {"target": d["target"], "power": d["power"]}, "building power [kW]",
                                    dst / "building.svg"))
    if not written:
        raise ArtifactError(f"no plottable artifacts in {src}")
    return written


# ---- argument parsing --------------------------------------------------------

COMMANDS: dict[str, Callable] = {
    "validate": cmd_validate, "eig": cmd_eig, "tlopt": cmd_tlopt, "feeder": cmd_feeder, "building": cmd_building,
    "simulate": cmd_simulate, "cosim": cmd_cosim, "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiergrid", description="Hierarchical grid control toolkit.")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="parse and validate a case")
    s.add_argument("case", help="case file (.json or MATPOWER .m) or bundled case name")

    s = sub.add_parser("eig", help="small-signal eigenvalues and damping ratios")
    s.add_argument("case")
    s.add_argument("--flex", type=float)

    s = sub.add_parser("tlopt", help="damping-maximizing setpoints (SNLP)")
    s.add_argument("case")
    s.add_argument("--flex", type=float, help="load flexibility fraction (0.10 = +/-10%%)")
    s.add_argument("--kmax", type=int)
    s.add_argument("--rho", type=float)
    s.add_argument("--objective", choices=["max-min-damping", "cost-tradeoff"])
    s.add_argument("--workers", type=int)

    s = sub.add_parser("feeder", help="PCC tracking run on a distribution feeder")
    s.add_argument("feeder", nargs="?", help="feeder JSON or bundled name (default feeder10)")
    s.add_argument("--random", type=int, metavar="N", help="use a random feeder with N buildings")
    s.add_argument("--seed", type=int)
    s.add_argument("--step", type=float, help="relative PCC target step")
    s.add_argument("--duration", type=float)
    s.add_argument("--gain", type=float, help="integral gain k_I")

    s = sub.add_parser("building", help="building MILP/PI loop")
    s.add_argument("fleet", nargs="?", help="fleet JSON or bundled name (default fleet)")
    s.add_argument("--target", type=float, help="building power target, kW")
    s.add_argument("--duration", type=float)
    s.add_argument("--latency", type=float, help="MILP result latency, s")
    s.add_argument("--no-battery", action="store_true", default=None)

    s = sub.add_parser("simulate", help="run a fault / generation-loss / setpoint-ramp scenario")
    s.add_argument("scenario")
    s.add_argument("--horizon", type=float)
    s.add_argument("--no-support", action="store_true", default=None, help="disable demand-side support")
    s.add_argument("--window", type=float, help="ringdown fit starts this long after clearing, s")

    s = sub.add_parser("cosim", help="hierarchical co-simulation episode")
    s.add_argument("case")
    s.add_argument("--feeder", action="append", metavar="BUS=FILE", help="detailed feeder at a load bus")
    s.add_argument("--fleet", action="append", metavar="BUS=FILE", help="building fleet at a load bus")
    s.add_argument("--horizon", type=float)
    s.add_argument("--cycle", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--ramp", type=float)
    s.add_argument("--flex", type=float)
    s.add_argument("--kmax", type=int)
    s.add_argument("--load-ramp", type=float, nargs=3, metavar=("FACTOR", "START", "DURATION"))

    s = sub.add_parser("plot", help="render SVG plots from run artifacts")
    s.add_argument("artifacts", help="directory holding run artifacts")
    return p


def _resolve(a: argparse.Namespace) -> None:
    conf: dict[str, Any] = {}
    if a.config:
        try:
            conf = json.loads(Path(a.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {a.config}: {exc}") from None
        if not isinstance(conf, dict):
            raise UsageError("config file must hold a JSON object")
        conf = conf.get(a.command, conf)
    for key, default in DEFAULTS.get(a.command, {}).items():
        if getattr(a, key, None) is None:
            setattr(a, key, conf.get(key, default))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .blsched import MilpInfeasible, NodeLimit
    from .dlctrl import NonConvergence
    from .dynsim import PoorFit, SimulationError
    from .netcase import CaseError

    try:
        _resolve(a)
        COMMANDS[a.command](a, Path(a.out))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hiergrid: error: {exc}", file=sys.stderr)
        return 2
    except (CaseError, NonConvergence, SimulationError, PoorFit, ArtifactError, MilpInfeasible, NodeLimit,
            FileNotFoundError, ValueError) as exc:
        msg = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("line", "column"):
            if hasattr(exc, attr):
                msg[attr] = getattr(exc, attr)
        print(json.dumps(msg, sort_keys=True), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
