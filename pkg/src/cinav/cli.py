"""Command-line front end.

``cinav run`` executes one scenario and writes per-vehicle traces, a metrics
file and per-phase comparison tables. ``cinav montecarlo`` repeats it over
consecutive seeds and aggregates RMSE and NEES. ``cinav list`` shows the
packaged scenarios. A config argument of the form ``builtin:NAME`` loads a
packaged scenario instead of a file.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .metrics import aggregate_rmse, average_nees, format_tables, nees, run_metrics
from .sim.config import METHODS, builtin, builtin_doc, builtin_names, load_config
from .sim.runner import run_scenario

log = logging.getLogger("cinav")

BUILTIN_PREFIX = "builtin:"
TRACE_COLUMNS = ("t", "truth_n", "truth_e", "est_n", "est_e", "err_norm", "case_tag")


class InputError(Exception):
    """Bad command-line input that maps to exit code 2."""


def _setup_logging() -> None:
    name = os.environ.get("CIN_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _load(spec: str):
    if spec.startswith(BUILTIN_PREFIX):
        name = spec[len(BUILTIN_PREFIX):]
        try:
            builtin_doc(name)
        except KeyError as exc:
            raise InputError(exc.args[0]) from None
        return builtin(name)
    if not Path(spec).is_file():
        raise InputError(f"config file not found: {spec}")
    return load_config(spec)


def _methods(text: str | None) -> tuple[str, ...]:
    if text is None:
        return METHODS
    out = tuple(m.strip().lower() for m in text.split(",") if m.strip())
    bad = [m for m in out if m not in METHODS]
    if bad or not out:
        raise InputError(f"unknown method(s) {bad or text!r}; choose from {','.join(METHODS)}")
    return tuple(m for m in METHODS if m in out)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_trace_csv(path: Path, trace) -> None:
    err = trace.err_norm
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for i in range(len(trace.t)):
            w.writerow([f"{trace.t[i]:.2f}", _fmt(trace.truth[i, 0]), _fmt(trace.truth[i, 1]),
                        _fmt(trace.est[i, 0]), _fmt(trace.est[i, 1]), _fmt(err[i]), trace.case[i]])


def _names(config) -> dict[int, str]:
    return {v.id: v.name for v in config.vehicles}


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _diag_doc(result) -> list[dict]:
    return [{k: (round(v, 6) if isinstance(v, float) else v) for k, v in d.items()} for d in result.diagnostics]


def cmd_run(config_path: str, out_dir: str, seed: int | None = None, methods: str | None = None) -> int:
    """Run one scenario; write traces, metrics and diagnostics; print tables."""
    config = _load(config_path)
    result = run_scenario(config, _methods(methods), seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _names(result.config)
    for (vid, method), tr in sorted(result.traces.items()):
        write_trace_csv(out / f"{names.get(vid, f'V{vid}')}_{method}.csv", tr)
    metrics = run_metrics(result)
    (out / "metrics.json").write_text(metrics.to_json())
    _write_json(out / "diagnostics.json", _diag_doc(result))
    log.info("wrote %d traces and metrics to %s", len(result.traces), out)
    print(f"{result.config.name} (seed {result.seed})")
    print(format_tables(metrics.to_dict(), names), end="")
    return 0


def _one_run(args):
    config, methods, seed = args
    result = run_scenario(config, methods, seed=seed)
    q = {k: nees(tr.error, tr.cov) for k, tr in result.traces.items()}
    return run_metrics(result), result.epochs, q


def cmd_montecarlo(config_path: str, runs: int, out_dir: str, methods: str | None = None, jobs: int = 1) -> int:
    """Run ``runs`` instances with seeds ``seed + 0 .. runs - 1`` and aggregate."""
    if runs < 1:
        raise InputError("--runs must be >= 1")
    config = _load(config_path)
    meths = _methods(methods)
    tasks = [(config, meths, config.seed + i) for i in range(runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_one_run(t))
            log.info("run %d/%d (seed %d) done", len(results), runs, t[2])
    metrics = [r[0] for r in results]
    epochs = results[0][1]
    names = _names(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for a in aggregate_rmse(metrics):
        rows.append({"vehicle": a.vehicle, "method": a.method, "phase": a.phase, "label": a.label, "runs": a.runs,
                     "rmse_mean": round(a.rmse_mean, 6), "rmse_ci_low": round(a.rmse_ci_low, 6),
                     "rmse_ci_high": round(a.rmse_ci_high, 6)})
    consistency = []
    for key in sorted(results[0][2]):
        stack = np.vstack([r[2][key] for r in results])
        s = average_nees(stack)
        consistency.append({"vehicle": key[0], "method": key[1], "runs": runs, "low": round(s["low"], 6),
                            "high": round(s["high"], 6), "mean": round(float(s["average"].mean()), 6),
                            "fraction_inside": round(s["fraction_inside"], 6)})
        with open(out / f"nees_{names.get(key[0], f'V{key[0]}')}_{key[1]}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "avg_nees", "low", "high"))
            for t, v in zip(epochs, s["average"]):
                w.writerow((f"{t:.2f}", _fmt(v), _fmt(s["low"]), _fmt(s["high"])))
    _write_json(out / "montecarlo.json", {"name": config.name, "seed": config.seed, "runs": runs,
                                           "rmse": rows, "nees": consistency})

    # mean-RMSE tables share the single-run layout
    table_doc = {"rows": [{"vehicle": r["vehicle"], "method": r["method"], "phase": r["phase"], "label": r["label"],
                           "rmse": r["rmse_mean"], "start": _phase(metrics[0], r)[0], "end": _phase(metrics[0], r)[1]}
                          for r in rows]}
    print(f"{config.name}: {runs} runs from seed {config.seed}, mean RMSE")
    print(format_tables(table_doc, names), end="")
    print("Average NEES (2 dof)")
    for c in consistency:
        print(f"{names.get(c['vehicle'], c['vehicle']):>4s} {c['method'].upper():6s} mean {c['mean']:8.2f}  "
              f"bounds [{c['low']:.2f}, {c['high']:.2f}]  inside {100 * c['fraction_inside']:5.1f}%")
    return 0


def _phase(rm, row) -> tuple[float, float]:
    r = rm.get(row["vehicle"], row["method"], row["phase"])
    return round(r.start, 6), round(r.end, 6)


def cmd_list() -> int:
    for name in builtin_names():
        print(f"{BUILTIN_PREFIX}{name}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cinav", description="Stop-line aided cooperative INS simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True, help="scenario JSON file or builtin:NAME")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    r.add_argument("--methods", default=None, help="comma-separated subset of " + ",".join(METHODS))
    m = sub.add_parser("montecarlo", help="repeat a scenario over consecutive seeds")
    m.add_argument("--config", required=True, help="scenario JSON file or builtin:NAME")
    m.add_argument("--runs", type=int, required=True, help="number of runs, seeded seed+0 .. seed+runs-1")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--methods", default=None, help="comma-separated subset of " + ",".join(METHODS))
    m.add_argument("--jobs", type=int, default=1, help="worker processes")
    sub.add_parser("list", help="list packaged scenarios")
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.methods)
        if args.command == "montecarlo":
            return cmd_montecarlo(args.config, args.runs, args.out, args.methods, args.jobs)
        return cmd_list()
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
