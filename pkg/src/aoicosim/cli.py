"""Command-line front end.

    aoicosim run [--preset platoon | --config PATH] [--seed S] [--mode M] [--out DIR]
    aoicosim mc  [...] [--mc N]
    aoicosim verify-terminal [...]
    aoicosim oracle-bench [--seed S]

Without ``--mode``, ``run`` and ``mc`` execute both controller modes and
print the comparison. Trace columns, for plotting: AoI panel ``aoi_*`` and
``fc_*`` (forecast issued one step earlier) against ``k``; position panel
``x1_*`` and ``span``; input panel ``u*``.

Exit codes: 0 success, 1 usage, 2 config, 3 verification failure, 4 runtime.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_preset, parse_config
from .cosim import (ScenarioError, build_controllers, compute_metrics, run_monte_carlo,
                    run_scenario, verify_controllers)
from .dmpc.terminal import TerminalError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3, 4
REFERENCE_REDUCTION = 37.0  # percent, reference value for the two-mode comparison
MODES = ("forecast", "worstcase")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x) -> str:
    return "%.9g" % x


def trace_columns(cfg) -> list:
    n = len(cfg.subsystems)
    pairs = [(i, s.neighbor) for i, s in enumerate(cfg.subsystems) if s.neighbor is not None]
    cols = ["k"]
    cols += [f"aoi_{i + 1}{j + 1}" for i, j in pairs]
    cols += [f"fc_{i + 1}{j + 1}" for i, j in pairs]
    cols.append("sched")
    for i in range(1, n + 1):
        cols += [f"x1_{i}", f"v{i}", f"u{i}"]
    cols.append("span")
    cols += [f"qp{i + 1}" for i, _ in pairs]
    cols.append("event")
    return cols


def trace_rows(result) -> list:
    cfg = result.config
    pairs = [(i, s.neighbor) for i, s in enumerate(cfg.subsystems) if s.neighbor is not None]
    rows = []
    for r in result.trace:
        row = [str(r.k)]
        row += [str(int(r.aoi[p])) for p in pairs]
        row += [str(int(r.forecast[p])) for p in pairs]
        row.append(str(r.sched))
        for i in range(len(cfg.subsystems)):
            row += [_fmt(r.x[i][0]), _fmt(r.x[i][1]), _fmt(r.u[i])]
        row.append(_fmt(r.span))
        row += [r.status.get(i, "") for i, _ in pairs]
        row.append(r.event)
        rows.append(row)
    return rows


def write_csv(header, rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_trace_csv(result, path, cfg=None):
    """Header plus one row per step; ``result=None`` with ``cfg`` writes the header only."""
    cfg = result.config if result is not None else cfg
    write_csv(trace_columns(cfg), trace_rows(result) if result is not None else [], path)


def read_trace_csv(path):
    """(header, rows) with numeric fields parsed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for raw in reader:
            row = []
            for name, val in zip(header, raw):
                if name.startswith(("qp", "event")):
                    row.append(val)
                elif name in ("k", "sched") or name.startswith(("aoi_", "fc_")):
                    row.append(int(val))
                else:
                    row.append(float(val))
            rows.append(row)
    return header, rows


def format_rows(header, rows) -> list:
    """Inverse of :func:`read_trace_csv` parsing."""
    out = []
    for row in rows:
        out.append([v if isinstance(v, str) else (str(v) if isinstance(v, int) else _fmt(v))
                    for v in row])
    return out


def reduction(worst: float, fc: float) -> float:
    return 100.0 * (worst - fc) / worst if worst else 0.0


def emit_summary(metrics: dict, stream=None, mc: bool = False) -> str:
    """Table of per-mode metrics and, with both modes, the span reduction."""
    stream = sys.stdout if stream is None else stream
    buf = io.StringIO()

    def span(m):
        if mc:
            return f"{m['span_mean']:.3f} +- {m['span_std']:.3f}"
        return f"{m['span_mean']:.3f}"

    head = f"{'mode':<10} {'max span [m]':>18} {'max AoI':>8} {'infeas':>7} " \
           f"{'constr':>7} {'envel':>6} {'fcast':>6}"
    buf.write(head + "\n" + "-" * len(head) + "\n")
    for mode, m in metrics.items():
        buf.write(f"{mode:<10} {span(m):>18} {m['aoi_max']:>8g} {m['infeasible']:>7d} "
                  f"{m['constraint_violations']:>7d} {m['envelope_violations']:>6d} "
                  f"{m['forecast_violations']:>6d}\n")
    if all(mode in metrics for mode in MODES):
        red = reduction(metrics["worstcase"]["span_mean"], metrics["forecast"]["span_mean"])
        buf.write(f"span reduction forecast vs worst case: {red:.1f}% "
                  f"(reference {REFERENCE_REDUCTION:.0f}%)\n")
    text = buf.getvalue()
    stream.write(text)
    return text


def _load(args):
    if args.config and args.preset:
        raise UsageError("give either --config or --preset")
    if args.config:
        return parse_config(args.config)
    return load_preset(args.preset or "platoon")


def _modes(args):
    return [args.mode] if args.mode else list(MODES)


def cmd_run(args, cfg, out):
    metrics = {}
    for mode in _modes(args):
        c = replace(cfg, mode=mode)
        res = run_scenario(c, seed=args.seed)
        metrics[mode] = compute_metrics(res)
        if args.out:
            path = Path(args.out) / f"trace_{mode}_seed{res_seed(c, args)}.csv"
            emit_trace_csv(res, path)
            out.write(f"wrote {path}\n")
    emit_summary(metrics, out)
    return metrics


def res_seed(cfg, args):
    return cfg.seed if args.seed is None else args.seed


def cmd_mc(args, cfg, out):
    if args.mc < 1:
        raise UsageError("--mc must be at least 1")
    base = cfg.seed if args.seed is None else args.seed
    seeds = range(base, base + args.mc)
    metrics = {}
    for mode in _modes(args):
        summary = run_monte_carlo(replace(cfg, mode=mode), seeds)
        metrics[mode] = summary
        if args.out:
            path = Path(args.out) / f"mc_{mode}.csv"
            rows = [[str(s), _fmt(sp)] for s, sp in zip(summary["seeds"], summary["spans"])]
            write_csv(["seed", "span"], rows, path)
            out.write(f"wrote {path}\n")
    emit_summary(metrics, out, mc=True)
    return metrics


def cmd_verify(args, cfg, out):
    _, ctrls = build_controllers(cfg)
    status_all = verify_controllers(ctrls)
    failed = []
    for c in ctrls[1:]:
        checks = c.terminal.info["checks"]
        for name, (ok, val) in checks.items():
            out.write(f"S{c.index + 1} {name:<20} {'pass' if ok else 'FAIL'} {val:.3e}\n")
    for i, status in status_all.items():
        for name, (ok, keys) in status.items():
            if not ok:
                failed.append(f"S{i + 1}: {name} ({', '.join(keys)})")
    for msg in failed:
        out.write(f"violated: {msg}\n")
    return not failed


def cmd_oracle_bench(args, out):
    from . import oracles
    from .numkernel import Polytope, QpProblem, solve_discrete_lyapunov, solve_qp, \
        support_function
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    t0 = time.perf_counter()
    qp_err = 0.0
    for _ in range(50):
        n, m = 10, 5
        M = rng.standard_normal((n, n))
        H = M @ M.T + n * np.eye(n)
        g = rng.standard_normal(n)
        C = rng.standard_normal((m, n))
        b = rng.standard_normal(m) + 0.5
        sol = solve_qp(QpProblem(H, g, C, b))
        ref = oracles.qp_dual_fista(H, g, C, b)
        f = lambda x: 0.5 * x @ H @ x + g @ x
        qp_err = max(qp_err, abs(f(sol.x) - f(ref)) / (1 + abs(f(ref))))
    sup_err = 0.0
    for _ in range(50):
        C = rng.standard_normal((8, 3))
        C /= np.linalg.norm(C, axis=1, keepdims=True)
        C = np.vstack([C, np.eye(3), -np.eye(3)])
        b = rng.uniform(0.5, 2.0, C.shape[0])
        d = rng.standard_normal(3)
        sup_err = max(sup_err, abs(support_function(Polytope(C, b), d)
                                   - oracles.support_by_vertices(C, b, d)))
    lyap_err = 0.0
    for _ in range(20):
        A = rng.standard_normal((4, 4))
        A *= 0.9 / max(abs(np.linalg.eigvals(A)))
        Q = np.eye(4)
        lyap_err = max(lyap_err, np.abs(solve_discrete_lyapunov(A, Q)
                                        - oracles.lyapunov_fixed_point(A, Q)).max())
    ok = qp_err <= 1e-6 and sup_err <= 1e-9 and lyap_err <= 1e-8
    out.write(f"qp vs dual projected gradient   {qp_err:.2e}\n"
              f"support vs vertex enumeration   {sup_err:.2e}\n"
              f"lyapunov vs fixed point         {lyap_err:.2e}\n"
              f"{'pass' if ok else 'FAIL'} in {time.perf_counter() - t0:.1f} s\n")
    return ok


def build_parser():
    p = _Parser(prog="aoicosim", description="AoI-scheduled robust DMPC co-simulation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("run", "mc", "verify-terminal", "oracle-bench"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--preset", choices=["platoon"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=list(MODES))
        sp.add_argument("--mc", type=int, default=20)
        sp.add_argument("--out", metavar="DIR")
    return p


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be nonnegative")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
        if args.command == "oracle-bench":
            return EXIT_OK if cmd_oracle_bench(args, out) else EXIT_VERIFY
        cfg = _load(args)
        if args.command == "verify-terminal":
            return EXIT_OK if cmd_verify(args, cfg, out) else EXIT_VERIFY
        if args.command == "run":
            cmd_run(args, cfg, out)
        else:
            cmd_mc(args, cfg, out)
        return EXIT_OK
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except TerminalError as exc:
        sys.stderr.write(f"verification failed: {exc}\n")
        return EXIT_VERIFY
    except (ScenarioError, ArithmeticError, ValueError, OSError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return EXIT_RUNTIME


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
