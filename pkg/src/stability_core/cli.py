"""Command-line surface: ``python src/main.py <command> [options]``.

Exit codes: 0 on success, 1 on usage errors (including invalid parameters),
2 on numerical failures, with the error name leading the stderr line.
"""
from typing import Any, Callable, Dict, Optional, Sequence
import argparse
import json
import logging
import math
import sys

import numpy as np

from .backstepping import (AUTO_FEEDBACK, FEEDBACK_LAWS, ClosedLoopConfig, ERROR_TARGET, OBSERVER_TARGET,
                           export_kernel_rows, run_closed_loop, run_target_system, solve_kernels)
from .core import SystemParams, eval_asymptotic, eval_char, eval_char_normalized
from .errors import InvalidParameters, error_status
from .heatmap import render_heatmap
from .marginal import (REFERENCE_TRIPLES, block_index, critical_length, curve_table, threshold_k)
from .run_history import RunHistory
from .settings_manager import SettingsManager
from .simulator import SimConfig, fit_decay_rate, run_simulation
from .spectral import (ContourSpec, count_unstable, k1_imaginary_roots, stability_verdict,
                       unstable_roots)
from .sweep import SweepSpec, run_sweep, write_rows

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
GLOBAL_FLAGS = (
    ("log_level", "logging", "level"),
    ("format", "output", "format"),
    ("jobs", "sweep", "jobs"),
    ("history", "output", "history_file"),
)


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _complex(text: str) -> complex:
    try:
        return complex(text.replace(" ", "").replace("i", "j"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a complex number: {text!r}")


def _method(text: str) -> str:
    return text.strip().capitalize()


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS, help="output format")
    common.add_argument("--output", default=argparse.SUPPRESS, help="write output to this file instead of stdout")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value configuration file")
    common.add_argument("--settings", default=argparse.SUPPRESS, help="JSON settings file")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel workers for sweeps")
    common.add_argument("--history", default=argparse.SUPPRESS, help="JSON file recording executed commands")
    return common


def _param_options(with_length: bool = True, with_gain: bool = True) -> argparse.ArgumentParser:
    params = argparse.ArgumentParser(add_help=False)
    params.add_argument("--preset", type=int, choices=range(len(REFERENCE_TRIPLES)), default=None,
                        help="reference triple: " + ", ".join(f"{i}={t}" for i, t in enumerate(REFERENCE_TRIPLES)))
    params.add_argument("--a", type=float, default=None, help="coupling a")
    params.add_argument("--b", type=float, default=None, help="coupling b")
    params.add_argument("--lambda", dest="lam", type=float, default=None, help="leftward speed lambda > 0")
    if with_length:
        params.add_argument("--L", type=float, default=None, help="interval length")
    if with_gain:
        params.add_argument("--k", type=float, default=0.0, help="boundary gain")
    return params


def _sim_options() -> argparse.ArgumentParser:
    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--n-cells", type=int, default=None, help="grid cells N")
    sim.add_argument("--dt", type=float, default=None, help="time step")
    sim.add_argument("--t-final", type=float, default=None, help="simulation horizon")
    sim.add_argument("--scheme", choices=("implicit", "characteristic"), default=None)
    return sim


def _sweep_options() -> argparse.ArgumentParser:
    sw = argparse.ArgumentParser(add_help=False)
    sw.add_argument("--k-range", type=float, nargs=3, metavar=("MIN", "MAX", "COUNT"),
                    default=[-0.95, 0.95, 21])
    sw.add_argument("--L-range", type=float, nargs=3, metavar=("MIN", "MAX", "COUNT"),
                    default=[0.1, 3.0, 21])
    sw.add_argument("--method", type=_method, choices=("Spectral", "Simulation", "Both"), default=None)
    sw.add_argument("--margin", type=float, default=None, help="exclusion margin around marginal curves")
    return sw


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = ArgumentParser(prog="stability", description="Stabilizability of 2x2 hyperbolic boundary-control systems",
                            parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=ArgumentParser)
    sub.required = True

    lc = sub.add_parser("lc", parents=[common, _param_options(False, False)], help="critical length L_c")
    lc.add_argument("--L", type=float, default=None, help="also report whether this length is stabilizable")

    ce = sub.add_parser("char-eval", parents=[common, _param_options()], help="evaluate F (or H, G)")
    ce.add_argument("--sigma", type=_complex, action="append", required=True, help="point, e.g. 1+2j")
    ce.add_argument("--normalized", action="store_true", help="evaluate H = 2 exp(-QL) F")
    ce.add_argument("--asymptotic", action="store_true", help="evaluate the large-|sigma| model G")

    count = sub.add_parser("count", parents=[common, _param_options()], help="unstable eigenvalue count")
    count.add_argument("--radius", type=float, default=None, help="fixed contour radius")
    count.add_argument("--roots", type=int, nargs=2, metavar=("NMIN", "NMAX"), default=None,
                       help="list roots: refined seeds for |k|>1, closed form for k=1")

    marg = sub.add_parser("marginal", parents=[common, _param_options(False, False)], help="marginal curve table")
    marg.add_argument("--k-range", type=float, nargs=3, metavar=("MIN", "MAX", "COUNT"),
                      default=[-0.99, 0.99, 199])
    marg.add_argument("--n-max", type=int, default=None, help="highest branch index")
    marg.add_argument("--L-max", type=float, default=3.0)
    marg.add_argument("--threshold", type=float, default=None, metavar="L",
                      help="report the threshold gain at this length instead of the table")

    simulate = sub.add_parser("simulate", parents=[common, _param_options(), _sim_options()],
                              help="proportional-feedback simulation")
    simulate.add_argument("--snapshot-every", type=int, default=None, help="emit t,x,u,v rows every m steps")
    simulate.add_argument("--summary", action="store_true", help="emit the fitted rate instead of the trace")

    back = sub.add_parser("backstep", parents=[common, _param_options(with_gain=False), _sim_options()],
                          help="observer-based backstepping closed loop")
    back.add_argument("--target", choices=(ERROR_TARGET, OBSERVER_TARGET), default=None,
                      help="simulate a target cascade instead of the closed loop")
    back.add_argument("--kernels", action="store_true", help="export the kernel grid")
    back.add_argument("--feedback", choices=FEEDBACK_LAWS + (AUTO_FEEDBACK,), default=None,
                      help="closed-loop gains: deadbeat on the exact-shift grid, or sampled kernels")

    sweep = sub.add_parser("sweep", parents=[common, _param_options(False, False), _sim_options(),
                                             _sweep_options()], help="(k, L) stability sweep")
    sweep.add_argument("--svg", default=None, help="also render the sweep to this SVG file")

    heat = sub.add_parser("heatmap", parents=[common, _param_options(False, False), _sim_options(),
                                              _sweep_options()], help="render a sweep as SVG")
    heat.add_argument("--svg", required=True, help="SVG output path")
    heat.add_argument("--value", choices=("N", "rate"), default=None)
    return parser


class CommandDispatcher:
    """Runs parsed commands and turns every outcome into a status dictionary"""

    def __init__(self, settings: SettingsManager, history: Optional[RunHistory] = None):
        self.logger = logging.getLogger(__name__)
        self.settings = settings
        self.history = history or RunHistory(settings.get_setting("output", "history_file"))
        self.handlers: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
            "lc": self.cmd_lc,
            "char-eval": self.cmd_char_eval,
            "count": self.cmd_count,
            "marginal": self.cmd_marginal,
            "simulate": self.cmd_simulate,
            "backstep": self.cmd_backstep,
            "sweep": self.cmd_sweep,
            "heatmap": self.cmd_heatmap,
        }

    def execute_command(self, command: str, args: argparse.Namespace) -> Dict[str, Any]:
        """Execute one command"""
        handler = self.handlers.get(command)
        if handler is None:
            result = {"status": "error", "error": "UsageError", "message": f"Unknown command: {command}"}
            self.history.add_run(command, vars(args), "error", result["message"])
            return result
        try:
            result = handler(args)
            result.update({"status": "success", "command": command})
            self.history.add_run(command, vars(args), "success", f"{len(result['rows'])} row(s)")
        except Exception as e:
            result = error_status(e)
            self.logger.error(f"Error executing {command}: {result['error']}: {e}")
            self.history.add_run(command, vars(args), "error", f"{result['error']}: {e}")
        return result

    # helpers -----------------------------------------------------------------

    def _setting(self, args, attr: str, category: str, key: str):
        value = getattr(args, attr, None)
        return value if value is not None else self.settings.get_setting(category, key)

    def _triple(self, args):
        a, b, lam = (REFERENCE_TRIPLES[args.preset] if args.preset is not None else (None, None, None))
        a = args.a if args.a is not None else a
        b = args.b if args.b is not None else b
        lam = args.lam if args.lam is not None else lam
        for name, value in (("--a", a), ("--b", b), ("--lambda", lam)):
            if value is None:
                raise InvalidParameters(f"{name} is required (or use --preset)")
        return float(a), float(b), float(lam)

    def _params(self, args, k: Optional[float] = None) -> SystemParams:
        a, b, lam = self._triple(args)
        if getattr(args, "L", None) is None:
            raise InvalidParameters("--L is required")
        gain = k if k is not None else getattr(args, "k", 0.0)
        return SystemParams(a, b, lam, args.L, gain)

    def _numerics(self) -> Dict[str, Any]:
        numerics = self.settings.get_numerics_settings()
        return {
            "marginal_tol": float(numerics["marginal_tol"]),
            "max_doublings": int(numerics["max_doublings"]),
            "newton_max_iter": int(numerics["newton_max_iter"]),
            "char": {
                "series_threshold": float(numerics["series_threshold"]),
                "overflow_limit": float(numerics["overflow_limit"]),
            },
        }

    def _sweep_spec(self, args) -> SweepSpec:
        a, b, lam = self._triple(args)
        k_lo, k_hi, k_n = args.k_range
        L_lo, L_hi, L_n = args.L_range
        sweep = self.settings.get_sweep_settings()
        simulation = self.settings.get_simulation_settings()
        numerics = self._numerics()
        return SweepSpec(
            a=a, b=b, lam=lam,
            k_range=(k_lo, k_hi, int(k_n)),
            L_range=(L_lo, L_hi, int(L_n)),
            method=_method(str(args.method or sweep["method"])),
            exclusion_margin=float(args.margin if args.margin is not None else sweep["exclusion_margin"]),
            n_cells=int(args.n_cells if args.n_cells is not None else simulation["n_cells"]),
            t_final=float(args.t_final if args.t_final is not None else simulation["t_final"]),
            scheme=str(args.scheme or simulation["scheme"]),
            marginal_tol=numerics["marginal_tol"],
            max_doublings=numerics["max_doublings"],
            **numerics["char"],
        )

    # commands ------------------------------------------------------------------

    def cmd_lc(self, args) -> Dict[str, Any]:
        a, b, lam = self._triple(args)
        lc = critical_length(a, b, lam)
        row = {"a": a, "b": b, "lambda": lam, "L_c": str(lc) if lc.is_infinite else lc.value}
        fields = ["a", "b", "lambda", "L_c"]
        if args.L is not None:
            if args.L < 0:
                raise InvalidParameters(f"L must be nonnegative, got {args.L}")
            row["stabilizable"] = args.L < lc.value
            fields.append("stabilizable")
        return {"fields": fields, "rows": [row]}

    def cmd_char_eval(self, args) -> Dict[str, Any]:
        p = self._params(args)
        kwargs = self._numerics()["char"]
        rows = []
        for sigma in args.sigma:
            if args.normalized:
                value = eval_char_normalized(p, sigma)
            elif args.asymptotic:
                value = eval_asymptotic(p, sigma, overflow_limit=kwargs["overflow_limit"])
            else:
                value = eval_char(p, sigma, **kwargs)
            rows.append({"sigma_re": sigma.real, "sigma_im": sigma.imag,
                         "value_re": value.real, "value_im": value.imag, "abs": abs(value)})
        return {"fields": ["sigma_re", "sigma_im", "value_re", "value_im", "abs"], "rows": rows}

    def cmd_count(self, args) -> Dict[str, Any]:
        p = self._params(args)
        numerics = self._numerics()
        if args.roots is not None:
            n_min, n_max = args.roots
            if p.k == 1.0:
                pairs = list(zip(range(n_min, n_max + 1), k1_imaginary_roots(p, n_max, n_min=n_min)))
            else:
                pairs = unstable_roots(p, n_min, n_max, max_iter=numerics["newton_max_iter"])
            rows = [{"n": n, "re": r.real, "im": r.imag, "abs_F": abs(eval_char(p, r, **numerics["char"]))}
                    for n, r in pairs]
            return {"fields": ["n", "re", "im", "abs_F"], "rows": rows}

        counting = {key: numerics[key] for key in ("marginal_tol", "max_doublings")}
        counting.update(numerics["char"])
        if args.radius is not None:
            report = count_unstable(p, spec=ContourSpec(radius=args.radius),
                                    marginal_tol=numerics["marginal_tol"], **numerics["char"])
        elif abs(p.k) < 1.0:
            report = count_unstable(p, **counting)
        else:
            report = stability_verdict(p)
        row = report.to_dict()
        fields = ["a", "b", "lambda", "L", "k", "N", "verdict", "radius", "min_abs"]
        if abs(p.k) < 1.0:
            row["block"] = block_index(p, tol=numerics["marginal_tol"])
            fields.append("block")
        return {"fields": fields, "rows": [row]}

    def cmd_marginal(self, args) -> Dict[str, Any]:
        a, b, lam = self._triple(args)
        if args.threshold is not None:
            gain = threshold_k(a, b, lam, args.threshold)
            row = {"a": a, "b": b, "lambda": lam, "L": args.threshold,
                   "k_star": gain.k if gain else "none",
                   "slope": gain.slope if gain else "",
                   "stable_side": gain.stable_side if gain else ""}
            return {"fields": list(row), "rows": [row]}
        k_lo, k_hi, k_n = args.k_range
        if int(k_n) < 2 or not k_hi > k_lo:
            raise InvalidParameters("--k-range needs MIN < MAX and COUNT >= 2")
        rows = curve_table(a, b, lam, np.linspace(k_lo, k_hi, int(k_n)), n_max=args.n_max, L_max=args.L_max)
        rows = [r for r in rows if r["L"] <= args.L_max]
        return {"fields": ["branch", "k", "L"], "rows": rows}

    def cmd_simulate(self, args) -> Dict[str, Any]:
        p = self._params(args)
        cfg = SimConfig(
            params=p,
            n_cells=int(self._setting(args, "n_cells", "simulation", "n_cells")),
            dt=args.dt,
            t_final=float(self._setting(args, "t_final", "simulation", "t_final")),
            scheme=str(self._setting(args, "scheme", "simulation", "scheme")),
        )
        trace, state = run_simulation(cfg, snapshot_every=args.snapshot_every)
        if args.summary:
            row = dict(p.to_dict())
            row.update({"scheme": cfg.scheme, "E0": float(trace.energies[0]),
                        "E_final": float(trace.energies[-1]), "rate": fit_decay_rate(trace)})
            return {"fields": list(row), "rows": [row]}
        if args.snapshot_every:
            return {"fields": ["t", "x", "u", "v"], "rows": trace.snapshots}
        return {"fields": ["t", "energy"], "rows": trace.rows()}

    def cmd_backstep(self, args) -> Dict[str, Any]:
        p = self._params(args, k=0.0)
        backstepping = self.settings.get_backstepping_settings()
        n_cells = int(args.n_cells if args.n_cells is not None else backstepping["mesh_size"])
        kernels = solve_kernels(p, n_cells, tol=float(backstepping["kernel_tol"]),
                                max_iter=int(backstepping["kernel_max_iter"]))

        if args.kernels:
            return {"fields": ["kernel", "x", "xi", "value"], "rows": export_kernel_rows(kernels)}
        if args.target:
            trace = run_target_system(args.target, p, n_cells=n_cells, t_final=args.t_final,
                                      kernels=kernels)
            rows = [{"t": float(t), "energy": float(e), "first": float(f), "second": float(s)}
                    for t, e, f, s in zip(trace.times, trace.energies, trace.first, trace.second)]
            return {"fields": ["t", "energy", "first", "second"], "rows": rows}

        cfg = ClosedLoopConfig(
            params=p,
            n_cells=n_cells,
            t_final=args.t_final,
            dt=args.dt,
            scheme=str(args.scheme or backstepping["scheme"]),
            feedback=str(args.feedback or backstepping["feedback"]),
        )
        result = run_closed_loop(cfg, kernels=kernels)
        return {"fields": ["t", "E_plant", "E_error", "U"], "rows": result.rows(),
                "t_opt1": result.t_opt1, "t_opt": result.t_opt, "feedback": result.feedback}

    def cmd_sweep(self, args) -> Dict[str, Any]:
        spec = self._sweep_spec(args)
        result = run_sweep(spec, jobs=int(self._setting(args, "jobs", "sweep", "jobs")))
        if args.svg:
            render_heatmap(result, args.svg)
        return {"fields": ["k", "L", "N", "rate", "flag"], "rows": result.rows()}

    def cmd_heatmap(self, args) -> Dict[str, Any]:
        spec = self._sweep_spec(args)
        result = run_sweep(spec, jobs=int(self._setting(args, "jobs", "sweep", "jobs")))
        path = render_heatmap(result, args.svg, value=args.value)
        return {"fields": ["path", "cells"], "rows": [{"path": path, "cells": len(result.cells)}]}


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return str(value)


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def emit(result: Dict[str, Any], fmt: str, stream):
    fields, rows = result["fields"], result["rows"]
    if fmt == "json":
        cleaned = [{key: _json_safe(row.get(key)) for key in fields} for row in rows]
        json.dump(cleaned, stream, indent=2, default=_json_default)
        stream.write("\n")
    else:
        write_rows(stream, fields, rows)


def configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help exits 0, usage errors exit EXIT_USAGE
        return int(e.code or 0)

    try:
        settings = SettingsManager(settings_file=getattr(args, "settings", None),
                                   config_file=getattr(args, "config", None))
    except OSError as e:
        print(f"UsageError: cannot read configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    for attr, category, key in GLOBAL_FLAGS:
        if getattr(args, attr, None) is not None:
            settings.update_setting(category, key, getattr(args, attr))
    configure_logging(settings.get_setting("logging", "level"))

    dispatcher = CommandDispatcher(settings)
    result = dispatcher.execute_command(args.command, args)
    if result["status"] == "error":
        print(f"{result['error']}: {result['message']}", file=sys.stderr)
        return EXIT_USAGE if result["error"] in ("InvalidParameters", "UsageError") else EXIT_NUMERICAL

    fmt = settings.get_setting("output", "format")
    output = getattr(args, "output", None)
    if output:
        with open(output, "w", newline="") as f:
            emit(result, fmt, f)
    else:
        emit(result, fmt, sys.stdout)
    return EXIT_OK
