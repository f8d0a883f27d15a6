"""Command-line entry point: ``cctmpc <subcommand> --spec problem.json ...``.

Exit codes: 0 success, 1 failed verification checks or other errors,
2 infeasible synthesis, 3 infeasibility at run time, 4 malformed input,
64 usage errors.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config
from .config import SchemaError
from .controller import InfeasibleState, InterpolationInfeasible, TubeMPC
from .geometry import GeometryError, NotEntirelySimple
from .simulate import (DISTURBANCE_MODES, MODEL_MODES, RecursiveFeasibilityViolation,
                       polyline_rows, run_closed_loop, tube_dump, write_csv)
from .solver import SolverError
from .synthesis import (SynthesisData, SynthesisError, SynthesisInfeasible, TubeModel,
                        synthesize)
from .verify import (closed_loop_check, controller_factory, descent_check, hull_equality_check,
                     sample_cone_parameters, seed_simplicity_check, sequence_check)

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_INFEASIBLE_SYNTHESIS = 2
EXIT_RUNTIME_INFEASIBLE = 3
EXIT_SCHEMA = 4
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_text(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# Pipeline pieces shared by the subcommands


class _Pipeline:
    def __init__(self, args):
        self.args = args
        self.spec = config.load_problem(args.spec)
        self._template = None
        self._model = None
        self._cost = None
        self._synth = None

    @property
    def settings(self):
        return self.spec.settings

    @property
    def horizon(self) -> int:
        return self.args.horizon if getattr(self.args, "horizon", None) else self.spec.horizon

    @property
    def beta(self) -> float:
        return self.args.beta if getattr(self.args, "beta", None) else self.spec.beta

    def template(self):
        if self._template is None:
            path = getattr(self.args, "template", None)
            self._template = config.load_template(path) if path else config.build_template(self.spec)
            if self._template[0].n != self.spec.state_dim:
                raise SchemaError("template dimension does not match the problem")
        return self._template

    def model(self) -> TubeModel:
        if self._model is None:
            t, vc = self.template()
            self._model = TubeModel.build(t, vc, self.spec.require_system(), self.settings)
        return self._model

    def cost(self):
        if self._cost is None:
            _, vc = self.template()
            self._cost = config.build_cost(self.spec, vc, self.spec.require_system().nu)
        return self._cost

    def synth(self) -> SynthesisData:
        if self._synth is None:
            path = getattr(self.args, "synth", None)
            if path:
                sd = config.load_synth(path)
                model = self.model()
                if sd.sigma.size != model.m or sd.u_s.shape != (model.mbar, model.nu):
                    raise SchemaError("synthesis data does not match the template")
            else:
                sd = synthesize(self.model(), self.cost(), self.beta, self.settings,
                                steady_fallback=self.spec.steady_fallback)
            self._synth = sd
        return self._synth

    def controller(self) -> TubeMPC:
        return TubeMPC(self.model(), self.cost(), self.synth(), self.horizon, self.settings)

    def scenario(self):
        a = self.args
        return self.spec.scenario_config(seed=a.seed, steps=a.steps, x0=getattr(a, "state", None),
                                         disturbance=a.disturbance, model=a.model_mode)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_template(args) -> int:
    p = _Pipeline(args)
    t, vc = p.template()
    _write_text(config.dumps(config.template_to_json(t, vc)), args.out)
    print(f"template: m={t.m} n={t.n} vertices={vc.mbar} cone rows={vc.m_E}", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    p = _Pipeline(args)
    sd = p.synth()
    _write_text(config.dumps(sd.to_json()), args.out)
    print("y_s = " + np.array2string(sd.y_s, precision=10, max_line_width=10**6), file=sys.stderr)
    print(f"gamma = {sd.gamma:.10g}  rho = {sd.rho:.10g}  V_s = {sd.V_s:.10g}"
          f"{'  (sigma anchored at y_s)' if sd.anchored else ''}"
          f"{'  (terminal set {y_s})' if sd.steady_terminal else ''}", file=sys.stderr)
    return EXIT_OK


def cmd_mpc_step(args) -> int:
    p = _Pipeline(args)
    x = args.state if args.state is not None else (p.spec.scenario or {}).get("x0")
    if x is None:
        raise SchemaError("no state given (use --state or a scenario x0)")
    if len(x) != p.spec.state_dim:
        raise SchemaError(f"state has {len(x)} entries, expected {p.spec.state_dim}")
    ctrl = p.controller()
    sol = ctrl.step(x)
    fb = ctrl.feedback(x, sol)
    out = {
        "state": list(map(float, x)),
        "y": sol.y,
        "u": sol.u,
        "alpha": sol.alpha,
        "u_terminal": sol.u_term,
        "objective": sol.objective,
        "lyapunov": sol.lyapunov,
        "theta": fb.theta,
        "applied_u": fb.u,
    }
    _write_text(config.dumps(out), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    p = _Pipeline(args)
    ctrl = p.controller()
    logs = run_closed_loop(ctrl, p.spec.require_system(), p.scenario())
    write_csv(logs, sys.stdout if args.out in (None, "-") else args.out)
    if args.tube:
        config.dump({"steps": tube_dump(logs, ctrl)}, args.tube)
    L = logs[-1].lyapunov
    print(f"{len(logs)} steps, final Lyapunov value {L:.3e}", file=sys.stderr)
    return EXIT_OK


def cmd_export_plot(args) -> int:
    p = _Pipeline(args)
    ctrl = p.controller()
    model = p.model()
    cfg = p.scenario()
    sol = ctrl.step(np.asarray(cfg.x0))
    logs = run_closed_loop(ctrl, p.spec.require_system(), cfg)
    n = model.Y.shape[1]
    rows = [["series", "step", "vertex"] + [f"x{i}" for i in range(n)]]
    for i, y in enumerate(sol.y):
        rows += polyline_rows("predicted", i, model.vertices(y))
    for log in logs:
        rows += polyline_rows("closed_loop", log.k, model.vertices(log.y0))
    rows += polyline_rows("steady", 0, model.vertices(p.synth().y_s))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _write_text(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    p = _Pipeline(args)
    results = []
    results.append(seed_simplicity_check(config.seed_template(p.spec)))
    if not results[-1].passed and not p.spec.perturb and not args.template:
        return _report(results)
    t, vc = p.template()
    ys = sample_cone_parameters(t.Y, vc, args.samples, seed=args.seed or 0)
    results.append(hull_equality_check(t.Y, vc, ys, settings=p.settings))
    if p.spec.system is None or p.spec.cost is None:
        return _report(results)
    model, cost, sd = p.model(), p.cost(), p.synth()
    results.append(sequence_check(model, sd, settings=p.settings))
    results.append(descent_check(model, cost, sd, count=args.samples, seed=args.seed or 0,
                                 settings=p.settings))
    if p.spec.scenario is not None:
        base = p.scenario()
        factory = controller_factory(model, cost, sd, p.horizon, p.settings)
        modes = (args.disturbance,) if args.disturbance else DISTURBANCE_MODES
        for k in range(args.seeds):
            for mode in modes:
                cfg = config.ScenarioConfig(base.seed + k, base.steps, base.x0, mode, base.model)
                results.append(closed_loop_check(factory, p.spec.system, cfg))
    return _report(results)


def _report(results) -> int:
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECKS_FAILED


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cctmpc", description="Configuration-constrained tube MPC toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, template=True, synth=True):
        sp.add_argument("--spec", required=True, help="problem JSON file")
        sp.add_argument("--out", help="output file (default: stdout)")
        if template:
            sp.add_argument("--template", help="template JSON from the template subcommand")
        if synth:
            sp.add_argument("--synth", help="synthesis JSON from the synth subcommand")
            sp.add_argument("--beta", type=float, help="contraction factor override")

    def scenario(sp):
        sp.add_argument("--seed", type=int, help="scenario seed override")
        sp.add_argument("--steps", type=int, help="number of closed-loop steps")
        sp.add_argument("--horizon", type=int, help="prediction horizon override")
        sp.add_argument("--disturbance", choices=DISTURBANCE_MODES, help="disturbance sampling")
        sp.add_argument("--model", dest="model_mode", choices=MODEL_MODES, help="model sampling")

    sp = sub.add_parser("template", help="build the template and vertex configuration")
    common(sp, template=False, synth=False)
    sp.set_defaults(func=cmd_template)

    sp = sub.add_parser("synth", help="offline synthesis of the terminal ingredients")
    common(sp, synth=False)
    sp.add_argument("--beta", type=float, help="contraction factor override")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("mpc-step", help="solve one MPC problem at a state")
    common(sp)
    sp.add_argument("--state", type=float, nargs="+", help="measured state")
    sp.add_argument("--horizon", type=int, help="prediction horizon override")
    sp.set_defaults(func=cmd_mpc_step)

    sp = sub.add_parser("simulate", help="seeded closed-loop simulation, CSV log")
    common(sp)
    scenario(sp)
    sp.add_argument("--state", type=float, nargs="+", help="initial state override")
    sp.add_argument("--tube", help="also write the per-step tube vertices as JSON")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("verify", help="run the numerical property checks")
    common(sp)
    scenario(sp)
    sp.add_argument("--samples", type=int, default=100, help="random parameters per check")
    sp.add_argument("--seeds", type=int, default=3, help="closed-loop seeds")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("export-plot", help="tube cross-section polylines as CSV")
    common(sp)
    scenario(sp)
    sp.add_argument("--state", type=float, nargs="+", help="initial state override")
    sp.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SynthesisInfeasible, SynthesisError, NotEntirelySimple) as exc:
        print(f"synthesis infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE_SYNTHESIS
    except (InfeasibleState, InterpolationInfeasible, RecursiveFeasibilityViolation) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_INFEASIBLE
    except GeometryError as exc:
        print(f"geometry error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (SolverError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECKS_FAILED


if __name__ == "__main__":
    sys.exit(main())
