"""Command-line entry point: ``fluctlab <command> [--config ...] [--seed ...] ...``.

Exit codes: 0 success, 1 experiment failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, harness, mdp
from .config import ConfigError, build_setup, load_config
from .harness import ExperimentError, RunManifest, emit_csv, emit_summary_json, emit_svg_plot
from .model import Control, l1l1_values, verify_hypothesis_bounds
from .rng import SEED_MASK
from .selftest import run_selftest
from .solvers import SolverError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

OUTPUTS = {
    "check-hyp": ["hypothesis.json"],
    "scaling": ["scaling.csv", "scaling.json", "scaling.svg"],
    "clt": ["clt.csv", "clt.json", "clt.svg"],
    "gaps": ["viscous_gap.csv", "viscous_gap_sup.csv", "h_gap.csv", "gaps.json", "h_gap.svg"],
    "skeleton": ["skeleton.csv", "skeleton_control.csv", "skeleton.json"],
    "rate": ["rate.json", "rate_control.csv"],
    "mdp": ["condition_a.csv", "condition_b.csv", "mdp_probability.csv", "mdp.json"],
    "selftest": ["selftest.csv", "selftest.json"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default", help='config JSON path or "default"')
    common.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--replicates", type=int, default=None)
    common.add_argument("--parallel", type=int, default=None, help="worker threads")
    p = _Parser(prog="fluctlab", description="Fluctuation and moderate-deviation experiments "
                "for stochastic scalar conservation laws.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "check-hyp": "check the noise growth and Lipschitz bounds",
        "scaling": "moment scaling in eps with a log-log slope fit",
        "clt": "coupled fluctuation vs linear-limit gap",
        "gaps": "viscous gaps and the L2 gap at fixed viscosity",
        "skeleton": "solve the skeleton equation for the configured control",
        "rate": "rate of the configured event and its minimizing control",
        "mdp": "conditions (a) and (b) and normalized event probabilities",
        "selftest": "fast invariant suite",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return p


def resolve_seed(flag, cfg) -> int:
    seed = cfg["experiment"]["seed"]
    env = os.environ.get("FLUCTLAB_SEED")
    if env is not None and env.strip():
        try:
            seed = int(env, 0)
        except ValueError as err:
            raise ConfigError(f"FLUCTLAB_SEED is not an integer: {env!r}") from err
    if flag is not None:
        seed = flag
    if not (0 <= seed <= SEED_MASK):
        raise ConfigError(f"seed {seed} is not an unsigned 64-bit integer")
    return seed


# ---------------------------------------------------------------------------
# commands; each writes its files into ``out`` and returns an exit code


def cmd_check_hyp(ctx):
    exp = ctx["cfg"]["experiment"]
    rep = verify_hypothesis_bounds(ctx["setup"].noise, ctx["setup"].flux,
                                   exp["hypothesis_samples"], seed=ctx["seed"] & 0xFFFFFFFF)
    emit_summary_json(ctx["out"] / "hypothesis.json", {**rep.as_dict(), "passed": rep.passed})
    return EXIT_OK if rep.passed else EXIT_FAIL


def _slope_series(label, rows, key, fit):
    s = {"x": [r["eps"] for r in rows], "y": [r[key] for r in rows]}
    if fit is not None:
        s["fit_ln"] = (fit.slope, fit.intercept)
    return {label: s}


def cmd_scaling(ctx):
    exp, out = ctx["cfg"]["experiment"], ctx["out"]
    rep = analysis.run_scaling_experiment(ctx["setup"], exp["q"], exp["eps_grid"],
                                          exp["scaling_eta"], ctx["replicates"], ctx["seed"],
                                          ctx["parallel"])
    emit_csv(out / "scaling.csv", rep.rows(), ["eps", "estimate", "stderr"])
    emit_summary_json(out / "scaling.json", rep)
    series = _slope_series(f"q={rep.q:g}", rep.rows(), "estimate", rep.fit)
    emit_svg_plot(out / "scaling.svg", series, "moment scaling")
    return EXIT_OK


def cmd_clt(ctx):
    exp, out = ctx["cfg"]["experiment"], ctx["out"]
    rep = analysis.run_clt_experiment(ctx["setup"], exp["eps_grid"], ctx["replicates"],
                                      ctx["seed"], ctx["parallel"], exp["clt_companion_etas"])
    rows = rep.rows()
    emit_csv(out / "clt.csv", rows, list(rows[0].keys()))
    emit_summary_json(out / "clt.json", rep)
    emit_svg_plot(out / "clt.svg", _slope_series("gap", rows, "estimate", None), "CLT gap")
    return EXIT_OK


def cmd_gaps(ctx):
    exp, out = ctx["cfg"]["experiment"], ctx["out"]
    vg = analysis.run_viscous_gap(ctx["setup"], exp["gap_eps_grid"], exp["gap_eta_grid"],
                                  ctx["replicates"], ctx["seed"], ctx["parallel"])
    hg = analysis.run_h_gap(ctx["setup"], exp["h_gap_eta"], exp["gap_eps_grid"],
                            ctx["replicates"], ctx["seed"], ctx["parallel"])
    emit_csv(out / "viscous_gap.csv", vg.rows, ["eta", "eps", "nonlinear_gap", "nonlinear_stderr",
                                                 "linear_gap", "linear_stderr"])
    emit_csv(out / "viscous_gap_sup.csv", vg.sup,
             ["eta", "sup_nonlinear_gap", "sup_nonlinear_stderr", "argmax_eps", "linear_gap",
              "linear_stderr"])
    emit_csv(out / "h_gap.csv", hg.rows, ["eps", "sup_gap", "stderr", "argmax_t"])
    emit_summary_json(out / "gaps.json", {"viscous": vg, "h_gap": hg})
    emit_svg_plot(out / "h_gap.svg", _slope_series(f"eta={hg.eta:g}", hg.rows, "sup_gap", hg.fit),
                  "L2 gap at fixed viscosity")
    return EXIT_OK


def _configured_control(setup, section, smap):
    M, K = smap.control_shape
    mode = section.get("mode", section.get("control_mode", 1))
    amp = section.get("amplitude", section.get("control_amplitude", 1.0))
    if not (1 <= mode <= K):
        raise ConfigError(f"control mode {mode} outside 1..{K}")
    return Control.from_functions(setup.cfg.t_end, M, K, {mode: lambda t: amp * np.ones_like(t)})


def cmd_skeleton(ctx):
    setup, out = ctx["setup"], ctx["out"]
    smap = mdp.skeleton_map(setup)
    h = _configured_control(setup, ctx["cfg"]["experiment"]["skeleton"], smap)
    traj = smap.forward(h.rates)
    rows, cols = harness.trajectory_table(h.times, traj)
    emit_csv(out / "skeleton.csv", rows, cols)
    _emit_control(out / "skeleton_control.csv", h.rates, smap.dt)
    norm = float(l1l1_values(traj, smap.dt, smap.grid.dx))
    emit_summary_json(out / "skeleton.json",
                      {"energy": h.energy, "n_steps": smap.n_steps, "l1l1_norm": norm})
    return EXIT_OK


def _emit_control(path, rates, dt):
    cols = ["t"] + [f"h_{k + 1}" for k in range(rates.shape[1])]
    rows = [dict(zip(cols, [j * dt] + [float(v) for v in r])) for j, r in enumerate(rates)]
    emit_csv(path, rows, cols)


def cmd_rate(ctx):
    setup, out = ctx["setup"], ctx["out"]
    ev = mdp.EventSpec(**ctx["cfg"]["experiment"]["event"])
    smap = mdp.skeleton_map(setup)
    er = mdp.rate_of_event(ev, smap)
    detail = {"I_F": er.value, "direction": er.direction, "functional": ev.functional,
              "threshold": ev.threshold}
    rates = er.rates if er.rates is not None else np.zeros(smap.control_shape)
    if er.target is not None:
        res = mdp.rate_function(er.target, smap)
        detail.update({"I": res.value, "residual": res.residual, "iterations": res.iterations,
                       "converged": res.converged})
        rates = res.rates
    emit_summary_json(out / "rate.json", detail)
    _emit_control(out / "rate_control.csv", rates, smap.dt)
    return EXIT_OK


def cmd_mdp(ctx):
    setup, out = ctx["setup"], ctx["out"]
    exp = ctx["cfg"]["experiment"]
    sec = exp["mdp"]
    smap = mdp.skeleton_map(setup)
    h = _configured_control(setup, sec, smap)
    rows_a = mdp.run_condition_a(setup, exp["eps_grid"], h, sec["delta"], ctx["replicates"],
                                 ctx["seed"], ctx["parallel"])
    rows_b = mdp.run_condition_b(smap, h, sec["oscillations"], sec["perturbation_amplitude"],
                                 sec["perturbation_mode"])
    ev = mdp.EventSpec(**exp["event"])
    er = mdp.rate_of_event(ev, smap)
    shift = er.rates if sec["importance_sampling"] else None
    rows_p = mdp.estimate_mdp_probability(setup, ev, exp["eps_grid"], ctx["replicates"],
                                          ctx["seed"], shift, ctx["parallel"], er.value)
    emit_csv(out / "condition_a.csv", rows_a, list(rows_a[0].keys()))
    emit_csv(out / "condition_b.csv", rows_b, ["kind", "m", "gap", "energy"])
    emit_csv(out / "mdp_probability.csv", rows_p, list(rows_p[0].keys()))
    emit_summary_json(out / "mdp.json", {"condition_a": rows_a, "condition_b": rows_b,
                                         "probability": rows_p, "I_F": er.value,
                                         "direction": er.direction})
    return EXIT_OK


def cmd_selftest(ctx):
    rows = run_selftest(ctx["setup"])
    emit_csv(ctx["out"] / "selftest.csv", rows, ["check", "value", "tolerance", "passed"])
    ok = all(r["passed"] for r in rows)
    emit_summary_json(ctx["out"] / "selftest.json", {"checks": rows, "passed": ok})
    for r in rows:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']}: {r['value']:.3g} "
              f"(tolerance {r['tolerance']:g})")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"check-hyp": cmd_check_hyp, "scaling": cmd_scaling, "clt": cmd_clt, "gaps": cmd_gaps,
            "skeleton": cmd_skeleton, "rate": cmd_rate, "mdp": cmd_mdp, "selftest": cmd_selftest}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        setup = build_setup(cfg)
        seed = resolve_seed(args.seed, cfg)
        replicates = args.replicates if args.replicates is not None else cfg["experiment"]["replicates"]
        parallel = args.parallel if args.parallel is not None else cfg["experiment"]["parallel"]
        if replicates < 1 or parallel < 1:
            raise ConfigError("--replicates and --parallel must be positive")
    except ConfigError as err:
        print(f"fluctlab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or f"fluctlab_out/{args.command}")
    try:
        harness.ensure_dir(out)
        RunManifest(harness.config_hash(cfg), seed, args.command,
                    {"config": cfg, "replicates": replicates},
                    OUTPUTS[args.command] + ["timing.txt"], replicates).write(out)
    except OSError as err:
        print(f"fluctlab: cannot write to {out}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = {"cfg": cfg, "setup": setup, "seed": seed, "replicates": replicates,
           "parallel": parallel, "out": out}
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](ctx)
    except ConfigError as err:
        print(f"fluctlab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, SolverError, ValueError) as err:
        print(f"fluctlab: experiment failed: {err}", file=sys.stderr)
        return EXIT_FAIL
    harness.write_timing(out, time.perf_counter() - start)
    print(f"fluctlab {args.command}: wrote {out} (exit {code})")
    return code


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
