"""Command-line front end: ``hjbkit <command> ...`` or ``python3 -m hjbkit``.

Exit status is 0 on success, 1 when a solver fails and 2 for usage or
configuration errors. Reports go to ``--report`` as JSON; a short summary
is printed to standard output.
"""

import argparse
import csv
import json
import sys

import numpy as np

from .errors import ConfigError, HJBError
from .parallel import default_workers
from .problems import PROBLEMS, get_problem

USAGE_ERROR = 2
SOLVER_ERROR = 1


# ---------------------------------------------------------------- config files


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key.replace("-", "_")] = value
    return values


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _ints(text):
    return [int(v) for v in str(text).replace(",", " ").split()]


def _problem(args):
    overrides = dict(getattr(args, "param", None) or {})
    return get_problem(args.problem, **overrides)


def _emit(args, report, summary):
    print(summary)
    if getattr(args, "report", None):
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _march_opts(args):
    from .marching import MarchSchedule

    schedule = MarchSchedule(
        initial_frac=args.march_initial_frac, factor=args.march_factor, max_retries=args.march_retries
    )
    return {"schedule": schedule, "extension": args.extension}


# ---------------------------------------------------------------- commands


def cmd_problems(args):
    for name in sorted(PROBLEMS):
        ocp = get_problem(name)
        print(f"{name}\tn={ocp.n}\tm={ocp.m}\tt0={ocp.t0:g}\ttf={ocp.tf:g}")
    return 0


def cmd_generate(args):
    from .backward import generate_backward
    from .marching import march
    from .pipeline import generate_seed, generate_warm, write_dataset
    from .value_net import load_model

    ocp = _problem(args)
    if args.kind == "seed":
        data, rep = generate_seed(ocp, args.count, args.seed, args.decimate, args.workers, **_march_opts(args))
        report = {"kind": "seed", "problem": args.problem, "seed": args.seed, **rep.as_dict()}
    elif args.kind == "warm":
        if not args.model:
            raise ConfigError("generate warm needs --model")
        model = load_model(args.model)
        points = ocp.sample_states(np.random.default_rng(args.seed), args.count)
        data, rep = generate_warm(model, ocp, points, args.decimate, args.workers, args.fallback, **_march_opts(args))
        report = {"kind": "warm", "problem": args.problem, "seed": args.seed, **rep.as_dict()}
    else:
        if args.radius is None:
            raise ConfigError("generate backward needs --radius")
        x0 = np.array(_floats(args.x0)) if args.x0 else ocp.sample_states(np.random.default_rng(args.seed), 1)[0]
        nominal = march(ocp, ocp.t0, x0, **_march_opts(args))
        data, _, rep = generate_backward(ocp, nominal, args.count, args.radius, args.seed, workers=args.workers)
        report = {"kind": "backward", "problem": args.problem, "seed": args.seed, "radius": args.radius, **rep.as_dict()}
    write_dataset(args.out, data)
    _emit(args, report, f"wrote {len(data)} samples to {args.out}")
    return 0


def _train_config(args):
    from .value_net import TrainConfig

    return TrainConfig(mu=args.mu, adam_steps=args.adam_steps, adam_lr=args.adam_lr, lbfgs_steps=args.lbfgs_steps, seed=args.seed)


def cmd_train(args):
    from .pipeline import read_dataset
    from .value_net import MlpModel, history_csv, loss, save_model, train

    ocp = _problem(args)
    data = read_dataset(args.data)
    config = _train_config(args)
    model = MlpModel.for_problem(ocp, tuple(args.hidden), seed=args.seed)
    model, history = train(model, data, config)
    save_model(model, args.out)
    if args.history:
        with open(args.history, "w") as fh:
            fh.write(history_csv(history))
    final = loss(model, data, config.mu)
    report = {"samples": len(data), "final_loss": final, "config": config.as_dict(), "iterations": len(history) - 1}
    _emit(args, report, f"trained on {len(data)} samples, loss {final:.6g}, model in {args.out}")
    return 0


def cmd_adapt(args):
    from .pipeline import RoundPlan, run_adaptive
    from .value_net import save_model

    ocp = _problem(args)
    plan = RoundPlan(tuple(args.sizes), args.pool_multiplier, args.steep_fraction, args.validation_count, args.decimate)
    model, reports, data = run_adaptive(
        ocp, plan, _train_config(args), args.seed, args.workers, tuple(args.hidden), log=lambda msg: print(msg)
    )
    save_model(model, args.out)
    rounds = [dict(r, validation=r["validation"].as_dict()) for r in reports]
    _emit(args, {"plan": list(plan.sizes), "rounds": rounds}, f"final model in {args.out}")
    return 0


def cmd_validate(args):
    from .pipeline import validate
    from .value_net import load_model

    ocp = _problem(args)
    rep = validate(load_model(args.model), ocp, args.count, args.seed, workers=args.workers)
    _emit(args, rep.as_dict(), f"V rel L2 {rep.v_rel_l2:.4g}, costate rel L2 {rep.lam_rel_l2:.4g}, rate {rep.convergence_rate:.3f}")
    return 0


def cmd_solve_point(args):
    x0 = np.array(_floats(args.x0))
    if args.method == "hopf":
        from .hj_alt import HOPF_PROBLEMS, hopf_solve

        if args.problem not in HOPF_PROBLEMS:
            raise ConfigError(f"hopf needs a Hopf problem id: {sorted(HOPF_PROBLEMS)}")
        problem = HOPF_PROBLEMS[args.problem](n=len(x0))
        value = hopf_solve(problem, args.t0, x0, seed=args.seed)
        out = {"method": "hopf", "t": args.t0, "x": x0.tolist(), "V": value}
    else:
        ocp = _problem(args)
        if len(x0) != ocp.n:
            raise ConfigError(f"--x0 needs {ocp.n} values for {args.problem}")
        if args.method == "tpbvp":
            from .marching import march

            sol = march(ocp, args.t0, x0, **_march_opts(args))
            out = {"method": "tpbvp", "V": sol.value, "lambda0": sol.costate.tolist(), "report": sol.report.as_dict()}
            out["report"].pop("wall_time", None)
        elif args.method == "charmin":
            from .hj_alt import char_min_value

            res = char_min_value(ocp, args.t0, x0, seed=args.seed)
            out = {"method": "charmin", "V": res.value, "lambda0": res.costate.tolist(), "evaluations": res.evaluations}
        else:
            from .pseudospectral import solve_ps

            sol = solve_ps(ocp, args.t0, x0, args.order, args.eps)
            rep = dict(sol.report)
            rep.pop("wall_time", None)
            out = {"method": "ps", "V": sol.value, "report": rep}
    print(json.dumps(out, sort_keys=True))
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
    return 0


def cmd_simulate(args):
    from .pipeline import closed_loop_sim
    from .value_net import load_model

    ocp = _problem(args)
    res = closed_loop_sim(load_model(args.model), ocp, np.array(_floats(args.x0)))
    out = {"cost": res.cost, "running_cost": res.running_cost, "terminal_cost": res.terminal_cost, "x_final": res.trajectory.final[:-1].tolist()}
    _emit(args, out, json.dumps(out, sort_keys=True))
    return 0


def cmd_lgl(args):
    from .pseudospectral import lgl_grid

    grid = lgl_grid(args.order)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["k", "node", "weight"] + [f"D{j}" for j in range(args.order + 1)])
    for k in range(args.order + 1):
        writer.writerow([k, repr(float(grid.nodes[k])), repr(float(grid.weights[k]))] + [repr(float(d)) for d in grid.D[k]])
    return 0


# ---------------------------------------------------------------- parser


def _common(p, problem=True):
    if problem:
        p.add_argument("--problem", default="rigid_body", help="problem id (see 'problems list')")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="parallel workers (default: $HJB_WORKERS or 1)")
    p.add_argument("--report", help="write a JSON report here")
    p.add_argument("--config", help="key = value file; flags override it")


def _march_flags(p):
    p.add_argument("--march-initial-frac", type=float, default=0.05)
    p.add_argument("--march-factor", type=float, default=2.0)
    p.add_argument("--march-retries", type=int, default=6)
    p.add_argument("--extension", choices=["piecewise", "linear"], default="piecewise")


def _train_flags(p):
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--adam-steps", type=int, default=2000)
    p.add_argument("--adam-lr", type=float, default=1e-3)
    p.add_argument("--lbfgs-steps", type=int, default=5000)
    p.add_argument("--hidden", type=_ints, default=[64, 64, 64])


def build_parser():
    parser = argparse.ArgumentParser(prog="hjbkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("problems", help="list registered problems")
    p.add_argument("action", choices=["list"])
    p.set_defaults(func=cmd_problems)

    p = sub.add_parser("generate", help="build a dataset")
    p.add_argument("kind", choices=["seed", "warm", "backward"])
    _common(p)
    _march_flags(p)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", default="dataset.jsonl")
    p.add_argument("--decimate", type=int, default=4)
    p.add_argument("--model", help="trained model (warm)")
    p.add_argument("--fallback", action="store_true", help="march when a warm solve fails")
    p.add_argument("--radius", type=float, help="terminal perturbation radius (backward)")
    p.add_argument("--x0", help="nominal initial state (backward)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit a value network to a dataset")
    _common(p)
    _train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="model.json")
    p.add_argument("--history", help="write the loss history as CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="adaptive sampling and training rounds")
    _common(p)
    _train_flags(p)
    p.add_argument("--sizes", type=_ints, default=[64, 128, 1024, 4096])
    p.add_argument("--pool-multiplier", type=float, default=4.0)
    p.add_argument("--steep-fraction", type=float, default=0.5)
    p.add_argument("--validation-count", type=int, default=100)
    p.add_argument("--decimate", type=int, default=4)
    p.add_argument("--out", default="model.json")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("validate", help="compare a model with fresh TPBVP solutions")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve-point", help="value at one point")
    _common(p)
    _march_flags(p)
    p.add_argument("--method", choices=["tpbvp", "charmin", "hopf", "ps"], default="tpbvp")
    p.add_argument("--x0", required=True, help="state, comma or space separated")
    p.add_argument("--t0", type=float, default=0.0)
    p.add_argument("--order", type=int, default=16)
    p.add_argument("--eps", type=float, default=1e-6)
    p.set_defaults(func=cmd_solve_point)

    p = sub.add_parser("simulate", help="closed-loop simulation with a trained model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--x0", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("lgl", help="print LGL nodes, weights and differentiation matrix as CSV")
    p.add_argument("--order", type=int, required=True)
    p.set_defaults(func=cmd_lgl)
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    return None


def _apply_config(parser, argv):
    """Parse once to find ``--config``, then re-parse with its values as defaults."""
    args = parser.parse_args(argv)
    path = getattr(args, "config", None)
    if not path:
        return args
    sub = _subparser(parser, args.command)
    known = {a.dest: a for a in sub._actions}
    params = {}
    for key, raw in read_config(path).items():
        if key.startswith("param."):
            params[key[len("param.") :]] = _parse_value(raw)
            continue
        if key not in known or key in ("help", "config"):
            raise ConfigError(f"unknown config key {key!r}")
        action = known[key]
        if action.type is not None:
            value = action.type(raw)
        elif isinstance(action, argparse._StoreTrueAction):
            value = str(raw).lower() in ("1", "true", "yes", "on")
        else:
            value = raw
        sub.set_defaults(**{key: value})
    args = parser.parse_args(argv)
    args.param = params
    return args


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "workers", 0) is None:
            args.workers = default_workers()
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"hjbkit: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    except (ValueError, OSError) as exc:
        print(f"hjbkit: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (HJBError, FloatingPointError) as exc:
        print(f"hjbkit: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return SOLVER_ERROR


if __name__ == "__main__":
    sys.exit(main())
