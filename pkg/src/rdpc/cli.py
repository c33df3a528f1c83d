"""Command-line front end: ``rdpc run | compare | dump-qp | check-pe``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_value

log = logging.getLogger("rdpc")


def _overrides(args) -> dict:
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = parse_value(value.strip())
    if getattr(args, "mc", None) is not None:
        pairs["run.mc"] = args.mc
    if getattr(args, "controller", None) is not None:
        pairs["controller.type"] = args.controller
    if getattr(args, "seed", None) is not None:
        pairs["run.seed"] = args.seed
    return pairs


def _load(args):
    cfg = load_config(args.config)
    pairs = _overrides(args)
    return cfg.with_overrides(pairs) if pairs else cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    out = Path(args.out or f"runs/{cfg.controller.type}-{cfg.config_hash()[:10]}")
    logs, metrics = run_experiment(cfg, out, workers=args.workers)
    aborted = [lg for lg in logs if lg.status != "ok"]
    print(f"{cfg.controller.type}: violation_rate={metrics['violation_rate']:.4f} "
          f"energy_mean={metrics['energy_mean']:.4f} runs={metrics['runs']} steps={metrics['steps']} -> {out}")
    for lg in aborted:
        print(f"aborted: {lg.message}", file=sys.stderr)
    if aborted and not args.allow_partial:
        return 3
    return 0


def cmd_compare(args) -> int:
    from .experiment import compare_runs, format_table

    try:
        rows = compare_runs(args.dirs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(format_table(rows))
    return 0


def cmd_dump_qp(args) -> int:
    from .experiment import make_controller_factory, objective_of
    from .qp import dump_qp
    from .robust import Box, ObjectiveSpec, assemble_problem
    from .sim import collect_warmup, horizon_sets

    cfg = _load(args)
    if not cfg.controller.type.startswith("bilevel"):
        raise ConfigError("dump-qp needs a bilevel controller type")
    c = cfg.controller
    seed = cfg.seeds[0]
    wu = collect_warmup(cfg.scenario, seed, c.n_h, cfg.run.capacity)
    ctrl = make_controller_factory(cfg)(wu.dataset, wu.realization.excitation_seed)
    t = c.t_init
    hist = (np.ravel(wu.y[-t:]), np.ravel(wu.u[-t:]), np.ravel(wu.w[-t:]))
    i = cfg.scenario.n_warmup
    y_box, ref = horizon_sets(cfg.scenario, wu.model, 0, c.n_h)
    base = objective_of(cfg)
    obj = ObjectiveSpec(base.kind, ref, base.q, base.r, base.k_reg)
    robust = c.type == "bilevel_robust"
    w_box = ctrl.w_box if robust else Box.point(np.zeros(ctrl.w_box.dim))
    prob = assemble_problem(ctrl.factor, ctrl.stack, hist, (wu.realization.w_forecast[i : i + c.n_h], w_box),
                            (ctrl.u_box, y_box), obj, feedback=robust)
    dump_qp(prob.qp, args.out)
    print(f"wrote {args.out}: {prob.qp.n_var} variables, {prob.qp.b.size} inequalities")
    return 0


def cmd_check_pe(args) -> int:
    from .hankel import Dataset, build_hankel, numerical_rank

    ds = Dataset.from_csv(args.dataset)
    H = build_hankel(ds.u, args.order)
    rank = numerical_rank(H)
    full = rank == H.shape[0] and H.shape[1] >= H.shape[0]
    print(json.dumps({"samples": len(ds), "order": args.order, "rows": H.shape[0], "cols": H.shape[1],
                      "rank": rank, "persistently_exciting": bool(full)}))
    return 0 if full else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rdpc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a (Monte-Carlo) closed-loop experiment")
    r.add_argument("--config", required=True, help="built-in name, key=value file, or manifest.json")
    r.add_argument("--mc", type=int, help="number of Monte-Carlo runs")
    r.add_argument("--controller", help="bilevel_robust, bilevel_nonrobust, single_level or rls_mpc")
    r.add_argument("--seed", type=int, help="first seed")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.add_argument("--out", help="output directory")
    r.add_argument("--workers", type=int, help="worker processes (default: RDPC_THREADS or CPU count)")
    r.add_argument("--allow-partial", action="store_true", help="exit 0 even if some runs aborted")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate paired run directories")
    c.add_argument("dirs", nargs="+")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("dump-qp", help="write the first-step robust QP as text")
    d.add_argument("--config", required=True)
    d.add_argument("--controller")
    d.add_argument("--seed", type=int)
    d.add_argument("--set", action="append", metavar="KEY=VALUE")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_qp)

    k = sub.add_parser("check-pe", help="rank audit of a dataset CSV")
    k.add_argument("dataset")
    k.add_argument("--order", type=int, required=True)
    k.set_defaults(func=cmd_check_pe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
