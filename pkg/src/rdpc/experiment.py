"""Experiment orchestration: controller construction, Monte-Carlo runs, artifacts."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import RlsController, SingleLevelController
from .config import ExperimentConfig
from .excitation import BilevelController, ExcitationConfig, weights_factory
from .predictor import NoiseModel
from .robust import Box, ObjectiveSpec
from .sim import RunLog, compute_metrics, preset, run_closed_loop, write_log

log = logging.getLogger(__name__)

__all__ = ["build_id", "make_controller_factory", "objective_of", "run_experiment", "worker_count"]


def build_id() -> str:
    """Versions of the package and of the numerical stack it runs on."""
    import clarabel
    import osqp
    import scipy

    return f"rdpc-{__version__} numpy-{np.__version__} scipy-{scipy.__version__} clarabel-{clarabel.__version__} osqp-{osqp.__version__}"


def worker_count() -> int:
    env = os.environ.get("RDPC_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"RDPC_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return max(1, os.cpu_count() or 1)


def objective_of(cfg: ExperimentConfig) -> ObjectiveSpec:
    c = cfg.controller
    return ObjectiveSpec(kind=c.objective, q=c.q, r=c.r, k_reg=c.k_reg)


def _weights(cfg: ExperimentConfig, n_y: int):
    c = cfg.controller
    if c.eg_kind == "noise":
        return weights_factory(
            "noise", noise=NoiseModel.from_std(cfg.scenario.noise_std, n_y), t_init=c.t_init,
            tinit_exponent=c.tinit_exponent,
        )
    if c.eg_kind == "linear":
        return weights_factory("linear", first=c.eg_first, last=c.eg_last)
    return weights_factory("constant", value=c.eg_value)


def make_controller_factory(cfg: ExperimentConfig):
    """``f(dataset, excitation_seed) -> controller`` for the configured type."""
    c, sc, ex = cfg.controller, cfg.scenario, cfg.excitation
    model = preset(sc.preset)
    u_box, w_box = sc.u_box, Box.symmetric(np.broadcast_to(np.asarray(sc.w_tube, float), (model.n_w,)))
    soft = cfg.run.slack_penalty if cfg.run.infeasible == "relax" else None
    weights = _weights(cfg, model.n_y)

    def factory(ds, excitation_seed):
        if c.type in ("bilevel_robust", "bilevel_nonrobust"):
            exc = None
            if ex.enabled:
                exc = ExcitationConfig(
                    Box(ex.ue_lower, ex.ue_upper), ex.pe_tolerance, excitation_seed, ex.use_exact_rank,
                    True, ex.freeze_on_nonpe,
                )
            return BilevelController(
                ds, c.t_init, c.n_h, weights, u_box, w_box, robust=c.type == "bilevel_robust",
                excitation=exc, online_update=c.online_update, soft_output=soft,
            )
        if c.type == "rls_mpc":
            return RlsController(ds, c.t_init, c.n_h, u_box, w_box, c.rls_lambda, c.rls_p0, soft_output=soft)
        return SingleLevelController(ds, c.t_init, c.n_h, u_box, c.eta_g, c.eta_sigma, c.online_update)

    return factory


def _run_one(args) -> RunLog:
    cfg, seed = args
    factory = make_controller_factory(cfg)
    return run_closed_loop(
        cfg.scenario, factory, seed, cfg.controller.n_h, cfg.controller.t_init, objective_of(cfg), cfg.run.capacity
    )


def run_logs(cfg: ExperimentConfig, workers: int | None = None) -> list[RunLog]:
    """Execute every seed; results come back in seed order."""
    jobs = [(cfg, s) for s in cfg.seeds]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def run_experiment(cfg: ExperimentConfig, out_dir, workers: int | None = None) -> tuple[list[RunLog], dict]:
    """Run all seeds and write logs, ``metrics.json`` and ``manifest.json``.

    All files are written here, after the workers finish, in seed order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = run_logs(cfg, workers)
    model = preset(cfg.scenario.preset)
    runs = []
    for seed, lg in zip(cfg.seeds, logs):
        name = f"run_{seed:04d}.csv"
        write_log(lg, out / name, model.n_u, model.n_w, model.n_y, timing_path=out / f"timing_{seed:04d}.csv")
        runs.append({"seed": seed, "log": name, "status": lg.status, "message": lg.message, "steps": len(lg)})
    metrics = compute_metrics(logs).as_dict()
    metrics["controller"] = cfg.controller.type
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "scenario_hash": cfg.scenario_hash(),
        "seeds": cfg.seeds,
        "build_id": build_id(),
        "runs": runs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return logs, metrics


def compare_runs(dirs) -> list[dict]:
    """Rows of the comparison table; refuses runs with different realized noise."""
    rows, hashes = [], set()
    for d in dirs:
        d = Path(d)
        manifest = json.loads((d / "manifest.json").read_text())
        metrics = json.loads((d / "metrics.json").read_text())
        hashes.add(manifest["scenario_hash"])
        rows.append({"dir": str(d), **metrics})
    if len(hashes) > 1:
        raise ValueError("run directories do not share a scenario hash; unpaired comparison refused")
    return rows


def format_table(rows: list[dict]) -> str:
    n_ch = max(len(r["channel_violation_rate"]) for r in rows)
    head = ["controller", "violation_rate"] + [f"viol_y{i + 1}" for i in range(n_ch)] + ["energy", "mean_abs_err", "runs", "dir"]
    lines = ["\t".join(head)]
    for r in rows:
        ch = [f"{v:.4f}" for v in r["channel_violation_rate"]]
        lines.append("\t".join(
            [r["controller"], f"{r['violation_rate']:.4f}"] + ch
            + [f"{r['energy_mean']:.4f}", f"{r['mean_abs_tracking_error']:.4f}", str(r["runs"]), r["dir"]]
        ))
    return "\n".join(lines)
