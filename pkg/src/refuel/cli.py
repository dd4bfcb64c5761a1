"""Command-line entry point: ``refuel {gen,upstream,offline,online,eval,compare}``.

Seeds resolve as ``--seed`` flag, then the ``REFUEL_SEED`` environment variable,
then the config file.  Exit codes: 0 success, 1 usage, 2 invalid input or
schema, 3 numerical failure, 4 upstream budget exhausted without termination.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import serialization as ser
from .config import PipelineConfig, load_config, parse_seed_list
from .envgen import (TaskFamily, compute_xi_down, family_constants, generate_family, generate_model_classes,
                     load_classes, load_family, save_classes, save_family)
from .errors import (ConstantsError, GenerationError, InputError, MLEError, NumericalError, PersistIOError,
                     RefuelError, SchemaError)
from .evaluation import (RunReport, avg_tv_error, curve_csv, emit_report, model_error,
                         multitask_benefit_experiment, plan_suboptimality, policy_panel, upstream_elliptical)
from .mdp import Policy, optimal_dp, save_policy, value_dp
from .offline import PessimismConfig, feature_coverage, gen_offline_dataset, one_hot_features, pevi, save_dataset
from .online import OnlineConfig, elliptical_summary, episode_rows, record_summary, run_lsvi_ucb
from .rng import derive_seed
from .upstream import LearnedRepresentation, iteration_rows, load_learned, run_refuel, save_learned

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERICAL, EXIT_BUDGET = 0, 1, 2, 3, 4

_EXIT_FOR = (
    (SchemaError, EXIT_INPUT),
    (InputError, EXIT_INPUT),
    (PersistIOError, EXIT_INPUT),
    (GenerationError, EXIT_INPUT),
    (ConstantsError, EXIT_INPUT),
    (MLEError, EXIT_INPUT),
    (NumericalError, EXIT_NUMERICAL),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _diag(level: str, **fields: Any) -> None:
    parts = [f"level={level}"] + [f"{k}={ser.dumps(str(v))}" for k, v in fields.items()]
    print("refuel: " + " ".join(parts), file=sys.stderr)


# --- stages ----------------------------------------------------------------------


def stage_gen(cfg: PipelineConfig, out: Path) -> dict[str, Any]:
    seed = cfg.seed
    spec = dataclasses.replace(cfg.family, seed=seed)
    family = generate_family(spec)
    classes = generate_model_classes(family, spec, derive_seed(seed, "classes"))
    family = family.with_constants(family_constants(family, classes))
    save_family(out / "family.json", family)
    save_classes(out / "classes.json", classes)
    return {"xi_measured": family.xi_measured, "xi_down": _certified_xi(family, cfg)}


def _certified_xi(family: TaskFamily, cfg: PipelineConfig) -> float:
    if family.constants is None:
        raise InputError("family has no constants; rerun gen")
    return compute_xi_down(family.constants, family.num_tasks, cfg.upstream.eps_u)


def stage_upstream(cfg: PipelineConfig, src: Path, out: Path) -> LearnedRepresentation:
    family = load_family(src / "family.json")
    classes = load_classes(src / "classes.json")
    learned = run_refuel(family, classes, cfg.upstream, derive_seed(cfg.seed, "refuel"))
    save_learned(out / "learned.json", learned)
    ser.write_text(out / "upstream.csv", curve_csv(iteration_rows(learned)))
    return learned


def _features(kind: str, family: TaskFamily, src: Path) -> np.ndarray:
    H, S, K = family.shape
    if kind == "onehot":
        return one_hot_features(H, S, K)
    if kind == "true":
        return family.downstream.phi
    return load_learned(src / "learned.json").phi_hat


def _xi_for(kind: str, section_xi: float | None, family: TaskFamily, cfg: PipelineConfig) -> float:
    if section_xi is not None:
        return section_xi
    if kind == "learned":
        return _certified_xi(family, cfg)
    return 0.0


def stage_offline(cfg: PipelineConfig, src: Path, out: Path) -> dict[str, Any]:
    sec = cfg.offline
    family = load_family(src / "family.json")
    mdp, reward = family.downstream, family.downstream_reward
    H, S, K = mdp.shape
    phi = _features(sec.features, family, src)
    xi = _xi_for(sec.features, sec.xi_down, family, cfg)
    pcfg = PessimismConfig(sec.lam, sec.c_beta, sec.delta, xi, max(1, reward.feature_dim))
    behavior = Policy.uniform(H, S, K)
    dataset = gen_offline_dataset(mdp, reward, behavior, sec.n_off, derive_seed(cfg.seed, "offline"))
    policy, diag = pevi(dataset, phi, reward, pcfg)
    v_star, _ = optimal_dp(mdp, reward)
    body = {
        "config": pcfg.to_dict(),
        "features": sec.features,
        "n_off": sec.n_off,
        "v_star": v_star,
        "policy_value": value_dp(mdp, reward, policy),
        "gap": v_star - value_dp(mdp, reward, policy),
        "feature_coverage": feature_coverage(behavior, mdp, phi),
        **diag.summary(),
    }
    save_dataset(out / "offline_dataset.ndjson", dataset)
    save_policy(out / "offline_policy.json", policy)
    ser.save_document(out / "offline_report.json", "offline_report", body)
    return body


def stage_online(cfg: PipelineConfig, src: Path, out: Path) -> dict[str, Any]:
    sec = cfg.online
    family = load_family(src / "family.json")
    mdp, reward = family.downstream, family.downstream_reward
    phi = _features(sec.features, family, src)
    xi = _xi_for(sec.features, sec.xi_down, family, cfg)
    ocfg = OnlineConfig(sec.lam, sec.c_beta, sec.delta, xi, max(1, reward.feature_dim), sec.n_episodes)
    record = run_lsvi_ucb(mdp, reward, phi, ocfg, derive_seed(cfg.seed, "online"))
    body = {**record_summary(record, mdp, reward, ocfg), "features": sec.features,
            "elliptical": elliptical_summary(record)}
    ser.save_document(out / "online_report.json", "online_report", body)
    ser.write_text(out / "online_episodes.csv", curve_csv(episode_rows(record, mdp, reward)))
    return body


def stage_eval(cfg: PipelineConfig, src: Path, out: Path) -> RunReport:
    family = load_family(src / "family.json")
    classes = load_classes(src / "classes.json")
    learned = load_learned(src / "learned.json")
    if learned.num_tasks != family.num_tasks:
        raise InputError("learned representation and family disagree on the number of tasks")
    panel = policy_panel(family, derive_seed(cfg.seed, "panel"), cfg.eval.panel_size, learned)
    per_h = [avg_tv_error(family, learned, panel, h) for h in range(family.shape[0])]
    checks = upstream_elliptical(learned)
    truth = classes.truth_indices
    metrics = {
        "n_u": float(learned.n_u),
        "terminated": float(learned.terminated),
        "model_error": max(per_h),
        "plan_suboptimality": plan_suboptimality(family, learned, cfg.eval.n_rewards,
                                                 derive_seed(cfg.seed, "rewards")),
        "final_pcv": learned.pcv_history[-1],
        "elliptical_ok": float(all(ok for *_, ok in checks)),
        "elliptical_max_ratio": max((lhs / bound if bound > 0 else 0.0) for _, _, lhs, bound, _ in checks),
        "phi_recovered": float(all(i == truth[0] for i in learned.phi_indices)),
        "psi_recovered": float(all(tuple(m) == truth[1] for m in learned.mu_indices)),
        "xi_measured": family.xi_measured,
        "xi_down_certified": _certified_xi(family, cfg),
    }
    curves = {
        "tv_by_step": [{"h": h, "avg_tv": v} for h, v in enumerate(per_h)],
        "upstream": iteration_rows(learned),
    }
    for name, kind in (("offline_report.json", "offline_report"), ("online_report.json", "online_report")):
        path = src / name
        if path.exists():
            doc = ser.load_document(path, kind)
            prefix = kind.split("_")[0]
            for key in ("gap", "mixture_gap", "total_regret", "v1_hat", "optimism_rate"):
                if key in doc:
                    metrics[f"{prefix}_{key}"] = float(doc[key])
    report = RunReport(metrics, curves, cfg.to_dict(), list(cfg.seeds))
    return report


def stage_compare(cfg: PipelineConfig, jobs: int) -> RunReport:
    sec = cfg.compare
    return multitask_benefit_experiment(sec.family, sec.task_counts, cfg.seeds, sec.hyper, sec.target_tv, jobs)


# --- dispatch --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refuel", description="Multitask representation learning in low-rank MDPs.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen": "generate a task family and model classes",
        "upstream": "run reward-free multitask exploration",
        "offline": "collect an offline dataset and run pessimistic planning",
        "online": "run optimistic online learning",
        "eval": "evaluate saved artifacts and write report.json",
        "compare": "multitask benefit experiment over task counts and seeds",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--seed", help="seed, or comma-separated seed list for compare")
        if name not in ("gen", "compare"):
            p.add_argument("--in", dest="src", help="directory with input artifacts (default: --out)")
        if name == "compare":
            p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    env = os.environ.get("REFUEL_SEED")
    if args.seed is not None:
        cfg = cfg.with_seeds(parse_seed_list(args.seed))
    elif env:
        cfg = cfg.with_seeds(parse_seed_list(env))
    return cfg


def _run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    src = Path(getattr(args, "src", None) or args.out)
    ser.write_text(out / "resolved_config.json", ser.dumps(cfg.to_dict()) + "\n")
    start = time.perf_counter()
    code = EXIT_OK
    if args.command == "gen":
        info = stage_gen(cfg, out)
        _diag("info", stage="gen", xi_down=info["xi_down"])
    elif args.command == "upstream":
        learned = stage_upstream(cfg, src, out)
        _diag("info", stage="upstream", n_u=learned.n_u, terminated=learned.terminated)
        if not learned.terminated:
            _diag("error", stage="upstream", reason="iteration budget exhausted before termination")
            code = EXIT_BUDGET
    elif args.command == "offline":
        body = stage_offline(cfg, src, out)
        _diag("info", stage="offline", gap=body["gap"])
    elif args.command == "online":
        body = stage_online(cfg, src, out)
        _diag("info", stage="online", mixture_gap=body["mixture_gap"])
    elif args.command == "eval":
        report = stage_eval(cfg, src, out)
        report.wall_clock = time.perf_counter() - start
        emit_report(report, out)
        _diag("info", stage="eval", model_error=report.metrics["model_error"])
    elif args.command == "compare":
        if args.jobs < 1:
            raise InputError("--jobs must be >= 1")
        report = stage_compare(cfg, args.jobs)
        report.wall_clock = time.perf_counter() - start
        emit_report(report, out)
        _diag("info", stage="compare", **{k: v for k, v in report.metrics.items() if k.startswith("ratio")})
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _diag("error", kind="usage", message=exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _run(args)
    except RefuelError as exc:
        for cls, code in _EXIT_FOR:
            if isinstance(exc, cls):
                _diag("error", kind=type(exc).__name__, message=exc)
                return code
        _diag("error", kind=type(exc).__name__, message=exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
