"""Metrics, brute-force oracles, the multitask experiment and report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import linalg

from . import serialization as ser
from .envgen import FamilySpec, ModelClass, TaskFamily, generate_family, generate_model_classes
from .errors import InputError, MLEError, SchemaError
from .mdp import (Policy, RewardTable, TabularLowRankMdp, evaluate_kernel, occupancy_kernel, optimal_dp,
                  rollout_batch, tv_table, value_dp)
from .rng import derive_seed, make_rng
from .upstream import (ExplorationDatasets, HyperParams, LearnedRepresentation, iterate_refuel, joint_mle,
                       plan_with_reward, schedule_dims)

BRUTE_FORCE_LIMIT = 10**6


# --- model-error metrics --------------------------------------------------------


def avg_tv_error(family: TaskFamily, learned: LearnedRepresentation | Sequence[TabularLowRankMdp],
                 eval_policies: Sequence[Sequence[Policy]], h: int) -> float:
    """Worst case over policy sets of the task-averaged expected TV error at step ``h``."""
    models = learned.models() if isinstance(learned, LearnedRepresentation) else list(learned)
    T = family.num_tasks
    if len(models) != T:
        raise InputError("learned model must cover every task")
    if not 0 <= h < family.shape[0]:
        raise InputError(f"step {h} out of range")
    if not eval_policies:
        raise InputError("need at least one policy set")
    tv = [tv_table(models[t].kernel[h], family.tasks[t].kernel[h]) for t in range(T)]
    worst = 0.0
    for pset in eval_policies:
        if len(pset) != T:
            raise InputError("each policy set needs one policy per task")
        total = 0.0
        for t, policy in enumerate(pset):
            if policy.shape != family.shape:
                raise InputError("policy shape does not match the family")
            occ = occupancy_kernel(family.tasks[t].kernel, policy.pi, family.initial_state)
            total += float(np.sum(occ[h] * tv[t]))
        worst = max(worst, total / T)
    return min(1.0, worst)


def model_error(family: TaskFamily, learned: LearnedRepresentation | Sequence[TabularLowRankMdp],
                eval_policies: Sequence[Sequence[Policy]]) -> float:
    """``max_h avg_tv_error``."""
    return max(avg_tv_error(family, learned, eval_policies, h) for h in range(family.shape[0]))


def policy_panel(family: TaskFamily, seed: int, size: int = 20,
                 learned: LearnedRepresentation | None = None) -> list[list[Policy]]:
    """``size`` seeded random policy sets, plus the reward-greedy set under ``learned``."""
    H, S, K = family.shape
    panel = [[Policy.random(H, S, K, seed, "panel", i, t) for t in range(family.num_tasks)] for i in range(size)]
    if learned is not None:
        panel.append([plan_with_reward(learned.model(t), family.rewards[t]) for t in range(family.num_tasks)])
    return panel


def mc_avg_tv_error(family: TaskFamily, learned: LearnedRepresentation, policies: Sequence[Policy], h: int,
                    n_rollouts: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate and standard error of the task-averaged TV error."""
    T = family.num_tasks
    est, var = 0.0, 0.0
    for t in range(T):
        truth = family.tasks[t].kernel
        tv = tv_table(learned.model(t).kernel[h], truth[h])
        states, actions = rollout_batch(truth, policies[t].pi, family.initial_state, n_rollouts,
                                        make_rng(seed, "mc_tv", t))
        vals = tv[states[:, h], actions[:, h]]
        est += vals.mean() / T
        var += vals.var(ddof=1) / n_rollouts / T**2
    return float(est), float(math.sqrt(var))


def suboptimality_gap(mdp: TabularLowRankMdp, reward: RewardTable, policy: Policy) -> float:
    """``V* - V^pi`` at the initial state."""
    v_star, _ = optimal_dp(mdp, reward)
    return v_star - value_dp(mdp, reward, policy)


def random_reward(H: int, S: int, K: int, seed: int, *path) -> RewardTable:
    """Uniform rewards scaled so that ``sum_h max r_h <= 1``."""
    r = make_rng(seed, "reward", *path).random((H, S, K))
    return RewardTable(r / (H * max(float(r.max()), 1e-12)))


def plan_suboptimality(family: TaskFamily, learned: LearnedRepresentation, n_rewards: int, seed: int) -> float:
    """Mean gap of :func:`plan_with_reward` over tasks and ``n_rewards`` random rewards."""
    H, S, K = family.shape
    gaps = []
    for i in range(n_rewards):
        reward = random_reward(H, S, K, seed, i)
        for t in range(family.num_tasks):
            gaps.append(suboptimality_gap(family.tasks[t], reward, plan_with_reward(learned.model(t), reward)))
    return float(np.mean(gaps))


# --- brute force and elliptical checks ------------------------------------------


def _record_log_likelihoods(datasets: ExplorationDatasets, classes: ModelClass, h: int) -> np.ndarray:
    # record-by-record loop, independent of the count-based scorer
    n_phi, n_psi = classes.sizes
    ll = np.zeros((n_phi, n_psi, datasets.T))
    for t in range(datasets.T):
        for _, s, a, s2 in datasets.triples[t][h]:
            p = classes.kernels[:, :, h, s, a, s2]
            with np.errstate(divide="ignore"):
                ll[:, :, t] += np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)
    return ll


def brute_force_mle_check(datasets: ExplorationDatasets, classes: ModelClass, h: int,
                          limit: int = BRUTE_FORCE_LIMIT) -> bool:
    """Whether :func:`joint_mle` attains the maximum over all ``|Phi| |Psi|^T`` combinations."""
    n_phi, n_psi = classes.sizes
    T = datasets.T
    if n_phi * n_psi**T > limit:
        raise InputError(f"enumeration of {n_phi} * {n_psi}^{T} candidates exceeds the limit {limit}")
    ll = _record_log_likelihoods(datasets, classes, h)
    best = -math.inf
    for i in range(n_phi):
        for combo in itertools.product(range(n_psi), repeat=T):
            best = max(best, sum(ll[i, j, t] for t, j in enumerate(combo)))
    try:
        i, js = joint_mle(datasets, classes, h)
    except MLEError:
        return best == -math.inf
    chosen = sum(ll[i, j, t] for t, j in enumerate(js))
    return bool(chosen >= best - 1e-9 * max(1.0, abs(best)))


def elliptical_check(trace: np.ndarray, lam: float, d: int) -> tuple[float, float, bool]:
    """``sum_n tr(X_n M_{n-1}^{-1})`` against ``2 d ln(1 + N / (d lam))``."""
    trace = np.asarray(trace, dtype=float).reshape(-1, d)
    N = trace.shape[0]
    if np.any(np.linalg.norm(trace, axis=1) > 1.0 + 1e-12):
        raise InputError("trace vectors must have norm at most one")
    M = lam * np.eye(d)
    lhs = 0.0
    for x in trace:
        lhs += float(x @ linalg.solve(M, x, assume_a="pos"))
        M += np.outer(x, x)
    bound = 2.0 * d * math.log(1.0 + N / (d * lam))
    return lhs, bound, lhs <= bound + 1e-9


def upstream_elliptical(learned: LearnedRepresentation) -> list[tuple[int, int, float, float, bool]]:
    """Elliptical check for every ``(t, h)`` covariance trace under the final features."""
    if learned.datasets is None:
        raise InputError("learned representation carries no datasets")
    lam = learned.schedule_history[0].lambda_n
    d = learned.phi_hat.shape[-1]
    out = []
    for t in range(learned.num_tasks):
        for h in range(learned.phi_hat.shape[0] - 1):
            pairs = learned.datasets.pair_array(t, h)
            trace = learned.phi_hat[h][pairs[:, 0], pairs[:, 1]] if len(pairs) else np.zeros((0, d))
            out.append((t, h, *elliptical_check(trace, lam, d)))
    return out


def pcv_monte_carlo(models: Sequence[TabularLowRankMdp], bonuses: np.ndarray, policies: Sequence[Policy],
                    n_rollouts: int, seed: int) -> tuple[float, float]:
    """Plug-in PCV from rollouts under the models, with a delta-method standard error."""
    T = len(models)
    Hm1 = bonuses.shape[1]
    samples = []
    for t in range(T):
        states, actions = rollout_batch(models[t].kernel, policies[t].pi, models[t].initial_state, n_rollouts,
                                        make_rng(seed, "mc_pcv", t))
        steps = np.arange(Hm1)
        samples.append(bonuses[t][steps[None, :], states[:, :Hm1], actions[:, :Hm1]])
    x = np.stack([s.mean(axis=0) for s in samples], axis=1)          # (H-1, T)
    norms = np.sqrt((x**2).sum(axis=1))
    grad = x / np.where(norms > 0, norms, 1.0)[:, None]
    var = sum(float(np.var(samples[t] @ grad[:, t], ddof=1)) for t in range(T)) / n_rollouts
    return float(norms.sum()), math.sqrt(var)


# --- reports ---------------------------------------------------------------------


@dataclass
class RunReport:
    metrics: dict[str, float]
    curves: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)
    wall_clock: float = 0.0
    version: int = ser.SCHEMA_VERSION

    def __post_init__(self) -> None:
        for name, value in self.metrics.items():
            if not math.isfinite(value):
                raise InputError(f"metric {name} is not finite")

    def to_dict(self) -> dict[str, Any]:
        # wall-clock is kept out so reruns are byte-identical
        return {"metrics": dict(self.metrics), "config": self.config, "seeds": list(self.seeds),
                "curves": {k: v for k, v in self.curves.items()}}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunReport":
        try:
            return cls(metrics={k: float(v) for k, v in doc["metrics"].items()}, curves=dict(doc["curves"]),
                       config=dict(doc["config"]), seeds=[int(s) for s in doc["seeds"]])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"invalid report: {exc}") from exc


def curve_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def emit_report(report: RunReport, out_dir: str | os.PathLike, name: str = "report") -> list[Path]:
    """Write ``<name>.json``, ``<name>.sha256``, one CSV per curve and ``<name>.timing.json``."""
    out = Path(out_dir)
    doc = ser.document("report", report.to_dict())
    text = ser.dumps(doc) + "\n"
    paths = [out / f"{name}.json", out / f"{name}.sha256"]
    ser.write_text(paths[0], text)
    ser.write_text(paths[1], ser.content_hash(doc) + "\n")
    for curve, rows in report.curves.items():
        path = out / f"{name}_{curve}.csv"
        ser.write_text(path, curve_csv(rows))
        paths.append(path)
    timing = out / f"{name}.timing.json"
    ser.write_text(timing, ser.dumps({"wall_clock_seconds": report.wall_clock}) + "\n")
    paths.append(timing)
    return paths


def load_report(path: str | os.PathLike) -> RunReport:
    return RunReport.from_dict(ser.load_document(path, "report"))


# --- multitask benefit -----------------------------------------------------------


@dataclass(frozen=True)
class BenefitCell:
    family: FamilySpec
    task_count: int
    seed: int
    hyper: HyperParams
    target_tv: float = 0.20
    panel_size: int = 20


def restrict_tasks(family: TaskFamily, classes: ModelClass, tasks: Sequence[int]) -> tuple[TaskFamily, ModelClass]:
    """Sub-family and classes for a subset of tasks, everything else unchanged."""
    tasks = list(tasks)
    spec = dataclasses.replace(family.spec, num_tasks=len(tasks))
    sub = dataclasses.replace(family, spec=spec, mus=family.mus[tasks],
                              rewards=tuple(family.rewards[t] for t in tasks), constants=None)
    cls = ModelClass(classes.Phi, classes.Psi, classes.phi_truth, tuple(classes.psi_truth[t] for t in tasks))
    return sub, cls


def run_benefit_cell(cell: BenefitCell) -> dict[str, Any]:
    """Iterate REFUEL until the panel model error reaches the target."""
    spec = dataclasses.replace(cell.family, seed=cell.seed)
    family = generate_family(spec)
    classes = generate_model_classes(family, spec, derive_seed(cell.seed, "classes"))
    family, classes = restrict_tasks(family, classes, range(cell.task_count))
    panel = policy_panel(family, derive_seed(cell.seed, "panel"), cell.panel_size)
    H = family.shape[0]
    for state in iterate_refuel(family, classes, cell.hyper, derive_seed(cell.seed, "refuel")):
        models = [TabularLowRankMdp(state.phi_hat, state.mu_hats[t], family.initial_state)
                  for t in range(family.num_tasks)]
        err = model_error(family, models, panel)
        if err <= cell.target_tv:
            return {"T": cell.task_count, "seed": cell.seed, "reached": 1, "iterations": state.n,
                    "per_task_trajectories": state.n * H, "final_tv": err}
    return {"T": cell.task_count, "seed": cell.seed, "reached": 0, "iterations": cell.hyper.max_iterations,
            "per_task_trajectories": cell.hyper.max_iterations * H, "final_tv": err}


def multitask_benefit_experiment(family: FamilySpec, task_counts: Sequence[int], seeds: Sequence[int],
                                 hyper: HyperParams, target_tv: float = 0.20, jobs: int = 1) -> RunReport:
    """Per-task trajectories to reach ``target_tv`` for each task count, medians and ratio.

    Each seed draws one family with ``max(task_counts)`` tasks; smaller counts
    use its leading tasks, so per-task difficulty is matched across cells.
    """
    if min(task_counts) != 1 or len(task_counts) < 2:
        raise InputError("task_counts must include 1 and at least one larger value")
    base = dataclasses.replace(family, num_tasks=max(task_counts))
    cells = [BenefitCell(base, T, s, hyper, target_tv) for T in task_counts for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_benefit_cell, cells))
    else:
        rows = [run_benefit_cell(c) for c in cells]
    metrics: dict[str, float] = {}
    for T in task_counts:
        counts = [r["per_task_trajectories"] for r in rows if r["T"] == T]
        metrics[f"median_per_task_trajectories_T{T}"] = float(np.median(counts))
        metrics[f"reached_fraction_T{T}"] = float(np.mean([r["reached"] for r in rows if r["T"] == T]))
    top = max(task_counts)
    metrics["ratio_T{}_over_T1".format(top)] = (metrics[f"median_per_task_trajectories_T{top}"]
                                               / metrics["median_per_task_trajectories_T1"])
    config = {"family": base.to_dict(), "task_counts": list(task_counts), "hyper": hyper.to_dict(),
              "target_tv": target_tv}
    return RunReport(metrics, {"cells": rows}, config, list(seeds))
