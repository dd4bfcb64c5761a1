"""Reward-free multitask representation learning (REFUEL).

One iteration ``n`` of :func:`iterate_refuel`:

1. roll every task's previous exploration policy into step ``h-1`` and take
   two uniform actions, for each of the ``H`` episode indices;
2. fit ``(phi_h, mu_h^1..mu_h^T)`` per step by joint maximum likelihood over the
   finite classes;
3. build the per-task covariance ``U_h`` and elliptical bonus ``b_h``;
4. choose new exploration policies by maximising the pseudo cumulative value
   (PCV) and stop once ``2 PCV + 2 sqrt(K T zeta_n) <= T eps_u``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import linalg

from . import serialization as ser
from .envgen import ModelClass, TaskFamily
from .errors import InputError, MLEError, NumericalError, SchemaError
from .mdp import Policy, RewardTable, TabularLowRankMdp, backward_induction, occupancy_kernel
from .rng import check_seed, make_rng, sample_index


@dataclass(frozen=True)
class HyperParams:
    """Confidence level, accuracy target and the unit constants of the O(.) schedules."""

    delta: float = 0.05
    eps_u: float = 0.15
    c_lambda: float = 1.0
    c_zeta: float = 1.0
    c_alpha: float = 1.0
    c_B: float = 1.0
    max_iterations: int = 2000
    planner_rounds: int = 10
    planner_tol: float = 1e-9

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise InputError(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("eps_u", "c_lambda", "c_zeta", "c_alpha", "c_B", "planner_tol"):
            if not getattr(self, name) > 0.0:
                raise InputError(f"{name} must be positive")
        for name in ("max_iterations", "planner_rounds"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InputError(f"{name} must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "HyperParams":
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SchemaError(f"unknown hyperparameter keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, InputError) as exc:
            raise SchemaError(f"invalid hyperparameters: {exc}") from exc


class ScheduleDims(NamedTuple):
    d: int
    K: int
    T: int
    H: int
    n_phi: int
    n_psi: int


@dataclass(frozen=True)
class ScheduleValues:
    n: int
    lambda_n: float
    zeta_n: float
    alpha_tilde_n: float
    B: float

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _log_class_size(n: int, dims: ScheduleDims, delta: float) -> float:
    # ln(2 |Phi| |Psi|^T n H / delta) with the |Psi|^T factor kept in log space
    return math.log(2.0 * dims.n_phi * n * dims.H / delta) + dims.T * math.log(dims.n_psi)


def schedule(n: int, dims: ScheduleDims, hyper: HyperParams) -> ScheduleValues:
    """Regulariser, MLE radius, bonus scale and bonus cap at iteration ``n``."""
    if n < 1:
        raise InputError("iteration index n must be >= 1")
    dims = ScheduleDims(*dims)
    log_f = _log_class_size(n, dims, hyper.delta)
    lam = hyper.c_lambda * dims.d * math.log(dims.n_phi * n * dims.T * dims.H / hyper.delta)
    zeta = hyper.c_zeta * 2.0 * log_f / n
    alpha = hyper.c_alpha * math.sqrt(2.0 * dims.K * log_f + lam * dims.d * dims.T)
    B = hyper.c_B * 2.0 * math.sqrt(dims.T + dims.K / dims.d**2)
    return ScheduleValues(n, lam, zeta, alpha, B)


# --- data collection -------------------------------------------------------------


class ExplorationDatasets:
    """Per-(task, step) exploration triples and covariance pairs.

    ``triples[t][h]`` holds ``(n, s, a, s')`` tuples from episode ``h`` of each
    iteration; ``pairs[t][h]`` holds ``(n, s, a)`` harvested at step ``h`` of
    episode ``h+1``, so it exists only for ``h < H-1``.  Count tables mirror the
    lists for vectorised likelihood and covariance computations.
    """

    def __init__(self, T: int, H: int, S: int, K: int) -> None:
        self.T, self.H, self.S, self.K = T, H, S, K
        self.triples: list[list[list[tuple[int, int, int, int]]]] = [[[] for _ in range(H)] for _ in range(T)]
        self.pairs: list[list[list[tuple[int, int, int]]]] = [[[] for _ in range(H - 1)] for _ in range(T)]
        self.triple_counts = np.zeros((T, H, S, K, S), dtype=np.int64)
        self.pair_counts = np.zeros((T, max(H - 1, 0), S, K), dtype=np.int64)
        self.iterations = 0

    def add_triple(self, t: int, h: int, n: int, s: int, a: int, s_next: int) -> None:
        self.triples[t][h].append((n, s, a, s_next))
        self.triple_counts[t, h, s, a, s_next] += 1

    def add_pair(self, t: int, h: int, n: int, s: int, a: int) -> None:
        self.pairs[t][h].append((n, s, a))
        self.pair_counts[t, h, s, a] += 1

    def triple_array(self, t: int, h: int) -> np.ndarray:
        """``(n, 3)`` array of ``(s, a, s')`` for task ``t``, step ``h``."""
        rows = self.triples[t][h]
        return np.array([r[1:] for r in rows], dtype=np.int64).reshape(len(rows), 3)

    def pair_array(self, t: int, h: int) -> np.ndarray:
        rows = self.pairs[t][h]
        return np.array([r[1:] for r in rows], dtype=np.int64).reshape(len(rows), 2)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dims": {"T": self.T, "H": self.H, "S": self.S, "K": self.K},
            "iterations": self.iterations,
            "triples": [[[list(r) for r in self.triples[t][h]] for h in range(self.H)] for t in range(self.T)],
            "pairs": [[[list(r) for r in self.pairs[t][h]] for h in range(self.H - 1)] for t in range(self.T)],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ExplorationDatasets":
        try:
            dims = doc["dims"]
            ds = cls(int(dims["T"]), int(dims["H"]), int(dims["S"]), int(dims["K"]))
            for t, per_t in enumerate(doc["triples"]):
                for h, rows in enumerate(per_t):
                    for n, s, a, s2 in rows:
                        ds.add_triple(t, h, int(n), int(s), int(a), int(s2))
            for t, per_t in enumerate(doc["pairs"]):
                for h, rows in enumerate(per_t):
                    for n, s, a in rows:
                        ds.add_pair(t, h, int(n), int(s), int(a))
            ds.iterations = int(doc["iterations"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise SchemaError(f"invalid exploration datasets: {exc}") from exc
        return ds


def collect_iteration(family: TaskFamily, policies: Sequence[Policy], n: int,
                      datasets: ExplorationDatasets, seed: int) -> ExplorationDatasets:
    """Run the ``T * H`` exploration episodes of iteration ``n`` (updates in place)."""
    if n < 1:
        raise InputError("iteration index n must be >= 1")
    if len(policies) != family.num_tasks:
        raise InputError("need one exploration policy per task")
    seed = check_seed(seed)
    H, S, K = family.shape
    for t, (mdp, policy) in enumerate(zip(family.tasks, policies)):
        if policy.shape != (H, S, K):
            raise InputError("exploration policy shape does not match the family")
        P, pi = mdp.kernel, policy.pi
        for e in range(H):
            rng = make_rng(seed, "collect", n, t, e)
            s = mdp.initial_state
            for k in range(e - 1):
                a = sample_index(pi[k, s], rng.random())
                s = sample_index(P[k, s, a], rng.random())
            if e >= 1:
                a_prev = int(rng.integers(K))
                datasets.add_pair(t, e - 1, n, s, a_prev)
                s = sample_index(P[e - 1, s, a_prev], rng.random())
            a = int(rng.integers(K))
            s_next = sample_index(P[e, s, a], rng.random())
            datasets.add_triple(t, e, n, s, a, s_next)
    datasets.iterations = max(datasets.iterations, n)
    return datasets


# --- joint MLE -------------------------------------------------------------------


def _task_log_likelihoods(counts: np.ndarray, kernels_h: np.ndarray) -> np.ndarray:
    """``LL[i, j, t]`` of step-``h`` counts ``(T,S,K,S)`` under every class pair."""
    positive = kernels_h > 0.0
    finite_log = np.log(np.where(positive, kernels_h, 1.0))
    ll = np.einsum("tsau,ijsau->ijt", counts, finite_log)
    eliminated = np.einsum("tsau,ijsau->ijt", (counts > 0).astype(np.int64), (~positive).astype(np.int64)) > 0
    return np.where(eliminated, -np.inf, ll)


def joint_log_likelihood(datasets: ExplorationDatasets, classes: ModelClass, h: int,
                         phi_index: int, mu_indices: Sequence[int]) -> float:
    """Total log-likelihood of step-``h`` data under one joint candidate."""
    ll = _task_log_likelihoods(datasets.triple_counts[:, h], classes.kernels[:, :, h])
    return float(sum(ll[phi_index, j, t] for t, j in enumerate(mu_indices)))


def joint_mle(datasets: ExplorationDatasets, classes: ModelClass, h: int) -> tuple[int, tuple[int, ...]]:
    """Joint maximum-likelihood ``(phi, mu^1..mu^T)`` for step ``h``.

    For a fixed feature candidate the per-task maximisations decouple, so the
    search costs ``|Phi| * T * |Psi|`` likelihood evaluations.  Ties resolve to
    the lowest indices.
    """
    if not 0 <= h < datasets.H:
        raise InputError(f"step {h} out of range")
    counts = datasets.triple_counts[:, h]
    if np.any(counts.reshape(datasets.T, -1).sum(axis=1) == 0):
        raise InputError("every task needs at least one record at this step")
    ll = _task_log_likelihoods(counts, classes.kernels[:, :, h])
    best_mu = ll.argmax(axis=1)                      # (n_phi, T)
    per_task = ll.max(axis=1)                        # (n_phi, T)
    scores = per_task.sum(axis=1)
    if not np.any(np.isfinite(scores)):
        raise MLEError(f"all candidates eliminated at step {h}: classes inconsistent with data")
    i = int(np.argmax(scores))
    return i, tuple(int(j) for j in best_mu[i])


# --- bonuses ---------------------------------------------------------------------


def bonus_from_counts(phi_h: np.ndarray, counts: np.ndarray, sched: ScheduleValues) -> tuple[np.ndarray, np.ndarray]:
    """``(U_h, b_h)`` from a pair-count table ``(S, K)``."""
    S, K, d = phi_h.shape
    U = np.einsum("sa,sad,sae->de", counts, phi_h, phi_h) + sched.lambda_n * np.eye(d)
    if not np.all(np.isfinite(U)):
        raise NumericalError("covariance matrix has non-finite entries")
    try:
        factor = linalg.cho_factor(U, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"covariance factorisation failed: {exc}") from exc
    feats = phi_h.reshape(S * K, d)
    quad = np.einsum("nd,dn->n", feats, linalg.cho_solve(factor, feats.T)).reshape(S, K)
    bonus = np.minimum(sched.alpha_tilde_n * np.sqrt(np.clip(quad, 0.0, None)), sched.B)
    return U, bonus


def covariance_and_bonus(phi_h: np.ndarray, pairs: Sequence[tuple[int, int]],
                         sched: ScheduleValues) -> tuple[np.ndarray, np.ndarray]:
    """Empirical covariance ``sum phi phi^T + lambda_n I`` and clipped elliptical bonus."""
    phi_h = np.asarray(phi_h, dtype=float)
    S, K, _ = phi_h.shape
    counts = np.zeros((S, K))
    for s, a in pairs:
        counts[s, a] += 1
    return bonus_from_counts(phi_h, counts, sched)


# --- PCV and planning ------------------------------------------------------------


def _as_kernels(models: Sequence[TabularLowRankMdp | np.ndarray]) -> list[np.ndarray]:
    return [m.kernel if isinstance(m, TabularLowRankMdp) else np.asarray(m) for m in models]


def pcv_terms(models: Sequence[TabularLowRankMdp], bonuses: np.ndarray, policies: Sequence[Policy | np.ndarray],
              initial_state: int | None = None) -> np.ndarray:
    """``x[h, t]``: expected step-``h`` bonus of task ``t`` under its model and policy."""
    kernels = _as_kernels(models)
    bonuses = np.asarray(bonuses, dtype=float)
    T = len(kernels)
    if bonuses.ndim != 4 or bonuses.shape[0] != T or len(policies) != T:
        raise InputError("bonuses must be (T, H-1, S, K) with one model and policy per task")
    if initial_state is None:
        initial_state = models[0].initial_state if isinstance(models[0], TabularLowRankMdp) else 0
    Hm1 = bonuses.shape[1]
    x = np.zeros((Hm1, T))
    for t in range(T):
        pi = policies[t].pi if isinstance(policies[t], Policy) else np.asarray(policies[t])
        if pi.shape != kernels[t].shape[:3] or bonuses.shape[1:] != (kernels[t].shape[0] - 1, *pi.shape[1:]):
            raise InputError("shape mismatch between models, bonuses and policies")
        occ = occupancy_kernel(kernels[t], pi, initial_state)
        x[:, t] = np.einsum("hsa,hsa->h", occ[:Hm1], bonuses[t])
    return x


def pcv_from_terms(x: np.ndarray) -> float:
    return float(np.sqrt((x**2).sum(axis=1)).sum())


def pcv(models: Sequence[TabularLowRankMdp], bonuses: np.ndarray, policies: Sequence[Policy],
        initial_state: int | None = None) -> float:
    """Pseudo cumulative value ``sum_h sqrt(sum_t x_{h,t}^2)``."""
    return pcv_from_terms(pcv_terms(models, bonuses, policies, initial_state))


class ExplorationPlan(NamedTuple):
    policies: tuple[Policy, ...]
    pcv: float
    history: tuple[float, ...]


def _greedy_policies(kernels: list[np.ndarray], bonuses: np.ndarray, weights: np.ndarray) -> list[np.ndarray]:
    out = []
    for t, P in enumerate(kernels):
        H, S, K, _ = P.shape
        reward = np.zeros((H, S, K))
        reward[: H - 1] = weights[:, t, None, None] * bonuses[t]
        _, _, actions = backward_induction(P, reward)
        out.append(np.eye(K)[actions])
    return out


def plan_exploration(models: Sequence[TabularLowRankMdp], bonuses: np.ndarray, hyper: HyperParams,
                     initial_state: int | None = None) -> ExplorationPlan:
    """Maximise PCV by repeated linearisation.

    PCV is convex in the per-task expected bonuses, so each round maximises its
    supporting hyperplane exactly with one backward induction per task; the best
    iterate is kept, making accepted values nondecreasing.
    """
    kernels = _as_kernels(models)
    bonuses = np.asarray(bonuses, dtype=float)
    T = len(kernels)
    if initial_state is None:
        initial_state = models[0].initial_state if isinstance(models[0], TabularLowRankMdp) else 0
    weights = np.ones((bonuses.shape[1], T))
    current = _greedy_policies(kernels, bonuses, weights)
    x = pcv_terms(kernels, bonuses, current, initial_state)
    best_pis, best_val = current, pcv_from_terms(x)
    history = [best_val]
    for _ in range(hyper.planner_rounds):
        weights = x / np.sqrt((x**2).sum(axis=1, keepdims=True) + 1e-12)
        candidate = _greedy_policies(kernels, bonuses, weights)
        x = pcv_terms(kernels, bonuses, candidate, initial_state)
        value = pcv_from_terms(x)
        if value > best_val:
            improvement = value - best_val
            best_pis, best_val = candidate, value
            history.append(value)
            if improvement < hyper.planner_tol:
                break
        else:
            break
    return ExplorationPlan(tuple(Policy(p) for p in best_pis), best_val, tuple(history))


def check_termination(pcv_value: float, sched: ScheduleValues, T: int, K: int, eps_u: float) -> bool:
    """``2 PCV + 2 sqrt(K T zeta_n) <= T eps_u``."""
    return 2.0 * pcv_value + 2.0 * math.sqrt(K * T * sched.zeta_n) <= T * eps_u


def plan_with_reward(P_hat: TabularLowRankMdp, reward: RewardTable) -> Policy:
    """Deterministic optimal policy for ``reward`` under the estimated model."""
    if P_hat.shape != reward.shape:
        raise InputError("reward shape does not match the model")
    _, _, actions = backward_induction(P_hat.kernel, reward.r)
    return Policy.deterministic(actions, P_hat.num_actions)


# --- the main loop ---------------------------------------------------------------


@dataclass
class LearnedRepresentation:
    """Output of REFUEL: learned features, per-task measures and the run trace."""

    phi_hat: np.ndarray
    mu_hats: np.ndarray
    phi_indices: tuple[int, ...]
    mu_indices: tuple[tuple[int, ...], ...]
    n_u: int
    terminated: bool
    pcv_history: list[float]
    schedule_history: list[ScheduleValues]
    hyper: HyperParams
    seed: int
    initial_state: int = 0
    datasets: ExplorationDatasets | None = field(default=None, repr=False)

    @property
    def num_tasks(self) -> int:
        return self.mu_hats.shape[0]

    def model(self, t: int) -> TabularLowRankMdp:
        return TabularLowRankMdp(self.phi_hat, self.mu_hats[t], self.initial_state)

    def models(self) -> list[TabularLowRankMdp]:
        return [self.model(t) for t in range(self.num_tasks)]

    def to_dict(self) -> dict[str, Any]:
        H, S, K, d = self.phi_hat.shape
        return {
            "dims": {"H": H, "S": S, "K": K, "d": d, "T": self.num_tasks},
            "initial_state": self.initial_state,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "n_u": self.n_u,
            "terminated": self.terminated,
            "phi_indices": list(self.phi_indices),
            "mu_indices": [list(m) for m in self.mu_indices],
            "phi_hat": self.phi_hat,
            "mu_hats": self.mu_hats,
            "pcv_history": list(self.pcv_history),
            "schedule_history": [s.to_dict() for s in self.schedule_history],
            "datasets": None if self.datasets is None else self.datasets.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "LearnedRepresentation":
        try:
            dims = doc["dims"]
            H, S, K, d, T = (int(dims[k]) for k in ("H", "S", "K", "d", "T"))
            learned = cls(
                phi_hat=ser.as_array(doc["phi_hat"], (H, S, K, d), name="phi_hat"),
                mu_hats=ser.as_array(doc["mu_hats"], (T, H, S, d), name="mu_hats"),
                phi_indices=tuple(int(i) for i in doc["phi_indices"]),
                mu_indices=tuple(tuple(int(j) for j in m) for m in doc["mu_indices"]),
                n_u=int(doc["n_u"]),
                terminated=bool(doc["terminated"]),
                pcv_history=[float(v) for v in doc["pcv_history"]],
                schedule_history=[ScheduleValues(**s) for s in doc["schedule_history"]],
                hyper=HyperParams.from_dict(doc["hyper"]),
                seed=int(doc["seed"]),
                initial_state=int(doc["initial_state"]),
                datasets=None if doc.get("datasets") is None else ExplorationDatasets.from_dict(doc["datasets"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid learned representation: {exc}") from exc
        try:
            learned.models()
        except InputError as exc:
            raise SchemaError(f"invalid learned representation: {exc}") from exc
        return learned


@dataclass
class IterationState:
    n: int
    sched: ScheduleValues
    phi_indices: tuple[int, ...]
    mu_indices: tuple[tuple[int, ...], ...]
    phi_hat: np.ndarray
    mu_hats: np.ndarray
    bonuses: np.ndarray
    plan: ExplorationPlan
    terminated: bool


def schedule_dims(family: TaskFamily, classes: ModelClass) -> ScheduleDims:
    H, S, K = family.shape
    return ScheduleDims(classes.Phi.shape[-1], K, family.num_tasks, H, *classes.sizes)


def iterate_refuel(family: TaskFamily, classes: ModelClass, hyper: HyperParams, seed: int,
                   datasets: ExplorationDatasets | None = None) -> Iterator[IterationState]:
    """Yield the state after each REFUEL iteration, up to ``hyper.max_iterations``."""
    seed = check_seed(seed)
    H, S, K = family.shape
    T = family.num_tasks
    if classes.Phi.shape[1:4] != (H, S, K):
        raise InputError("model class dimensions do not match the family")
    dims = schedule_dims(family, classes)
    if datasets is None:
        datasets = ExplorationDatasets(T, H, S, K)
    policies: Sequence[Policy] = [Policy.uniform(H, S, K)] * T
    for n in range(1, hyper.max_iterations + 1):
        collect_iteration(family, policies, n, datasets, seed)
        sched = schedule(n, dims, hyper)
        phi_idx, mu_idx = [], []
        for h in range(H):
            i, js = joint_mle(datasets, classes, h)
            phi_idx.append(i)
            mu_idx.append(js)
        phi_hat = np.stack([classes.Phi[i, h] for h, i in enumerate(phi_idx)])
        mu_hats = np.stack([np.stack([classes.Psi[mu_idx[h][t], h] for h in range(H)]) for t in range(T)])
        models = [TabularLowRankMdp(phi_hat, mu_hats[t], family.initial_state) for t in range(T)]
        bonuses = np.zeros((T, H - 1, S, K))
        for t in range(T):
            for h in range(H - 1):
                _, bonuses[t, h] = bonus_from_counts(phi_hat[h], datasets.pair_counts[t, h], sched)
        plan = plan_exploration(models, bonuses, hyper, family.initial_state)
        done = check_termination(plan.pcv, sched, T, K, hyper.eps_u)
        yield IterationState(n, sched, tuple(phi_idx), tuple(mu_idx), phi_hat, mu_hats, bonuses, plan, done)
        if done:
            return
        policies = plan.policies


def run_refuel(family: TaskFamily, classes: ModelClass, hyper: HyperParams, seed: int) -> LearnedRepresentation:
    """Run REFUEL to termination or until the iteration budget is spent."""
    H, S, K = family.shape
    datasets = ExplorationDatasets(family.num_tasks, H, S, K)
    pcv_history: list[float] = []
    schedules: list[ScheduleValues] = []
    state = None
    for state in iterate_refuel(family, classes, hyper, seed, datasets):
        pcv_history.append(state.plan.pcv)
        schedules.append(state.sched)
    assert state is not None
    return LearnedRepresentation(
        phi_hat=state.phi_hat,
        mu_hats=state.mu_hats,
        phi_indices=state.phi_indices,
        mu_indices=state.mu_indices,
        n_u=state.n,
        terminated=state.terminated,
        pcv_history=pcv_history,
        schedule_history=schedules,
        hyper=hyper,
        seed=seed,
        initial_state=family.initial_state,
        datasets=datasets,
    )


def save_learned(path, learned: LearnedRepresentation) -> None:
    ser.save_document(path, "learned", learned.to_dict())


def load_learned(path) -> LearnedRepresentation:
    return LearnedRepresentation.from_dict(ser.load_document(path, "learned"))


def iteration_rows(learned: LearnedRepresentation) -> list[dict[str, Any]]:
    """Per-iteration CSV rows: n, pcv, zeta_n, lambda_n, alpha_tilde_n, terminated."""
    rows = []
    last = len(learned.pcv_history)
    for k, (value, sched) in enumerate(zip(learned.pcv_history, learned.schedule_history), start=1):
        rows.append({
            "n": sched.n,
            "pcv": value,
            "zeta_n": sched.zeta_n,
            "lambda_n": sched.lambda_n,
            "alpha_tilde_n": sched.alpha_tilde_n,
            "terminated": int(learned.terminated and k == last),
        })
    return rows
