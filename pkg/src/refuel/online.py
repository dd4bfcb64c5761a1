"""Optimistic least-squares value iteration on the downstream task."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import serialization as ser
from .errors import InputError, NumericalError, SchemaError
from .mdp import Policy, RewardTable, TabularLowRankMdp, evaluate_kernel, optimal_dp
from .offline import count_regression
from .rng import check_seed, make_rng, sample_index


@dataclass(frozen=True)
class OnlineConfig:
    lam: float = 1.0
    c_beta: float = 1.0
    delta: float = 0.05
    xi_down: float = 0.0
    p: int = 1
    n_episodes: int = 500

    def __post_init__(self) -> None:
        if not (self.lam > 0 and self.c_beta > 0):
            raise InputError("lam and c_beta must be positive")
        if not 0.0 < self.delta < 1.0:
            raise InputError("delta must lie in (0, 1)")
        if not (self.xi_down >= 0 and math.isfinite(self.xi_down)):
            raise InputError("xi_down must be a finite nonnegative number")
        for name in ("p", "n_episodes"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise InputError(f"{name} must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "OnlineConfig":
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SchemaError(f"unknown online keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, InputError) as exc:
            raise SchemaError(f"invalid online config: {exc}") from exc


def optimism_beta(config: OnlineConfig, d: int, H: int, n: int) -> float:
    """``c_beta (d sqrt(iota_n) + sqrt(n d) xi_down + sqrt(p ln n))``."""
    iota = math.log(2.0 * config.p * d * n * H * max(config.xi_down, 1.0) / config.delta)
    return config.c_beta * (d * math.sqrt(iota) + math.sqrt(n * d) * config.xi_down
                            + math.sqrt(config.p * math.log(n)))


def optimistic_q_backup(phi_h: np.ndarray, counts: np.ndarray, next_values: np.ndarray, reward_row: np.ndarray,
                        beta: float, lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One optimistic backup from history counts ``N[s, a, s']``.

    Returns ``(Q, w, quad)`` with ``Q = clip(r + phi^T w + beta sqrt(quad), 0, 1)``
    and ``quad = phi^T Lambda^{-1} phi``.
    """
    phi_h = np.asarray(phi_h, dtype=float)
    if counts.shape != (*phi_h.shape[:2], phi_h.shape[0]) or reward_row.shape != phi_h.shape[:2]:
        raise InputError("counts, rewards and features disagree on (S, K)")
    w, quad = count_regression(phi_h, counts, next_values, lam)
    q = np.clip(reward_row + phi_h @ w + beta * np.sqrt(quad), 0.0, 1.0)
    return q, w, quad


@dataclass
class OnlineRunRecord:
    """Episode-level trace of one LSVI-UCB run."""

    states: np.ndarray       # (N, H+1)
    actions: np.ndarray      # (N, H)
    rewards: np.ndarray      # (N, H)
    policies: np.ndarray     # (N, H, S) greedy actions of pi^n
    v1: np.ndarray           # (N,) optimistic V^n_1(s_1)
    betas: np.ndarray        # (N,)
    potentials: np.ndarray   # (N, H) phi^T (Lambda_h^n)^{-1} phi at the visited pair
    q_min: float
    q_max: float
    lam: float
    dim: int
    num_actions: int
    seed: int

    @property
    def num_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def policy(self, n: int) -> Policy:
        return Policy.deterministic(self.policies[n], self.num_actions)


def run_lsvi_ucb(mdp: TabularLowRankMdp, reward: RewardTable, phi_hat: np.ndarray, config: OnlineConfig,
                 seed: int) -> OnlineRunRecord:
    """``config.n_episodes`` episodes of optimistic planning and execution."""
    seed = check_seed(seed)
    phi_hat = np.asarray(phi_hat, dtype=float)
    H, S, K = mdp.shape
    if phi_hat.shape[:3] != (H, S, K) or reward.shape != (H, S, K):
        raise InputError("features and reward must match the MDP shape")
    d = phi_hat.shape[3]
    N = config.n_episodes
    counts = np.zeros((H, S, K, S), dtype=np.int64)
    states = np.zeros((N, H + 1), dtype=np.int64)
    actions = np.zeros((N, H), dtype=np.int64)
    rewards = np.zeros((N, H))
    policies = np.zeros((N, H, S), dtype=np.int64)
    v1 = np.zeros(N)
    betas = np.zeros(N)
    potentials = np.zeros((N, H))
    q_min, q_max = math.inf, -math.inf
    for n in range(N):
        beta = optimism_beta(config, d, H, n + 1)
        V = np.zeros((H + 1, S))
        quads = np.zeros((H, S, K))
        for h in range(H - 1, -1, -1):
            try:
                q, _, quads[h] = optimistic_q_backup(phi_hat[h], counts[h], V[h + 1], reward.r[h], beta, config.lam)
            except NumericalError as exc:
                raise NumericalError(f"episode {n + 1}, step {h}: {exc}") from exc
            V[h] = q.max(axis=1)
            policies[n, h] = q.argmax(axis=1)
            q_min, q_max = min(q_min, float(q.min())), max(q_max, float(q.max()))
        betas[n], v1[n] = beta, V[0, mdp.initial_state]
        rng = make_rng(seed, "online", n)
        s = mdp.initial_state
        states[n, 0] = s
        for h in range(H):
            a = int(policies[n, h, s])
            s_next = sample_index(mdp.kernel[h, s, a], rng.random())
            actions[n, h], rewards[n, h], states[n, h + 1] = a, reward.r[h, s, a], s_next
            potentials[n, h] = quads[h, s, a]
            counts[h, s, a, s_next] += 1
            s = s_next
    return OnlineRunRecord(states, actions, rewards, policies, v1, betas, potentials, q_min, q_max,
                           config.lam, d, K, seed)


def policy_values(record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable) -> np.ndarray:
    """Exact ``V^{pi^n}_1(s_1)`` for every episode policy."""
    if record.policies.shape[1:] != mdp.shape[:2]:
        raise InputError("record does not match the MDP")
    K = mdp.num_actions
    eye = np.eye(K)
    return np.array([evaluate_kernel(mdp.kernel, reward.r, eye[acts])[0, mdp.initial_state]
                     for acts in record.policies])


def mixture_value(record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable) -> float:
    """Exact value of the uniform mixture over the episode policies."""
    if record.num_episodes == 0:
        raise InputError("record is empty")
    return float(policy_values(record, mdp, reward).mean())


def regret_curve(record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable) -> np.ndarray:
    """Cumulative pseudo-regret ``sum_{k<=n} (V* - V^{pi^k})``."""
    v_star, _ = optimal_dp(mdp, reward)
    return np.cumsum(v_star - policy_values(record, mdp, reward))


def episode_rows(record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable) -> list[dict[str, Any]]:
    regret = regret_curve(record, mdp, reward)
    returns = record.returns
    return [{"n": n + 1, "return": float(returns[n]), "V1": float(record.v1[n]), "regret_to_date": float(regret[n])}
            for n in range(record.num_episodes)]


def record_summary(record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable,
                   config: OnlineConfig) -> dict[str, Any]:
    """Body of the ``online_report`` document."""
    v_star, _ = optimal_dp(mdp, reward)
    values = policy_values(record, mdp, reward)
    H = mdp.horizon
    optimistic = record.v1 + 2.0 * H * config.xi_down >= v_star - 1e-12
    return {
        "config": config.to_dict(),
        "seed": record.seed,
        "episodes": record.num_episodes,
        "v_star": v_star,
        "mixture_value": float(values.mean()),
        "mixture_gap": float(v_star - values.mean()),
        "total_regret": float((v_star - values).sum()),
        "optimism_rate": float(optimistic.mean()),
        "q_range": [record.q_min, record.q_max],
        "potential_sums": record.potentials.sum(axis=0).tolist(),
    }


def save_report(path, record: OnlineRunRecord, mdp: TabularLowRankMdp, reward: RewardTable,
                config: OnlineConfig) -> None:
    ser.save_document(path, "online_report", record_summary(record, mdp, reward, config))


def elliptical_summary(record: OnlineRunRecord) -> list[dict[str, Any]]:
    """Per-step realized potential sum against ``2 d ln(1 + N / (d lam))``."""
    N, d, lam = record.num_episodes, record.dim, record.lam
    bound = 2.0 * d * math.log(1.0 + N / (d * lam))
    sums = record.potentials.sum(axis=0)
    return [{"h": h, "lhs": float(v), "bound": bound, "ok": bool(v <= bound + 1e-9)} for h, v in enumerate(sums)]
