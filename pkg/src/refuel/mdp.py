"""Finite episodic low-rank MDPs and exact dynamic programming.

Indexing is zero-based throughout: steps ``h = 0..H-1``, states ``0..S-1``,
actions ``0..K-1``.  Tables are dense ``numpy`` arrays:

* ``phi``    -- ``(H, S, K, d)``, each row on the probability simplex
* ``mu``     -- ``(H, S, d)``, each latent column ``mu[h, :, j]`` a distribution
* ``kernel`` -- ``(H, S, K, S)``, ``kernel[h, s, a, s'] = <phi[h,s,a], mu[h,s']>``
* rewards / policies / occupancies -- ``(H, S, K)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from . import serialization as ser
from .errors import InputError, SchemaError
from .rng import check_seed, make_rng, sample_index, sample_rows

VALIDATION_TOL = 1e-6
ROW_TOL = 1e-9
CLAMP_TOL = 1e-12


def _check_index(name: str, value: int, upper: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InputError(f"{name} must be an integer index, got {value!r}")
    if not 0 <= int(value) < upper:
        raise InputError(f"{name}={value} out of range [0, {upper})")
    return int(value)


def low_rank_kernel(phi: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``<phi_h(s,a), mu_h(s')>`` with tiny negatives clamped and rows renormalised."""
    # contiguous inputs fix the summation order, so reloaded models match bit for bit
    raw = np.einsum("hsad,htd->hsat", np.ascontiguousarray(phi), np.ascontiguousarray(mu))
    if raw.min(initial=0.0) < -CLAMP_TOL:
        raise InputError(f"kernel has negative entry {raw.min():.3e} beyond clamp tolerance")
    raw = np.clip(raw, 0.0, None)
    sums = raw.sum(axis=-1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > VALIDATION_TOL):
        raise InputError("kernel rows do not sum to one")
    return raw / sums


@dataclass(frozen=True, eq=False)
class TabularLowRankMdp:
    """Episodic MDP whose step-``h`` kernel factors through ``phi`` and ``mu``."""

    phi: np.ndarray
    mu: np.ndarray
    initial_state: int = 0
    kernel: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        phi = np.array(self.phi, dtype=float)
        mu = np.array(self.mu, dtype=float)
        if phi.ndim != 4 or mu.ndim != 3:
            raise InputError("phi must be (H,S,K,d) and mu must be (H,S,d)")
        H, S, K, d = phi.shape
        if min(H, S, K, d) < 1:
            raise InputError("all MDP dimensions must be positive")
        if mu.shape != (H, S, d):
            raise InputError(f"mu shape {mu.shape} does not match phi shape {phi.shape}")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(mu))):
            raise InputError("phi and mu must be finite")
        if phi.min() < -VALIDATION_TOL or np.any(np.abs(phi.sum(-1) - 1.0) > VALIDATION_TOL):
            raise InputError("every phi row must lie on the probability simplex")
        if mu.min() < -VALIDATION_TOL or np.any(np.abs(mu.sum(1) - 1.0) > VALIDATION_TOL):
            raise InputError("every latent column of mu must be a distribution over states")
        _check_index("initial_state", self.initial_state, S)
        phi.setflags(write=False)
        mu.setflags(write=False)
        kernel = low_rank_kernel(phi, mu)
        kernel.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "initial_state", int(self.initial_state))
        object.__setattr__(self, "kernel", kernel)

    @property
    def horizon(self) -> int:
        return self.phi.shape[0]

    @property
    def num_states(self) -> int:
        return self.phi.shape[1]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[2]

    @property
    def dim(self) -> int:
        return self.phi.shape[3]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.horizon, self.num_states, self.num_actions

    @classmethod
    def from_kernel(cls, kernel: np.ndarray, initial_state: int = 0) -> "TabularLowRankMdp":
        """Exact low-rank representation of an arbitrary kernel via one-hot features."""
        kernel = np.asarray(kernel, dtype=float)
        H, S, K, S2 = kernel.shape
        if S2 != S:
            raise InputError("kernel must have shape (H,S,K,S)")
        phi = np.zeros((H, S, K, S * K))
        idx = np.arange(S * K).reshape(S, K)
        for h in range(H):
            phi[h, np.arange(S)[:, None], np.arange(K)[None, :], idx] = 1.0
        mu = kernel.reshape(H, S * K, S).transpose(0, 2, 1)
        return cls(phi, mu, initial_state)

    def to_dict(self) -> dict[str, Any]:
        H, S, K, d = self.phi.shape
        return {
            "dims": {"H": H, "S": S, "K": K, "d": d},
            "initial_state": self.initial_state,
            "phi": self.phi,
            "mu": self.mu,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TabularLowRankMdp":
        dims = ser.require(doc, "dims")
        try:
            H, S, K, d = (int(dims[k]) for k in ("H", "S", "K", "d"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad dims block: {exc}") from exc
        phi = ser.as_array(ser.require(doc, "phi"), (H, S, K, d), name="phi")
        mu = ser.as_array(ser.require(doc, "mu"), (H, S, d), name="mu")
        try:
            return cls(phi, mu, int(ser.require(doc, "initial_state")))
        except InputError as exc:
            raise SchemaError(f"invalid mdp: {exc}") from exc


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Per-step reward ``r[h, s, a]`` with ``sum_h max_{s,a} r_h <= 1``."""

    r: np.ndarray
    feature_dim: int = 0
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        r = np.array(self.r, dtype=float)
        if r.ndim != 3:
            raise InputError("reward table must have shape (H,S,K)")
        if not np.all(np.isfinite(r)) or r.min() < 0.0 or r.max() > 1.0:
            raise InputError("rewards must lie in [0, 1]")
        if r.reshape(r.shape[0], -1).max(axis=1).sum() > 1.0 + ROW_TOL:
            raise InputError("rewards violate sum_h max r_h <= 1")
        theta = np.array(self.theta, dtype=float).reshape(-1)
        r.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "feature_dim", int(self.feature_dim))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.r.shape  # type: ignore[return-value]

    @classmethod
    def zeros(cls, H: int, S: int, K: int) -> "RewardTable":
        return cls(np.zeros((H, S, K)))

    def to_dict(self) -> dict[str, Any]:
        H, S, K = self.r.shape
        return {"dims": {"H": H, "S": S, "K": K}, "feature_dim": self.feature_dim,
                "theta": self.theta, "r": self.r}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RewardTable":
        dims = ser.require(doc, "dims")
        try:
            H, S, K = (int(dims[k]) for k in ("H", "S", "K"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad dims block: {exc}") from exc
        p = int(ser.require(doc, "feature_dim"))
        r = ser.as_array(ser.require(doc, "r"), (H, S, K), name="r")
        theta = ser.as_array(ser.require(doc, "theta"), (len(doc["theta"]),), name="theta")
        try:
            return cls(r, p, theta)
        except InputError as exc:
            raise SchemaError(f"invalid reward: {exc}") from exc


@dataclass(frozen=True, eq=False)
class Policy:
    """Non-stationary stochastic policy ``pi[h, s, a]``."""

    pi: np.ndarray

    def __post_init__(self) -> None:
        pi = np.array(self.pi, dtype=float)
        if pi.ndim != 3:
            raise InputError("policy table must have shape (H,S,K)")
        if not np.all(np.isfinite(pi)) or pi.min() < 0.0:
            raise InputError("policy probabilities must be finite and nonnegative")
        if np.any(np.abs(pi.sum(-1) - 1.0) > ROW_TOL):
            raise InputError("policy rows must sum to one")
        pi.setflags(write=False)
        object.__setattr__(self, "pi", pi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pi.shape  # type: ignore[return-value]

    @classmethod
    def uniform(cls, H: int, S: int, K: int) -> "Policy":
        return cls(np.full((H, S, K), 1.0 / K))

    @classmethod
    def deterministic(cls, actions: np.ndarray, K: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(K)[actions])

    @classmethod
    def random(cls, H: int, S: int, K: int, seed: int, *path) -> "Policy":
        rng = make_rng(seed, "policy", *path)
        return cls(rng.dirichlet(np.ones(K), size=(H, S)))

    def is_deterministic(self) -> bool:
        return bool(np.all((self.pi == 0.0) | (self.pi == 1.0)))

    def greedy_actions(self) -> np.ndarray:
        return self.pi.argmax(axis=-1)

    def to_dict(self) -> dict[str, Any]:
        H, S, K = self.pi.shape
        return {"dims": {"H": H, "S": S, "K": K}, "pi": self.pi}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Policy":
        dims = ser.require(doc, "dims")
        try:
            H, S, K = (int(dims[k]) for k in ("H", "S", "K"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad dims block: {exc}") from exc
        try:
            return cls(ser.as_array(ser.require(doc, "pi"), (H, S, K), name="pi"))
        except InputError as exc:
            raise SchemaError(f"invalid policy: {exc}") from exc


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    occ: np.ndarray
    model_id: str = ""
    policy_id: str = ""


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    seed: int

    @property
    def states(self) -> list[int]:
        return [st.state for st in self.steps] + [self.steps[-1].next_state]

    @property
    def actions(self) -> list[int]:
        return [st.action for st in self.steps]

    @property
    def total_reward(self) -> float:
        return float(sum(st.reward for st in self.steps))


# --- kernel-level primitives -------------------------------------------------


def _shape_check(mdp: TabularLowRankMdp, *tables: tuple[str, tuple[int, ...]]) -> None:
    for name, shape in tables:
        if tuple(shape) != mdp.shape:
            raise InputError(f"{name} shape {tuple(shape)} does not match MDP shape {mdp.shape}")


def evaluate_kernel(kernel: np.ndarray, reward: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Policy values ``V[h, s]`` for ``h = 0..H`` (``V[H] = 0``)."""
    H, S, _, _ = kernel.shape
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q = reward[h] + kernel[h] @ V[h + 1]
        V[h] = np.einsum("sa,sa->s", pi[h], Q)
    return V


def backward_induction(kernel: np.ndarray, reward: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bellman optimality recursion; returns ``(V, Q, actions)``.

    ``V`` is ``(H+1, S)``, ``Q`` is ``(H, S, K)`` and ``actions`` is ``(H, S)``
    with ties broken toward the lowest action index.
    """
    H, S, K, _ = kernel.shape
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, K))
    actions = np.zeros((H, S), dtype=int)
    for h in range(H - 1, -1, -1):
        Q[h] = reward[h] + kernel[h] @ V[h + 1]
        actions[h] = Q[h].argmax(axis=1)
        V[h] = Q[h].max(axis=1)
    return V, Q, actions


def occupancy_kernel(kernel: np.ndarray, pi: np.ndarray, initial_state: int) -> np.ndarray:
    """Forward recursion for ``Pr(s_h = s, a_h = a)``, shape ``(H, S, K)``."""
    H, S, K, _ = kernel.shape
    occ = np.zeros((H, S, K))
    state = np.zeros(S)
    state[initial_state] = 1.0
    for h in range(H):
        occ[h] = state[:, None] * pi[h]
        if h + 1 < H:
            state = np.einsum("sa,sat->t", occ[h], kernel[h])
    return occ


# --- public operations --------------------------------------------------------


def transition_dist(mdp: TabularLowRankMdp, h: int, s: int, a: int) -> np.ndarray:
    """Next-state distribution ``P_h(. | s, a)``."""
    h = _check_index("h", h, mdp.horizon)
    s = _check_index("s", s, mdp.num_states)
    a = _check_index("a", a, mdp.num_actions)
    return mdp.kernel[h, s, a].copy()


def value_dp(mdp: TabularLowRankMdp, reward: RewardTable, policy: Policy) -> float:
    """Exact ``V^pi_1(s_1)`` by backward induction."""
    _shape_check(mdp, ("reward", reward.shape), ("policy", policy.shape))
    return float(evaluate_kernel(mdp.kernel, reward.r, policy.pi)[0, mdp.initial_state])


def optimal_dp(mdp: TabularLowRankMdp, reward: RewardTable) -> tuple[float, Policy]:
    """Optimal value at ``s_1`` and a deterministic optimal policy."""
    _shape_check(mdp, ("reward", reward.shape))
    V, _, actions = backward_induction(mdp.kernel, reward.r)
    return float(V[0, mdp.initial_state]), Policy.deterministic(actions, mdp.num_actions)


def occupancy(mdp: TabularLowRankMdp, policy: Policy, model_id: str = "", policy_id: str = "") -> OccupancyMeasure:
    _shape_check(mdp, ("policy", policy.shape))
    occ = occupancy_kernel(mdp.kernel, policy.pi, mdp.initial_state)
    return OccupancyMeasure(occ, model_id, policy_id)


def sample_trajectory(mdp: TabularLowRankMdp, reward: RewardTable, policy: Policy, seed: int) -> Trajectory:
    """One episode from ``s_1``; reproducible for equal seeds."""
    _shape_check(mdp, ("reward", reward.shape), ("policy", policy.shape))
    seed = check_seed(seed)
    rng = make_rng(seed, "trajectory")
    s = mdp.initial_state
    steps = []
    for h in range(mdp.horizon):
        a = sample_index(policy.pi[h, s], rng.random())
        s_next = sample_index(mdp.kernel[h, s, a], rng.random())
        steps.append(Step(s, a, float(reward.r[h, s, a]), s_next))
        s = s_next
    return Trajectory(tuple(steps), seed)


def rollout_batch(kernel: np.ndarray, pi: np.ndarray, initial_state: int, n: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised rollouts: ``states`` is ``(n, H+1)``, ``actions`` is ``(n, H)``."""
    H = kernel.shape[0]
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    states[:, 0] = initial_state
    for h in range(H):
        s = states[:, h]
        actions[:, h] = sample_rows(pi[h, s], rng.random(n))
        states[:, h + 1] = sample_rows(kernel[h, s, actions[:, h]], rng.random(n))
    return states, actions


def tv_distance(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray) -> float:
    """Total-variation distance ``0.5 * sum |p - q|``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise InputError(f"tv_distance needs equal-length vectors, got {p.shape} and {q.shape}")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6:
            raise InputError(f"{name} does not sum to one")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def tv_table(k1: np.ndarray, k2: np.ndarray) -> np.ndarray:
    """Row-wise TV distance between two kernels of identical shape."""
    return 0.5 * np.abs(k1 - k2).sum(axis=-1)


def simulation_residual(P1: TabularLowRankMdp, P2: TabularLowRankMdp, r1: RewardTable,
                        r2: RewardTable, policy: Policy) -> float:
    """``|LHS - RHS|`` of the simulation identity, both sides evaluated exactly.

    LHS is ``V^pi_{P1,r1} - V^pi_{P2,r2}``; RHS sums, under the occupancy of
    ``(P2, pi)``, the reward gap plus ``(P1_h - P2_h) V^pi_{h+1,P1,r1}``.
    """
    if P1.shape != P2.shape:
        raise InputError("models must have the same shape")
    if P1.initial_state != P2.initial_state:
        raise InputError("models must share the initial state")
    _shape_check(P1, ("r1", r1.shape), ("r2", r2.shape), ("policy", policy.shape))
    V1 = evaluate_kernel(P1.kernel, r1.r, policy.pi)
    V2 = evaluate_kernel(P2.kernel, r2.r, policy.pi)
    lhs = V1[0, P1.initial_state] - V2[0, P2.initial_state]
    occ2 = occupancy_kernel(P2.kernel, policy.pi, P2.initial_state)
    rhs = 0.0
    for h in range(P1.horizon):
        shift = (P1.kernel[h] - P2.kernel[h]) @ V1[h + 1]
        rhs += float(np.sum(occ2[h] * (r1.r[h] - r2.r[h] + shift)))
    return float(abs(lhs - rhs))


# --- persistence --------------------------------------------------------------


def save_mdp(path, mdp: TabularLowRankMdp) -> None:
    ser.save_document(path, "mdp", mdp.to_dict())


def load_mdp(path) -> TabularLowRankMdp:
    return TabularLowRankMdp.from_dict(ser.load_document(path, "mdp"))


def save_reward(path, reward: RewardTable) -> None:
    ser.save_document(path, "reward", reward.to_dict())


def load_reward(path) -> RewardTable:
    return RewardTable.from_dict(ser.load_document(path, "reward"))


def save_policy(path, policy: Policy) -> None:
    ser.save_document(path, "policy", policy.to_dict())


def load_policy(path) -> Policy:
    return Policy.from_dict(ser.load_document(path, "policy"))
