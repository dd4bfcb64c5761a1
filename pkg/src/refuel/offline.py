"""Pessimistic value iteration on the downstream task from a fixed dataset."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np
from scipy import linalg

from . import serialization as ser
from .errors import InputError, NumericalError, SchemaError
from .mdp import Policy, RewardTable, TabularLowRankMdp, occupancy_kernel, rollout_batch
from .rng import check_seed, make_rng

DATASET_KIND = "offline_dataset"


@dataclass(frozen=True)
class PessimismConfig:
    lam: float = 1.0
    c_beta: float = 1.0
    delta: float = 0.05
    xi_down: float = 0.0
    p: int = 1

    def __post_init__(self) -> None:
        if not (self.lam > 0 and self.c_beta > 0):
            raise InputError("lam and c_beta must be positive")
        if not 0.0 < self.delta < 1.0:
            raise InputError("delta must lie in (0, 1)")
        if not (self.xi_down >= 0 and math.isfinite(self.xi_down)):
            raise InputError("xi_down must be a finite nonnegative number")
        if isinstance(self.p, bool) or not isinstance(self.p, int) or self.p < 1:
            raise InputError("p must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PessimismConfig":
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SchemaError(f"unknown pessimism keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, InputError) as exc:
            raise SchemaError(f"invalid pessimism config: {exc}") from exc


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """``N_off`` trajectories stored column-wise: ``states`` is ``(N, H+1)``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behavior_id: str
    seed: int

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if states.ndim != 2 or actions.shape != (states.shape[0], states.shape[1] - 1) or rewards.shape != actions.shape:
            raise InputError("inconsistent dataset arrays")
        for arr in (states, actions, rewards):
            arr.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def num_trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def initial_state(self) -> int:
        return int(self.states[0, 0])

    def __len__(self) -> int:
        return self.actions.size

    def step_counts(self, h: int, S: int, K: int) -> np.ndarray:
        """Transition counts ``N[s, a, s']`` at step ``h``."""
        counts = np.zeros((S, K, S), dtype=np.int64)
        np.add.at(counts, (self.states[:, h], self.actions[:, h], self.states[:, h + 1]), 1)
        return counts


def gen_offline_dataset(mdp: TabularLowRankMdp, reward: RewardTable, behavior: Policy, n_off: int,
                        seed: int) -> OfflineDataset:
    """``n_off`` independent behavior-policy rollouts on ``mdp``."""
    if n_off < 1:
        raise InputError("N_off must be >= 1")
    if reward.shape != mdp.shape or behavior.shape != mdp.shape:
        raise InputError("reward and behavior policy must match the MDP shape")
    seed = check_seed(seed)
    states, actions = rollout_batch(mdp.kernel, behavior.pi, mdp.initial_state, n_off, make_rng(seed, "offline"))
    steps = np.arange(mdp.horizon)
    rewards = reward.r[steps[None, :], states[:, :-1], actions]
    return OfflineDataset(states, actions, rewards, ser.content_hash(behavior.to_dict())[:16], seed)


def save_dataset(path, dataset: OfflineDataset) -> None:
    """NDJSON: a header line, then one ``{traj, h, s, a, r, s_next}`` object per record."""
    header = ser.document(DATASET_KIND, {"behavior_id": dataset.behavior_id, "seed": dataset.seed,
                                         "n_off": dataset.num_trajectories, "horizon": dataset.horizon})
    lines = [ser.dumps(header)]
    for i in range(dataset.num_trajectories):
        for h in range(dataset.horizon):
            lines.append(ser.dumps({
                "traj": i, "h": h, "s": int(dataset.states[i, h]), "a": int(dataset.actions[i, h]),
                "r": float(dataset.rewards[i, h]), "s_next": int(dataset.states[i, h + 1]),
            }))
    ser.write_text(path, "\n".join(lines) + "\n")


def load_dataset(path) -> OfflineDataset:
    lines = ser.read_text(path).splitlines()
    if not lines:
        raise SchemaError("empty dataset file")
    header = ser.parse_document(lines[0], DATASET_KIND)
    try:
        N, H = int(header["n_off"]), int(header["horizon"])
        if len(lines) - 1 != N * H:
            raise SchemaError(f"expected {N * H} records, found {len(lines) - 1}")
        states = np.zeros((N, H + 1), dtype=np.int64)
        actions = np.zeros((N, H), dtype=np.int64)
        rewards = np.zeros((N, H))
        for line in lines[1:]:
            rec = json.loads(line)
            i, h = int(rec["traj"]), int(rec["h"])
            states[i, h], actions[i, h], rewards[i, h] = int(rec["s"]), int(rec["a"]), float(rec["r"])
            states[i, h + 1] = int(rec["s_next"])
        return OfflineDataset(states, actions, rewards, str(header["behavior_id"]), int(header["seed"]))
    except (KeyError, TypeError, ValueError, IndexError, json.JSONDecodeError) as exc:
        raise SchemaError(f"corrupted dataset record: {exc}") from exc


# --- regression ----------------------------------------------------------------


def one_hot_features(H: int, S: int, K: int) -> np.ndarray:
    """Tabular features ``e_{(s,a)}`` of dimension ``S*K``."""
    return np.broadcast_to(np.eye(S * K).reshape(S, K, S * K), (H, S, K, S * K)).copy()


def _factor(gram: np.ndarray, where: str) -> tuple:
    if not np.all(np.isfinite(gram)):
        raise NumericalError(f"non-finite Gram matrix {where}")
    try:
        return linalg.cho_factor(gram, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"Gram factorisation failed {where}: {exc}") from exc


def ridge_weights(features: np.ndarray, targets: np.ndarray, lam: float) -> np.ndarray:
    """``(F^T F + lam I)^{-1} F^T y`` for record features ``F`` of shape ``(n, d)``."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or targets.shape != (features.shape[0],):
        raise InputError("features must be (n, d) with one target per row")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
        raise NumericalError("non-finite regression inputs")
    d = features.shape[1]
    factor = _factor(features.T @ features + lam * np.eye(d), "in ridge regression")
    return linalg.cho_solve(factor, features.T @ targets)


def normal_equation_residual(features: np.ndarray, targets: np.ndarray, lam: float, w: np.ndarray) -> float:
    """``||Lambda w - F^T y||_2``."""
    features = np.asarray(features, dtype=float)
    gram = features.T @ features + lam * np.eye(features.shape[1])
    return float(np.linalg.norm(gram @ w - features.T @ np.asarray(targets, dtype=float)))


def count_regression(phi_h: np.ndarray, counts: np.ndarray, next_values: np.ndarray, lam: float,
                     where: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Ridge weights and ``phi^T Lambda^{-1} phi`` table from counts ``N[s, a, s']``.

    Identical to :func:`ridge_weights` on the expanded record list, since every
    record with the same ``(s, a, s')`` contributes the same row.
    """
    S, K, d = phi_h.shape
    visits = counts.sum(axis=2)
    gram = np.einsum("sa,sad,sae->de", visits, phi_h, phi_h) + lam * np.eye(d)
    rhs = np.einsum("sau,sad,u->d", counts, phi_h, next_values)
    factor = _factor(gram, where)
    w = linalg.cho_solve(factor, rhs)
    feats = phi_h.reshape(S * K, d)
    quad = np.einsum("nd,dn->n", feats, linalg.cho_solve(factor, feats.T)).reshape(S, K)
    return w, np.clip(quad, 0.0, None)


# --- PEVI ------------------------------------------------------------------------


def pessimism_iota(config: PessimismConfig, d: int, H: int, n: int) -> float:
    return math.log(2.0 * config.p * d * H * n * max(config.xi_down, 1.0) / config.delta)


def pessimism_beta(config: PessimismConfig, d: int, H: int, n: int) -> float:
    """``c_beta (d sqrt(iota) + sqrt(d n) xi_down + sqrt(p ln n))``."""
    iota = pessimism_iota(config, d, H, n)
    return config.c_beta * (d * math.sqrt(iota) + math.sqrt(d * n) * config.xi_down
                            + math.sqrt(config.p * math.log(n)))


@dataclass
class PeviDiagnostics:
    beta: float
    iota: float
    v1: float
    gamma_min: list[float]
    gamma_mean: list[float]
    gamma_max: list[float]
    q_hat: np.ndarray
    q_plain: np.ndarray
    weights: np.ndarray

    def summary(self) -> dict[str, Any]:
        return {
            "beta": self.beta,
            "iota": self.iota,
            "v1_hat": self.v1,
            "gamma_min": self.gamma_min,
            "gamma_mean": self.gamma_mean,
            "gamma_max": self.gamma_max,
        }


def pevi(dataset: OfflineDataset, phi_hat: np.ndarray, reward: RewardTable, config: PessimismConfig,
         beta: float | None = None) -> tuple[Policy, PeviDiagnostics]:
    """Greedy policy of the pessimistic backup ``clip(r + phi^T w - Gamma, 0, 1)``.

    ``beta`` overrides the schedule value, which is handy for sensitivity runs.
    """
    phi_hat = np.asarray(phi_hat, dtype=float)
    H, S, K, d = phi_hat.shape
    if len(dataset) == 0:
        raise InputError("dataset is empty")
    if reward.shape != (H, S, K) or dataset.horizon != H:
        raise InputError("reward, features and dataset disagree on (H, S, K)")
    N = dataset.num_trajectories
    iota = pessimism_iota(config, d, H, N)
    if beta is None:
        beta = pessimism_beta(config, d, H, N)
    V = np.zeros((H + 1, S))
    q_hat = np.zeros((H, S, K))
    q_plain = np.zeros((H, S, K))
    weights = np.zeros((H, d))
    g_min, g_mean, g_max = [0.0] * H, [0.0] * H, [0.0] * H
    for h in range(H - 1, -1, -1):
        counts = dataset.step_counts(h, S, K)
        w, quad = count_regression(phi_hat[h], counts, V[h + 1], config.lam, where=f"at step {h}")
        gamma = config.xi_down + beta * np.sqrt(quad)
        estimate = reward.r[h] + phi_hat[h] @ w
        q_plain[h] = np.clip(estimate, 0.0, 1.0)
        q_hat[h] = np.clip(estimate - gamma, 0.0, 1.0)
        V[h] = q_hat[h].max(axis=1)
        weights[h] = w
        g_min[h], g_mean[h], g_max[h] = float(gamma.min()), float(gamma.mean()), float(gamma.max())
    actions = q_hat.argmax(axis=2)
    diag = PeviDiagnostics(float(beta), iota, float(V[0, dataset.initial_state]), g_min, g_mean, g_max,
                           q_hat, q_plain, weights)
    return Policy.deterministic(actions, K), diag


def feature_coverage(behavior: Policy, mdp: TabularLowRankMdp, phi_hat: np.ndarray) -> float:
    """``min_h lambda_min(E_rho[phi phi^T])`` from the exact behavior occupancy."""
    phi_hat = np.asarray(phi_hat, dtype=float)
    if phi_hat.shape[:3] != mdp.shape or behavior.shape != mdp.shape:
        raise InputError("features and policy must match the MDP shape")
    occ = occupancy_kernel(mdp.kernel, behavior.pi, mdp.initial_state)
    sigma = np.einsum("hsa,hsad,hsae->hde", occ, phi_hat, phi_hat)
    return float(max(0.0, min(np.linalg.eigvalsh(sig)[0] for sig in sigma)))
