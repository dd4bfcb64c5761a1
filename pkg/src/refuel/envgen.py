"""Task families sharing one representation, finite model classes, and family constants."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Optional

import numpy as np

from . import serialization as ser
from .errors import ConstantsError, GenerationError, InputError, SchemaError
from .mdp import (
    Policy,
    RewardTable,
    TabularLowRankMdp,
    low_rank_kernel,
    occupancy_kernel,
    tv_table,
)
from .rng import check_seed, make_rng

MAX_RETRIES = 500


@dataclass(frozen=True)
class FamilySpec:
    num_states: int
    num_actions: int
    horizon: int
    dim: int
    num_tasks: int
    seed: int = 0
    xi_target: float = 0.0
    reward_dim: int = 2
    phi_class_size: int = 6
    psi_class_size: int = 12
    decoy_separation: float = 0.05

    def __post_init__(self) -> None:
        for name in ("num_states", "num_actions", "horizon", "dim", "num_tasks", "reward_dim",
                     "phi_class_size", "psi_class_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InputError(f"{name} must be a positive integer, got {value!r}")
        check_seed(self.seed)
        if not 0.0 <= self.xi_target < 1.0:
            raise InputError(f"xi_target must lie in [0, 1), got {self.xi_target}")
        if not 0.0 < self.decoy_separation <= 1.0:
            raise InputError(f"decoy_separation must lie in (0, 1], got {self.decoy_separation}")
        if self.psi_class_size < self.num_tasks:
            raise InputError("psi_class_size must be at least num_tasks (one slot per true measure)")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "FamilySpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise SchemaError(f"unknown family spec keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, InputError) as exc:
            raise SchemaError(f"invalid family spec: {exc}") from exc


@dataclass(frozen=True)
class FamilyConstants:
    upsilon: float
    kappa_u_lb: float
    C_R: float
    xi_measured: float
    C_L: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "FamilyConstants":
        try:
            return cls(**{k: float(doc[k]) for k in ("upsilon", "kappa_u_lb", "C_R", "xi_measured", "C_L")})
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"invalid constants block: {exc}") from exc


@dataclass(frozen=True, eq=False)
class TaskFamily:
    """T upstream tasks sharing ``shared_phi`` plus one downstream task."""

    spec: FamilySpec
    shared_phi: np.ndarray
    mus: np.ndarray
    rewards: tuple[RewardTable, ...]
    downstream: TabularLowRankMdp
    downstream_reward: RewardTable
    coefficients: np.ndarray
    mix_weight: float
    xi_measured: float
    initial_state: int = 0
    constants: Optional[FamilyConstants] = None

    @property
    def num_tasks(self) -> int:
        return self.mus.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.shared_phi.shape[:3]  # type: ignore[return-value]

    @cached_property
    def tasks(self) -> tuple[TabularLowRankMdp, ...]:
        return tuple(TabularLowRankMdp(self.shared_phi, mu, self.initial_state) for mu in self.mus)

    def task_mdp(self, t: int) -> TabularLowRankMdp:
        return self.tasks[t]

    def combination_kernel(self) -> np.ndarray:
        """``sum_t c_t P^(t)`` -- the unperturbed downstream kernel."""
        mu_mix = np.einsum("t,thsd->hsd", self.coefficients, self.mus)
        return low_rank_kernel(self.shared_phi, mu_mix)

    def with_constants(self, constants: FamilyConstants) -> "TaskFamily":
        return dataclasses.replace(self, constants=constants)

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "initial_state": self.initial_state,
            "shared_phi": self.shared_phi,
            "mus": self.mus,
            "rewards": [r.to_dict() for r in self.rewards],
            "downstream": self.downstream.to_dict(),
            "downstream_reward": self.downstream_reward.to_dict(),
            "coefficients": self.coefficients,
            "mix_weight": self.mix_weight,
            "xi_measured": self.xi_measured,
            "constants": None if self.constants is None else self.constants.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TaskFamily":
        spec = FamilySpec.from_dict(ser.require(doc, "spec"))
        H, S, K, d, T = spec.horizon, spec.num_states, spec.num_actions, spec.dim, spec.num_tasks
        shared_phi = ser.as_array(ser.require(doc, "shared_phi"), (H, S, K, d), name="shared_phi")
        mus = ser.as_array(ser.require(doc, "mus"), (T, H, S, d), name="mus")
        rewards_doc = ser.require(doc, "rewards")
        if not isinstance(rewards_doc, list) or len(rewards_doc) != T:
            raise SchemaError("rewards must be a list with one entry per task")
        rewards = tuple(RewardTable.from_dict(r) for r in rewards_doc)
        constants_doc = doc.get("constants")
        family = cls(
            spec=spec,
            shared_phi=shared_phi,
            mus=mus,
            rewards=rewards,
            downstream=TabularLowRankMdp.from_dict(ser.require(doc, "downstream")),
            downstream_reward=RewardTable.from_dict(ser.require(doc, "downstream_reward")),
            coefficients=ser.as_array(ser.require(doc, "coefficients"), (T,), name="coefficients"),
            mix_weight=float(ser.require(doc, "mix_weight")),
            xi_measured=float(ser.require(doc, "xi_measured")),
            initial_state=int(ser.require(doc, "initial_state")),
            constants=None if constants_doc is None else FamilyConstants.from_dict(constants_doc),
        )
        try:
            family.tasks  # validates every upstream kernel
        except InputError as exc:
            raise SchemaError(f"invalid family: {exc}") from exc
        return family


@dataclass(eq=False)
class ModelClass:
    """Finite candidate sets: ``Phi[i]`` is ``(H,S,K,d)``, ``Psi[j]`` is ``(H,S,d)``."""

    Phi: np.ndarray
    Psi: np.ndarray
    phi_truth: int
    psi_truth: tuple[int, ...]

    def __post_init__(self) -> None:
        self.Phi = np.asarray(self.Phi, dtype=float)
        self.Psi = np.asarray(self.Psi, dtype=float)
        if self.Phi.ndim != 5 or self.Psi.ndim != 4:
            raise InputError("Phi must be (n,H,S,K,d) and Psi must be (m,H,S,d)")
        self.psi_truth = tuple(int(j) for j in self.psi_truth)
        self.phi_truth = int(self.phi_truth)
        for i in range(len(self.Phi)):
            for j in range(len(self.Psi)):
                TabularLowRankMdp(self.Phi[i], self.Psi[j])

    @property
    def truth_indices(self) -> tuple[int, tuple[int, ...]]:
        return self.phi_truth, self.psi_truth

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.Phi), len(self.Psi)

    @cached_property
    def kernels(self) -> np.ndarray:
        """All class-induced kernels, shape ``(|Phi|, |Psi|, H, S, K, S)``."""
        raw = np.einsum("ihsad,jhtd->ijhsat", self.Phi, self.Psi)
        return np.clip(raw, 0.0, None)

    @cached_property
    def log_kernels(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.kernels > 0.0, np.log(np.where(self.kernels > 0.0, self.kernels, 1.0)), -np.inf)

    def to_dict(self) -> dict[str, Any]:
        n, H, S, K, d = self.Phi.shape
        return {
            "dims": {"H": H, "S": S, "K": K, "d": d, "n_phi": n, "n_psi": len(self.Psi)},
            "phi_truth": self.phi_truth,
            "psi_truth": list(self.psi_truth),
            "Phi": self.Phi,
            "Psi": self.Psi,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ModelClass":
        dims = ser.require(doc, "dims")
        try:
            H, S, K, d, n, m = (int(dims[k]) for k in ("H", "S", "K", "d", "n_phi", "n_psi"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad dims block: {exc}") from exc
        Phi = ser.as_array(ser.require(doc, "Phi"), (n, H, S, K, d), name="Phi")
        Psi = ser.as_array(ser.require(doc, "Psi"), (m, H, S, d), name="Psi")
        psi_truth = ser.require(doc, "psi_truth")
        phi_truth = ser.require(doc, "phi_truth")
        if not (isinstance(phi_truth, int) and 0 <= phi_truth < n):
            raise SchemaError("phi_truth out of range")
        if not (isinstance(psi_truth, list) and all(isinstance(j, int) and 0 <= j < m for j in psi_truth)):
            raise SchemaError("psi_truth must be a list of valid indices")
        try:
            return cls(Phi, Psi, phi_truth, tuple(psi_truth))
        except InputError as exc:
            raise SchemaError(f"invalid model class: {exc}") from exc


# --- separation measures -------------------------------------------------------


def psi_separation(mu_a: np.ndarray, mu_b: np.ndarray, phi: np.ndarray) -> float:
    """Mean TV over ``(h, s, a)`` between ``<phi, mu_a>`` and ``<phi, mu_b>``."""
    return float(tv_table(low_rank_kernel(phi, mu_a), low_rank_kernel(phi, mu_b)).mean())


def phi_separation(phi_a: np.ndarray, phi_b: np.ndarray, mus: np.ndarray) -> float:
    """Smallest, over the true measures, mean TV between the induced kernels."""
    return min(float(tv_table(low_rank_kernel(phi_a, mu), low_rank_kernel(phi_b, mu)).mean()) for mu in mus)


# --- generators ------------------------------------------------------------------


def _draw_phi(rng: np.random.Generator, H: int, S: int, K: int, d: int) -> np.ndarray:
    return rng.dirichlet(np.ones(d), size=(H, S, K))


def _draw_mu(rng: np.random.Generator, H: int, S: int, d: int) -> np.ndarray:
    # columns are distributions over next states
    return rng.dirichlet(np.ones(S), size=(H, d)).transpose(0, 2, 1)


def _draw_reward(rng: np.random.Generator, H: int, S: int, K: int, p: int) -> RewardTable:
    features = rng.random((H, S, K, p))
    # nonnegative weights keep the reward from vanishing identically
    theta = np.abs(rng.standard_normal(p))
    r = np.clip(features @ theta, 0.0, None)
    total = r.reshape(H, -1).max(axis=1).sum()
    if total > 0.0:
        r = np.minimum(r / total, 1.0)
        theta = theta / total
    return RewardTable(r, p, theta)


def generate_family(spec: FamilySpec) -> TaskFamily:
    """Build upstream tasks sharing one feature map and the downstream mixture task."""
    H, S, K, d, T = spec.horizon, spec.num_states, spec.num_actions, spec.dim, spec.num_tasks
    rng = make_rng(spec.seed, "family")
    shared_phi = _draw_phi(rng, H, S, K, d)

    mus: list[np.ndarray] = []
    for _ in range(T):
        for _attempt in range(MAX_RETRIES):
            mu = _draw_mu(rng, H, S, d)
            if all(psi_separation(mu, other, shared_phi) >= spec.decoy_separation for other in mus):
                mus.append(mu)
                break
        else:
            raise GenerationError(
                f"could not draw {T} task measures separated by {spec.decoy_separation} "
                f"after {MAX_RETRIES} attempts")
    mus_arr = np.stack(mus)

    rewards = tuple(_draw_reward(rng, H, S, K, spec.reward_dim) for _ in range(T))
    coefficients = rng.dirichlet(np.ones(T))
    mu_mix = np.einsum("t,thsd->hsd", coefficients, mus_arr)
    mix_kernel = low_rank_kernel(shared_phi, mu_mix)

    noise_rows = rng.dirichlet(np.ones(S), size=(H, S, K))
    downstream_reward = _draw_reward(rng, H, S, K, spec.reward_dim)

    if spec.xi_target > 0.0:
        max_tv = float(tv_table(noise_rows, mix_kernel).max())
        eps_mix = 1.0 if max_tv <= 0.0 else min(1.0, spec.xi_target / max_tv)
        noise = TabularLowRankMdp.from_kernel(noise_rows)
        phi_down = np.concatenate([(1.0 - eps_mix) * shared_phi, eps_mix * noise.phi], axis=-1)
        mu_down = np.concatenate([mu_mix, noise.mu], axis=-1)
        downstream = TabularLowRankMdp(phi_down, mu_down, 0)
    else:
        eps_mix = 0.0
        downstream = TabularLowRankMdp(shared_phi, mu_mix, 0)
    xi_measured = float(tv_table(downstream.kernel, mix_kernel).max())
    if xi_measured > spec.xi_target + 1e-9:
        raise GenerationError(f"measured misspecification {xi_measured} exceeds target {spec.xi_target}")

    return TaskFamily(
        spec=spec,
        shared_phi=shared_phi,
        mus=mus_arr,
        rewards=rewards,
        downstream=downstream,
        downstream_reward=downstream_reward,
        coefficients=coefficients,
        mix_weight=eps_mix,
        xi_measured=xi_measured,
    )


def generate_model_classes(family: TaskFamily, spec: FamilySpec, seed: int) -> ModelClass:
    """Embed the truths among rejection-sampled decoys separated by ``spec.decoy_separation``."""
    H, S, K, d = spec.horizon, spec.num_states, spec.num_actions, spec.dim
    T = family.num_tasks
    if spec.phi_class_size < 1 or spec.psi_class_size < T:
        raise InputError("class sizes must accommodate the embedded truths")
    rng = make_rng(seed, "classes")
    sep = spec.decoy_separation

    phis = [family.shared_phi]
    while len(phis) < spec.phi_class_size:
        for _attempt in range(MAX_RETRIES):
            cand = _draw_phi(rng, H, S, K, d)
            if all(phi_separation(cand, other, family.mus) >= sep for other in phis):
                phis.append(cand)
                break
        else:
            raise GenerationError(f"retry budget exhausted while drawing feature decoy #{len(phis)}")

    psis = list(family.mus)
    while len(psis) < spec.psi_class_size:
        for _attempt in range(MAX_RETRIES):
            cand = _draw_mu(rng, H, S, d)
            if all(psi_separation(cand, other, family.shared_phi) >= sep for other in psis):
                psis.append(cand)
                break
        else:
            raise GenerationError(f"retry budget exhausted while drawing measure decoy #{len(psis)}")

    # shuffle so that lowest-index tie-breaking does not favour the truth
    phi_order = rng.permutation(len(phis)) if len(phis) > 1 else np.arange(1)
    psi_order = rng.permutation(len(psis)) if len(psis) > T else np.arange(len(psis))
    Phi = np.stack([phis[k] for k in phi_order])
    Psi = np.stack([psis[k] for k in psi_order])
    phi_truth = int(np.flatnonzero(phi_order == 0)[0])
    psi_truth = tuple(int(np.flatnonzero(psi_order == t)[0]) for t in range(T))
    return ModelClass(Phi, Psi, phi_truth, psi_truth)


def min_pairwise_separation(classes: ModelClass, family: TaskFamily) -> float:
    """Smallest separation among distinct members of either class (1.0 if none)."""
    best = 1.0
    for i in range(len(classes.Phi)):
        for j in range(i + 1, len(classes.Phi)):
            best = min(best, phi_separation(classes.Phi[i], classes.Phi[j], family.mus))
    for i in range(len(classes.Psi)):
        for j in range(i + 1, len(classes.Psi)):
            best = min(best, psi_separation(classes.Psi[i], classes.Psi[j], family.shared_phi))
    return best


# --- constants ------------------------------------------------------------------


def reachability_table(family: TaskFamily) -> np.ndarray:
    """State marginals of the uniform policy, shape ``(T, H, S)``."""
    H, S, K = family.shape
    uniform = Policy.uniform(H, S, K).pi
    return np.stack([occupancy_kernel(m.kernel, uniform, m.initial_state).sum(-1) for m in family.tasks])


def smoothness_constant(classes: ModelClass) -> float:
    """Worst ratio of pointwise to uniform-average TV over pairs of class kernels."""
    n_phi, n_psi = classes.sizes
    flat = classes.kernels.reshape(n_phi * n_psi, *classes.kernels.shape[2:])
    best = 1.0
    for a in range(len(flat)):
        tv = 0.5 * np.abs(flat[a + 1:] - flat[a]).sum(axis=-1)  # (pairs, H, S, K)
        if tv.size == 0:
            continue
        per_h_max = tv.max(axis=(2, 3))
        per_h_mean = tv.mean(axis=(2, 3))
        ok = per_h_mean > 1e-15
        if np.any(ok):
            best = max(best, float((per_h_max[ok] / per_h_mean[ok]).max()))
    return best


def family_constants(family: TaskFamily, classes: ModelClass) -> FamilyConstants:
    H, S, _ = family.shape
    reach = reachability_table(family)
    # s_1 is fixed, so only steps after the first can certify reachability
    kappa = float(reach[:, 1:, :].min()) if H > 1 else 1.0
    if kappa <= 0.0:
        raise ConstantsError("some state is unreachable under the uniform policy; regenerate the family")
    return FamilyConstants(
        upsilon=1.0 / S,
        kappa_u_lb=kappa,
        C_R=smoothness_constant(classes),
        xi_measured=family.xi_measured,
        C_L=1.0,
    )


def compute_xi_down(constants: FamilyConstants, T: int, eps_u: float) -> float:
    """Certified misspecification ``xi + C_L C_R T upsilon eps_u / kappa_u``."""
    if eps_u < 0:
        raise InputError("eps_u must be nonnegative")
    if constants.kappa_u_lb <= 0:
        raise ConstantsError("kappa_u_lb must be positive")
    return constants.xi_measured + (
        constants.C_L * constants.C_R * T * constants.upsilon * eps_u / constants.kappa_u_lb)


# --- persistence ----------------------------------------------------------------


def save_family(path, family: TaskFamily) -> None:
    ser.save_document(path, "family", family.to_dict())


def load_family(path) -> TaskFamily:
    return TaskFamily.from_dict(ser.load_document(path, "family"))


def save_classes(path, classes: ModelClass) -> None:
    ser.save_document(path, "model_class", classes.to_dict())


def load_classes(path) -> ModelClass:
    return ModelClass.from_dict(ser.load_document(path, "model_class"))


def persist_roundtrip(obj: TaskFamily | ModelClass, path):
    """Save then load ``obj`` through its JSON schema."""
    if isinstance(obj, TaskFamily):
        save_family(path, obj)
        return load_family(path)
    if isinstance(obj, ModelClass):
        save_classes(path, obj)
        return load_classes(path)
    raise InputError(f"cannot persist object of type {type(obj).__name__}")
