from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from refuel import serialization as ser
from refuel.envgen import (FamilyConstants, FamilySpec, ModelClass, compute_xi_down, family_constants,
                           generate_family, generate_model_classes, load_family, min_pairwise_separation,
                           persist_roundtrip, psi_separation, save_family, smoothness_constant)
from refuel.errors import GenerationError, InputError, SchemaError, VersionError
from refuel.mdp import low_rank_kernel

# recorded at first generation of the seed-1 acceptance-shaped family
GOLDEN_FAMILY_HASH = "f785a9cdaa9a47d4a52eecfb32e67c88130ccff452783d63d78f19575963d02f"
GOLDEN_CLASSES_HASH = "1bd8db531837e040524c458d3c99fa65cbfbea7fb0640bdeec310b9439db5a1c"


class TestFamilySpec:
    def test_rejects_non_positive(self):
        with pytest.raises(InputError):
            FamilySpec(0, 2, 2, 2, 1)

    def test_rejects_small_psi_class(self):
        with pytest.raises(InputError):
            FamilySpec(4, 2, 2, 2, 3, psi_class_size=2)

    def test_unknown_keys(self):
        with pytest.raises(SchemaError):
            FamilySpec.from_dict({"num_states": 4, "num_actions": 2, "horizon": 2, "dim": 2,
                                  "num_tasks": 1, "colour": "red"})


class TestGenerateFamily:
    def test_rank_one_tasks_share_next_state_law(self):
        family = generate_family(FamilySpec(5, 3, 3, 1, 2, seed=2))
        for mdp in family.tasks:
            assert np.allclose(mdp.kernel, mdp.kernel[:, :1, :1])

    def test_exact_mixture_without_misspecification(self):
        family = generate_family(FamilySpec(5, 2, 3, 2, 3, seed=3))
        mix = sum(c * m.kernel for c, m in zip(family.coefficients, family.tasks))
        assert np.allclose(family.downstream.kernel, mix, atol=1e-12)
        assert family.xi_measured == pytest.approx(0.0, abs=1e-12)

    def test_measured_xi_within_target(self, accept_family):
        mix = accept_family.combination_kernel()
        exhaustive = max(0.5 * np.abs(accept_family.downstream.kernel[h, s, a] - mix[h, s, a]).sum()
                         for h, s, a in itertools.product(range(4), range(6), range(3)))
        assert exhaustive <= 0.05 + 1e-9
        assert accept_family.xi_measured == pytest.approx(exhaustive, abs=1e-12)

    def test_rewards_normalised(self, accept_family):
        for reward in (*accept_family.rewards, accept_family.downstream_reward):
            assert reward.r.reshape(4, -1).max(axis=1).sum() <= 1 + 1e-9
            assert reward.r.max() > 0

    def test_downstream_rows_valid(self, accept_family):
        assert np.allclose(accept_family.downstream.kernel.sum(-1), 1.0, atol=1e-9)

    def test_seed_reproducible(self, accept_spec):
        a, b = generate_family(accept_spec), generate_family(accept_spec)
        assert ser.dumps(a.to_dict()) == ser.dumps(b.to_dict())

    def test_infeasible_separation(self):
        with pytest.raises(GenerationError):
            generate_family(FamilySpec(3, 2, 2, 1, 3, decoy_separation=1.0))


class TestModelClasses:
    def test_truth_only_classes(self, accept_family, accept_spec):
        spec = FamilySpec(6, 3, 4, 2, 4, seed=1, xi_target=0.05, phi_class_size=1, psi_class_size=4)
        classes = generate_model_classes(accept_family, spec, 0)
        assert classes.truth_indices == (0, (0, 1, 2, 3))
        assert np.array_equal(classes.Psi, accept_family.mus)

    def test_truth_indices_resolve(self, accept_family, accept_classes):
        i, js = accept_classes.truth_indices
        assert np.array_equal(accept_classes.Phi[i], accept_family.shared_phi)
        for t, j in enumerate(js):
            assert np.array_equal(accept_classes.Psi[j], accept_family.mus[t])

    def test_pairwise_separation_by_enumeration(self, accept_family, accept_classes):
        Psi = accept_classes.Psi
        worst = min(psi_separation(Psi[a], Psi[b], accept_family.shared_phi)
                    for a, b in itertools.combinations(range(len(Psi)), 2))
        assert worst >= 0.05
        assert min_pairwise_separation(accept_classes, accept_family) >= 0.05


class TestConstants:
    def test_upsilon(self):
        family = generate_family(FamilySpec(8, 2, 2, 2, 1, seed=4))
        classes = generate_model_classes(family, family.spec, 4)
        assert family_constants(family, classes).upsilon == 0.125

    def test_uniform_difference_gives_unit_smoothness(self):
        mu_a = np.array([[[0.5], [0.5]]])
        mu_b = np.array([[[0.8], [0.2]]])
        classes = ModelClass(np.ones((1, 1, 2, 2, 1)), np.stack([mu_a, mu_b]), 0, (0,))
        assert smoothness_constant(classes) == pytest.approx(1.0)

    def test_kappa_from_occupancy(self, accept_family, accept_classes):
        # independent forward recursion over states under the uniform policy
        worst = np.inf
        for mdp in accept_family.tasks:
            dist = np.zeros(6)
            dist[0] = 1.0
            for h in range(1, 4):
                dist = np.einsum("s,sat->t", dist / 3.0, mdp.kernel[h - 1])
                worst = min(worst, dist.min())
        assert family_constants(accept_family, accept_classes).kappa_u_lb == pytest.approx(worst, rel=1e-12)

    def test_xi_down_golden(self):
        constants = FamilyConstants(upsilon=1 / 6, kappa_u_lb=0.05, C_R=2.0, xi_measured=0.01)
        assert compute_xi_down(constants, 4, 0.1) == pytest.approx(2.6766666666666667, rel=1e-14)

    def test_xi_down_zero_and_linear(self):
        c = FamilyConstants(upsilon=0.25, kappa_u_lb=0.1, C_R=1.5, xi_measured=0.0)
        assert compute_xi_down(c, 3, 0.0) == 0.0
        assert compute_xi_down(c, 3, 0.2) == pytest.approx(2 * compute_xi_down(c, 3, 0.1))

    def test_xi_down_monotone(self):
        base = FamilyConstants(upsilon=0.25, kappa_u_lb=0.1, C_R=1.5, xi_measured=0.02)
        v = compute_xi_down(base, 3, 0.1)
        assert compute_xi_down(base, 4, 0.1) >= v
        assert compute_xi_down(FamilyConstants(0.25, 0.2, 1.5, 0.02), 3, 0.1) <= v
        assert compute_xi_down(FamilyConstants(0.25, 0.1, 2.0, 0.02), 3, 0.1) >= v


class TestPersistence:
    def test_family_roundtrip(self, tmp_path, accept_family, accept_classes):
        family = accept_family.with_constants(family_constants(accept_family, accept_classes))
        back = persist_roundtrip(family, tmp_path / "f.json")
        assert ser.dumps(back.to_dict()) == ser.dumps(family.to_dict())

    def test_classes_roundtrip(self, tmp_path, accept_classes):
        back = persist_roundtrip(accept_classes, tmp_path / "c.json")
        assert np.array_equal(back.Phi, accept_classes.Phi)
        assert back.truth_indices == accept_classes.truth_indices

    def test_version_error(self, tmp_path, accept_family):
        path = tmp_path / "f.json"
        save_family(path, accept_family)
        doc = json.loads(path.read_text())
        doc["version"] = 2
        path.write_text(json.dumps(doc))
        with pytest.raises(VersionError):
            load_family(path)

    def test_golden_hashes(self, accept_family, accept_classes):
        assert ser.content_hash(accept_family.to_dict()) == GOLDEN_FAMILY_HASH
        assert ser.content_hash(accept_classes.to_dict()) == GOLDEN_CLASSES_HASH

    def test_kernel_helper_renormalises(self, accept_family):
        k = low_rank_kernel(accept_family.shared_phi, accept_family.mus[0])
        assert np.allclose(k.sum(-1), 1.0, atol=1e-12)
