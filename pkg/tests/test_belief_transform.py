"""Tests for the trajectory-to-tuple transform, utilities, and propensity fit."""

import numpy as np
import pytest

from latentdtr.belief_transform import (
    MdpTuple,
    SummaryState,
    UtilitySpec,
    build_mdp_dataset,
    estimate_propensity,
    scenario_matching_groups,
)
from latentdtr.ct_hmm import Trajectory, forward_filter
from latentdtr.errors import ValidationError
from latentdtr.regime import BasisSpec


class TestUtilitySpec:
    def test_neg_abs_hand_value(self):
        u = UtilitySpec("neg_abs", {"constant": 2.0, "indices": (0, 2)})
        x_next = np.array([-0.5, 9.0, 0.25])
        val = u.evaluate(np.array([1.0]), np.zeros(3), 1, x_next)
        assert val == pytest.approx(2.0 - 0.5 - 0.25)

    def test_belief_match_hand_value(self):
        groups = ((0, 3), (1, 2), (4,))
        u = UtilitySpec("belief_match", {"groups": groups})
        b = np.array([0.4, 0.1, 0.1, 0.2, 0.2])
        # action 1 matches group {0,3} with mass 0.6; others count negative
        val = u.evaluate(b, np.zeros(3), 1, np.zeros(3))
        assert val == pytest.approx(0.6 - 0.2 - 0.2)
        val3 = u.evaluate(b, np.zeros(3), 3, np.zeros(3))
        assert val3 == pytest.approx(-0.6 - 0.2 + 0.2)

    def test_belief_match_bounds(self):
        # the matching utility is bounded by [-1, 1] for any belief
        rng = np.random.default_rng(3)
        u = UtilitySpec("belief_match", {"groups": scenario_matching_groups()})
        for _ in range(50):
            b = rng.dirichlet(np.ones(5))
            a = int(rng.integers(1, 4))
            v = u.evaluate(b, np.zeros(3), a, np.zeros(3))
            assert -1.0 - 1e-12 <= v <= 1.0 + 1e-12

    def test_custom_linear(self):
        u = UtilitySpec(
            "custom_linear",
            {"intercept": 1.0, "x": [0.5, -1.0], "action": [0.0, 2.0]},
        )
        val = u.evaluate(np.array([1.0]), np.array([2.0, 1.0]), 2, np.zeros(2))
        assert val == pytest.approx(1.0 + 1.0 - 1.0 + 2.0)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValidationError):
            UtilitySpec("bogus")


class TestBuildMdpDataset:
    def test_tuple_count_and_indexing(self, tiny_model, tiny_traj):
        uspec = UtilitySpec("neg_abs", {"constant": 0.0, "indices": (0,)})
        tuples = build_mdp_dataset([tiny_traj], tiny_model, uspec)
        assert len(tuples) == tiny_traj.J - 1
        assert [t.j for t in tuples] == [1, 2]
        assert all(t.subject_id == "s0" for t in tuples)

    def test_states_carry_filter_beliefs(self, tiny_model, tiny_traj):
        uspec = UtilitySpec("neg_abs", {"constant": 0.0, "indices": (0,)})
        tuples = build_mdp_dataset([tiny_traj], tiny_model, uspec)
        beliefs, _ = forward_filter(tiny_traj, tiny_model)
        np.testing.assert_allclose(tuples[0].s.belief, beliefs[0], atol=1e-14)
        np.testing.assert_allclose(tuples[1].s_next.belief, beliefs[2], atol=1e-14)
        np.testing.assert_allclose(tuples[0].s_next.x, tiny_traj.x[1])

    def test_utility_uses_next_observation(self, tiny_model, tiny_traj):
        uspec = UtilitySpec("neg_abs", {"constant": 0.0, "indices": (0,)})
        tuples = build_mdp_dataset([tiny_traj], tiny_model, uspec)
        assert tuples[0].u == pytest.approx(-abs(tiny_traj.x[1, 0]))

    def test_known_behavior_policy_attached(self, tiny_model, tiny_traj):
        uspec = UtilitySpec("neg_abs", {"constant": 0.0, "indices": (0,)})
        probs = np.array([0.7, 0.3])

        def behavior(x, belief):
            return probs

        tuples = build_mdp_dataset(
            [tiny_traj], tiny_model, uspec, behavior_probs=behavior
        )
        # actions at visits 1 and 2 are 1 and 2
        assert tuples[0].behavior_prob == pytest.approx(0.7)
        assert tuples[1].behavior_prob == pytest.approx(0.3)


def _logit_tuples(rng, n=4000, coef=None):
    """Tuples whose actions follow a known multinomial logit in x."""
    if coef is None:
        coef = np.array([[-0.2, 0.1], [-0.1, 0.1]])  # (L-1, d) for d=[1, x]
    tuples = []
    for i in range(n):
        x = rng.normal(0, 1, 1)
        f = np.array([1.0, x[0]])
        scores = np.array([coef[0] @ f, coef[1] @ f, 0.0])
        p = np.exp(scores) / np.exp(scores).sum()
        a = int(rng.choice(3, p=p)) + 1
        s = SummaryState(np.array([1.0]), x)
        tuples.append(
            MdpTuple(subject_id=str(i), j=1, s=s, a=a, u=0.0, s_next=s)
        )
    return tuples, coef


class TestEstimatePropensity:
    def test_recovers_generative_coefficients(self, rng):
        tuples, coef = _logit_tuples(rng)
        basis = BasisSpec(kind="linear", use_belief=False)
        model, observed = estimate_propensity(tuples, basis, ridge=1e-6)
        # asymptotic SE of a logit coefficient at n=4000 is below 0.06;
        # require agreement within 3 of those
        np.testing.assert_allclose(model.coef, coef, atol=0.18)
        assert observed.shape == (len(tuples),)
        assert np.all(observed >= model.floor - 1e-12)
        assert tuples[0].behavior_prob == pytest.approx(observed[0])

    def test_missing_action_rejected(self, rng):
        tuples, _ = _logit_tuples(rng, n=50)
        for t in tuples:
            if t.a == 2:  # action 2 never appears but action 3 does
                t.a = 1
        with pytest.raises(ValidationError):
            estimate_propensity(tuples, BasisSpec(kind="linear", use_belief=False))

    def test_separation_triggers_refit(self, rng):
        # perfectly separable actions: a = 1 iff x > 0 (binary case)
        tuples = []
        for i in range(200):
            x = rng.normal(0, 1, 1)
            a = 1 if x[0] > 0 else 2
            s = SummaryState(np.array([1.0]), x)
            tuples.append(MdpTuple(str(i), 1, s, a, 0.0, s))
        model, observed = estimate_propensity(
            tuples, BasisSpec(kind="linear", use_belief=False)
        )
        assert np.all(observed >= model.floor - 1e-12)
        assert np.all(np.isfinite(model.coef))
