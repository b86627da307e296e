import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facenas import tensor as T
from facenas.controller import ControllerPolicy, SampleTrace, sample, sample_fusion, score
from facenas.ppo import (FactorizationError, JointController, MotionAverageTracker, PPOConfig, UpdateBatch,
                         clip_bound, joint_log_prob, ppo_objective, reward, update_controllers)
from facenas.space import Architecture, DecisionSlot, SearchSpace, enumerate_joint, fusion_space
from facenas.tensor import ContractError


def _space(name, arities):
    return SearchSpace(name, "cnn", tuple(DecisionSlot(f"op{i}", tuple(range(a))) for i, a in enumerate(arities)),
                       name)


def _trace(space, tokens, lp, condition=()):
    return SampleTrace(space, tuple(tokens), (lp,), np.zeros(2), np.zeros(2), 0.0, condition)


# ------------------------------------------------------------------ objective

@pytest.mark.parametrize("ratio, r, eps, expected", [
    (1.5, 1.0, 0.2, 1.2),
    (1.0, -2.0, 0.2, -2.0),
    (0.5, 0.0, 0.2, 0.0),
    (3.0, 0.0, 0.2, 0.0),
])
def test_tabulated_objective_values(ratio, r, eps, expected):
    assert ppo_objective(math.log(ratio), 0.0, r, eps) == expected


@settings(max_examples=200, deadline=None)
@given(st.floats(0.81, 1.19), st.floats(0.0, 10.0), st.floats(0.2, 0.5))
def test_unclipped_inside_the_trust_region_for_positive_reward(ratio, r, eps):
    assert ppo_objective(math.log(ratio), 0.0, r, eps) == pytest.approx(ratio * r, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-10, 10), st.floats(0.05, 0.9))
def test_objective_never_exceeds_clip_bound(logr, r, eps):
    assert ppo_objective(logr, 0.0, r, eps) <= clip_bound(eps, r) + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(clip=1.0)
    with pytest.raises(ValueError):
        PPOConfig(samples=0)


# ------------------------------------------------------------------ factorisation

def test_joint_log_prob_is_additive():
    a, b = _trace("a", [0], -1.0), _trace("b", [1], -1.0)
    f = _trace("fusion", [0], -0.5, (("a", (0,)), ("b", (1,))))
    assert joint_log_prob([a, b], f) == -2.5


def test_deterministic_policies_have_zero_joint_log_prob():
    s = _space("a", (1, 1))
    pol = ControllerPolicy(s, 4, 0)
    assert joint_log_prob([sample(pol, 0)], None) == 0.0


def test_mismatched_condition_is_rejected():
    a = _trace("a", [0], -1.0)
    f = _trace("fusion", [0], -0.5, (("a", (1,)),))
    with pytest.raises(FactorizationError):
        joint_log_prob([a], f)


def _toy_joint(seed=0):
    a, b = _space("a", (2,)), _space("b", (2,))
    fus = fusion_space([a, b], ("x", "y"), (4,), 1)
    fus = SearchSpace("fusion", "fusion", (fus.slots[2],))  # one op slot: 2 fusion choices
    pols = {"a": ControllerPolicy(a, 6, seed), "b": ControllerPolicy(b, 6, seed + 1)}
    fpol = ControllerPolicy(fus, 6, seed + 2, "fusion", ["a", "b"])
    for p in list(pols.values()) + [fpol]:
        for t in p.params.values():
            t.data = T.make_rng(seed, 4).normal(scale=0.8, size=t.shape) + t.data
    return [a, b], fus, JointController(pols, fpol, PPOConfig())


def test_joint_probabilities_sum_to_one():
    streams, fus, ctl = _toy_joint()
    total = 0.0
    for arch in enumerate_joint(streams, fus):
        total += math.exp(float(ctl.score(arch).log_prob.data))
    assert abs(total - 1.0) <= 1e-10


def test_sampled_joint_log_prob_matches_score():
    _, _, ctl = _toy_joint(3)
    rng = T.make_rng(1)
    for _ in range(20):
        s = ctl.sample(rng)
        assert float(ctl.score(s.arch).log_prob.data) == pytest.approx(s.log_prob_old, abs=1e-12)


# ------------------------------------------------------------------ tracker

def test_tracker_examples():
    tr = MotionAverageTracker()
    assert reward(tr, "k", 3.96) == -3.96
    tr2 = MotionAverageTracker()
    tr2.update("a", 4.0)
    assert reward(tr2, "a", 6.0) == -5.0
    assert tr2.count("a") == 2


def test_tracker_rejects_non_finite_and_leaves_state():
    tr = MotionAverageTracker()
    tr.update("a", 1.0)
    for bad in (math.nan, math.inf, -1.0):
        with pytest.raises(ValueError):
            tr.update("a", bad)
    assert tr.count("a") == 1 and tr.mean("a") == 1.0


def test_tracker_mean_over_many_insertions():
    rng = T.make_rng(0)
    vals = rng.uniform(0, 25, size=10_000)
    tr = MotionAverageTracker()
    for v in vals:
        tr.update("k", float(v))
    assert abs(tr.mean("k") - float(np.mean(vals))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40), st.randoms())
def test_tracker_mean_is_order_invariant(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    a, b = MotionAverageTracker(), MotionAverageTracker()
    for v in vals:
        a.update("k", v)
    for v in shuffled:
        b.update("k", v)
    assert a.mean("k") == b.mean("k")
    assert a.variance("k") == b.variance("k")


def test_tracker_log_replay(tmp_path):
    log = tmp_path / "tracker.log"
    tr = MotionAverageTracker(log)
    for k, v in [("a", 1.0), ("b", 0.1), ("a", 2.5)]:
        tr.update(k, v)
    back = MotionAverageTracker(log)
    assert back.mean("a") == tr.mean("a") and back.mean("b") == 0.1 and back.count("a") == 2


# ------------------------------------------------------------------ updates

def _bandit(seed, lr=0.05, entropy=0.0, use_advantage=True):
    space = _space("arm", (2,))
    pol = ControllerPolicy(space, 8, seed)
    return JointController({"arm": pol}, None, PPOConfig(lr=lr, samples=8, entropy_weight=entropy,
                                                         use_advantage=use_advantage))


def _p_arm0(ctl):
    return math.exp(float(score(ctl.streams["arm"], (0,)).data))


def test_empty_batch_is_a_contract_error():
    with pytest.raises(ContractError):
        update_controllers(_bandit(0), UpdateBatch([], []))


def test_one_sample_gradient_is_reinforce():
    """At ratio 1 with the clip inactive the objective gradient is r * grad log pi(A)."""
    ctl = _bandit(0, use_advantage=False)
    s = ctl.sample(T.make_rng(0))
    r = 0.7
    # analytic REINFORCE gradient
    for p in ctl.parameters():
        p.grad = None
    lp = ctl.score(s.arch).log_prob
    T.backward(lp)
    expected = [r * (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in ctl.parameters()]
    # objective gradient captured before the optimizer step
    captured = {}
    orig = ctl.optimizer.step

    def spy(allow_missing=False):
        captured["g"] = [(-p.grad if p.grad is not None else np.zeros_like(p.data)) for p in ctl.parameters()]
    ctl.optimizer.step = spy
    update_controllers(ctl, UpdateBatch([s], [r]))
    ctl.optimizer.step = orig
    for got, want in zip(captured["g"], expected):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)


def test_zero_rewards_leave_parameters_unchanged():
    ctl = _bandit(1, use_advantage=False)
    before = {k: v.copy() for k, v in ctl.streams["arm"].state().items()}
    rng = T.make_rng(1)
    for _ in range(2):
        batch = [ctl.sample(rng) for _ in range(4)]
        update_controllers(ctl, UpdateBatch(batch, [0.0] * 4))
    for k, v in ctl.streams["arm"].state().items():
        np.testing.assert_array_equal(v, before[k])


def test_single_step_raises_probability_of_rewarded_token():
    ctl = _bandit(2, lr=1e-3, use_advantage=False)
    s = ctl.sample(T.make_rng(5))
    tok = s.arch.stream_tokens["arm"]
    p0 = math.exp(float(score(ctl.streams["arm"], tok).data))
    update_controllers(ctl, UpdateBatch([s], [1.0]))
    assert math.exp(float(score(ctl.streams["arm"], tok).data)) > p0


def test_constant_reward_shift_keeps_update_direction():
    def direction(shift):
        ctl = _bandit(3, lr=1e-3)
        ctl.baseline = 0.0
        rng = T.make_rng(8)
        batch = [ctl.sample(rng) for _ in range(8)]
        rewards = [(-1.0 if s.arch.stream_tokens["arm"] == (0,) else -2.0) + shift for s in batch]
        ctl.baseline = float(np.mean(rewards))
        p0 = _p_arm0(ctl)
        update_controllers(ctl, UpdateBatch(batch, rewards))
        return np.sign(_p_arm0(ctl) - p0)
    assert direction(0.0) == direction(100.0) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_bandit_converges_to_better_arm(seed):
    ctl = _bandit(seed)
    rng = T.make_rng(seed, 99)
    for step in range(200):
        batch = [ctl.sample(rng) for _ in range(ctl.cfg.samples)]
        rewards = [-1.0 if s.arch.stream_tokens["arm"] == (0,) else -2.0 for s in batch]
        update_controllers(ctl, UpdateBatch(batch, rewards))
        if _p_arm0(ctl) > 0.9:
            break
    assert _p_arm0(ctl) > 0.9


def test_old_log_probs_are_not_recomputed():
    ctl = _bandit(4)
    s = ctl.sample(T.make_rng(0))
    frozen = s.log_prob_old
    update_controllers(ctl, UpdateBatch([s], [-1.0]))
    assert s.log_prob_old == frozen


def test_controller_state_round_trip():
    _, _, ctl = _toy_joint(2)
    rng = T.make_rng(0)
    batch = [ctl.sample(rng) for _ in range(4)]
    update_controllers(ctl, UpdateBatch(batch, [-1.0, -2.0, -1.5, -3.0]))
    state = ctl.state()
    _, _, other = _toy_joint(7)
    other.load_state(state)
    assert other.baseline == ctl.baseline
    for (k, v), (k2, v2) in zip(ctl.state().items(), other.state().items()):
        assert k == k2 and np.array_equal(v, v2)
    # identical continuation
    b1 = [ctl.sample(T.make_rng(5)) for _ in range(3)]
    b2 = [other.sample(T.make_rng(5)) for _ in range(3)]
    m1 = update_controllers(ctl, UpdateBatch(b1, [-1.0, -2.0, -3.0]))
    m2 = update_controllers(other, UpdateBatch(b2, [-1.0, -2.0, -3.0]))
    assert m1 == m2
