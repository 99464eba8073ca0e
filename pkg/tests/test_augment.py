import numpy as np
import pytest

from dara import data, envs
from dara.augment import AugmentConfig, augment_dataset, augmented_reward_bound
from dara.classifier import TrainConfig, train_pair, zero_pair
from dara.data import save
from dara.mdp import RejectedInputError


@pytest.fixture(scope="module")
def clip_pair():
    src_env = envs.resolve("clip1d-source")
    tgt_env = envs.resolve("clip1d-target")
    src = data.collect(src_env, data.make_behavior(src_env, "random"), 20000,
                       seed=0, domain="source")
    tgt = data.collect(tgt_env, data.make_behavior(tgt_env, "random"), 4000,
                       seed=50, domain="target")
    pair = train_pair(src, tgt, TrainConfig(epochs=100, seed=0))
    return src, tgt, pair


def test_eta_zero_keeps_rewards(clip_pair):
    src, _, pair = clip_pair
    out = augment_dataset(src, pair, AugmentConfig(eta=0.0))
    assert np.array_equal(out.rewards, src.rewards)
    assert out.meta.augmented


def test_zero_classifier_is_identity_for_any_eta(clip_pair):
    src, _, _ = clip_pair
    pair = zero_pair(src.meta.state_dim, 1)
    out = augment_dataset(src, pair, AugmentConfig(eta=3.0))
    assert np.array_equal(out.rewards, src.rewards)


def test_only_reward_column_changes(tmp_path, clip_pair):
    src, _, pair = clip_pair
    out = augment_dataset(src, pair, AugmentConfig(eta=0.5))
    p_orig, p_aug = tmp_path / "orig.ds", tmp_path / "aug.ds"
    save(src, p_orig)
    save(out, p_aug)
    lines_o = p_orig.read_text().splitlines()
    lines_a = p_aug.read_text().splitlines()
    # augmented header carries two extra annotation lines
    assert lines_a[8:10] == [f"augmented=1", f"eta=0.5"]
    assert lines_o[:8] == lines_a[:8]
    sd, ad = src.meta.state_dim, src.meta.action_dim
    r_col = sd + ad
    for lo, la in zip(lines_o[8:], lines_a[10:]):
        po, pa = lo.split(","), la.split(",")
        assert po[:r_col] == pa[:r_col]
        assert po[r_col + 1:] == pa[r_col + 1:]


def test_shift_bounded_by_eta_times_clip(clip_pair):
    src, _, pair = clip_pair
    for eta in (0.1, 0.5, 2.0):
        out = augment_dataset(src, pair, AugmentConfig(eta=eta))
        assert np.all(np.abs(out.rewards - src.rewards) <= eta * pair.clip_bound + 1e-12)


def test_monotone_in_eta_for_penalized_transition(clip_pair):
    src, _, pair = clip_pair
    from dara.classifier import delta_r_dataset
    delta = delta_r_dataset(pair, src)
    i = int(np.argmax(delta))
    assert delta[i] > 0
    rewards = [augment_dataset(src, pair, AugmentConfig(eta=e)).rewards[i]
               for e in (0.0, 0.2, 0.5, 1.0)]
    assert all(a > b for a, b in zip(rewards, rewards[1:]))


def test_order_and_delta_column(clip_pair):
    src, _, pair = clip_pair
    out = augment_dataset(src, pair, AugmentConfig(eta=0.3, record_delta=True))
    assert np.array_equal(out.states, src.states)
    assert np.array_equal(out.actions, src.actions)
    assert out.delta_r is not None
    assert np.allclose(src.rewards - 0.3 * out.delta_r, out.rewards)


def test_masked_rewards_rejected(clip_pair):
    _, _, pair = clip_pair
    env = envs.resolve("clip1d-source")
    masked = data.collect(env, data.make_behavior(env, "random"), 100, seed=0,
                          mask_rewards=True, domain="source")
    with pytest.raises(RejectedInputError):
        augment_dataset(masked, pair, AugmentConfig(eta=0.1))


def test_infeasible_transitions_pay_more(clip_pair):
    src, _, pair = clip_pair
    out = augment_dataset(src, pair, AugmentConfig(eta=0.5))
    pair_envs = envs.resolve_pair("clip1d-source", "clip1d-target")
    feas = np.array([pair_envs.target_feasible(src.states[i], int(src.actions[i]),
                                               src.next_states[i])
                     for i in range(len(src))])
    shift = out.rewards - src.rewards
    # label feasibility from the known clip rule and compare the mean shifts
    assert shift[~feas].mean() < shift[feas].mean()


def test_augmented_reward_bound_arithmetic():
    assert augmented_reward_bound(AugmentConfig(eta=0.1), 1.0) == pytest.approx(2.0)
    assert augmented_reward_bound(AugmentConfig(eta=0.0), 7.0) == pytest.approx(7.0)
    assert augmented_reward_bound(AugmentConfig(eta=0.5), 100.0) == pytest.approx(105.0)


def test_bad_eta_rejected():
    with pytest.raises(RejectedInputError):
        AugmentConfig(eta=-0.1)
    with pytest.raises(RejectedInputError):
        AugmentConfig(eta=float("nan"))
