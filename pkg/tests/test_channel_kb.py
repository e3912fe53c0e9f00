import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from akb.channel import ChannelSpec
from akb.channel_kb import (
    NEUTRAL,
    OFFSETS,
    ActorCritic,
    ChannelKBAgent,
    PPOConfig,
    Rollout,
    action_probs,
    apply_action,
    build_state,
    gae,
    normalize_advantages,
    policy_step,
    ppo_loss,
    ppo_update,
    region_of_tokens,
    reward,
    run_episode,
    run_episodes,
)
from akb.codec import JSCCCodec
from akb.core import RngStream

from conftest import smooth_images


def test_build_state_examples():
    s = build_state(np.full((4, 4), 16.0), ChannelSpec(10), NEUTRAL)
    assert s.shape == (4, 4, 3)
    np.testing.assert_allclose(s, 0.5)
    s0 = build_state(np.zeros((2, 3)), ChannelSpec(0), NEUTRAL)
    assert np.all(s0[..., 1] == 0) and np.all(s0[..., 2] == 0.5)
    with pytest.raises(ValueError):
        build_state(np.full((2, 2), np.inf), ChannelSpec(0), NEUTRAL)


def test_apply_action_examples():
    assert apply_action(np.array([[3]]), OFFSETS.index(1), 8)[0, 0] == 4
    assert apply_action(np.array([[1]]), OFFSETS.index(-2), 8)[0, 0] == 0
    assert apply_action(np.array([[0]]), OFFSETS.index(2), 8)[0, 0] == 0
    assert apply_action(np.array([[7]]), OFFSETS.index(2), 8)[0, 0] == 7
    with pytest.raises(ValueError):
        apply_action(np.array([[1]]), 5, 8)


@given(st.integers(0, 2**31 - 1), st.sampled_from(["global", "region4x4"]))
@settings(max_examples=50, deadline=None)
def test_apply_action_bounds(seed, mode):
    rng = np.random.default_rng(seed)
    rm = rng.integers(0, 8, (4, 4))
    a = rng.integers(0, 5, 16 if mode == "region4x4" else 1)
    out = apply_action(rm, a, 8, mode)
    assert out.min() >= 0 and out.max() <= 7
    assert np.all(out[rm == 0] == 0)


def test_region_of_tokens():
    r = region_of_tokens((8, 8), (4, 4))
    assert r[0, 0] == 0 and r[7, 7] == 15 and r[0, 2] == 1
    assert np.array_equal(region_of_tokens((4, 4), (4, 4)), np.arange(16).reshape(4, 4))


def test_reward_examples():
    cfg = PPOConfig(alpha=1, beta=0)
    assert reward(30.0, 0.02, cfg) == pytest.approx(0.5)
    assert reward(30.0, 0.018, PPOConfig()) == pytest.approx(0.2)
    assert reward(15.0, 0.05, cfg) == 0.0
    assert reward(60.0, 0.0, cfg) == 1.0


def test_gae_examples():
    adv, ret = gae([1.0], [0.25], [True], bootstrap=9.0, gamma=0.99, lam=0.95)
    assert adv[0] == pytest.approx(0.75) and ret[0] == pytest.approx(1.0)
    r = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, 0.1, 0.2])
    adv, _ = gae(r, v, [False] * 3, bootstrap=4.0, gamma=0.0, lam=0.9)
    np.testing.assert_allclose(adv, r - v)
    adv, ret = gae(r, v, [False] * 3, bootstrap=4.0, gamma=1.0, lam=1.0)
    np.testing.assert_allclose(adv, [6 + 4 - 0.5, 5 + 4 - 0.1, 3 + 4 - 0.2])
    np.testing.assert_allclose(ret, adv + v)
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], [True], 0.0, 0.9, 0.9)


def test_gae_terminal_cuts_bootstrap():
    adv, _ = gae([1.0, 1.0], [0.0, 0.0], [True, False], bootstrap=10.0, gamma=1.0, lam=1.0)
    np.testing.assert_allclose(adv, [1.0, 11.0])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=200))
def test_normalized_advantages(xs):
    a = np.asarray(xs)
    if a.std() < 1e-3:
        return
    n = normalize_advantages(a)
    assert abs(n.mean()) < 1e-6
    assert abs(n.var() - 1) < 1e-3


def _batch(n=8, mode="global", channels=2, seed=0):
    torch.manual_seed(seed)
    net = ActorCritic(channels, mode=mode).double()
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0, 0.5)
    rng = np.random.default_rng(seed)
    states = torch.as_tensor(rng.uniform(0, 1, (n, 3, 4, 4)))
    heads = net.n_heads
    actions = torch.as_tensor(rng.integers(0, 5, (n, heads)))
    with torch.no_grad():
        logp, _, _ = net.evaluate(states, actions)
    old = logp + torch.as_tensor(rng.uniform(-0.6, 0.6, n))  # some ratios clipped, none at the boundary
    adv = torch.as_tensor(rng.normal(size=n))
    ret = torch.as_tensor(rng.normal(size=n))
    return net, states, actions, old, adv, ret


def test_policy_uniform_at_init():
    net = ActorCritic(4)
    p = action_probs(net, np.random.default_rng(0).uniform(size=(3, 4, 4, 3)))
    np.testing.assert_allclose(p, 0.2, atol=1e-7)
    assert np.allclose(p.sum(-1), 1.0)


def test_policy_step_deterministic_and_sampling():
    net, *_ = _batch()
    s = np.random.default_rng(1).uniform(size=(5, 4, 4, 3))
    a1 = policy_step(s, net, deterministic=True)[0]
    a2 = policy_step(s, net, deterministic=True)[0]
    assert np.array_equal(a1, a2)
    a, lp, v = policy_step(s, net, RngStream(0, (1,)))
    assert a.shape == (5, 1) and np.all(lp <= 0) and v.shape == (5,)
    assert np.array_equal(a, policy_step(s, net, RngStream(0, (1,)))[0])
    with pytest.raises(ValueError):
        policy_step(s, net)


def test_sampling_frequencies_follow_probabilities():
    net, *_ = _batch()
    s = np.random.default_rng(2).uniform(size=(4, 4, 3))
    p = action_probs(net, s)[0, 0]
    rng = RngStream(3)
    counts = np.bincount([policy_step(s, net, rng)[0][0, 0] for _ in range(4000)], minlength=5)
    np.testing.assert_allclose(counts / 4000, p, atol=0.03)


def test_clip_arithmetic():
    cfg = PPOConfig(clip_eps=0.2)
    for ratio, adv, expected in ((1.5, 1.0, 1.2), (0.5, -1.0, -0.8)):
        r = torch.tensor([ratio], dtype=torch.float64)
        a = torch.tensor([adv], dtype=torch.float64)
        val = torch.min(r * a, torch.clamp(r, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * a).item()
        assert val == pytest.approx(expected, abs=1e-12)


def test_ppo_identity_ratio_gives_mean_advantage():
    net, s, a, _, adv, ret = _batch()
    with torch.no_grad():
        logp, _, _ = net.evaluate(s, a)
    cfg = PPOConfig(value_coef=0.0, entropy_coef=0.0)
    loss, stats = ppo_loss(net, s, a, logp, adv, ret, cfg)
    assert -loss.item() == pytest.approx(adv.mean().item(), abs=1e-12)
    assert stats["clip_fraction"] == 0.0


def test_ppo_large_eps_is_unclipped_surrogate():
    net, s, a, old, adv, ret = _batch()
    cfg = PPOConfig(clip_eps=1e6, value_coef=0.0, entropy_coef=0.0)
    loss, stats = ppo_loss(net, s, a, old, adv, ret, cfg)
    with torch.no_grad():
        logp, _, _ = net.evaluate(s, a)
    surrogate = (torch.exp(logp - old) * adv).mean().item()
    assert -loss.item() == pytest.approx(surrogate, abs=1e-12)
    assert 0.0 <= stats["clip_fraction"] <= 1.0 and stats["clip_fraction"] == 0.0


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


@pytest.mark.parametrize("mode", ["global", "region4x4"])
def test_ppo_gradient_check(mode):
    net, s, a, old, adv, ret = _batch(mode=mode)
    cfg = PPOConfig()

    def loss():
        return ppo_loss(net, s, a, old, adv, ret, cfg)[0]

    net.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy()
    numeric = []
    h = 1e-5
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old_v = flat[i].item()
                flat[i] = old_v + h
                up = loss().item()
                flat[i] = old_v - h
                down = loss().item()
                flat[i] = old_v
                numeric.append((up - down) / (2 * h))
    assert _rel_err(analytic, np.array(numeric)) < 1e-4


def test_rollout_rejects_positive_logprob():
    r = Rollout()
    with pytest.raises(ValueError):
        r.add(np.zeros((2, 2, 3)), 0, 0.5, 0.0, 0.0)


def test_ppo_update_runs_and_requires_minibatch():
    net = ActorCritic(4)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    cfg = PPOConfig(minibatch_size=8, steps_per_update=16)
    rng = np.random.default_rng(0)
    buf = Rollout()
    for _ in range(16):
        s = rng.uniform(size=(4, 4, 3))
        a, lp, v = policy_step(s, net, RngStream(0, (len(buf),)))
        buf.add(s, a[0], lp[0], v[0], float(a[0, 0] == 0), True)
    stats = ppo_update(buf, cfg, net, opt, RngStream(1))
    assert not stats["aborted"] and 0 <= stats["clip_fraction"] <= 1
    small = Rollout()
    small.add(np.zeros((4, 4, 3)), 0, -1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        ppo_update(small, cfg, net, opt, RngStream(1))


def test_bandit_learns_preferred_action():
    """A pure contextual bandit where action 0 pays 1 and others 0: PPO must find it."""
    torch.manual_seed(0)
    net = ActorCritic(8)
    cfg = PPOConfig(minibatch_size=32, steps_per_update=64, learning_rate=1e-2)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(0)
    for u in range(15):
        buf = Rollout()
        for i in range(64):
            s = rng.uniform(size=(4, 4, 3))
            a, lp, v = policy_step(s, net, RngStream(0, (u, i)))
            buf.add(s, a[0], lp[0], v[0], float(a[0, 0] == 0), True)
        ppo_update(buf, cfg, net, opt, RngStream(1, (u,)))
    p = action_probs(net, rng.uniform(size=(16, 4, 4, 3)))[:, 0, 0]
    assert p.mean() > 0.9


@pytest.fixture(scope="module")
def tiny_codec():
    X = smooth_images(8, 16)
    return JSCCCodec(
        token_dim=8, reduction=4, width=6, jscc_width=8, n_blocks=1, conditioning_dim=4,
        rate_set=(0, 1, 2, 4), n_steps=5, batch_size=4, log_every=0, eta=0.3,
    ).fit(X), X


def test_run_episodes_behavior_logprob_consistency(tiny_codec):
    codec, X = tiny_codec
    net, *_ = _batch(channels=4)
    net = net.float()
    rngs = [RngStream(5, (i,)) for i in range(len(X))]
    ep = run_episodes(X, codec, 5.0, net, PPOConfig(), rngs)
    assert len(ep.rollout) == len(X) and all(ep.rollout.terminals)
    S = torch.as_tensor(np.stack(ep.rollout.states), dtype=torch.float32).permute(0, 3, 1, 2)
    A = torch.as_tensor(np.stack(ep.rollout.actions))
    with torch.no_grad():
        logp, _, _ = net.evaluate(S, A)
    np.testing.assert_allclose(logp.double().numpy(), ep.rollout.log_probs, atol=1e-6)
    ep2 = run_episodes(X, codec, 5.0, net, PPOConfig(), [RngStream(5, (i,)) for i in range(len(X))])
    assert [r.to_dict() for r in ep.reports] == [r.to_dict() for r in ep2.reports]


def _forced(action: int) -> ActorCritic:
    net = ActorCritic(4)
    with torch.no_grad():
        net.actor.bias[action] = 10.0
    return net


def test_neutral_reward_baseline(tiny_codec):
    codec, X = tiny_codec
    rngs = [RngStream(6, (i,)) for i in range(len(X))]
    cfg = PPOConfig(reward_baseline="neutral", beta=0.5)
    ep = run_episodes(X, codec, 5.0, _forced(NEUTRAL), cfg, rngs, deterministic=True)
    assert np.all(np.asarray(ep.rollout.rewards) == 0.0)
    up = OFFSETS.index(2)
    plain = PPOConfig(beta=0.5)
    ref = run_episodes(X, codec, 5.0, _forced(NEUTRAL), plain, rngs, deterministic=True)
    ep = run_episodes(X, codec, 5.0, _forced(up), cfg, rngs, deterministic=True)
    raw = run_episodes(X, codec, 5.0, _forced(up), plain, rngs, deterministic=True)
    np.testing.assert_allclose(ep.rollout.rewards, np.asarray(raw.rollout.rewards) - np.asarray(ref.rollout.rewards), atol=1e-12)
    with pytest.raises(ValueError):
        PPOConfig(reward_baseline="mean")


def test_run_episode_single(tiny_codec):
    codec, X = tiny_codec
    net = ActorCritic(4)
    roll, rep = run_episode(X[0], codec, ChannelSpec(10), net, RngStream(0), deterministic=True)
    assert len(roll) == 1 and rep.snr_db == 10.0
    _, rep2 = run_episode(X[0], codec, ChannelSpec(10), net, RngStream(0), deterministic=True)
    assert rep == rep2


def test_agent_estimator_and_checkpoint(tmp_path, tiny_codec):
    codec, X = tiny_codec
    agent = ChannelKBAgent(n_episodes=64, steps_per_update=32, minibatch_size=16, channels=4, snr_choices=(0.0, 10.0))
    agent.fit(X, codec=codec, codec_hash="abc")
    assert len(agent.history_) == 2
    s = np.stack([build_state(np.full((4, 4), 8.0), ChannelSpec(5), NEUTRAL)] * 3)
    assert agent.predict(s).shape == (3, 1)
    assert agent.predict_proba(s).shape == (3, 1, 5)
    agent.save(tmp_path / "a.pt")
    back = ChannelKBAgent.load(tmp_path / "a.pt", codec_hash="abc")
    np.testing.assert_array_equal(back.predict_proba(s), agent.predict_proba(s))
    with pytest.warns(RuntimeWarning):
        ChannelKBAgent.load(tmp_path / "a.pt", codec_hash="other")
    with pytest.raises(ValueError):
        ChannelKBAgent().fit(X)
