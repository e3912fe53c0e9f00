"""Channel knowledge base: a PPO actor-critic that offsets the rate preset map.

The state stacks the normalised entropy map, SNR map and previous action
into three planes over the token grid.  The action shifts rate indices by
one of ``OFFSETS``, globally or per region.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn import functional as F

from . import core
from .channel import ChannelSpec, snr_map
from .core import RngStream
from .validation import check_images, check_is_fitted

logger = logging.getLogger(__name__)

OFFSETS = (-2, -1, 0, 1, 2)
NEUTRAL = OFFSETS.index(0)
AGENT_FORMAT = "akb-agent/1"


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 32
    learning_rate: float = 3e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    steps_per_update: int = 64
    psnr_floor_db: float = 20.0
    psnr_span_db: float = 20.0
    cbr_scale: float = 0.06
    e_norm: float = 32.0
    snr_norm_db: float = 20.0
    reward_baseline: str = "none"

    def __post_init__(self):
        if self.reward_baseline not in ("none", "neutral"):
            raise ValueError(f"unknown reward_baseline {self.reward_baseline!r}")
        if not 0 < self.clip_eps:
            raise ValueError("clip_eps must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.minibatch_size < 1 or self.steps_per_update < self.minibatch_size:
            raise ValueError("steps_per_update must be >= minibatch_size >= 1")


# -- state, action, reward ---------------------------------------------------


def build_state(e, spec: ChannelSpec, prev, cfg: PPOConfig | None = None, n_actions: int = len(OFFSETS)) -> np.ndarray:
    """``(h, w, 3)`` state: entropy / e_norm, SNR / 20 dB, previous action index / (|A|-1).

    ``prev`` is an action index (global) or an ``(h, w)`` map of indices.
    """
    cfg = cfg or PPOConfig()
    e = np.asarray(e, dtype=np.float64)
    h, w = e.shape
    prev_plane = np.broadcast_to(np.asarray(prev, dtype=np.float64), (h, w)) / (n_actions - 1)
    state = np.stack([e / cfg.e_norm, snr_map(spec, h, w) / cfg.snr_norm_db, prev_plane], axis=-1)
    if not np.all(np.isfinite(state)):
        raise ValueError("state contains non-finite values")
    return state


def region_of_tokens(grid: tuple[int, int], regions: tuple[int, int]) -> np.ndarray:
    """Region index of every token when the grid is split into ``regions`` blocks."""
    h, w = grid
    rh, rw = regions
    rows = (np.arange(h) * rh) // h
    cols = (np.arange(w) * rw) // w
    return rows[:, None] * rw + cols[None, :]


def apply_action(rm, action, n_rates: int, mode: str = "global", regions: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Shift rate indices by the chosen offset(s); dropped tokens (index 0) stay dropped."""
    rm = np.asarray(rm, dtype=np.int64)
    a = np.asarray(action, dtype=np.int64)
    if np.any(a < 0) or np.any(a >= len(OFFSETS)):
        raise ValueError(f"invalid action {action}")
    offsets = np.asarray(OFFSETS)[a]
    if mode == "region4x4":
        offsets = offsets.reshape(-1)[region_of_tokens(rm.shape, regions)]
    elif a.size != 1:
        raise ValueError("global mode takes a single action")
    else:
        offsets = int(offsets.reshape(-1)[0])
    shifted = np.clip(rm + offsets, 0, n_rates - 1)
    return np.where(rm == 0, 0, shifted)


def reward(psnr_db, cbr_value, cfg: PPOConfig):
    psnr_norm = np.clip((np.asarray(psnr_db, dtype=np.float64) - cfg.psnr_floor_db) / cfg.psnr_span_db, 0.0, 1.0)
    cbr_norm = np.asarray(cbr_value, dtype=np.float64) / cfg.cbr_scale
    r = cfg.alpha * psnr_norm - cfg.beta * cbr_norm
    return float(r) if np.ndim(r) == 0 else r


# -- advantages --------------------------------------------------------------


def gae(rewards, values, terminals, bootstrap: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns (advantages not yet normalised)."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    done = np.asarray(terminals, dtype=np.float64)
    if not (r.shape == v.shape == done.shape):
        raise ValueError("rewards, values and terminals must have equal lengths")
    adv = np.zeros_like(r)
    next_v, next_a = float(bootstrap), 0.0
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - done[t]
        delta = r[t] + gamma * next_v * live - v[t]
        next_a = delta + gamma * lam * live * next_a
        adv[t] = next_a
        next_v = v[t]
    return adv, adv + v


def normalize_advantages(adv, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)


# -- network -----------------------------------------------------------------


class ActorCritic(nn.Module):
    """Shared conv trunk with global pooling, a categorical actor head and a scalar critic.

    In ``region4x4`` mode the actor emits independent logits per region and
    the joint log-probability is their sum.
    """

    def __init__(self, channels: int = 16, n_actions: int = len(OFFSETS), mode: str = "global", regions=(4, 4)):
        super().__init__()
        if mode not in ("global", "region4x4"):
            raise ValueError(f"unknown action mode {mode!r}")
        self.mode = mode
        self.regions = tuple(regions)
        self.n_actions = n_actions
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if mode == "global":
            self.actor = nn.Linear(channels, n_actions)
        else:
            self.actor = nn.Conv2d(channels, n_actions, 1)
        self.critic = nn.Linear(channels, 1)
        nn.init.zeros_(self.actor.weight)
        nn.init.zeros_(self.actor.bias)

    @property
    def n_heads(self) -> int:
        return 1 if self.mode == "global" else self.regions[0] * self.regions[1]

    def forward(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(B, 3, h, w)`` states to logits ``(B, heads, |A|)`` and values ``(B,)``."""
        h = F.gelu(self.conv2(F.gelu(self.conv1(s))))
        pooled = h.mean(dim=(2, 3))
        if self.mode == "global":
            logits = self.actor(pooled)[:, None]
        else:
            logits = self.actor(F.adaptive_avg_pool2d(h, self.regions)).flatten(2).transpose(1, 2)
        return logits, self.critic(pooled).squeeze(-1)

    def evaluate(self, s: torch.Tensor, actions: torch.Tensor):
        """Log-probability of ``actions`` ``(B, heads)``, policy entropy and value."""
        logits, value = self(s)
        logp_all = F.log_softmax(logits, dim=-1)
        logp = logp_all.gather(-1, actions[..., None]).squeeze(-1).sum(-1)
        entropy = -(logp_all.exp() * logp_all).sum(-1).sum(-1)
        return logp, entropy, value


def _states_tensor(states, dtype) -> torch.Tensor:
    s = torch.as_tensor(np.asarray(states), dtype=dtype)
    if s.dim() == 3:
        s = s[None]
    return s.permute(0, 3, 1, 2)


def action_probs(net: ActorCritic, states) -> np.ndarray:
    """Action probabilities ``(B, heads, |A|)`` in float64."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        logits, _ = net(_states_tensor(states, dtype))
    if not torch.all(torch.isfinite(logits)):
        raise FloatingPointError("policy produced non-finite logits")
    return torch.softmax(logits.double(), dim=-1).numpy()


def policy_step(states, net: ActorCritic, rng: RngStream | None = None, deterministic: bool = False):
    """Pick actions for a state or a batch of states.

    Returns ``(actions, log_probs, values)``; ``actions`` has shape ``(B, heads)``.
    Sampling uses ``rng`` (inverse CDF on float64 probabilities).
    """
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        logits, values = net(_states_tensor(states, dtype))
    if not torch.all(torch.isfinite(logits)):
        raise FloatingPointError("policy produced non-finite logits")
    logp_all = torch.log_softmax(logits.double(), dim=-1).numpy()
    probs = np.exp(logp_all)
    if deterministic:
        actions = probs.argmax(axis=-1)
    else:
        if rng is None:
            raise ValueError("stochastic policy_step needs an RngStream")
        u = rng.generator.random(probs.shape[:-1])
        cdf = np.cumsum(probs, axis=-1)
        actions = np.minimum((u[..., None] >= cdf).sum(axis=-1), probs.shape[-1] - 1)
    logp = np.take_along_axis(logp_all, actions[..., None], axis=-1)[..., 0].sum(-1)
    return actions.astype(np.int64), logp, values.double().numpy()


# -- rollouts and PPO --------------------------------------------------------


@dataclass
class Rollout:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    terminals: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)

    def add(self, state, action, log_prob, value, reward_, terminal=True):
        if log_prob > 1e-12:
            raise ValueError("log-probabilities must be <= 0")
        self.states.append(np.asarray(state))
        self.actions.append(np.asarray(action, dtype=np.int64).reshape(-1))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward_))
        self.terminals.append(bool(terminal))

    def extend(self, other: "Rollout"):
        for name in ("states", "actions", "log_probs", "values", "rewards", "terminals"):
            getattr(self, name).extend(getattr(other, name))


def ppo_loss(net: ActorCritic, states, actions, old_logp, advantages, returns, cfg: PPOConfig):
    """Clipped-surrogate PPO loss on one minibatch; returns ``(loss, stats)``."""
    logp, entropy, value = net.evaluate(states, actions)
    ratio = torch.exp(logp - old_logp)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    policy_obj = torch.min(unclipped, clipped).mean()
    value_loss = ((value - returns) ** 2).mean()
    ent = entropy.mean()
    loss = -policy_obj + cfg.value_coef * value_loss - cfg.entropy_coef * ent
    stats = {
        "policy_loss": -policy_obj.item(),
        "value_loss": value_loss.item(),
        "entropy": ent.item(),
        "clip_fraction": (torch.abs(ratio - 1.0) > cfg.clip_eps).double().mean().item(),
    }
    return loss, stats


def ppo_update(buffer: Rollout, cfg: PPOConfig, net: ActorCritic, optimizer, rng: RngStream, bootstrap: float = 0.0) -> dict:
    """Run ``cfg.epochs`` passes of minibatch PPO over the buffer."""
    if len(buffer) < cfg.minibatch_size:
        raise ValueError(f"buffer has {len(buffer)} samples, need >= {cfg.minibatch_size}")
    dtype = next(net.parameters()).dtype
    adv, ret = gae(buffer.rewards, buffer.values, buffer.terminals, bootstrap, cfg.gamma, cfg.gae_lambda)
    adv = normalize_advantages(adv)
    S = _states_tensor(np.stack(buffer.states), dtype)
    A = torch.as_tensor(np.stack(buffer.actions))
    P = torch.as_tensor(buffer.log_probs, dtype=dtype)
    ADV = torch.as_tensor(adv, dtype=dtype)
    RET = torch.as_tensor(ret, dtype=dtype)
    n = len(buffer)
    totals: dict[str, list] = {"policy_loss": [], "value_loss": [], "entropy": [], "clip_fraction": []}
    for _ in range(cfg.epochs):
        perm = rng.generator.permutation(n)
        for start in range(0, n - cfg.minibatch_size + 1, cfg.minibatch_size):
            mb = torch.as_tensor(perm[start : start + cfg.minibatch_size])
            loss, stats = ppo_loss(net, S[mb], A[mb], P[mb], ADV[mb], RET[mb], cfg)
            if not torch.isfinite(loss):
                logger.warning("non-finite PPO loss, update aborted")
                return {"aborted": True, **{k: float(np.mean(v)) if v else float("nan") for k, v in totals.items()}}
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), 1.0)
            optimizer.step()
            for k, v in stats.items():
                totals[k].append(v)
    return {"aborted": False, **{k: float(np.mean(v)) for k, v in totals.items()}}


# -- environment -------------------------------------------------------------


@dataclass
class EpisodeBatch:
    rollout: Rollout
    reports: list
    actions: np.ndarray
    psnr: np.ndarray
    cbr: np.ndarray


def run_episodes(
    X,
    codec,
    snr_db,
    net: ActorCritic,
    cfg: PPOConfig,
    rngs: list[RngStream],
    cond=None,
    kb_bits=None,
    deterministic: bool = False,
    scheme: str = "akb_jscc",
    seed: int = 0,
    y_hat=None,
) -> EpisodeBatch:
    """One single-step episode per image: state -> action -> rate map -> transmit -> reward.

    ``rngs[i]`` drives image ``i``; its child stream 0 samples the action and
    child stream 1 draws the channel noise.  With ``cfg.reward_baseline ==
    "neutral"`` the reward is measured against the zero-offset rate map sent
    over the same noise realisation, which removes per-image variance.
    """
    X = check_images(X)
    n = len(X)
    snr = np.broadcast_to(np.asarray(snr_db, dtype=np.float64), (n,))
    if y_hat is None:
        y_hat = codec.transform(X)
    e = codec.entropy_maps(y_hat)
    rm0 = codec.rate_maps(y_hat=y_hat)
    n_rates = len(codec.config_.rate_set)
    states = np.stack([build_state(e[i], ChannelSpec(float(snr[i])), NEUTRAL, cfg) for i in range(n)])
    actions = np.empty((n, net.n_heads), dtype=np.int64)
    logps = np.empty(n)
    values = np.empty(n)
    if deterministic:
        actions[:], logps[:], values[:] = policy_step(states, net, deterministic=True)
    else:
        for i in range(n):
            a, lp, v = policy_step(states[i], net, rngs[i].child(0))
            actions[i], logps[i], values[i] = a[0], lp[0], v[0]
    rm = np.stack([apply_action(rm0[i], actions[i], n_rates, net.mode, net.regions) for i in range(n)])
    noise_rngs = [r.child(1) for r in rngs]
    res = codec.transmit(X, snr, noise_rngs, cond=cond, kb_bits=kb_bits, rate_maps=rm, y_hat=y_hat)
    rewards = reward(res.psnr, res.cbr, cfg)
    if cfg.reward_baseline == "neutral":
        ref = codec.transmit(X, snr, [r.child(1) for r in rngs], cond=cond, kb_bits=kb_bits, rate_maps=rm0, y_hat=y_hat)
        rewards = rewards - reward(ref.psnr, ref.cbr, cfg)
    rollout = Rollout()
    reports = []
    for i in range(n):
        rollout.add(states[i], actions[i], logps[i], values[i], rewards[i], True)
        reports.append(core.LinkReport(scheme, float(snr[i]), float(res.cbr[i]), float(res.psnr[i]), 1, seed))
    return EpisodeBatch(rollout, reports, actions, res.psnr, res.cbr)


def run_episode(img, codec, spec: ChannelSpec, net: ActorCritic, rng: RngStream, cfg: PPOConfig | None = None,
                cond=None, kb_bits=None, deterministic=False):
    """Single-image convenience wrapper around :func:`run_episodes`."""
    cfg = cfg or PPOConfig()
    out = run_episodes(
        np.asarray(img)[None], codec, spec.snr_db, net, cfg, [rng],
        cond=None if cond is None else np.asarray(cond)[None],
        kb_bits=None if kb_bits is None else [kb_bits],
        deterministic=deterministic,
    )
    return out.rollout, out.reports[0]


# -- estimator ---------------------------------------------------------------


class ChannelKBAgent(BaseEstimator):
    """PPO-trained rate-offset policy, trained against a frozen codec.

    ``fit(X, codec=...)`` collects single-step episodes on images ``X`` at
    SNRs drawn from ``snr_choices``; ``predict`` returns greedy actions for
    states and ``predict_proba`` their probabilities.
    """

    def __init__(
        self,
        n_episodes=2000,
        snr_choices=(10.0,),
        action_mode="global",
        channels=16,
        clip_eps=0.2,
        gamma=0.99,
        gae_lambda=0.95,
        epochs=4,
        minibatch_size=32,
        learning_rate=3e-3,
        entropy_coef=0.01,
        value_coef=0.5,
        alpha=1.0,
        beta=1.0,
        steps_per_update=64,
        psnr_floor_db=20.0,
        psnr_span_db=20.0,
        cbr_scale=0.06,
        reward_baseline="none",
        random_state=0,
    ):
        self.n_episodes = n_episodes
        self.snr_choices = snr_choices
        self.action_mode = action_mode
        self.channels = channels
        self.clip_eps = clip_eps
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.learning_rate = learning_rate
        self.entropy_coef = entropy_coef
        self.value_coef = value_coef
        self.alpha = alpha
        self.beta = beta
        self.steps_per_update = steps_per_update
        self.psnr_floor_db = psnr_floor_db
        self.psnr_span_db = psnr_span_db
        self.cbr_scale = cbr_scale
        self.reward_baseline = reward_baseline
        self.random_state = random_state

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(
            clip_eps=self.clip_eps, gamma=self.gamma, gae_lambda=self.gae_lambda, epochs=self.epochs,
            minibatch_size=self.minibatch_size, learning_rate=self.learning_rate,
            entropy_coef=self.entropy_coef, value_coef=self.value_coef, alpha=self.alpha, beta=self.beta,
            steps_per_update=self.steps_per_update, psnr_floor_db=self.psnr_floor_db, psnr_span_db=self.psnr_span_db, cbr_scale=self.cbr_scale,
            reward_baseline=self.reward_baseline,
        )

    def fit(self, X, y=None, codec=None, cond=None, kb_bits=None, codec_hash: str | None = None):
        if codec is None:
            raise ValueError("ChannelKBAgent.fit needs a fitted codec")
        X = check_images(X)
        cfg = self.ppo_config()
        root = core.rng_derive(self.random_state, (0xA6E7,))
        torch.manual_seed(root.torch_seed())
        net = ActorCritic(self.channels, mode=self.action_mode)
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        sampler = root.child(0).generator
        y_all = codec.transform(X)
        snr_choices = np.asarray(self.snr_choices, dtype=np.float64)
        self.history_ = []
        done = 0
        update = 0
        while done < self.n_episodes:
            n = min(cfg.steps_per_update, self.n_episodes - done)
            if n < cfg.minibatch_size:
                break
            idx = sampler.integers(0, len(X), n)
            snr = snr_choices[sampler.integers(0, len(snr_choices), n)]
            rngs = [root.child(1, update, i) for i in range(n)]
            batch = run_episodes(
                X[idx], codec, snr, net, cfg, rngs,
                cond=None if cond is None else np.asarray(cond)[idx],
                kb_bits=None if kb_bits is None else [kb_bits[j] for j in idx],
                y_hat=y_all[idx],
            )
            stats = ppo_update(batch.rollout, cfg, net, opt, root.child(2, update))
            stats.update(
                episodes=done + n,
                mean_reward=float(np.mean(batch.rollout.rewards)),
                mean_offset=float(np.mean(np.asarray(OFFSETS)[batch.actions])),
            )
            self.history_.append(stats)
            logger.info("agent update %d: %s", update, stats)
            done += n
            update += 1
        self.net_ = net
        self.codec_hash_ = codec_hash
        return self

    def predict_proba(self, states) -> np.ndarray:
        check_is_fitted(self, "net_")
        return action_probs(self.net_, states)

    def predict(self, states) -> np.ndarray:
        check_is_fitted(self, "net_")
        return policy_step(states, self.net_, deterministic=True)[0]

    def expected_offset(self, states) -> float:
        """Mean offset under the policy's action distribution."""
        return float((self.predict_proba(states) * np.asarray(OFFSETS)).sum(-1).mean())

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        blob = {
            "format": AGENT_FORMAT,
            "ppo_config": asdict(self.ppo_config()),
            "params": self.get_params(),
            "state_dict": self.net_.state_dict(),
            "codec_hash": self.codec_hash_,
        }
        buf = io.BytesIO()
        torch.save(blob, buf)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, codec_hash: str | None = None) -> "ChannelKBAgent":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != AGENT_FORMAT:
            raise ValueError(f"{path}: not an agent checkpoint")
        params = dict(blob["params"])
        params["snr_choices"] = tuple(params["snr_choices"])
        agent = cls(**params)
        agent.net_ = ActorCritic(agent.channels, mode=agent.action_mode)
        agent.net_.load_state_dict(blob["state_dict"])
        agent.net_.eval()
        agent.codec_hash_ = blob.get("codec_hash")
        if codec_hash is not None and agent.codec_hash_ != codec_hash:
            warnings.warn(
                f"agent was trained against codec {agent.codec_hash_}, loading with {codec_hash}",
                RuntimeWarning,
                stacklevel=2,
            )
        return agent
