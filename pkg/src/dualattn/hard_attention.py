"""Recurrent hard-attention agent that scores one tile from a few glimpses."""
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .glimpse_env import GlimpseEnv
from .soft_attention import image_to_tensor


@dataclass
class AgentConfig:
    n_classes: int = 4
    glimpse_size: int = 128
    glimpse_channels: tuple = (16, 32, 32)
    context_channels: tuple = (8, 16, 32)
    feature_size: int = 256
    hidden_sizes: tuple = (256, 128)
    sigma: float = 0.15
    T: int = 6


AGENT_PRESETS = {
    "her2": AgentConfig(n_classes=4),
    "mmr": AgentConfig(n_classes=2),
    "synthetic": AgentConfig(n_classes=4, glimpse_channels=(8, 16, 16), context_channels=(4, 8, 16)),
}


def _cnn(channels, in_channels=3):
    c1, c2, c3 = channels
    return nn.Sequential(
        nn.Conv2d(in_channels, c1, 5, stride=4, padding=2), nn.ReLU(),
        nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
        nn.AdaptiveAvgPool2d(2), nn.Flatten(),
    )


class GlimpseNetwork(nn.Module):
    """``v_t = v_g * v_l``: projected CNN features of both glimpses times a location embedding."""

    def __init__(self, channels=(16, 32, 32), feature_size=256):
        super().__init__()
        self.cnn = _cnn(channels)
        self.proj = nn.Linear(2 * 4 * channels[2], feature_size)
        self.loc = nn.Linear(2, feature_size)

    def forward(self, g40, g20, loc):
        b = g40.shape[0]
        feats = self.cnn(torch.cat([g40, g20], 0))
        v_g = F.relu(self.proj(torch.cat([feats[:b], feats[b:]], 1)))
        v_l = self.loc(loc)
        return v_g * v_l


class CoreNetwork(nn.Module):
    """Two stacked LSTM cells; the top hidden state is ``h_t``."""

    def __init__(self, input_size=256, hidden_sizes=(256, 128)):
        super().__init__()
        sizes = [input_size, *hidden_sizes]
        self.cells = nn.ModuleList(nn.LSTMCell(a, b) for a, b in zip(sizes, sizes[1:]))
        self.hidden_sizes = tuple(hidden_sizes)

    def init_state(self, batch, dtype=torch.float32):
        return [(torch.zeros(batch, n, dtype=dtype), torch.zeros(batch, n, dtype=dtype)) for n in self.hidden_sizes]

    def forward(self, v, state):
        new, x = [], v
        for cell, (h, c) in zip(self.cells, state):
            h, c = cell(x, (h, c))
            new.append((h, c))
            x = h
        return x, new


class ContextNetwork(nn.Module):
    def __init__(self, channels=(8, 16, 32), out_size=128):
        super().__init__()
        self.cnn = _cnn(channels)
        self.fc = nn.Linear(4 * channels[2], out_size)

    def forward(self, x):
        return F.relu(self.fc(self.cnn(x)))


class LocationNetwork(nn.Module):
    """Gaussian policy over the next location with mean ``tanh(W (h * c))``."""

    def __init__(self, input_size=128, sigma=0.15):
        super().__init__()
        self.fc = nn.Linear(input_size, 2)
        self.sigma = sigma

    def forward(self, h, context, generator=None, deterministic=False):
        mean = torch.tanh(self.fc(h * context))
        if deterministic or self.sigma <= 0:
            sample = mean.detach()
        else:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            sample = (mean + self.sigma * noise).detach()
        log_prob = gaussian_log_prob(sample, mean, self.sigma)
        return mean, sample, log_prob


def gaussian_log_prob(x, mean, sigma):
    """Isotropic Gaussian log-density summed over the last axis."""
    if sigma <= 0:
        return torch.zeros(mean.shape[:-1], dtype=mean.dtype)
    z = (x - mean) / sigma
    d = mean.shape[-1]
    return -0.5 * (z * z).sum(-1) - d * math.log(sigma * math.sqrt(2 * math.pi))


class HardAttentionAgent(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or AgentConfig()
        c = self.cfg
        top = c.hidden_sizes[-1]
        self.glimpse = GlimpseNetwork(c.glimpse_channels, c.feature_size)
        self.core = CoreNetwork(c.feature_size, c.hidden_sizes)
        self.context = ContextNetwork(c.context_channels, top)
        self.locator = LocationNetwork(top, c.sigma)
        self.classifier = nn.Linear(top, c.n_classes)
        self.baseline = nn.Linear(top, 1)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def glimpse_features(agent, pair, loc):
    """``v_t`` for a single glimpse pair (convenience wrapper)."""
    dt = agent.dtype
    g40 = image_to_tensor(pair.g40, dt)
    g20 = image_to_tensor(pair.g20, dt)
    return agent.glimpse(g40, g20, torch.as_tensor(np.asarray(loc, float)[None], dtype=dt))


def core_step(agent, state, v):
    return agent.core(v, state)


def propose_location(agent, h, context_feats, generator=None, deterministic=False):
    return agent.locator(h, context_feats, generator, deterministic)


def classify(agent, h):
    """Class logits, probabilities and arg-max predictions for hidden states ``h``."""
    logits = agent.classifier(h)
    probs = F.softmax(logits, -1)
    return logits, probs, probs.argmax(-1)


@dataclass
class EpisodeBatch:
    """Everything the losses need from a batch of episodes.

    Location tensors cover the ``T - 1`` proposed moves; the first location
    is drawn uniformly and carries no log-probability.
    """

    locations: np.ndarray  # (B, T, 2) visited locations
    loc_means: torch.Tensor  # (B, T-1, 2)
    loc_samples: torch.Tensor  # (B, T-1, 2) pre-clamp
    log_probs: torch.Tensor  # (B, T-1)
    logits: torch.Tensor  # (B, T, C)
    baselines: torch.Tensor  # (B, T)
    envs: list = field(repr=False, default_factory=list)

    @property
    def predictions(self):
        return self.logits.argmax(-1).detach().cpu().numpy()

    @property
    def final_probs(self):
        return F.softmax(self.logits[:, -1], -1)


def run_episodes(agent, tiles, T=None, rng=None, generator=None, deterministic=False, keep_states=False):
    """Run one episode per tile, all tiles stepping in lockstep.

    ``rng`` (numpy) draws the uniform first locations; ``generator`` (torch)
    drives the location policy noise.
    """
    T = T or agent.cfg.T
    rng = rng if rng is not None else np.random.default_rng(0)
    dt = agent.dtype
    envs = [GlimpseEnv(t, T, agent.cfg.glimpse_size, keep_states=keep_states) for t in tiles]
    b = len(envs)
    locs = rng.uniform(-1.0, 1.0, size=(b, 2))
    pairs = [env.reset(l) for env, l in zip(envs, locs)]
    state = agent.core.init_state(b, dt)
    visited = [locs.copy()]
    means, samples, log_probs, logits_all, baselines = [], [], [], [], []
    for t in range(T):
        g40 = image_to_tensor(np.stack([p.g40 for p in pairs]), dt)
        g20 = image_to_tensor(np.stack([p.g20 for p in pairs]), dt)
        loc_t = torch.as_tensor(visited[-1], dtype=dt)
        v = agent.glimpse(g40, g20, loc_t)
        h, state = agent.core(v, state)
        logits = agent.classifier(h)
        logits_all.append(logits)
        baselines.append(agent.baseline(h.detach())[:, 0])
        preds = logits.argmax(-1).tolist()
        if t == T - 1:
            for env, y in zip(envs, preds):
                env.step(None, y)
            break
        ctx = image_to_tensor(np.stack([env.peek_context() for env in envs]), dt)
        mean, sample, lp = agent.locator(h, agent.context(ctx), generator, deterministic)
        nxt = sample.clamp(-1.0, 1.0).cpu().numpy().astype(np.float64)
        means.append(mean)
        samples.append(sample)
        log_probs.append(lp)
        pairs = [env.step(l, y) for env, l, y in zip(envs, nxt, preds)]
        visited.append(nxt)
    empty = torch.zeros(b, 0, 2, dtype=dt)
    return EpisodeBatch(
        locations=np.stack(visited, 1),
        loc_means=torch.stack(means, 1) if means else empty,
        loc_samples=torch.stack(samples, 1) if samples else empty,
        log_probs=torch.stack(log_probs, 1) if log_probs else torch.zeros(b, 0, dtype=dt),
        logits=torch.stack(logits_all, 1),
        baselines=torch.stack(baselines, 1),
        envs=envs,
    )


@dataclass
class GlimpseEpisode:
    locations: list
    per_step_scores: list
    final_score: int
    rewards: list
    total_return: float
    policy: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "locations": [list(map(float, l)) for l in self.locations],
            "per_step_scores": [int(s) for s in self.per_step_scores],
            "final_score": int(self.final_score),
            "rewards": [float(r) for r in self.rewards],
            "return": float(self.total_return),
        }


def episode_records(batch, gt):
    """Per-tile ``GlimpseEpisode`` records with rewards against ground truth."""
    from .objectives import step_reward

    preds = batch.predictions
    out = []
    for i, g in enumerate(np.broadcast_to(np.asarray(gt), (len(preds),))):
        rewards = [step_reward(int(y), int(g)) for y in preds[i]]
        out.append(GlimpseEpisode(
            locations=[tuple(l) for l in batch.locations[i]],
            per_step_scores=[int(y) for y in preds[i]],
            final_score=int(preds[i][-1]),
            rewards=rewards,
            total_return=float(sum(rewards)),
            policy={"log_probs": batch.log_probs[i].detach().tolist()},
        ))
    return out


def run_episode(agent, tile, T=None, seed=0, deterministic=False, keep_states=True):
    """Single-tile convenience wrapper around ``run_episodes``."""
    gen = torch.Generator().manual_seed(int(seed))
    return run_episodes(agent, [tile], T, np.random.default_rng(seed), gen, deterministic, keep_states)
