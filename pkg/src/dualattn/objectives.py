"""Loss terms and rewards for the soft and hard attention stages."""
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F


@dataclass
class LossConfig:
    beta: float = 1.0
    delta: float = 1.0
    alpha: float = 0.5
    step_weight: float = 1.0
    discount: float = 1.0
    T: int = 6
    literal_entropy_sign: bool = False
    glimpse_box: float = 128 / 2048  # glimpse side as a fraction of the tile side

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def _t(x, dtype=torch.float64):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=dtype)


def entropy_loss(probs, beta=1.0, literal=False):
    """``beta * sum p log p`` (negative entropy, so minimizing spreads attention).

    ``literal=True`` returns ``beta * H`` instead. Zero cells contribute zero.
    """
    p = _t(probs)
    plogp = torch.where(p > 0, p * torch.log(torch.clamp(p, min=1e-300)), torch.zeros_like(p))
    neg_entropy = plogp.sum()
    return beta * (-neg_entropy if literal else neg_entropy)


def step_reward(predicted, gt):
    return 1.0 if int(predicted) == int(gt) else 0.0


def rewards_from_logits(logits, gt):
    """(B, T, C) logits and (B,) labels -> (B, T) 0/1 rewards."""
    gt = _t(gt, torch.long).reshape(-1, 1)
    return (logits.detach().argmax(-1) == gt).to(logits.dtype)


def returns_to_go(rewards, weight=1.0, discount=1.0):
    """``R_t = sum_{t' >= t} weight * discount^(t'-t) * r_t'`` along the last axis."""
    r = _t(rewards)
    out = torch.zeros_like(r)
    acc = torch.zeros_like(r[..., 0])
    for t in range(r.shape[-1] - 1, -1, -1):
        acc = weight * r[..., t] + discount * acc
        out[..., t] = acc
    return out


def episode_return(rewards, weight=1.0):
    """Total episode reward ``R_T = sum_t weight * r_t``."""
    return float(weight * np.sum(rewards))


def policy_surrogate(log_probs, returns, baselines):
    """``-sum_t log pi_t (R_t - B_t)``, averaged over the batch.

    ``returns`` and ``baselines`` are treated as constants, so the gradient
    is the REINFORCE estimator with a baseline.
    """
    adv = (_t(returns) - _t(baselines)).detach()
    lp = _t(log_probs)
    if lp.ndim == 1:
        lp, adv = lp[None], adv[None]
    return -(lp * adv).sum(-1).mean()


@dataclass
class ReinforceParts:
    surrogate: torch.Tensor
    classification: torch.Tensor
    baseline: torch.Tensor

    @property
    def total(self):
        return self.surrogate + self.classification + self.baseline


def reinforce_loss(batch, gt, cfg=None):
    """``L_theta`` for an ``EpisodeBatch``: policy surrogate, final cross-entropy and baseline MSE.

    The move proposed after glimpse ``t`` is credited with the reward-to-go
    ``R_t`` and the baseline ``B_t`` predicted from ``h_t``.
    """
    cfg = cfg or LossConfig()
    gt_t = _t(gt, torch.long).reshape(-1)
    rewards = rewards_from_logits(batch.logits, gt_t)
    returns = returns_to_go(rewards, cfg.step_weight, cfg.discount)
    n_moves = batch.log_probs.shape[1]
    surrogate = policy_surrogate(batch.log_probs, returns[:, :n_moves], batch.baselines[:, :n_moves])
    ce = F.cross_entropy(batch.logits[:, -1], gt_t)
    base = F.mse_loss(batch.baselines, returns)
    return ReinforceParts(surrogate, ce, base)


def box_overlap(a, b, side):
    """Intersection area of two axis-aligned squares of ``side`` centred at ``a`` and ``b``."""
    dx = torch.clamp(side - (a[..., 0] - b[..., 0]).abs(), min=0)
    dy = torch.clamp(side - (a[..., 1] - b[..., 1]).abs(), min=0)
    return dx * dy


def bbox_overlap_loss(locations, box_size):
    """Mean pairwise overlap of glimpse boxes, as a fraction of one box's area.

    ``locations`` is (T, 2) or (B, T, 2); ``box_size`` is the box side in the
    same units. Batched input averages over the batch.
    """
    loc = _t(locations)
    if loc.ndim == 2:
        loc = loc[None]
    T = loc.shape[1]
    if T < 2:
        raise ValueError("overlap loss needs at least two glimpses")
    i, j = torch.triu_indices(T, T, 1)
    inter = box_overlap(loc[:, i], loc[:, j], box_size)
    return (inter.sum(-1) / (math.comb(T, 2) * box_size ** 2)).mean()


def score_distance(predicted, gt):
    """``|Y - GT|`` for hard class scores."""
    return abs(int(predicted) - int(gt))


def expected_score_distance(probs, gt):
    """Differentiable ``sum_c p_c |c - GT|``; averaged over leading axes."""
    p = _t(probs)
    classes = torch.arange(p.shape[-1], dtype=p.dtype)
    g = _t(gt, torch.long).to(p.dtype)
    while g.ndim < p.ndim:
        g = g[..., None]
    return ((classes - g).abs() * p).sum(-1).mean()


def hard_attention_loss(l_theta, l_bb, l_s, delta=1.0):
    return l_theta + delta * (l_bb + l_s)


def joint_coefficient(alpha, epoch):
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return alpha ** epoch


def joint_loss(l_ha, l_sa, alpha, epoch):
    """``L_HA + alpha**epoch * L_SA``."""
    return l_ha + joint_coefficient(alpha, epoch) * l_sa


def epochs_until_negligible(alpha, tol=1e-6):
    """First epoch at which ``alpha**epoch < tol``."""
    if alpha >= 1:
        return math.inf
    e = math.ceil(math.log(tol) / math.log(alpha))
    return e if alpha ** e < tol else e + 1


@dataclass
class HardAttentionParts:
    reinforce: ReinforceParts
    overlap: torch.Tensor
    distance: torch.Tensor
    total: torch.Tensor


def episode_losses(batch, gt, cfg=None):
    """``L_HA`` and its parts for an ``EpisodeBatch``.

    The overlap term is computed on the policy means (plus the fixed first
    location) so it carries gradient into the location network.
    """
    cfg = cfg or LossConfig()
    parts = reinforce_loss(batch, gt, cfg)
    first = torch.as_tensor(batch.locations[:, :1], dtype=batch.loc_means.dtype)
    locs = torch.cat([first, batch.loc_means], 1)
    overlap = bbox_overlap_loss(locs, 2 * cfg.glimpse_box) if locs.shape[1] >= 2 else torch.zeros(())
    dist = expected_score_distance(F.softmax(batch.logits, -1), _t(gt, torch.long).reshape(-1))
    total = hard_attention_loss(parts.total, overlap, dist, cfg.delta)
    return HardAttentionParts(parts, overlap, dist, total)
