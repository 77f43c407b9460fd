import itertools
import math

import numpy as np
import pytest
import torch

from dualattn.hard_attention import EpisodeBatch
from dualattn.objectives import (LossConfig, bbox_overlap_loss, entropy_loss, episode_losses, epochs_until_negligible,
                                 expected_score_distance, hard_attention_loss, joint_coefficient, joint_loss,
                                 policy_surrogate, reinforce_loss, returns_to_go, score_distance, step_reward)


def test_entropy_uniform_and_sign():
    p = np.full(64, 1 / 64)
    assert float(entropy_loss(p)) == pytest.approx(-math.log(64))
    assert float(entropy_loss(p, literal=True)) == pytest.approx(math.log(64))
    one_hot = np.zeros(64)
    one_hot[3] = 1
    assert float(entropy_loss(one_hot)) == 0.0


def test_entropy_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.ones(rng.integers(2, 40)))
        beta = rng.uniform(0.1, 3)
        ref = beta * sum(x * math.log(x) for x in p if x > 0)
        assert float(entropy_loss(p, beta)) == pytest.approx(ref, abs=1e-12)


def test_step_reward_and_returns():
    assert step_reward(2, 2) == 1.0 and step_reward(1, 2) == 0.0
    r = torch.tensor([[1.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
    torch.testing.assert_close(returns_to_go(r), torch.tensor([[3.0, 2.0, 2.0, 1.0]], dtype=torch.float64))
    g = returns_to_go(r, weight=2.0, discount=0.5)
    ref = [2 * (1 + 0 + 0.25 * 1 + 0.125 * 1), 2 * (0 + 0.5 + 0.25), 2 * (1 + 0.5), 2.0]
    np.testing.assert_allclose(g[0].numpy(), ref)


def test_policy_surrogate_gradient_is_reinforce():
    lp = torch.tensor([[-1.0, -0.5]], dtype=torch.float64, requires_grad=True)
    ret = torch.tensor([[2.0, 1.0]], dtype=torch.float64)
    base = torch.tensor([[0.5, 0.25]], dtype=torch.float64, requires_grad=True)
    loss = policy_surrogate(lp, ret, base)
    loss.backward()
    np.testing.assert_allclose(lp.grad.numpy(), [[-1.5, -0.75]])
    assert base.grad is None or base.grad.abs().sum() == 0


def brute_overlap_area(a, b, side, n=400):
    """Grid-count estimate of the intersection of two squares (coarse oracle)."""
    lo = min(a[0], b[0]) - side, min(a[1], b[1]) - side
    xs = np.linspace(lo[0], lo[0] + 4 * side + abs(a[0] - b[0]), n)
    ys = np.linspace(lo[1], lo[1] + 4 * side + abs(a[1] - b[1]), n)
    X, Y = np.meshgrid(xs, ys)
    inside = lambda c: (np.abs(X - c[0]) <= side / 2) & (np.abs(Y - c[1]) <= side / 2)
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return (inside(a) & inside(b)).sum() * cell


def test_bbox_overlap_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T, side = int(rng.integers(2, 6)), float(rng.uniform(0.1, 0.8))
        locs = rng.uniform(-1, 1, size=(T, 2))
        ref = 0.0
        for i, j in itertools.combinations(range(T), 2):
            dx = max(0.0, side - abs(locs[i, 0] - locs[j, 0]))
            dy = max(0.0, side - abs(locs[i, 1] - locs[j, 1]))
            ref += dx * dy
        ref /= math.comb(T, 2) * side ** 2
        assert float(bbox_overlap_loss(locs, side)) == pytest.approx(ref, abs=1e-12)


def test_bbox_overlap_against_area_count():
    a, b, side = (0.1, 0.2), (0.35, 0.05), 0.5
    got = float(bbox_overlap_loss(np.array([a, b]), side)) * side ** 2
    assert got == pytest.approx(brute_overlap_area(a, b, side), rel=0.02)


def test_bbox_overlap_extremes():
    assert float(bbox_overlap_loss(np.zeros((4, 2)), 0.2)) == pytest.approx(1.0)
    far = np.array([[-1, -1], [1, 1], [-1, 1], [1, -1]], float)
    assert float(bbox_overlap_loss(far, 0.2)) == 0.0
    with pytest.raises(ValueError):
        bbox_overlap_loss(np.zeros((1, 2)), 0.2)


def test_score_distance():
    assert score_distance(3, 1) == 2
    p = torch.tensor([[0.1, 0.2, 0.3, 0.4]], dtype=torch.float64)
    assert float(expected_score_distance(p, [1])) == pytest.approx(0.1 + 0 + 0.3 + 0.8)


def test_loss_compositions():
    assert float(hard_attention_loss(1.0, 2.0, 3.0, 0.5)) == pytest.approx(3.5)
    assert joint_loss(2.0, 4.0, 0.5, 0) == pytest.approx(6.0)
    assert joint_loss(2.0, 4.0, 0.5, 3) == pytest.approx(2.5)
    assert joint_coefficient(0.5, 10) == pytest.approx(2 ** -10)
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            joint_coefficient(bad, 1)
    with pytest.raises(ValueError):
        joint_coefficient(0.5, -1)


def test_epochs_until_negligible():
    for alpha in (0.1, 0.5, 0.9):
        e = epochs_until_negligible(alpha)
        assert alpha ** e < 1e-6 <= alpha ** (e - 1)
    assert epochs_until_negligible(1.0) == math.inf


def _fake_batch(B=3, T=4, C=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    d = torch.float64
    return EpisodeBatch(
        locations=torch.rand(B, T, 2, generator=g, dtype=d).numpy() * 2 - 1,
        loc_means=(torch.rand(B, T - 1, 2, generator=g, dtype=d) * 2 - 1).requires_grad_(),
        loc_samples=torch.rand(B, T - 1, 2, generator=g, dtype=d),
        log_probs=torch.randn(B, T - 1, generator=g, dtype=d).requires_grad_(),
        logits=torch.randn(B, T, C, generator=g, dtype=d).requires_grad_(),
        baselines=torch.randn(B, T, generator=g, dtype=d).requires_grad_(),
    )


def test_reinforce_loss_loop_oracle():
    b = _fake_batch()
    gt = [0, 1, 2]
    parts = reinforce_loss(b, gt, LossConfig(T=4))
    preds = b.logits.argmax(-1).numpy()
    sur, mse = 0.0, 0.0
    for i in range(3):
        r = [1.0 if preds[i, t] == gt[i] else 0.0 for t in range(4)]
        R = [sum(r[t:]) for t in range(4)]
        for t in range(3):
            sur -= b.log_probs[i, t].item() * (R[t] - b.baselines[i, t].item())
        mse += sum((b.baselines[i, t].item() - R[t]) ** 2 for t in range(4))
    assert parts.surrogate.item() == pytest.approx(sur / 3)
    assert parts.baseline.item() == pytest.approx(mse / 12)
    ce = torch.nn.functional.cross_entropy(b.logits[:, -1], torch.tensor(gt))
    assert parts.classification.item() == pytest.approx(ce.item())


def test_episode_losses_compose():
    b = _fake_batch()
    # boxes wide enough that some glimpses overlap, so the overlap term has gradient
    cfg = LossConfig(delta=0.7, T=4, glimpse_box=0.5)
    hp = episode_losses(b, [3, 0, 1], cfg)
    assert hp.overlap.item() > 0
    ref = hp.reinforce.total + 0.7 * (hp.overlap + hp.distance)
    assert hp.total.item() == pytest.approx(ref.item())
    hp.total.backward()
    assert b.loc_means.grad is not None and b.loc_means.grad.abs().sum() > 0


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0)
    with pytest.raises(ValueError):
        LossConfig(T=0)
