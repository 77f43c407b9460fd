"""Batch construction, augmentation, stopping rule and the two training regimes."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import checkpoint
from .baselines import RandomTileSource
from .dataset import DataError
from .config import TrainConfig  # noqa: F401  (re-exported for convenience)
from .glimpse_env import SlideTile, dihedral
from .hard_attention import HardAttentionAgent, run_episodes
from .metrics import report, slide_score, write_report
from .objectives import LossConfig, entropy_loss, episode_losses, joint_coefficient
from .sampler import refine_mask, sample_tiles
from .soft_attention import SoftAttentionModel, image_to_tensor, minmax_normalize, spatial_softmax

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


# ------------------------------------------------------------ small pieces

def augment(tile, seed):
    """One of the 8 dihedral transforms, chosen uniformly from ``seed``."""
    k = int(np.random.default_rng(seed).integers(8))
    return dihedral(np.asarray(tile), k)


def dice(mask_a, mask_b):
    a, b = np.asarray(mask_a, bool), np.asarray(mask_b, bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / total)


class StoppingRule:
    """Stop once the score has not improved by ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience=10, min_delta=0.005):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.best_epoch = -1
        self.stale = 0
        self.history = []

    def update(self, value):
        """Record one epoch's score; True means stop."""
        self.history.append(float(value))
        if value > self.best + self.min_delta:
            self.best, self.best_epoch, self.stale = float(value), len(self.history) - 1, 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def stopping_rule(history, patience=10, min_delta=0.005):
    """Replay ``history``; returns the index of the stopping epoch or None."""
    rule = StoppingRule(patience, min_delta)
    for i, v in enumerate(history):
        if rule.update(v):
            return i
    return None


def set_determinism(seed, bit_exact=True, threads=1):
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(bool(bit_exact))


# ------------------------------------------------------------ tile sources

class AttentionTileSource:
    """Soft attention plus the sampler; the default tile source."""

    name = "attention"

    def __init__(self, sampler_cfg):
        self.cfg = sampler_cfg

    def select(self, item, rng, attention):
        return sample_tiles(item.slide, attention, item.tissue_grid, self.cfg, rng)


def make_source(kind, sampler_cfg):
    return RandomTileSource(sampler_cfg) if kind == "random" else AttentionTileSource(sampler_cfg)


# ------------------------------------------------------------ batches

@dataclass
class SlideDraw:
    item: object
    probs: torch.Tensor  # attention over the grid (may carry grad)
    selection: object  # SampleResult
    attention_values: torch.Tensor
    thumbnails: list
    tiles: list  # SlideTile per selected tile
    augment_ids: list


@dataclass
class Batch:
    draws: list = field(default_factory=list)

    @property
    def tiles(self):
        return [t for d in self.draws for t in d.tiles]

    @property
    def gt(self):
        return [d.item.label for d in self.draws for _ in d.tiles]

    def triples(self):
        """``(tile, i_d, GT)`` for every tile in the batch."""
        return [(t, t.context(), d.item.label) for d in self.draws for t in d.tiles]


def attention_maps(model, items, grad=True):
    x = image_to_tensor(np.stack([it.image for it in items]), dtype=next(model.parameters()).dtype)
    with torch.set_grad_enabled(grad):
        return spatial_softmax(model.attention(x))


def build_batch(items, model, source, sampler_cfg, rng, augment_tiles=True, grad=True):
    """Run soft attention and the sampler on each slide and collect its tiles.

    Every tile carries its slide's label. Tiles are read on demand and
    never cached.
    """
    probs = attention_maps(model, items, grad)
    draws = []
    for item, p in zip(items, probs):
        sel = source.select(item, rng, p.detach().numpy().astype(np.float64))
        rows = torch.as_tensor([r for r, _ in sel.grid_indices], dtype=torch.long)
        cols = torch.as_tensor([c for _, c in sel.grid_indices], dtype=torch.long)
        att = p[rows, cols]
        ks = [int(rng.integers(8)) if augment_tiles else 0 for _ in sel.grid_indices]
        thumbs = [dihedral(t, k) for t, k in zip(sel.tiles.tiles, ks)]
        tiles = [SlideTile(item.slide, w, sampler_cfg.tile_size_base, sampler_cfg.tile_size_model, augment=k)
                 for w, k in zip(sel.tiles.windows(), ks)]
        draws.append(SlideDraw(item, p, sel, att, thumbs, tiles, ks))
    return Batch(draws)


def class_balanced_batches(items, slides_per_batch, n_classes, rng):
    """Batches holding ``slides_per_batch / n_classes`` slides of every class.

    Smaller classes are cycled so that every slide of the largest class is
    seen once per epoch.
    """
    if slides_per_batch % n_classes:
        raise ValueError("slides_per_batch must be a multiple of the number of classes")
    per = slides_per_batch // n_classes
    groups = [[it for it in items if it.label == c] for c in range(n_classes)]
    if any(not g for g in groups):
        raise DataError("every class needs at least one training slide")
    n_batches = max(math.ceil(len(g) / per) for g in groups)
    orders = []
    for g in groups:
        need = n_batches * per
        seq = []
        while len(seq) < need:
            seq.extend(g[i] for i in rng.permutation(len(g)))
        orders.append(seq[:need])
    return [[orders[c][b * per + j] for c in range(n_classes) for j in range(per)] for b in range(n_batches)]


# ------------------------------------------------------------ losses

def soft_attention_loss(model, batch, beta=1.0, literal=False):
    """Mean over slides of slide cross-entropy on expected tile features plus the entropy term."""
    total = 0.0
    for d in batch.draws:
        logits = model.classify_tiles(d.thumbnails, d.attention_values)
        ce = F.cross_entropy(logits[None], torch.as_tensor([d.item.label]))
        total = total + ce + entropy_loss(d.probs, beta, literal)
    return total / len(batch.draws)


@dataclass
class StepLosses:
    l_theta: float = 0.0
    l_bb: float = 0.0
    l_s: float = 0.0
    l_ha: float = 0.0
    l_sa: float = 0.0
    coefficient: float = 0.0
    total: float = 0.0


def step_losses(model, agent, batch, loss_cfg, epoch, mode, rng, generator):
    """Loss for one batch under ``mode`` (joint, soft or hard) and its logged parts."""
    parts = StepLosses()
    total = torch.zeros(())
    if mode in ("joint", "hard"):
        episodes = run_episodes(agent, batch.tiles, loss_cfg.T, rng, generator)
        ha = episode_losses(episodes, batch.gt, loss_cfg)
        parts.l_theta = ha.reinforce.total.item()
        parts.l_bb, parts.l_s, parts.l_ha = ha.overlap.item(), ha.distance.item(), ha.total.item()
        total = total + ha.total
    if mode in ("joint", "soft"):
        sa = soft_attention_loss(model, batch, loss_cfg.beta, loss_cfg.literal_entropy_sign)
        coef = joint_coefficient(loss_cfg.alpha, epoch) if mode == "joint" else 1.0
        parts.l_sa, parts.coefficient = sa.item(), coef
        total = total + coef * sa
    parts.total = total.item()
    return total, parts


# ------------------------------------------------------------ validation stats

def predicted_mask(probs, item, sampler_cfg):
    return refine_mask(minmax_normalize(probs), sampler_cfg) & item.tissue_grid


def roi_mass_ratio(probs, roi_grid):
    """Attention mass on ROI cells divided by the mass a uniform map would give them."""
    probs = np.asarray(probs, dtype=np.float64)
    frac = roi_grid.mean()
    if frac == 0:
        return float("nan")
    return float(probs[roi_grid].sum() / probs.sum() / frac)


def attention_stats(model, items, sampler_cfg):
    if not items:
        return {"dice": float("nan"), "roi_ratio": float("nan")}
    dices, ratios = [], []
    for i in range(0, len(items), 8):
        chunk = items[i:i + 8]
        probs = attention_maps(model, chunk, grad=False).numpy().astype(np.float64)
        for it, p in zip(chunk, probs):
            roi = it.roi_grid(sampler_cfg.pool)
            if roi is None:
                continue
            dices.append(dice(predicted_mask(p, it, sampler_cfg), roi))
            ratios.append(roi_mass_ratio(p, roi))
    return {"dice": float(np.mean(dices)) if dices else float("nan"),
            "roi_ratio": float(np.mean(ratios)) if ratios else float("nan")}


# ------------------------------------------------------------ run directory

LOSS_COLUMNS = ["epoch", "stage", "batches", "l_theta", "l_bb", "l_s", "l_ha", "l_sa", "coefficient", "total",
                "val_dice", "val_roi_ratio", "lr_soft", "lr_hard"]


class LossLog:
    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(LOSS_COLUMNS)
        self.rows = []

    def add(self, row):
        self.rows.append(row)
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c)) for c in LOSS_COLUMNS])


def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 10))
    return "" if v is None else v


def _dump_failure(run_dir, info):
    path = Path(run_dir) / "numeric_failure.json"
    path.write_text(json.dumps(info, indent=2, default=str), encoding="utf-8")
    return path


# ------------------------------------------------------------ training

@dataclass
class TrainResult:
    model: object
    agent: object
    history: list
    stop_epoch: int | None = None
    extra: dict = field(default_factory=dict)


class Trainer:
    """Owns models, optimiser and run directory for one training run."""

    def __init__(self, run_cfg, train_items, val_items=(), run_dir=None):
        self.cfg = run_cfg
        tc = run_cfg.train
        set_determinism(tc.seed, tc.bit_exact, tc.threads)
        self.model = SoftAttentionModel(run_cfg.soft, run_cfg.generator.n_classes)
        self.agent = HardAttentionAgent(run_cfg.agent)
        self.train_items = list(train_items)
        self.val_items = list(val_items)
        self.source = make_source(tc.tile_source, run_cfg.sampler)
        self.rng = np.random.default_rng([tc.seed, 1])
        self.generator = torch.Generator().manual_seed(tc.seed)
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.loss_log = LossLog(self.run_dir / "losses.csv") if self.run_dir else None
        self.history = []
        self.step = 0

    # -- helpers
    def _optimizer(self, groups):
        tc = self.cfg.train
        opt = torch.optim.Adam(groups)
        sched = torch.optim.lr_scheduler.StepLR(opt, step_size=tc.step_size, gamma=tc.gamma)
        return opt, sched

    def _batches(self):
        """One epoch of class-balanced batches (several passes if ``batches_per_epoch`` asks for more)."""
        tc = self.cfg.train
        args = (self.train_items, tc.slides_per_batch, self.cfg.generator.n_classes, self.rng)
        batches = class_balanced_batches(*args)
        if not tc.batches_per_epoch:
            return batches
        while len(batches) < tc.batches_per_epoch:
            batches += class_balanced_batches(*args)
        return batches[:tc.batches_per_epoch]

    def _epoch(self, epoch, mode, opt, stage):
        tc, lc = self.cfg.train, self.cfg.loss
        sums, n = StepLosses(), 0
        train_soft = mode in ("joint", "soft")
        self.model.train(train_soft)
        self.agent.train(mode != "soft")
        for slides in self._batches():
            batch = build_batch(slides, self.model, self.source, self.cfg.sampler, self.rng,
                                tc.augment, grad=train_soft)
            loss, parts = step_losses(self.model, self.agent, batch, lc, epoch, mode, self.rng, self.generator)
            if not torch.isfinite(loss):
                path = _dump_failure(self.run_dir or ".", {
                    "epoch": epoch, "stage": stage, "step": self.step, "losses": vars(parts),
                    "slides": [s.slide_id for s in slides]})
                raise NumericError(f"non-finite loss at epoch {epoch}, step {self.step}; details in {path}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.step += 1
            n += 1
            for k, v in vars(parts).items():
                setattr(sums, k, getattr(sums, k) + v)
        means = {k: v / max(n, 1) for k, v in vars(sums).items()}
        stats = attention_stats(self.model, self.val_items, self.cfg.sampler)
        lrs = [g["lr"] for g in opt.param_groups]
        row = {"epoch": epoch, "stage": stage, "batches": n, **means, "val_dice": stats["dice"],
               "val_roi_ratio": stats["roi_ratio"], "lr_soft": lrs[0] if train_soft else 0.0,
               "lr_hard": lrs[-1] if mode != "soft" else 0.0}
        self.history.append(row)
        if self.loss_log:
            self.loss_log.add(row)
        log.info("epoch %d [%s] total=%.4f dice=%.3f roi=%.2f", epoch, stage, means["total"],
                 stats["dice"], stats["roi_ratio"])
        return row

    def _save_epoch(self, epoch, stage):
        if not self.run_dir:
            return
        ck = self.run_dir / "checkpoints"
        ck.mkdir(exist_ok=True)
        checkpoint.save(ck / f"soft_{stage}_{epoch:03d}.pt", soft=self.model, meta={"epoch": epoch, "stage": stage})

    def save_final(self, meta=None):
        if not self.run_dir:
            return None
        return checkpoint.save(self.run_dir / "model.pt", soft=self.model, agent=self.agent,
                               meta={"preset": self.cfg.preset, **(meta or {})})

    # -- regimes
    def train_joint(self):
        tc = self.cfg.train
        opt, sched = self._optimizer([
            {"params": self.model.parameters(), "lr": tc.lr_soft},
            {"params": self.agent.parameters(), "lr": tc.lr_hard},
        ])
        for epoch in range(tc.epochs):
            self._epoch(epoch, "joint", opt, "joint")
            sched.step()
            self._save_epoch(epoch, "joint")
        return TrainResult(self.model, self.agent, self.history)

    def train_separate(self):
        """Soft attention to its dice stopping rule, then freeze it and train the agent."""
        tc = self.cfg.train
        opt, sched = self._optimizer([{"params": self.model.parameters(), "lr": tc.lr_soft}])
        rule = StoppingRule(tc.patience, tc.min_delta)
        best_state, stop_epoch = None, None
        for epoch in range(tc.soft_epochs):
            row = self._epoch(epoch, "soft", opt, "soft")
            sched.step()
            self._save_epoch(epoch, "soft")
            score = row["val_dice"]
            stop = rule.update(score if np.isfinite(score) else -math.inf)
            if rule.best_epoch == epoch:
                best_state = {k: v.clone() for k, v in self.model.state_dict().items()}
            if stop:
                stop_epoch = epoch
                break
        if best_state is not None:
            self.model.load_state_dict(best_state)
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.model.eval()
        frozen = {k: v.clone() for k, v in self.model.state_dict().items()}
        opt, sched = self._optimizer([{"params": self.agent.parameters(), "lr": tc.lr_hard}])
        for epoch in range(tc.epochs):
            self._epoch(epoch, "hard", opt, "hard")
            sched.step()
        unchanged = all(torch.equal(frozen[k], v) for k, v in self.model.state_dict().items())
        return TrainResult(self.model, self.agent, self.history, stop_epoch,
                           {"soft_frozen": unchanged, "soft_best_epoch": rule.best_epoch})

    def train(self):
        return self.train_joint() if self.cfg.train.mode == "joint" else self.train_separate()


# ------------------------------------------------------------ evaluation

def high_res_levels(slide, max_scale=2):
    return [k for k, s in enumerate(slide.level_scale) if s <= max_scale]


@torch.no_grad()
def evaluate(run_cfg, model, agent, items, source=None, seed=None):
    """Score every slide; returns ``(scores, per-slide stats)``.

    Glimpse locations follow the policy mean. Per-slide randomness (sampler
    noise, first glimpse) is seeded from ``seed`` and the slide position.
    """
    seed = run_cfg.eval.seed if seed is None else seed
    source = source or make_source(run_cfg.train.tile_source, run_cfg.sampler)
    model.eval()
    agent.eval()
    scores, stats = [], []
    for i, item in enumerate(items):
        rng = np.random.default_rng([seed, i])
        probs = attention_maps(model, [item], grad=False)[0].numpy().astype(np.float64)
        item.slide.read_log.reset()
        sel = source.select(item, rng, probs)
        tiles = [SlideTile(item.slide, w, run_cfg.sampler.tile_size_base, run_cfg.sampler.tile_size_model)
                 for w in sel.tiles.windows()]
        episodes = run_episodes(agent, tiles, run_cfg.agent.T, rng, None, deterministic=True)
        tile_probs = episodes.final_probs.numpy().astype(np.float64)
        scores.append(slide_score(item.slide_id, tile_probs, run_cfg.train.aggregation, item.fold, item.label))
        base_area = item.slide.base_size[0] * item.slide.base_size[1]
        processed = item.slide.read_log.total(high_res_levels(item.slide)) / base_area
        roi = item.roi_grid(run_cfg.sampler.pool)
        stats.append({
            "slide_id": item.slide_id,
            "processed_fraction": processed,
            "roi_ratio": roi_mass_ratio(probs, roi) if roi is not None and roi.any() else None,
            "n_tiles": len(tiles),
            "relaxed": bool(sel.relaxed),
        })
    return scores, stats


def summarize(run_cfg, scores, stats):
    summary = report(scores, run_cfg.generator.n_classes, positive_class=run_cfg.eval.positive_class)
    fr = [s["processed_fraction"] for s in stats]
    rr = [s["roi_ratio"] for s in stats if s["roi_ratio"] is not None]
    summary["processed_fraction_max"] = float(max(fr)) if fr else None
    summary["processed_fraction_mean"] = float(np.mean(fr)) if fr else None
    summary["roi_ratio_mean"] = float(np.mean(rr)) if rr else None
    return summary


def write_metrics(run_dir, run_cfg, scores, stats, name="metrics"):
    summary = summarize(run_cfg, scores, stats)
    summary["per_slide"] = stats
    run_dir = Path(run_dir)
    return write_report(run_dir / f"{name}.json", run_dir / f"{name}.csv", summary, scores)
