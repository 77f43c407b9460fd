"""Command-line interface: ``dualattn synth | train | eval | inspect``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import checkpoint, config, dataset, trainer, viz
from .glimpse_env import SlideTile
from .hard_attention import HardAttentionAgent, run_episodes
from .metrics import slide_score
from .soft_attention import SoftAttentionModel

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SNAPSHOT = "config.txt"

log = logging.getLogger("dualattn")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------ helpers

def _flag(name):
    return "--" + name.replace("_", "-")


def _add_config_args(p, train_flags=False):
    p.add_argument("--preset", choices=config.PRESET_NAMES, help="base preset (default: from --config, else her2)")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. train.epochs=5 (repeatable)")
    if train_flags:
        for f in dataclasses.fields(config.TrainConfig):
            p.add_argument(_flag(f.name), dest=f"train__{f.name}", default=None, metavar=f.name.upper(),
                           help=f"train.{f.name} (default {f.default!r})")


def _resolve_config(args):
    overrides = config.parse_assignments(args.set)
    for key, value in vars(args).items():
        if key.startswith("train__") and value is not None:
            overrides[f"train.{key[7:]}"] = config.kvfile.parse_value(value)
    if args.config is not None and not args.config.exists():
        raise CliError(f"config file not found: {args.config}", EXIT_CONFIG)
    return config.load(args.config, args.preset, overrides)


def _lock(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CliError(f"{directory} is in use by another process", EXIT_DATA) from None
    return lock


def _load_items(data_dir, cfg):
    data_dir = Path(data_dir)
    if not data_dir.exists():
        raise CliError(f"dataset directory not found: {data_dir}", EXIT_DATA)
    return dataset.load_dataset(data_dir, cfg.generator.downsample_factor, cfg.soft.pool_size)


def _split(items, cfg):
    tc = cfg.train
    return dataset.split(items, tc.folds, tc.test_fold, tc.validation_fold, tc.seed)


def _models_from_checkpoint(path):
    payload = checkpoint.load(path)
    meta = payload["meta"]
    if "config" not in meta:
        raise CliError(f"{path}: checkpoint has no embedded config", EXIT_CONFIG)
    cfg = config.build(meta["config"].get("preset", "her2"), meta["config"])
    model = SoftAttentionModel(cfg.soft, cfg.generator.n_classes)
    agent = HardAttentionAgent(cfg.agent)
    checkpoint.restore(payload, soft=model if payload["soft"] is not None else None,
                       agent=agent if payload["agent"] is not None else None)
    return cfg, model, agent, meta


# ------------------------------------------------------------ commands

def cmd_synth(args):
    cfg = _resolve_config(args)
    n = args.n_slides if args.n_slides is not None else cfg.data.n_slides
    seed = args.seed if args.seed is not None else cfg.data.seed
    out = Path(args.out)
    lock = _lock(out)
    try:
        dataset.synthesize(out, cfg.generator, n, seed)
        cfg.save(out / SNAPSHOT)
    finally:
        lock.release()
    print(f"wrote {n} slides to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    items = _load_items(args.data, cfg)
    train_items, val_items, test_items = _split(items, cfg)
    run = Path(args.run)
    lock = _lock(run)
    try:
        cfg.save(run / SNAPSHOT)
        (run / "splits.json").write_text(json.dumps({
            "train": [it.slide_id for it in train_items],
            "val": [it.slide_id for it in val_items],
            "test": [it.slide_id for it in test_items],
        }, indent=2), encoding="utf-8")
        tr = trainer.Trainer(cfg, train_items, val_items, run)
        result = tr.train()
        tr.save_final({"config": cfg.flat(), "stop_epoch": result.stop_epoch, **result.extra})
        overlays = run / "overlays"
        overlays.mkdir(exist_ok=True)
        for it in val_items:
            probs = trainer.attention_maps(tr.model, [it], grad=False)[0].numpy()
            viz.attention_overlay(it.image, probs, overlays / f"{it.slide_id}.png", pool=cfg.soft.pool_size)
        scores, stats = trainer.evaluate(cfg, tr.model, tr.agent, test_items)
        payload = trainer.write_metrics(run, cfg, scores, stats)
    finally:
        lock.release()
    print(f"test accuracy {payload['accuracy']:.3f} on {payload['n_slides']} slides; run in {run}")
    return EXIT_OK


def _oracle_scores(items, n_classes, rule):
    scores = []
    for it in items:
        probs = np.zeros((1, n_classes))
        probs[0, it.label] = 1.0
        scores.append(slide_score(it.slide_id, probs, rule, it.fold, it.label))
    stats = [{"slide_id": it.slide_id, "processed_fraction": 0.0, "roi_ratio": None, "n_tiles": 0,
              "relaxed": False} for it in items]
    return scores, stats


def cmd_eval(args):
    cfg, model, agent, meta = _models_from_checkpoint(args.checkpoint)
    items = _load_items(args.data, cfg)
    _, _, test_items = _split(items, cfg)
    chosen = items if args.all else test_items
    out = Path(args.out)
    lock = _lock(out)
    try:
        if meta.get("oracle"):
            scores, stats = _oracle_scores(chosen, cfg.generator.n_classes, cfg.train.aggregation)
        else:
            scores, stats = trainer.evaluate(cfg, model, agent, chosen)
        payload = trainer.write_metrics(out, cfg, scores, stats)
    finally:
        lock.release()
    print(f"accuracy {payload['accuracy']:.3f} on {payload['n_slides']} slides; report in {out / 'metrics.json'}")
    return EXIT_OK


def closed_form_fraction(T, glimpse_size, n_tiles, base_area, scales=(1, 2)):
    """Base-pixel footprint of every glimpse read, over the slide area."""
    per_glimpse = sum((glimpse_size * s) ** 2 for s in scales)
    return T * per_glimpse * n_tiles / base_area


def cmd_inspect(args):
    cfg, model, agent, meta = _models_from_checkpoint(args.checkpoint)
    items = {it.slide_id: it for it in _load_items(args.data, cfg)}
    if args.slide not in items:
        raise CliError(f"slide {args.slide!r} not in dataset {args.data}", EXIT_DATA)
    item = items[args.slide]
    out = Path(args.out)
    lock = _lock(out)
    try:
        ck_dir = Path(args.checkpoint).parent / "checkpoints"
        epochs = sorted(ck_dir.glob("soft_*.pt")) if ck_dir.exists() else []
        snapshots = []
        for path in epochs:
            m = SoftAttentionModel(cfg.soft, cfg.generator.n_classes)
            checkpoint.restore(checkpoint.load(path), soft=m)
            probs = trainer.attention_maps(m, [item], grad=False)[0].numpy()
            name = f"attention_{path.stem}.png"
            viz.attention_overlay(item.image, probs, out / name, pool=cfg.soft.pool_size)
            snapshots.append(name)
        probs = trainer.attention_maps(model, [item], grad=False)[0].numpy().astype(np.float64)
        rng = np.random.default_rng([cfg.eval.seed, 0])
        item.slide.read_log.reset()
        sel = trainer.make_source(cfg.train.tile_source, cfg.sampler).select(item, rng, probs)
        viz.attention_overlay(item.image, probs, out / "attention_final.png",
                              selected=sel.tiles.locations_lowres, pool=cfg.soft.pool_size)
        viz.attention_png(probs, out / "attention_final_16bit.png")
        sel.dump(out / "sampling.json")
        tiles = [SlideTile(item.slide, w, cfg.sampler.tile_size_base, cfg.sampler.tile_size_model)
                 for w in sel.tiles.windows()]
        episodes = run_episodes(agent, tiles, cfg.agent.T, rng, None, deterministic=True)
        base_area = item.slide.base_size[0] * item.slide.base_size[1]
        logged = item.slide.read_log.total(trainer.high_res_levels(item.slide)) / base_area
        for i, tile in enumerate(tiles):
            viz.contact_sheet(tile, [tuple(l) for l in episodes.locations[i]], out / f"glimpses_tile{i:02d}.png",
                              cfg.agent.glimpse_size, scores=list(episodes.predictions[i]))
        report = {
            "slide_id": item.slide_id,
            "label": item.label,
            "processed_fraction": logged,
            "processed_fraction_closed_form": closed_form_fraction(
                cfg.agent.T, cfg.agent.glimpse_size, len(tiles), base_area),
            "epoch_overlays": snapshots,
            "tile_predictions": episodes.predictions[:, -1].tolist(),
        }
        (out / "inspect.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    finally:
        lock.release()
    print(f"processed fraction {logged:.4%}; figures in {out}")
    return EXIT_OK


# ------------------------------------------------------------ entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="dualattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-ROI dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-slides", type=int)
    p.add_argument("--seed", type=int)
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset and evaluate the test fold")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--run", required=True, type=Path)
    _add_config_args(p, train_flags=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score slides with a trained checkpoint")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--all", action="store_true", help="score every slide, not just the test fold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="attention overlays, glimpse sheets and processed fraction for one slide")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (config.ConfigError, checkpoint.CheckpointVersionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, dataset.DataError, checkpoint.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
