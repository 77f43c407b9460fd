import filecmp
import json

import numpy as np
import pytest
import torch

from dualattn import checkpoint, cli, config, kvfile

TINY = [
    "--preset", "synthetic",
    "--set", "generator.base_size=4096", "--set", "generator.roi_radius=[0.09, 0.12]",
    "--set", "train.tiles_per_batch=8", "--set", "sampler.n_tiles=2",
    "--set", "agent.T=3", "--set", "loss.T=3", "--set", "train.epochs=1",
    "--set", "train.batches_per_epoch=1",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["synth", "--out", str(out), "--n-slides", "16", "--seed", "2", *TINY]) == 0
    return out


def test_synth_balance_and_labels(data_dir):
    rows = (data_dir / "labels.csv").read_text().splitlines()[1:]
    assert len(rows) == 16
    labels = [int(r.split(",")[1]) for r in rows]
    assert np.bincount(labels).tolist() == [4, 4, 4, 4]
    assert len(list((data_dir / "masks").glob("*.png"))) == 16


def test_synth_is_byte_identical(data_dir, tmp_path):
    other = tmp_path / "again"
    assert cli.main(["synth", "--out", str(other), "--n-slides", "16", "--seed", "2", *TINY]) == 0
    cmp = filecmp.dircmp(data_dir, other)

    def same(c):
        return not c.diff_files and not c.left_only and not c.right_only and all(same(s) for s in c.subdirs.values())

    # lock files differ in neither content nor presence; compare everything else recursively
    for sub in ("slides", "masks"):
        assert same(filecmp.dircmp(data_dir / sub, other / sub))
    assert (data_dir / "labels.csv").read_bytes() == (other / "labels.csv").read_bytes()
    assert cmp.left_only == [] or cmp.left_only == [".lock"]


def test_train_then_eval_round_trip(data_dir, tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(data_dir), "--run", str(run), *TINY, "--seed", "3"]) == 0
    for name in ("config.txt", "losses.csv", "model.pt", "metrics.json", "metrics.csv", "splits.json"):
        assert (run / name).exists(), name
    assert list((run / "checkpoints").glob("soft_*.pt"))
    snap = kvfile.read(run / "config.txt")
    assert snap["train.seed"] == 3
    # replay from the snapshot alone
    run2 = tmp_path / "run2"
    assert cli.main(["train", "--data", str(data_dir), "--run", str(run2), "--config", str(run / "config.txt")]) == 0
    m1, m2 = json.loads((run / "metrics.json").read_text()), json.loads((run2 / "metrics.json").read_text())
    assert m1 == m2
    out = tmp_path / "eval"
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(run / "model.pt"), "--out", str(out)]) == 0
    assert json.loads((out / "metrics.json").read_text())["slides"] == m1["slides"]

    insp = tmp_path / "inspect"
    assert cli.main(["inspect", "--data", str(data_dir), "--checkpoint", str(run / "model.pt"),
                     "--slide", "slide_000", "--out", str(insp)]) == 0
    rep = json.loads((insp / "inspect.json").read_text())
    assert rep["processed_fraction"] <= rep["processed_fraction_closed_form"] + 1e-12
    assert rep["processed_fraction_closed_form"] == pytest.approx(3 * (128 ** 2 + 256 ** 2) * 2 / 4096 ** 2)
    assert (insp / "attention_final.png").exists() and list(insp.glob("glimpses_tile*.png"))
    assert rep["epoch_overlays"]


def test_oracle_checkpoint_scores_perfectly(data_dir, tmp_path):
    cfg = config.build("synthetic", config.parse_assignments(TINY[3::2]))
    ck = tmp_path / "oracle.pt"
    checkpoint.save(ck, meta={"config": cfg.flat(), "oracle": True})
    out = tmp_path / "oracle_eval"
    assert cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(ck), "--out", str(out), "--all"]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["accuracy"] == 1.0 and rep["n_slides"] == 16


def test_checkpoint_version_mismatch_refused(tmp_path, capsys, data_dir):
    ck = tmp_path / "old.pt"
    torch.save({"format": checkpoint.FORMAT, "version": 99, "meta": {}, "soft": None, "agent": None}, ck)
    code = cli.main(["eval", "--data", str(data_dir), "--checkpoint", str(ck), "--out", str(tmp_path / "o")])
    assert code == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "99" in err and str(checkpoint.VERSION) in err


def test_config_errors_exit_2(tmp_path, data_dir):
    assert cli.main(["train", "--data", str(data_dir), "--run", str(tmp_path / "r"), *TINY,
                     "--set", "train.bogus=1"]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.txt"
    bad.write_text("config_version = 7\n")
    assert cli.main(["train", "--data", str(data_dir), "--run", str(tmp_path / "r"),
                     "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--data", str(data_dir), "--run", str(tmp_path / "r"), *TINY,
                     "--tiles-per-batch", "7"]) == cli.EXIT_CONFIG


def test_missing_paths_exit_3(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--run", str(tmp_path / "r"), *TINY]) == cli.EXIT_DATA
    assert cli.main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x.pt"),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_DATA


def test_locked_run_dir_is_refused(tmp_path, data_dir):
    from filelock import FileLock

    run = tmp_path / "busy"
    run.mkdir()
    with FileLock(str(run / ".lock")):
        # a second lock object in this process still contends for the OS lock
        code = cli.main(["train", "--data", str(data_dir), "--run", str(run), *TINY])
    assert code == cli.EXIT_DATA


def test_train_flags_mirror_train_config():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    flags = {a.dest for a in sub._actions}
    for f in config.TrainConfig.__dataclass_fields__:
        assert f"train__{f}" in flags


def test_annotated_preset_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for name in ("her2", "mmr"):
        cfg = config.load(root / f"{name}.txt")
        assert cfg.preset == name
