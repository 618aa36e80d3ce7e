import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from signstream.cli import load_config, main, resolve_config
from signstream.errors import ConfigError
from signstream.featio import read_msf, write_msf

TINY = {
    "schema_version": 1,
    "seed": 3,
    "synthetic": {
        "num_seqs": 8,
        "T_range": [40, 40],
        "num_latent_gestures": 3,
        "num_styles": 1,
        "clip_frames": 16,
        "train_clips": 30,
        "val_clips": 15,
        "test_clips": 30,
    },
    "cluster": {"k": 4, "fraction": 1.0},
    "encoder": {"n_blocks": 1, "model_dim": 16, "ffn_dim": 32, "n_heads": 2, "channel_proj_dim": 8, "k_per_channel": 4},
    "train": {"total_steps": 20, "peak_lr": 0.003, "frame_budget": 200},
    "adapter": {"lr": 0.001, "epochs": 3, "batch_size": 8},
}


def run(tmp, command, *extra, config=None):
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps(config or TINY))
    return main([command, "--config", str(cfg), *extra])


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert run(tmp, "gen-synthetic", "--out", str(tmp / "data")) == 0
    assert run(tmp, "kmeans-fit", "--data", str(tmp / "data" / "corpus"), "--out", str(tmp / "km")) == 0
    return tmp


def test_resolved_config_is_fixed_point(tmp_path):
    once = resolve_config(TINY)
    assert resolve_config(once) == once
    assert load_config(None, []) == resolve_config({})


def test_overrides_and_shorthand(tmp_path):
    cfg = load_config(None, ["train.total_steps=7", 'mask.strategy="time"', "seed=9"])
    assert cfg["train"]["total_steps"] == 7 and cfg["mask"]["strategy"] == "time" and cfg["seed"] == 9


def test_config_errors_list_every_field():
    bad = {"train": {"total_steps": "many", "bogus": 1}, "mask": {"ratio": 2.0}, "extra": {}}
    with pytest.raises(ConfigError) as info:
        resolve_config(bad)
    fields = " ".join(info.value.fields)
    for name in ("train.total_steps", "train.bogus", "mask", "extra"):
        assert name in fields


def test_config_error_exit_code(tmp_path, capsys):
    cfg = dict(TINY, encoder=dict(TINY["encoder"], n_heads=3))
    assert run(tmp_path, "pretrain", config=cfg) == 2
    doc = json.loads(capsys.readouterr().err)
    assert doc["error"] == "config" and any(f.startswith("encoder") for f in doc["fields"])


def test_missing_path_is_config_error(tmp_path, capsys):
    assert run(tmp_path, "kmeans-fit", "--out", str(tmp_path / "o")) == 2
    assert any("data_dir" in f for f in json.loads(capsys.readouterr().err)["fields"])


def test_gen_synthetic_outputs(world):
    data = world / "data"
    assert (data / "resolved_config.json").exists()
    table = json.loads((data / "gen_synthetic.json").read_text())
    assert [r["split"] for r in table["rows"]] == ["corpus", "train", "val", "test"]
    assert (data / "gen_synthetic.txt").read_text().startswith("synthetic data")
    assert len(list((data / "train").glob("*.msf"))) == 30


def test_kmeans_outputs(world, tmp_path):
    assert sorted(p.name for p in (world / "km").glob("*.kmc")) == [f"channel_{c}.kmc" for c in range(4)]
    out = tmp_path / "assign"
    assert run(tmp_path, "kmeans-assign", "--data", str(world / "data" / "val"), "--clusters", str(world / "km"),
               "--out", str(out)) == 0
    arrays = np.load(out / "assignments.npz")
    assert len(arrays.files) == 15 and all(arrays[f].shape == (16, 4) for f in arrays.files)


def test_pretrain_twice_identical_and_input_untouched(world, tmp_path):
    data = world / "data" / "corpus"
    before = digest(data)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(tmp_path, "pretrain", "--data", str(data), "--clusters", str(world / "km"), "--out", str(out)) == 0
        outs.append(out)
    assert digest(data) == before
    a, b = outs
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "final.shb").read_bytes() == (b / "final.shb").read_bytes()
    assert (a / "training_curves.png").stat().st_size > 0
    assert (a / "pretrain.txt").exists()


def test_finetune_eval_extract(world, tmp_path):
    data = world / "data"
    ck = tmp_path / "pre"
    assert run(tmp_path, "pretrain", "--data", str(data / "corpus"), "--clusters", str(world / "km"), "--out", str(ck)) == 0
    paths = ["--set", f'paths.train_dir="{data / "train"}"', "--set", f'paths.val_dir="{data / "val"}"',
             "--set", f'paths.test_dir="{data / "test"}"']
    ft = tmp_path / "ft"
    assert run(tmp_path, "finetune", "--checkpoint", str(ck / "final.shb"), "--out", str(ft), *paths) == 0
    assert (ft / "downstream.pt").exists() and (ft / "finetune.json").exists()

    ev = tmp_path / "ev"
    assert run(tmp_path, "eval", "--checkpoint", str(ft / "downstream.pt"), "--out", str(ev), *paths) == 0
    rows = json.loads((ev / "eval.json").read_text())["rows"]
    assert {"recall@1", "recall@5", "recall@10"} <= set(rows[0])
    assert all(0.0 <= rows[0][k] <= 1.0 for k in ("recall@1", "recall@5", "recall@10"))
    # the stored model reproduces the test table written by finetune
    assert rows == json.loads((ft / "test.json").read_text())["rows"]

    ev2 = tmp_path / "ev2"
    assert run(tmp_path, "eval", "--checkpoint", str(ck / "final.shb"), "--out", str(ev2), *paths) == 0
    assert (ev2 / "eval.json").exists()

    ex = tmp_path / "ex"
    assert run(tmp_path, "extract", "--data", str(data / "val"), "--checkpoint", str(ft / "downstream.pt"),
               "--out", str(ex)) == 0
    assert json.loads((ex / "extract.json").read_text())["rows"][0] == {"written": 15, "failed": 0}


def test_dump_clusters(world, tmp_path):
    out = tmp_path / "dump"
    assert run(tmp_path, "dump-clusters", "--data", str(world / "data" / "corpus"), "--clusters", str(world / "km"),
               "--out", str(out), "--set", "dump.channel=2", "--set", "dump.n_per_cluster=3") == 0
    doc = json.loads((out / "cluster_samples.json").read_text())
    assert set(doc) <= {"0", "1", "2", "3"} and all(len(v) <= 3 for v in doc.values())


def test_divergence_exit_code(world, tmp_path, capsys):
    data = tmp_path / "nan"
    data.mkdir()
    for p in sorted((world / "data" / "corpus").glob("*.msf")):
        seq = read_msf(p)
        seq.channels[0][5, 0] = np.nan
        write_msf(seq, data / p.name)
    assert run(tmp_path, "pretrain", "--data", str(data), "--clusters", str(world / "km"), "--out", str(tmp_path / "o")) == 1
    doc = json.loads(capsys.readouterr().err)
    assert doc["error"] == "runtime" and Path(doc["snapshot"]).exists()


def test_unexpected_failure_writes_report(tmp_path, capsys):
    data = tmp_path / "junk"
    data.mkdir()
    (data / "broken.msf").write_bytes(b"not a feature file")
    assert run(tmp_path, "kmeans-fit", "--data", str(data), "--out", str(tmp_path / "o")) == 1
    doc = json.loads(capsys.readouterr().err)
    assert doc["error"] == "runtime" and Path(doc["snapshot"]).name == "error_report.json"


def test_ablate_grid(tmp_path):
    out = tmp_path / "ab"
    assert run(tmp_path, "ablate", "--out", str(out)) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert len(rows) == 9
    assert {(r["strategy"], r["mode"]) for r in rows} == {
        (s, m) for s in ("random", "time", "channel") for m in ("frozen-last", "frozen-weighted", "finetune")
    }
    assert (out / "ablation.png").stat().st_size > 0 and (out / "ablation.txt").exists()
