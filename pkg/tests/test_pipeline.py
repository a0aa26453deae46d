"""End-to-end plumbing on a tiny corpus with the tiny encoder profile."""
import json

import numpy as np
import pytest

from zssl import checkpoint as ckpt
from zssl import cli
from zssl import config
from zssl import train


def base_overrides(workdir):
    return [f"workdir={workdir}", "num_utts=6", "min_duration=1.0", "max_duration=1.5", "lexicon_size=4",
            "finetune_utts=3", "profile=tiny", "frontend_channels=8", "num_units=4", "kmeans_iters=5",
            "mask_span=3", "max_batch_seconds=3.0", "checkpoint_every=2", "bench_frames=[8, 40]",
            "bench_repeats=1"]


def make_cfg(workdir, *extra):
    return config.load(None, base_overrides(workdir) + list(extra), env={})


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    cfg = make_cfg(wd)
    train.run(cfg.replace(stage="make-data"))
    train.run(cfg.replace(stage="kmeans"))
    return wd


def copy_corpus(src, dst):
    import shutil
    shutil.copytree(src / "data", dst / "data")
    return dst


def params_of(path):
    return {k: v for k, v in ckpt.load(path).items()}


def test_kmeans_labels_written(corpus):
    lines = (corpus / "data" / "units1.tsv").read_text().splitlines()
    assert len(lines) == 6
    label_path = lines[0].split("\t")[5]
    labels = np.array((corpus / "data" / label_path).read_text().split(), dtype=int)
    assert labels.min() >= 0 and labels.max() < 4


def test_pretrain_resume_bit_exact(corpus, tmp_path):
    full = copy_corpus(corpus, tmp_path / "full")
    split = copy_corpus(corpus, tmp_path / "split")
    train.run(make_cfg(full, "stage=pretrain", "steps=6"))
    train.run(make_cfg(split, "stage=pretrain", "steps=3"))
    train.run(make_cfg(split, "stage=pretrain", "steps=6"))
    a, b = params_of(full / "ckpt" / "pretrain1.ckpt"), params_of(split / "ckpt" / "pretrain1.ckpt")
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    ma, mb = train.read_metrics(full / "metrics_pretrain1.jsonl"), train.read_metrics(split / "metrics_pretrain1.jsonl")
    assert [r["step"] for r in mb] == list(range(1, 7))
    assert [r["loss"] for r in ma] == [r["loss"] for r in mb]
    rec = ma[0]
    for key in ("step", "epoch", "lr", "loss", "accuracy", "wall_time", "batches_per_sec", "op_counts"):
        assert key in rec
    assert rec["op_counts"]["matmul"] > 0


def test_pretrain_initial_loss_near_log_k(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=pretrain", "steps=1"))
    first = train.read_metrics(wd / "metrics_pretrain1.jsonl")[0]["loss"]
    assert abs(first - np.log(4)) < 0.5


def test_hubert_loss_variant_runs(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    out = train.run(make_cfg(wd, "stage=pretrain", "steps=2", "loss=hubert"))
    assert np.isfinite(out["loss"])


def test_nan_abort_keeps_last_good(corpus, tmp_path, capsys):
    wd = copy_corpus(corpus, tmp_path / "w")
    args = ["pretrain", "--set", f"workdir={wd}"] + sum((["--set", o] for o in base_overrides(wd)[1:]), [])
    assert cli.main(args + ["--set", "steps=2"]) == 0
    good = params_of(wd / "ckpt" / "pretrain1.ckpt")
    assert cli.main(args + ["--set", "steps=6", "--set", "base_lr=1e300"]) == 2
    assert "aborted" in capsys.readouterr().err
    after = params_of(wd / "ckpt" / "pretrain1.ckpt")
    assert all(np.array_equal(good[k], after[k]) for k in good)
    assert all(np.all(np.isfinite(v)) for v in after.values())


def test_finetune_frozen_frontend_and_head_swap(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=pretrain", "steps=2"))
    pre = params_of(wd / "ckpt" / "pretrain1.ckpt")
    train.run(make_cfg(wd, "stage=finetune", "steps=2", "freeze_frontend_steps=2"))
    ft = params_of(wd / "ckpt" / "finetune.ckpt")
    assert not any(k.startswith("head.") or k.startswith("model.mask_embed") for k in ft)
    assert ft["ctc.projection"].shape[1] == 29
    frontend = [k for k in pre if k.startswith("frontend.")]
    assert frontend and all(np.array_equal(pre[k], ft[k]) for k in frontend)
    assert not np.array_equal(pre["encoder.stack0.block0.ff1.in"], ft["encoder.stack0.block0.ff1.in"])
    out = train.run(make_cfg(wd, "stage=decode"))
    assert out["utterances"] == 3 and 0 <= out["wer"]
    hyps = (wd / "hyps.txt").read_text().splitlines()
    assert len(hyps) == 3 and all("\t" in h for h in hyps)
    beam = train.run(make_cfg(wd, "stage=decode", "decode_method=beam", "beam=4"))
    assert beam["utterances"] == 3


def test_finetune_frozen_backbone(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=pretrain", "steps=1"))
    pre = params_of(wd / "ckpt" / "pretrain1.ckpt")
    train.run(make_cfg(wd, "stage=finetune", "steps=3", "freeze_backbone_steps=3"))
    ft = params_of(wd / "ckpt" / "finetune.ckpt")
    backbone = [k for k in ft if not k.startswith("ctc.") and not k.startswith("opt.") and not k.startswith("train.")]
    assert backbone and all(np.array_equal(pre[k], ft[k]) for k in backbone)
    # unfreezing continues from the cached-feature phase and moves the backbone
    train.run(make_cfg(wd, "stage=finetune", "steps=5", "freeze_backbone_steps=3", "backbone_lr_scale=0.5"))
    later = params_of(wd / "ckpt" / "finetune.ckpt")
    assert not np.array_equal(ft["encoder.stack0.block0.ff1.in"], later["encoder.stack0.block0.ff1.in"])
    assert len(train.read_metrics(wd / "metrics_finetune.jsonl")) == 5


def test_finetune_shape_mismatch(corpus, tmp_path, capsys):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=pretrain", "steps=1"))
    with pytest.raises(train.ShapeMismatchError, match="expected"):
        train.run(make_cfg(wd, "stage=finetune", "steps=1", "frontend_channels=6"))
    args = ["finetune"] + sum((["--set", o] for o in base_overrides(wd)), []) + ["--set", "frontend_channels=6"]
    assert cli.main(args) == 1
    assert "frontend" in capsys.readouterr().err


def test_bench_report(tmp_path):
    cfg = make_cfg(tmp_path, "stage=bench")
    out = train.run(cfg)
    rows = [json.loads(line) for line in (tmp_path / "bench.jsonl").read_text().splitlines()]
    meas = [r for r in rows if r["kind"] == "measurement"]
    ratios = [r for r in rows if r["kind"] == "ratio"]
    assert len(meas) == 4 and len(ratios) == 2
    for r in meas:
        assert set(r) == {"kind", "geometry", "frames", "attention_flops", "total_flops", "seconds_per_batch",
                          "batches_per_sec"}
    assert ratios[-1]["frames"] == 40 and ratios[-1]["flop_ratio"] < 1
    assert out["ratios"] == ratios


def test_make_data_deterministic(tmp_path):
    for name in ("a", "b"):
        train.run(make_cfg(tmp_path / name, "stage=make-data"))
    assert (tmp_path / "a/data/audio.pcm").read_bytes() == (tmp_path / "b/data/audio.pcm").read_bytes()


def test_kmeans_deterministic(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=kmeans"))
    for f in (corpus / "data" / "units1").iterdir():
        assert (wd / "data" / "units1" / f.name).read_bytes() == f.read_bytes()


def test_second_iteration_kmeans(corpus, tmp_path):
    wd = copy_corpus(corpus, tmp_path / "w")
    train.run(make_cfg(wd, "stage=pretrain", "steps=1"))
    out = train.run(make_cfg(wd, "stage=kmeans", "label_iteration=2", "feature_layer=2"))
    assert out["iteration"] == 2 and (wd / "data" / "units2.tsv").exists()
    train.run(make_cfg(wd, "stage=pretrain", "steps=1", "label_iteration=2"))
    assert (wd / "ckpt" / "pretrain2.ckpt").exists()


def test_cli_config_errors(tmp_path, capsys):
    assert cli.main(["--set", "bogus=1"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.json")]) == 1
    assert cli.main(["pretrain", "--set", f"workdir={tmp_path}"]) == 1  # no k-means targets yet
    assert cli.main(["--print-config", "--set", "steps=3"]) == 0
    assert '"steps": 3' in capsys.readouterr().out
