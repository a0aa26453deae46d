"""Pipeline stages: corpus, k-means targets, pre-training, fine-tuning, decoding, bench.

Working-directory layout::

    data/audio.pcm  data/train.tsv  data/text.txt  data/finetune.tsv
    data/units{n}.tsv  data/units{n}/<id>.km      k-means targets, iteration n
    ckpt/pretrain{n}.ckpt  ckpt/finetune.ckpt
    metrics_pretrain{n}.jsonl  metrics_finetune.jsonl  hyps.txt  bench.jsonl

Manifest paths are relative to the manifest's own directory.
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import time
from collections import Counter
from pathlib import Path
from typing import Iterator

import numpy as np

from zssl import asr
from zssl import checkpoint as ckpt
from zssl import datapipe as dp
from zssl import encoder as enc
from zssl import frontend as fe
from zssl import model as mdl
from zssl import numerics as nx
from zssl import objective as obj
from zssl import optimizer as opt
from zssl import synth
from zssl.config import RunConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; the last good checkpoint is left in place."""


class ShapeMismatchError(ValueError):
    pass


class MetricsLog:
    """Append-only JSON-lines writer with a monotone step field."""

    def __init__(self, path: str | os.PathLike, append: bool = False):
        self.path = Path(path)
        self.last_step = -1
        if append and self.path.exists():
            with open(self.path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        self.last_step = json.loads(line)["step"]
        elif self.path.exists():
            self.path.unlink()

    def write(self, record: dict) -> None:
        if record["step"] <= self.last_step:
            raise ValueError(f"metrics step {record['step']} after {self.last_step}")
        self.last_step = record["step"]
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _paths(cfg: RunConfig) -> dict[str, Path]:
    root = cfg.root
    return {
        "data": root / "data",
        "train": root / "data" / "train.tsv",
        "finetune": root / "data" / "finetune.tsv",
        "text": root / "data" / "text.txt",
        "ckpt": root / "ckpt",
    }


def _units_manifest(cfg: RunConfig, iteration: int) -> Path:
    return cfg.root / "data" / f"units{iteration}.tsv"


def _pretrain_ckpt(cfg: RunConfig, iteration: int) -> Path:
    return cfg.root / "ckpt" / f"pretrain{iteration}.ckpt"


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ----------------------------------------------------------------- make-data


def make_data(cfg: RunConfig) -> dict:
    paths = _paths(cfg)
    records = synth.make_data(paths["data"], cfg.seed, cfg.num_utts, (cfg.min_duration, cfg.max_duration),
                              cfg.lexicon_size)
    dp.write_manifest(paths["finetune"], records[:cfg.finetune_utts])
    return {"utterances": len(records), "seconds": sum(r.duration for r in records)}


# -------------------------------------------------------------------- kmeans


def pair_average(feats: np.ndarray) -> np.ndarray:
    """100 Hz frames to 50 Hz by averaging non-overlapping pairs."""
    n = feats.shape[0] // 2
    return 0.5 * (feats[0:2 * n:2] + feats[1:2 * n:2])


def _load_params(path: Path) -> dict[str, nx.Tensor]:
    return {k: nx.parameter(v, k) for k, v in ckpt.load(path).items() if not k.startswith(("opt.", "train."))}


def kmeans(cfg: RunConfig) -> dict:
    """Cluster frame features into ``num_units`` targets for iteration ``label_iteration``.

    Iteration 1 clusters MFCC-like features; later iterations cluster the
    output of encoder stack ``feature_layer`` from the previous pre-training.
    """
    paths = _paths(cfg)
    it = cfg.label_iteration
    records = list(dp.stream_manifest(paths["train"]))
    if it == 1:
        def features(wave):
            return pair_average(fe.mfcc_like(wave))
    else:
        mc = mdl.ModelConfig.from_run(cfg)
        source = Path(cfg.init_checkpoint) if cfg.init_checkpoint else _pretrain_ckpt(cfg, it - 1)
        params = _load_params(source)

        def features(wave):
            info = enc.ForwardInfo()
            mdl.encode(mc, params, wave, None, info)
            return info.stack_outputs[cfg.feature_layer].data

    feats = [features(dp.read_audio(r, paths["data"])) for r in records]
    pool = np.concatenate(feats)
    rng = np.random.default_rng(_sub_seed(cfg.seed, it, 17))
    if pool.shape[0] > cfg.kmeans_max_frames:
        pool = pool[np.sort(rng.choice(pool.shape[0], cfg.kmeans_max_frames, replace=False))]
    cb = dp.kmeans_fit(pool, cfg.num_units, cfg.kmeans_iters, seed=_sub_seed(cfg.seed, it))
    label_dir = paths["data"] / f"units{it}"
    label_dir.mkdir(parents=True, exist_ok=True)
    out = []
    for r, f in zip(records, feats):
        rel = f"units{it}/{r.id}.km"
        dp.write_labels(paths["data"] / rel, dp.kmeans_label(cb, f))
        out.append(dp.SegmentRecord(r.id, r.duration, r.audio_path, r.sample_offset, r.sample_count, rel,
                                    r.transcript))
    dp.write_manifest(_units_manifest(cfg, it), out)
    return {"iteration": it, "frames": int(sum(f.shape[0] for f in feats)), "inertia": cb.inertia_history}


# ------------------------------------------------------------ training loop


def _batch_stream(sampler: dp.DynamicBucketingSampler) -> Iterator[tuple[int, dp.Batch]]:
    for epoch in itertools.count():
        sampler.set_epoch(epoch)
        n = 0
        for batch in sampler:
            n += 1
            yield epoch, batch
        if n == 0:
            raise nx.ContractError("manifest produced no batches")


def _load_batch(item, root: Path, with_labels: bool):
    epoch, batch = item
    utts = []
    for r in batch.records:
        wave = dp.read_audio(r, root)
        labels = dp.read_labels(root / r.label_path) if with_labels else None
        utts.append((r, wave, labels))
    return epoch, utts


def _sampler(cfg: RunConfig, manifest: Path) -> dp.DynamicBucketingSampler:
    return dp.DynamicBucketingSampler(manifest, cfg.max_batch_seconds, cfg.num_buckets,
                                      cfg.num_boundary_samples, cfg.buffer_cap, cfg.seed)


def _save(path: Path, params: dict, state: opt.OptState, step: int, batches: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {k: p.data for k, p in params.items()}
    blob.update(state.state_dict())
    blob["train.step"] = np.array(float(step))
    blob["train.batches"] = np.array(float(batches))
    ckpt.save(path, blob)


def _restore(path: Path, params: dict, state: opt.OptState) -> tuple[int, int]:
    blob = ckpt.load(path)
    diff = mdl.shape_diff(params, blob)
    if diff:
        raise ShapeMismatchError(f"{path} does not match the model:\n  " + "\n  ".join(diff))
    for k in params:
        params[k].data = np.array(blob[k])
    state.load_state_dict(blob)
    return int(blob["train.step"]), int(blob["train.batches"])


def _run_loop(cfg: RunConfig, params: dict, ckpt_path: Path, metrics_path: Path, manifest: Path,
              with_labels: bool, batch_loss, frozen=lambda step: (), lr_scale=None) -> dict:
    """Shared optimiser loop.

    ``batch_loss(utts, batch_index)`` returns (loss tensor or None, accuracy or
    None).  A step sums gradients over ``grad_accum`` consecutive batches.
    Resuming replays the batch sequence from the start and skips the batches
    already consumed, so an interrupted run continues bit-exactly.
    """
    state = opt.OptState()
    step, consumed = 0, 0
    resumed = cfg.resume and ckpt_path.exists()
    if resumed:
        step, consumed = _restore(ckpt_path, params, state)
    metrics = MetricsLog(metrics_path, append=resumed)
    sched = opt.EdenSchedule(cfg.base_lr, cfg.lr_step_warmup, cfg.lr_epoch_warmup)
    root = manifest.parent
    stream = itertools.islice(_batch_stream(_sampler(cfg, manifest)), consumed, None)
    loaded = dp.prefetch(_load_batch(item, root, with_labels) for item in stream)
    t0 = time.perf_counter()
    last_loss = None
    try:
        while step < cfg.steps:
            opt.zero_grads(params)
            losses, accs, counts = [], [], Counter()
            epoch = 0
            for _ in range(cfg.grad_accum):
                epoch, utts = next(loaded)
                with nx.Tape() as tape:
                    loss, acc = batch_loss(utts, consumed)
                    consumed += 1
                    if loss is None:
                        continue
                    if not np.isfinite(loss.item()):
                        raise TrainingAborted(f"non-finite loss at step {step + 1}")
                    nx.backward(loss * (1.0 / cfg.grad_accum))
                counts.update(tape.counts)
                losses.append(loss.item())
                if acc is not None:
                    accs.append(acc)
            lr = opt.eden_lr(sched, step, epoch)
            trainable = {k: p for k, p in params.items() if not k.startswith(frozen(step))}
            try:
                opt.scaled_adam_step(trainable, state, lr, lr_scale=lr_scale)
            except opt.NonFiniteGradient as exc:
                raise TrainingAborted(str(exc)) from None
            bad = next((k for k, p in trainable.items() if not np.all(np.isfinite(p.data))), None)
            if bad is not None:
                raise TrainingAborted(f"parameter {bad!r} became non-finite at step {step + 1}")
            step += 1
            elapsed = time.perf_counter() - t0
            last_loss = float(np.mean(losses)) if losses else None
            metrics.write({
                "step": step, "epoch": epoch, "lr": lr, "loss": last_loss,
                "accuracy": float(np.mean(accs)) if accs else None,
                "wall_time": elapsed, "batches_per_sec": consumed / elapsed if elapsed > 0 else None,
                "op_counts": dict(sorted(counts.items())),
            })
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                _save(ckpt_path, params, state, step, consumed)
    except nx.NumericError as exc:
        raise TrainingAborted(str(exc)) from None
    finally:
        loaded.close()
    return {"step": step, "loss": last_loss, "checkpoint": str(ckpt_path)}


# ------------------------------------------------------------------ pretrain


def pretrain(cfg: RunConfig) -> dict:
    it = cfg.label_iteration
    manifest = _units_manifest(cfg, it)
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found; run the kmeans stage first")
    mc = mdl.ModelConfig.from_run(cfg)
    params = mdl.init_pretrain(mc, np.random.default_rng(cfg.seed), cfg.num_units, cfg.loss, cfg.hubert_dim)
    spec_args = (cfg.mask_prob, cfg.mask_span, cfg.mask_min)

    def batch_loss(utts, index):
        losses, correct, total = [], 0, 0
        for i, (_, wave, labels) in enumerate(utts):
            t = mdl.num_frames(mc, wave.size)
            mask = obj.sample_masks(obj.MaskSpec(*spec_args, seed=_sub_seed(cfg.seed, index, i)), t)
            rows = mask.indices[mask.indices < min(t, len(labels))]
            if rows.size == 0:
                continue
            o = mdl.encode(mc, params, wave, mask)
            losses.append(mdl.pretrain_loss(params, o, labels, mask, cfg.loss, cfg.hubert_tau))
            scores = mdl.pretrain_scores(params, o[rows], cfg.loss, cfg.hubert_tau).data
            correct += int(np.sum(np.argmax(scores, axis=1) == labels[rows]))
            total += rows.size
        if not losses:
            return None, None
        return nx.concat([l.reshape(1) for l in losses]).mean(), correct / total

    summary = _run_loop(cfg, params, _pretrain_ckpt(cfg, it), cfg.root / f"metrics_pretrain{it}.jsonl",
                        manifest, True, batch_loss)
    summary["initial_loss_reference"] = float(np.log(cfg.num_units))
    return summary


# ------------------------------------------------------------------ finetune


def _finetune_params(cfg: RunConfig, mc: mdl.ModelConfig) -> dict:
    rng = np.random.default_rng(_sub_seed(cfg.seed, 29))
    params = mdl.init_backbone(mc, rng)
    source = Path(cfg.init_checkpoint) if cfg.init_checkpoint else _pretrain_ckpt(cfg, cfg.label_iteration)
    if source.exists():
        blob = ckpt.load(source)
        diff = mdl.shape_diff(params, blob)
        if diff:
            raise ShapeMismatchError(f"{source} is incompatible with profile {cfg.profile!r}:\n  "
                                     + "\n  ".join(diff))
        for k in params:
            params[k].data = np.array(blob[k])
    elif cfg.init_checkpoint:
        raise FileNotFoundError(source)
    else:
        log.warning("no pre-trained checkpoint at %s; fine-tuning from scratch", source)
    params.update(mdl.init_ctc_head(mc, rng))
    return params


def finetune(cfg: RunConfig) -> dict:
    mc = mdl.ModelConfig.from_run(cfg)
    params = _finetune_params(cfg, mc)
    frozen_batches = cfg.freeze_backbone_steps * cfg.grad_accum
    cache: dict[str, np.ndarray] = {}

    def features(r, wave, index):
        # the backbone is constant while frozen, so each utterance is encoded once
        if index >= frozen_batches:
            return mdl.encode(mc, params, wave)
        if r.id not in cache:
            cache[r.id] = mdl.encode(mc, params, wave).data
        return nx.Tensor(cache[r.id])

    def batch_loss(utts, index):
        losses = []
        for r, wave, _ in utts:
            o = features(r, wave, index)
            target = asr.VOCAB.encode(r.transcript or "")
            loss = asr.ctc_loss(mdl.ctc_log_probs(params, o), target)
            if np.isfinite(loss.item()):
                losses.append(loss * (1.0 / max(1, len(target))))
        if not losses:
            return None, None
        return nx.concat([l.reshape(1) for l in losses]).mean(), None

    def frozen(step):
        if step < cfg.freeze_backbone_steps:
            return mdl.BACKBONE_PREFIXES
        return ("frontend.",) if step < cfg.freeze_frontend_steps else ()

    lr_scale = {k: cfg.backbone_lr_scale for k in params if k.startswith(mdl.BACKBONE_PREFIXES)}
    return _run_loop(cfg, params, cfg.root / "ckpt" / "finetune.ckpt", cfg.root / "metrics_finetune.jsonl",
                     _paths(cfg)["finetune"], False, batch_loss, frozen, lr_scale)


# -------------------------------------------------------------------- decode


def decode(cfg: RunConfig) -> dict:
    paths = _paths(cfg)
    mc = mdl.ModelConfig.from_run(cfg)
    params = _load_params(cfg.root / "ckpt" / "finetune.ckpt")
    manifest = Path(cfg.decode_manifest) if cfg.decode_manifest else paths["finetune"]
    lm = None
    if cfg.decode_method == "beam" and cfg.lm_weight != 0:
        lm = asr.train_char_lm(paths["text"].read_text(encoding="utf-8"), cfg.lm_order)
    totals, ref_words, hyps = Counter(), 0, []
    for r in dp.stream_manifest(manifest):
        lp = mdl.ctc_log_probs(params, mdl.encode(mc, params, dp.read_audio(r, manifest.parent)))
        if cfg.decode_method == "greedy":
            ids = asr.ctc_greedy(lp)
        else:
            ids = asr.ctc_beam_lm(lp, lm, cfg.lm_weight, cfg.length_weight, cfg.beam)
        text = asr.VOCAB.decode(ids)
        hyps.append((r.id, text))
        ref = (r.transcript or "").split()
        res = asr.wer(text.split(), ref)
        totals.update({"S": res.substitutions, "I": res.insertions, "D": res.deletions})
        ref_words += len(ref)
    asr.write_hypotheses(cfg.root / "hyps.txt", hyps)
    errors = totals["S"] + totals["I"] + totals["D"]
    return {"utterances": len(hyps), "substitutions": totals["S"], "insertions": totals["I"],
            "deletions": totals["D"], "wer": errors / max(1, ref_words)}


# --------------------------------------------------------------------- bench


def bench(cfg: RunConfig) -> dict:
    """Attention FLOPs and forward wall-clock: U-Net geometry vs single-rate stacks."""
    zip_cfg = enc.profile(cfg.profile)
    geometries = {"zipformer": zip_cfg, "transformer": enc.transformer_geometry(zip_cfg)}
    out_path = cfg.root / "bench.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for t in cfg.bench_frames:
        x = np.random.default_rng(_sub_seed(cfg.seed, t)).normal(size=(t, zip_cfg.input_dim))
        measured = {}
        for name, ec in geometries.items():
            params = enc.init_params(ec, np.random.default_rng(cfg.seed))
            times = []
            for _ in range(cfg.bench_repeats):
                start = time.perf_counter()
                with nx.Tape() as tape:
                    enc.forward(ec, nx.Tensor(x), params)
                times.append(time.perf_counter() - start)
            sec = float(np.median(times))
            measured[name] = (tape.flops["attention"], sec)
            rows.append({"kind": "measurement", "geometry": name, "frames": t,
                         "attention_flops": int(tape.flops["attention"]),
                         "total_flops": int(sum(tape.flops.values())),
                         "seconds_per_batch": sec, "batches_per_sec": 1.0 / sec})
        rows.append({"kind": "ratio", "frames": t,
                     "flop_ratio": measured["zipformer"][0] / measured["transformer"][0],
                     "wallclock_ratio": measured["zipformer"][1] / measured["transformer"][1]})
    with open(out_path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    return {"report": str(out_path), "ratios": [r for r in rows if r["kind"] == "ratio"]}


STAGE_FUNCS = {
    "make-data": make_data,
    "kmeans": kmeans,
    "pretrain": pretrain,
    "finetune": finetune,
    "decode": decode,
    "bench": bench,
}


def run(cfg: RunConfig) -> dict:
    return STAGE_FUNCS[cfg.stage](cfg)
