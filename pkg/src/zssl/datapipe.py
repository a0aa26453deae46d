"""Streaming manifests, duration-bucketed batching and k-means unit labels.

Manifests are UTF-8, one record per line, tab separated::

    id  duration_seconds  audio_path  sample_offset  sample_count  [label_path]  [transcript]

A transcript without a label file leaves the label column empty.  Audio
is headerless 16-bit little-endian mono PCM at 16 kHz, addressed by
sample offset and count.  A label file holds one line of space-separated
integer cluster ids at 50 Hz.
"""
from __future__ import annotations

import bisect
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from zssl import numerics as nx

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_SECONDS = 0.02


class ManifestError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


@dataclass(frozen=True)
class SegmentRecord:
    id: str
    duration: float
    audio_path: str
    sample_offset: int
    sample_count: int
    label_path: str | None = None
    transcript: str | None = None

    def to_line(self) -> str:
        cols = [self.id, repr(float(self.duration)), self.audio_path, str(self.sample_offset), str(self.sample_count)]
        if self.label_path is not None or self.transcript is not None:
            cols.append(self.label_path or "")
        if self.transcript is not None:
            cols.append(self.transcript)
        return "\t".join(cols)


def parse_record(line: str, path="<manifest>", lineno: int = 0) -> SegmentRecord:
    cols = line.rstrip("\n").split("\t")
    if not 5 <= len(cols) <= 7:
        raise ManifestError(path, lineno, f"expected 5-7 tab-separated fields, got {len(cols)}")
    try:
        duration = float(cols[1])
        offset, count = int(cols[3]), int(cols[4])
    except ValueError as exc:
        raise ManifestError(path, lineno, str(exc)) from None
    if not duration > 0:
        raise ManifestError(path, lineno, f"duration must be positive, got {cols[1]}")
    if offset < 0 or count < 0:
        raise ManifestError(path, lineno, "negative sample offset or count")
    if abs(count / SAMPLE_RATE - duration) > FRAME_SECONDS:
        raise ManifestError(path, lineno, f"duration {duration} disagrees with {count} samples")
    label = cols[5] if len(cols) > 5 and cols[5] else None
    transcript = cols[6] if len(cols) > 6 else None
    return SegmentRecord(cols[0], duration, cols[2], offset, count, label, transcript)


class ManifestReader:
    """Iterates records lazily; ``lines_read`` counts lines consumed so far."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.lines_read = 0

    def __iter__(self) -> Iterator[SegmentRecord]:
        with open(self.path, encoding="utf-8") as f:
            for line in f:
                self.lines_read += 1
                if not line.strip():
                    continue
                yield parse_record(line, self.path, self.lines_read)


def stream_manifest(path: str | os.PathLike) -> Iterator[SegmentRecord]:
    return iter(ManifestReader(path))


def write_manifest(path: str | os.PathLike, records: Iterable[SegmentRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_line() + "\n")


def read_audio(record: SegmentRecord, root: str | os.PathLike = ".") -> np.ndarray:
    path = Path(root) / record.audio_path
    pcm = np.fromfile(path, dtype="<i2", count=record.sample_count, offset=2 * record.sample_offset)
    if pcm.size != record.sample_count:
        raise OSError(f"{path}: wanted {record.sample_count} samples at offset {record.sample_offset}, got {pcm.size}")
    return pcm.astype(np.float64) / 32768.0


def read_labels(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        return np.array([int(v) for v in f.readline().split()], dtype=np.int64)


def write_labels(path: str | os.PathLike, labels) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(" ".join(str(int(v)) for v in labels) + "\n")


# ------------------------------------------------------------------- bucketing


def estimate_boundaries(durations, num_buckets: int) -> np.ndarray:
    """Interior (k/num_buckets)-quantiles, linearly interpolated, deduplicated."""
    durations = np.asarray(list(durations), dtype=np.float64)
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    if durations.size < num_buckets:
        raise nx.ContractError(f"need at least {num_buckets} sampled durations, got {durations.size}")
    if num_buckets == 1:
        return np.empty(0)
    qs = np.quantile(durations, np.arange(1, num_buckets) / num_buckets)
    bounds = np.unique(qs)
    bounds = bounds[bounds > durations.min()]
    distinct = np.unique(durations).size
    if distinct < num_buckets:
        log.warning("only %d distinct durations for %d buckets; collapsing", distinct, num_buckets)
    return bounds


@dataclass(frozen=True)
class Batch:
    records: tuple[SegmentRecord, ...]
    bucket: int

    @property
    def total_duration(self) -> float:
        return sum(r.duration for r in self.records)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class BucketingState:
    boundaries: np.ndarray
    buffer_cap: int = 20000
    seed: int = 0
    buffers: list = field(default_factory=list)
    resident: int = 0
    peak_resident: int = 0

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=np.float64)
        if np.any(np.diff(self.boundaries) <= 0):
            raise ValueError("bucket boundaries must be strictly ascending")
        self.buffers = [[] for _ in range(len(self.boundaries) + 1)]
        self.rng = np.random.default_rng(self.seed)

    def bucket_of(self, duration: float) -> int:
        return bisect.bisect_right(self.boundaries.tolist(), duration)


def _take_batch(state: BucketingState, b: int, cap: float) -> Batch:
    buf = state.buffers[b]
    order = state.rng.permutation(len(buf))
    chosen, total = [], 0.0
    for i in order:
        d = buf[i].duration
        if total + d <= cap:
            chosen.append(int(i))
            total += d
    if not chosen:
        chosen = [int(order[0])]
    keep = set(chosen)
    batch = Batch(tuple(buf[i] for i in chosen), b)
    state.buffers[b] = [r for i, r in enumerate(buf) if i not in keep]
    state.resident -= len(chosen)
    return batch


def dynamic_batches(stream: Iterable[SegmentRecord], state: BucketingState,
                    max_batch_seconds: float) -> Iterator[Batch]:
    """Group streamed records into per-bucket batches of at most ``max_batch_seconds``.

    A bucket emits once its buffered duration exceeds the cap, i.e. as soon
    as adding the latest record made a full batch impossible to extend.  When
    more than ``buffer_cap`` records are buffered, the bucket holding the most
    audio emits early.  Whatever is left is drained at end of stream.
    """
    totals = [0.0] * len(state.buffers)
    for rec in stream:
        if rec.duration > max_batch_seconds:
            log.warning("record %s (%.2fs) exceeds the %.2fs batch cap; emitting alone", rec.id, rec.duration,
                        max_batch_seconds)
            yield Batch((rec,), -1)
            continue
        b = state.bucket_of(rec.duration)
        state.buffers[b].append(rec)
        totals[b] += rec.duration
        state.resident += 1
        state.peak_resident = max(state.peak_resident, state.resident)
        if totals[b] > max_batch_seconds:
            batch = _take_batch(state, b, max_batch_seconds)
            totals[b] -= batch.total_duration
            yield batch
        while state.resident > state.buffer_cap:
            fullest = max(range(len(totals)), key=lambda i: (totals[i], -i))
            batch = _take_batch(state, fullest, max_batch_seconds)
            totals[fullest] -= batch.total_duration
            yield batch
    for b in range(len(state.buffers)):
        while state.buffers[b]:
            batch = _take_batch(state, b, max_batch_seconds)
            totals[b] -= batch.total_duration
            yield batch


class DynamicBucketingSampler:
    """Two streaming passes: sample durations for boundaries, then batch.

    Neither pass materialises the manifest; start-up cost is bounded by
    ``num_boundary_samples + buffer_cap`` records regardless of manifest size.
    """

    def __init__(self, manifest: str | os.PathLike, max_batch_seconds: float, num_buckets: int = 30,
                 num_boundary_samples: int = 10000, buffer_cap: int = 20000, seed: int = 0):
        self.manifest = manifest
        self.max_batch_seconds = max_batch_seconds
        self.num_buckets = num_buckets
        self.num_boundary_samples = num_boundary_samples
        self.buffer_cap = buffer_cap
        self.seed = seed
        self.epoch = 0
        self.records_read_before_first_batch: int | None = None
        self.state: BucketingState | None = None

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _boundaries(self) -> tuple[np.ndarray, int]:
        reader = ManifestReader(self.manifest)
        durations = []
        for rec in reader:
            durations.append(rec.duration)
            if len(durations) >= self.num_boundary_samples:
                break
        if not durations:
            return np.empty(0), reader.lines_read
        buckets = min(self.num_buckets, len(durations))
        return estimate_boundaries(durations, buckets), reader.lines_read

    def __iter__(self) -> Iterator[Batch]:
        boundaries, sampled = self._boundaries()
        self.state = BucketingState(boundaries, self.buffer_cap, seed=self.seed + 1_000_003 * self.epoch)
        reader = ManifestReader(self.manifest)
        self.records_read_before_first_batch = None
        for batch in dynamic_batches(reader, self.state, self.max_batch_seconds):
            if self.records_read_before_first_batch is None:
                self.records_read_before_first_batch = sampled + reader.lines_read
            yield batch


def prefetch(iterable: Iterable, maxsize: int = 4) -> Iterator:
    """Run ``iterable`` on a producer thread behind a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(("item", item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            q.put(("error", exc))
            return
        q.put(("item", done))

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            kind, item = q.get()
            if kind == "error":
                raise item
            if item is done:
                return
            yield item
    finally:
        stop.set()


# --------------------------------------------------------------------- k-means


@dataclass
class Codebook:
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.shape[0] < 2:
            raise ValueError("a codebook needs at least two centroids")
        if not np.all(np.isfinite(self.centroids)):
            raise nx.NumericError("codebook centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # explicit differences: exact ties between centroids survive rounding
    out = np.empty((x.shape[0], c.shape[0]))
    for s in range(0, x.shape[0], chunk):
        diff = x[s:s + chunk, None, :] - c[None, :, :]
        out[s:s + chunk] = np.einsum("tkf,tkf->tk", diff, diff)
    return out


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


def kmeans_fit(features, k: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Lloyd iterations from k-means++ seeds; empty clusters jump to the farthest point."""
    x = np.asarray(features, dtype=np.float64)
    if k > x.shape[0]:
        raise nx.ContractError(f"cannot fit {k} clusters to {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    history = []
    for _ in range(iters):
        d2 = _sq_dists(x, centroids)
        assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(x.shape[0]), assign].sum()))
        new = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            point_d2 = d2[np.arange(x.shape[0]), assign]
            for c in np.flatnonzero(~filled):
                far = int(np.argmax(point_d2))
                new[c] = x[far]
                point_d2[far] = 0.0
        if np.array_equal(new, centroids):
            break
        centroids = new
    d2 = _sq_dists(x, centroids)
    history.append(float(d2.min(axis=1).sum()))
    return Codebook(centroids, history)


def kmeans_label(cb: Codebook, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.dim:
        raise nx.DimensionError(f"features {x.shape} do not match codebook dim {cb.dim}")
    return np.argmin(_sq_dists(x, cb.centroids), axis=1)
