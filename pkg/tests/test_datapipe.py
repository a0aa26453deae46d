import collections
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zssl import datapipe as dp
from zssl import numerics as nx


def rec(i, duration):
    return dp.SegmentRecord(f"u{i}", duration, "a.pcm", 0, int(round(duration * 16000)))


def write(path, durations):
    dp.write_manifest(path, (rec(i, d) for i, d in enumerate(durations)))
    return path


class TestManifest:
    def test_empty(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("")
        assert list(dp.stream_manifest(p)) == []

    def test_round_trip_optional_columns(self, tmp_path):
        recs = [
            dp.SegmentRecord("a", 1.0, "x.pcm", 0, 16000),
            dp.SegmentRecord("b", 0.5, "x.pcm", 16000, 8000, "b.km"),
            dp.SegmentRecord("c", 0.5, "x.pcm", 24000, 8000, None, "hello world"),
            dp.SegmentRecord("d", 0.5, "x.pcm", 32000, 8000, "d.km", "it's"),
        ]
        p = tmp_path / "m.tsv"
        dp.write_manifest(p, recs)
        assert list(dp.stream_manifest(p)) == recs

    def test_bad_duration_reports_line(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a\t1.0\tx\t0\t16000\nb\t0\tx\t0\t0\n")
        with pytest.raises(dp.ManifestError, match=":2:") as err:
            list(dp.stream_manifest(p))
        assert err.value.lineno == 2

    def test_duration_sample_mismatch(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("a\t1.0\tx\t0\t8000\n")
        with pytest.raises(dp.ManifestError, match=":1:"):
            list(dp.stream_manifest(p))

    def test_field_count(self):
        with pytest.raises(dp.ManifestError):
            dp.parse_record("a\t1.0\tx\t0")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            list(dp.stream_manifest(tmp_path / "nope.tsv"))

    def test_lazy_first_record(self, tmp_path):
        p = write(tmp_path / "m.tsv", [1.0] * 5000)
        reader = dp.ManifestReader(p)
        it = iter(reader)
        next(it)
        assert reader.lines_read == 1


def test_audio_and_labels(tmp_path):
    pcm = (np.arange(100) - 50).astype("<i2")
    pcm.tofile(tmp_path / "a.pcm")
    r = dp.SegmentRecord("x", 0.001, "a.pcm", 10, 16)
    wave = dp.read_audio(r, tmp_path)
    np.testing.assert_array_equal(wave, (np.arange(10, 26) - 50) / 32768.0)
    dp.write_labels(tmp_path / "x.km", [3, 0, 15])
    np.testing.assert_array_equal(dp.read_labels(tmp_path / "x.km"), [3, 0, 15])
    assert (tmp_path / "x.km").read_text() == "3 0 15\n"


class TestBoundaries:
    def test_known_sequence(self):
        # numpy "linear": position k/4 * (N-1) between order statistics
        b = dp.estimate_boundaries(np.arange(1, 101), 4)
        np.testing.assert_allclose(b, [25.75, 50.5, 75.25], rtol=0, atol=1e-12)

    def test_all_equal(self, caplog):
        with caplog.at_level(logging.WARNING):
            b = dp.estimate_boundaries([3.0] * 20, 5)
        assert b.size == 0 and "distinct" in caplog.text
        state = dp.BucketingState(b)
        assert len(state.buffers) == 1

    def test_one_bucket(self):
        assert dp.estimate_boundaries([1.0, 2.0], 1).size == 0

    def test_too_few_samples(self):
        with pytest.raises(nx.ContractError):
            dp.estimate_boundaries([1.0], 3)

    @given(st.lists(st.floats(0.1, 100), min_size=5, max_size=200), st.integers(1, 5))
    def test_strictly_ascending(self, durations, k):
        b = dp.estimate_boundaries(durations, k)
        assert np.all(np.diff(b) > 0)


class TestBatching:
    def test_sixty_second_records(self):
        state = dp.BucketingState(np.empty(0), buffer_cap=1000, seed=0)
        batches = list(dp.dynamic_batches((rec(i, 60.0) for i in range(100)), state, 600.0))
        assert [len(b) for b in batches] == [10] * 10
        assert all(b.total_duration == 600.0 for b in batches)

    def test_short_stream_drains(self):
        state = dp.BucketingState(np.array([2.0]), buffer_cap=100)
        batches = list(dp.dynamic_batches((rec(i, 1.0 + i % 3) for i in range(6)), state, 100.0))
        assert sorted(r.id for b in batches for r in b.records) == [f"u{i}" for i in range(6)]
        assert len(batches) == 2

    def test_oversized_record_singleton(self, caplog):
        state = dp.BucketingState(np.empty(0))
        with caplog.at_level(logging.WARNING):
            batches = list(dp.dynamic_batches([rec(0, 5.0), rec(1, 50.0)], state, 10.0))
        assert [len(b) for b in batches] == [1, 1] and "exceeds" in caplog.text

    def test_seeded_order(self):
        def run(seed):
            state = dp.BucketingState(np.empty(0), seed=seed)
            return [tuple(r.id for r in b.records) for b in
                    dp.dynamic_batches((rec(i, 1.0) for i in range(50)), state, 10.0)]

        assert run(3) == run(3)
        assert run(3) != run(4)

    @given(st.lists(st.floats(0.05, 30.0), max_size=120), st.integers(1, 40), st.integers(0, 2**32 - 1),
           st.integers(1, 6))
    @settings(max_examples=200, deadline=None)
    def test_invariants(self, durations, buffer_cap, seed, nb):
        records = [rec(i, round(d, 3)) for i, d in enumerate(durations)]
        bounds = dp.estimate_boundaries([r.duration for r in records], nb) if len(records) >= nb else np.empty(0)
        state = dp.BucketingState(bounds, buffer_cap=buffer_cap, seed=seed)
        cap = 40.0
        seen = collections.Counter()
        edges = np.concatenate([[0.0], bounds, [np.inf]])
        for batch in dp.dynamic_batches(iter(records), state, cap):
            assert batch.total_duration <= cap
            buckets = {state.bucket_of(r.duration) for r in batch.records}
            assert buckets == {batch.bucket}
            durs = [r.duration for r in batch.records]
            lo, hi = edges[batch.bucket], edges[batch.bucket + 1]
            if lo > 0 and np.isfinite(hi):
                assert max(durs) / min(durs) <= hi / lo
            assert state.resident <= buffer_cap
            seen.update(r.id for r in batch.records)
        assert seen == collections.Counter(r.id for r in records)
        assert state.peak_resident <= buffer_cap + 1


class TestSampler:
    def test_startup_independent_of_length(self, tmp_path):
        rng = np.random.default_rng(0)
        durations = np.round(rng.uniform(1.0, 20.0, size=3000), 3)
        short = write(tmp_path / "short.tsv", durations[:1000])
        long = write(tmp_path / "long.tsv", durations)
        counts = []
        for path in (short, long):
            s = dp.DynamicBucketingSampler(path, 100.0, num_buckets=5, num_boundary_samples=200, buffer_cap=300)
            first = next(iter(s))
            counts.append(s.records_read_before_first_batch)
            assert first.total_duration <= 100.0
        assert counts[0] == counts[1] <= 200 + 300

    def test_epochs_cover_everything(self, tmp_path):
        p = write(tmp_path / "m.tsv", np.round(np.random.default_rng(1).uniform(0.5, 5, size=300), 3))
        s = dp.DynamicBucketingSampler(p, 20.0, num_buckets=4, num_boundary_samples=50, buffer_cap=40)
        a = [r.id for b in s for r in b.records]
        s.set_epoch(1)
        b = [r.id for b in s for r in b.records]
        assert sorted(a) == sorted(b) == sorted(f"u{i}" for i in range(300))
        assert a != b


def test_prefetch_preserves_order_and_errors():
    assert list(dp.prefetch(iter(range(100)), maxsize=2)) == list(range(100))

    def bad():
        yield 1
        raise OSError("disk")

    with pytest.raises(OSError, match="disk"):
        list(dp.prefetch(bad()))


class TestKMeans:
    def test_blobs(self):
        rng = np.random.default_rng(0)
        means = np.array([[-5.0, 0.0, 1.0], [5.0, 2.0, -1.0]])
        x = np.concatenate([rng.normal(m, 0.3, size=(500, 3)) for m in means])
        cb = dp.kmeans_fit(x, 2, iters=20, seed=1)
        order = np.argsort(cb.centroids[:, 0])
        np.testing.assert_allclose(cb.centroids[order], means, atol=0.1)

    def test_k_equals_m(self):
        x = np.random.default_rng(2).normal(size=(12, 4))
        assert dp.kmeans_fit(x, 12).inertia_history[-1] == 0.0

    def test_k_too_big(self):
        with pytest.raises(nx.ContractError):
            dp.kmeans_fit(np.zeros((3, 2)), 4)

    @given(st.integers(2, 8), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_inertia_monotone(self, k, seed):
        x = np.random.default_rng(seed).normal(size=(60, 3))
        h = dp.kmeans_fit(x, k, iters=15, seed=seed).inertia_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))

    def test_empty_cluster_reseeded(self):
        # duplicate points force k-means++ to exhaust distinct seeds
        x = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5)
        cb = dp.kmeans_fit(x, 3, iters=5)
        assert np.all(np.isfinite(cb.centroids))
        assert cb.inertia_history[-1] == 0.0

    def test_label_exact_and_ties(self):
        c = np.zeros((8, 2))
        c[:, 0] = np.arange(8)
        cb = dp.Codebook(c)
        assert dp.kmeans_label(cb, c[[7]])[0] == 7
        c2 = np.zeros((6, 1))
        c2[2, 0], c2[5, 0] = -1.0, 1.0
        c2[[0, 1, 3, 4], 0] = [10, 20, 30, 40]
        assert dp.kmeans_label(dp.Codebook(c2), np.zeros((1, 1)))[0] == 2

    def test_label_brute_force(self):
        rng = np.random.default_rng(3)
        cb = dp.Codebook(rng.normal(size=(10, 5)))
        x = rng.normal(size=(300, 5))
        brute = []
        for row in x:
            best, best_d = 0, np.inf
            for j, cen in enumerate(cb.centroids):
                d = sum((a - b) ** 2 for a, b in zip(row, cen))
                if d < best_d:
                    best, best_d = j, d
            brute.append(best)
        assert list(dp.kmeans_label(cb, x)) == brute

    def test_label_dim_mismatch(self):
        with pytest.raises(nx.DimensionError):
            dp.kmeans_label(dp.Codebook(np.zeros((2, 3))), np.zeros((4, 2)))

    def test_codebook_invariants(self):
        with pytest.raises(ValueError):
            dp.Codebook(np.zeros((1, 3)))
        with pytest.raises(nx.NumericError):
            dp.Codebook(np.array([[np.nan], [0.0]]))
