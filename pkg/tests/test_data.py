import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfed import data as d
from transfed.data import (
    AugmentConfig,
    DataError,
    PartitionSpec,
    RawSeries,
    augment,
    load_own_csv,
    load_windows,
    load_wisdm,
    make_windows,
    partition_noniid,
    save_windows,
    split,
    synthetic_windows,
)

OWN_HEADER_LINE = "timestamp_ms,ax,ay,az,gx,gy,gz,mx,my,mz,label"


def own_csv_row(t, label, value=1.0):
    feats = ",".join(str(value) for _ in range(9))
    return f"{t},{feats},{label}"


def write_own_csv(path, rows):
    path.write_text(OWN_HEADER_LINE + "\n" + "\n".join(rows) + "\n")


class TestOwnLoader:
    def test_happy_path(self, tmp_path):
        p = tmp_path / "own.csv"
        write_own_csv(p, [own_csv_row(i, 0) for i in range(3)])
        series = load_own_csv(p)
        assert len(series) == 3
        assert series.features.shape == (3, 9)
        assert series.sample_rate_hz == 115.0

    def test_label_out_of_range_names_row(self, tmp_path):
        p = tmp_path / "own.csv"
        write_own_csv(p, [own_csv_row(0, 0), own_csv_row(1, 15)])
        with pytest.raises(DataError, match="row 3"):
            load_own_csv(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "own.csv"
        p.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(DataError, match="header"):
            load_own_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing.csv"):
            load_own_csv(tmp_path / "missing.csv")

    def test_malformed_rows_tolerated_below_threshold(self, tmp_path):
        p = tmp_path / "own.csv"
        rows = [own_csv_row(i, 1) for i in range(200)] + ["1,not,enough"]
        write_own_csv(p, rows)
        assert len(load_own_csv(p)) == 200

    def test_malformed_rows_over_threshold(self, tmp_path):
        p = tmp_path / "own.csv"
        write_own_csv(p, [own_csv_row(0, 1), "garbage,row"])
        with pytest.raises(DataError, match="malformed"):
            load_own_csv(p)


class TestWisdmLoader:
    def test_single_line(self, tmp_path):
        p = tmp_path / "wisdm.txt"
        p.write_text("33,Jogging,49105962326000,-0.69,12.68,0.50;\n")
        series = load_wisdm(p)
        assert len(series) == 1
        assert series.features.shape == (1, 3)
        assert series.labels[0] == 1
        assert series.sample_rate_hz == 20.0

    def test_activity_mapping(self, tmp_path):
        lines = [
            f"1,{name},{i},0.1,0.2,0.3;"
            for i, name in enumerate(
                ["Walking", "Jogging", "Upstairs", "Downstairs",
                 "Sitting", "Standing"]
            )
        ]
        p = tmp_path / "wisdm.txt"
        p.write_text("\n".join(lines) + "\n\n")
        series = load_wisdm(p)
        assert list(series.labels) == [0, 1, 2, 3, 4, 5]

    def test_unknown_activity(self, tmp_path):
        p = tmp_path / "wisdm.txt"
        p.write_text("1,Flying,123,0.1,0.2,0.3;\n")
        with pytest.raises(DataError, match="Flying"):
            load_wisdm(p)

    def test_missing_field_counted_malformed(self, tmp_path):
        p = tmp_path / "wisdm.txt"
        lines = [f"1,Walking,{i},0.1,0.2,0.3;" for i in range(200)]
        lines.append("1,Walking,123,0.1;")
        p.write_text("\n".join(lines))
        assert len(load_wisdm(p)) == 200


def ramp_series(n, label=0, rate=115.0, features=2):
    feats = np.tile(np.arange(n, dtype=np.float64)[:, None], (1, features))
    return RawSeries(feats, np.full(n, label), rate)


class TestMakeWindows:
    def test_frame_length_at_115hz(self):
        # 2 s at 115 Hz covers 230 raw samples, so 230 samples = 1 row
        series = ramp_series(230 * 3)
        ds = make_windows(series, window_rows=3, frame_seconds=2.0)
        assert ds.x.shape == (1, 3, 2)

    def test_ramp_frame_mean(self):
        series = ramp_series(230)
        ds = make_windows(series, window_rows=1, frame_seconds=2.0)
        assert ds.x[0, 0, 0] == pytest.approx(114.5, abs=0)

    def test_constant_series_averages_to_constant(self):
        feats = np.full((100, 3), 7.25)
        series = RawSeries(feats, np.zeros(100), sample_rate_hz=10.0)
        ds = make_windows(series, window_rows=2, frame_seconds=1.0)
        assert np.array_equal(ds.x, np.full_like(ds.x, 7.25))

    def test_stride_default_half_window(self):
        series = ramp_series(10 * 8, rate=1.0)
        ds = make_windows(series, window_rows=4, frame_seconds=1.0)
        # 80 frames of 1 sample -> windows at rows 0, 2, 4, ...
        assert len(ds) == (80 - 4) // 2 + 1

    def test_short_run_yields_zero_windows(self):
        series = ramp_series(5, rate=1.0)
        ds = make_windows(series, window_rows=10, frame_seconds=1.0)
        assert len(ds) == 0

    def test_windows_never_straddle_labels(self):
        rng = np.random.default_rng(31)
        labels = np.repeat([0, 1, 0, 2], [37, 11, 53, 29])
        feats = rng.normal(size=(len(labels), 2))
        # encode the label into feature 0 so any mixing would be visible
        feats[:, 0] = labels
        series = RawSeries(feats, labels, sample_rate_hz=1.0)
        ds = make_windows(series, window_rows=3, frame_seconds=1.0,
                          stride_rows=1)
        assert len(ds) > 0
        for i in range(len(ds)):
            assert np.all(ds.x[i, :, 0] == ds.y[i])

    @given(
        runs=st.lists(
            st.tuples(st.integers(0, 3), st.integers(1, 40)),
            min_size=1, max_size=6,
        ),
        window_rows=st.integers(1, 5),
    )
    @settings(max_examples=60, deadline=None)
    def test_no_straddle_property(self, runs, window_rows):
        labels = np.concatenate([np.full(n, c) for c, n in runs])
        feats = np.tile(labels[:, None].astype(np.float64), (1, 2))
        series = RawSeries(feats, labels, sample_rate_hz=1.0)
        ds = make_windows(series, window_rows, frame_seconds=2.0)
        for i in range(len(ds)):
            assert np.unique(ds.x[i]).size <= 1
            assert ds.x[i, 0, 0] == ds.y[i]


class TestSplit:
    def test_exact_fractions(self):
        ds = synthetic_windows(20, 5, 4, 3, seed=0)
        train, val, test = split(ds, 0.8, 0.1, 0.1, seed=1)
        assert (len(train), len(val), len(test)) == (80, 10, 10)

    def test_deterministic(self):
        ds = synthetic_windows(10, 3, 4, 3, seed=0)
        a = split(ds, 0.6, 0.2, 0.2, seed=5)
        b = split(ds, 0.6, 0.2, 0.2, seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.x, y.x) and np.array_equal(x.y, y.y)

    def test_disjoint_and_exhaustive(self):
        ds = synthetic_windows(13, 4, 4, 3, seed=0)
        train, val, test = split(ds, 0.7, 0.2, 0.1, seed=2)
        assert len(train) + len(val) + len(test) == len(ds)
        key = ds.x.reshape(len(ds), -1)[:, 0]
        seen = np.concatenate([
            part.x.reshape(len(part), -1)[:, 0] for part in (train, val, test)
        ])
        assert np.array_equal(np.sort(key), np.sort(seen))

    def test_stratified_within_one(self):
        ds = synthetic_windows(33, 3, 4, 3, seed=0)
        train, val, test = split(ds, 0.8, 0.1, 0.1, seed=3)
        for c in range(3):
            expect = 33 * 0.8
            assert abs(int((train.y == c).sum()) - expect) <= 1

    def test_fraction_sum_checked(self):
        ds = synthetic_windows(5, 2, 4, 3, seed=0)
        with pytest.raises(DataError, match="sum to 1"):
            split(ds, 0.5, 0.5, 0.5, seed=0)


class TestPartition:
    def test_replicate_reduce_counts(self):
        ds = synthetic_windows(40, 5, 4, 3, seed=0)
        spec = PartitionSpec(n_clients=5, reduction=0.5, seed=9)
        parts = partition_noniid(ds, spec)
        assert len(parts) == 5
        for k, part in enumerate(parts):
            counts = part.class_counts(5)
            assert len(part) == len(ds) - 20  # floor(0.5 * 40)
            assert counts[k] == 20
            others = [counts[c] for c in range(5) if c != k]
            assert all(c == 40 for c in others)

    def test_exact_floor_reduction(self):
        ds = synthetic_windows(1000, 2, 2, 2, seed=0)
        spec = PartitionSpec(n_clients=1, reduction=0.5, seed=1, force=True)
        parts = partition_noniid(ds, spec)
        assert parts[0].class_counts(2)[0] == 500

    def test_single_client_reduces_class_zero(self):
        ds = synthetic_windows(10, 3, 4, 3, seed=0)
        spec = PartitionSpec(n_clients=1, reduction=0.4, seed=0)
        parts = partition_noniid(ds, spec)
        counts = parts[0].class_counts(3)
        assert counts[0] == 6 and counts[1] == 10 and counts[2] == 10

    def test_disjoint_conserves_totals(self):
        ds = synthetic_windows(30, 4, 4, 3, seed=0)
        spec = PartitionSpec(n_clients=3, reduction=0.4, seed=2,
                             mode="disjoint_reduce")
        parts = partition_noniid(ds, spec)
        reductions = sum(
            int(np.floor(0.4 * ((ds.class_counts(4)[spec.reduced_class(k)]) // 3)))
        for k in range(3))
        assert sum(len(p) for p in parts) == len(ds) - reductions

    def test_reduction_range_guard(self):
        with pytest.raises(DataError, match="0.40"):
            PartitionSpec(n_clients=2, reduction=0.6)
        PartitionSpec(n_clients=2, reduction=0.6, force=True)

    def test_reduced_class_absent(self):
        ds = synthetic_windows(5, 2, 4, 3, seed=0)
        spec = PartitionSpec(n_clients=3, reduction=0.5, seed=0)
        with pytest.raises(DataError, match="absent"):
            partition_noniid(ds, spec)

    def test_deterministic(self):
        ds = synthetic_windows(20, 5, 4, 3, seed=0)
        spec = PartitionSpec(n_clients=5, reduction=0.45, seed=7)
        a = partition_noniid(ds, spec)
        b = partition_noniid(ds, spec)
        for x, y in zip(a, b):
            assert np.array_equal(x.x, y.x)


class TestAugment:
    def test_zero_settings_identity(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(4, 3))
        out = augment(w, rng, AugmentConfig(jitter=0.0, scale_range=0.0))
        assert np.array_equal(out, w)

    def test_seeded_reproducibility(self):
        w = np.ones((4, 3))
        cfg = AugmentConfig(jitter=0.05, scale_range=0.1)
        a = augment(w, np.random.default_rng(42), cfg)
        b = augment(w, np.random.default_rng(42), cfg)
        assert np.array_equal(a, b)

    def test_mean_shift_within_monte_carlo_bound(self):
        # mean of W*F jitters has sd sigma/sqrt(W*F); five of those bounds
        # nearly always holds
        rng = np.random.default_rng(43)
        w = np.zeros((10, 9))
        sigma = 0.05
        cfg = AugmentConfig(jitter=sigma, scale_range=0.0,
                            feature_std=np.ones(9))
        bound = 5.0 * sigma / np.sqrt(w.size)
        hits = sum(
            abs(augment(w, rng, cfg).mean()) <= bound for _ in range(1000)
        )
        assert hits >= 990

    def test_label_untouched_by_design(self):
        # augment only sees the matrix; labels live beside it
        ds = synthetic_windows(4, 2, 4, 3, seed=0)
        rng = np.random.default_rng(1)
        out = d.augment_batch(ds.x, rng, AugmentConfig())
        assert out.shape == ds.x.shape


class TestArchive:
    def test_roundtrip(self, tmp_path):
        ds = synthetic_windows(6, 3, 4, 3, seed=1)
        path = tmp_path / "w.tfw"
        save_windows(path, ds)
        loaded = load_windows(path)
        assert np.array_equal(loaded.y, ds.y)
        assert np.allclose(loaded.x, ds.x, rtol=1.3e-7, atol=1e-30)

    def test_truncated(self, tmp_path):
        ds = synthetic_windows(2, 2, 4, 3, seed=1)
        path = tmp_path / "w.tfw"
        save_windows(path, ds)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(Exception, match="truncated"):
            load_windows(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.tfw"
        path.write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(Exception, match="archive"):
            load_windows(path)

    def test_manifest_roundtrip(self, tmp_path):
        ds = synthetic_windows(5, 3, 4, 3, seed=2)
        path = tmp_path / "m.csv"
        d.write_manifest(path, ds, 3)
        counts = d.read_manifest(path)
        assert counts == {0: 5, 1: 5, 2: 5}


class TestSynthetic:
    def test_shapes_and_balance(self):
        ds = synthetic_windows(7, 4, 5, 3, seed=3)
        assert ds.x.shape == (28, 5, 3)
        assert np.array_equal(ds.class_counts(4), [7, 7, 7, 7])

    def test_separability(self):
        # nearest-signature classification should be essentially perfect
        ds = synthetic_windows(20, 5, 6, 4, seed=4, noise=0.2)
        rng = np.random.default_rng(4)
        signatures = rng.normal(0.0, 1.0, size=(5, 4))
        means = ds.x.mean(axis=1)
        preds = np.argmin(
            ((means[:, None, :] - signatures[None]) ** 2).sum(axis=2), axis=1
        )
        assert (preds == ds.y).mean() == 1.0
