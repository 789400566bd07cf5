"""Dataset, IDX codec, and partition-plan tests."""

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedval.data import (
    ALL_LABELS,
    ClientSlice,
    DataMismatchError,
    Dataset,
    IdxFormatError,
    IdxLengthError,
    PartitionPlan,
    SkewConfig,
    eval_split_indices,
    load_idx,
    make_iid_plan,
    make_noniid_plan,
    materialize,
    plan_from_json,
    plan_to_json,
    shared_eval_split,
    synthetic_blobs,
    write_idx,
)

# --- hand-built IDX byte oracle ------------------------------------------
# Two 2x2 "images": first all-zero with label 3, second all-255 with label 7.
# Bytes assembled here literally, independent of the codec under test.

IMG_BYTES = (
    struct.pack(">IIII", 0x00000803, 2, 2, 2)
    + bytes([0, 0, 0, 0])
    + bytes([255, 255, 255, 255])
)
LBL_BYTES = struct.pack(">II", 0x00000801, 2) + bytes([3, 7])


def write_pair(tmp_path, img=IMG_BYTES, lbl=LBL_BYTES, gz=False):
    suffix = ".gz" if gz else ""
    ip = tmp_path / f"img.idx{suffix}"
    lp = tmp_path / f"lbl.idx{suffix}"
    opener = gzip.open if gz else open
    with opener(ip, "wb") as fh:
        fh.write(img)
    with opener(lp, "wb") as fh:
        fh.write(lbl)
    return ip, lp


class TestIdx:
    def test_load_hand_built_pair(self, tmp_path):
        ds = load_idx(*write_pair(tmp_path))
        assert ds.images.shape == (2, 4)
        assert np.all(ds.images[0] == 0.0)
        assert np.all(ds.images[1] == 1.0)
        assert ds.labels.tolist() == [3, 7]

    def test_gzip_transparent(self, tmp_path):
        plain = load_idx(*write_pair(tmp_path))
        zipped = load_idx(*write_pair(tmp_path, gz=True))
        assert np.array_equal(plain.images, zipped.images)
        assert np.array_equal(plain.labels, zipped.labels)

    def test_bad_image_magic(self, tmp_path):
        bad = struct.pack(">IIII", 0x00000801, 2, 2, 2) + IMG_BYTES[16:]
        with pytest.raises(IdxFormatError):
            load_idx(*write_pair(tmp_path, img=bad))

    def test_bad_label_magic(self, tmp_path):
        bad = struct.pack(">II", 0x00000803, 2) + bytes([3, 7])
        with pytest.raises(IdxFormatError):
            load_idx(*write_pair(tmp_path, lbl=bad))

    def test_truncated_image_data(self, tmp_path):
        with pytest.raises(IdxLengthError):
            load_idx(*write_pair(tmp_path, img=IMG_BYTES[:-3]))

    def test_truncated_header(self, tmp_path):
        with pytest.raises(IdxLengthError):
            load_idx(*write_pair(tmp_path, img=IMG_BYTES[:10]))

    def test_count_mismatch(self, tmp_path):
        lbl3 = struct.pack(">II", 0x00000801, 3) + bytes([3, 7, 1])
        with pytest.raises(DataMismatchError):
            load_idx(*write_pair(tmp_path, lbl=lbl3))

    def test_write_then_load_roundtrip(self, tmp_path):
        ds = synthetic_blobs(40, seed=5, dim=16)
        ip, lp = tmp_path / "w.idx", tmp_path / "wl.idx"
        write_idx(ds, ip, lp, rows=4, cols=4)
        back = load_idx(ip, lp)
        assert np.array_equal(back.labels, ds.labels)
        # uint8 quantization loses at most half a pixel step
        assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255.0 + 1e-12

    def test_write_rejects_bad_geometry(self, tmp_path):
        ds = synthetic_blobs(10, seed=5, dim=16)
        with pytest.raises(ValueError):
            write_idx(ds, tmp_path / "a", tmp_path / "b", rows=3, cols=3)


class TestDataset:
    def test_count_mismatch_rejected(self):
        with pytest.raises(DataMismatchError):
            Dataset(np.zeros((3, 4)), np.zeros(2, dtype=np.int64))

    def test_pixel_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.full((2, 4), 1.5), np.zeros(2, dtype=np.int64))

    def test_label_range_enforced(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 4)), np.array([0, 11]))

    def test_subset_picks_rows(self):
        ds = synthetic_blobs(20, seed=1, dim=8)
        sub = ds.subset(np.array([4, 9]))
        assert np.array_equal(sub.images[0], ds.images[4])
        assert sub.labels[1] == ds.labels[9]


class TestIidPlan:
    def test_disjoint_when_it_fits(self):
        ds = synthetic_blobs(100, seed=2, dim=8)
        plan = make_iid_plan(ds, n_clients=4, per_client_count=20, seed=9)
        seen = np.concatenate([sl.sample_indices for sl in plan.per_client])
        assert len(seen) == len(set(seen.tolist())) == 80
        assert all(sl.label_set == ALL_LABELS for sl in plan.per_client)
        plan.validate(ds)

    def test_overlap_mode_keeps_within_client_uniqueness(self):
        ds = synthetic_blobs(50, seed=2, dim=8)
        plan = make_iid_plan(ds, n_clients=3, per_client_count=30, seed=9)
        for sl in plan.per_client:
            assert len(set(sl.sample_indices.tolist())) == 30
        plan.validate(ds)

    def test_deterministic(self):
        ds = synthetic_blobs(60, seed=2, dim=8)
        a = make_iid_plan(ds, 3, 15, seed=4)
        b = make_iid_plan(ds, 3, 15, seed=4)
        for sa, sb in zip(a.per_client, b.per_client):
            assert np.array_equal(sa.sample_indices, sb.sample_indices)

    def test_seed_changes_plan(self):
        ds = synthetic_blobs(60, seed=2, dim=8)
        a = make_iid_plan(ds, 3, 15, seed=4)
        b = make_iid_plan(ds, 3, 15, seed=5)
        assert any(
            not np.array_equal(sa.sample_indices, sb.sample_indices)
            for sa, sb in zip(a.per_client, b.per_client)
        )

    def test_oversized_request_rejected(self):
        ds = synthetic_blobs(20, seed=2, dim=8)
        with pytest.raises(ValueError):
            make_iid_plan(ds, 1, 21, seed=0)


class TestNonIidPlan:
    def test_label_containment_and_counts(self):
        ds = synthetic_blobs(2000, seed=3, dim=8)
        skew = SkewConfig((10, 4, 2), (300, 200, 100))
        plan = make_noniid_plan(ds, 3, skew, seed=7)
        plan.validate(ds)
        assert [sl.sample_count for sl in plan.per_client] == [300, 200, 100]
        assert [len(sl.label_set) for sl in plan.per_client] == [10, 4, 2]
        for sl in plan.per_client:
            drawn = set(ds.labels[sl.sample_indices].tolist())
            assert drawn <= sl.label_set

    def test_deterministic(self):
        ds = synthetic_blobs(1000, seed=3, dim=8)
        skew = SkewConfig((5, 3), (100, 80))
        a = make_noniid_plan(ds, 2, skew, seed=11)
        b = make_noniid_plan(ds, 2, skew, seed=11)
        for sa, sb in zip(a.per_client, b.per_client):
            assert sa.label_set == sb.label_set
            assert np.array_equal(sa.sample_indices, sb.sample_indices)

    def test_pool_exhaustion_raises_without_replacement(self):
        ds = synthetic_blobs(100, seed=3, dim=8)  # ten samples per label
        skew = SkewConfig((1,), (50,))
        with pytest.raises(ValueError, match="replacement"):
            make_noniid_plan(ds, 1, skew, seed=0)

    def test_replacement_fills_oversized_request(self):
        ds = synthetic_blobs(100, seed=3, dim=8)
        skew = SkewConfig((1,), (50,), allow_replacement=True)
        plan = make_noniid_plan(ds, 1, skew, seed=0)
        assert plan.per_client[0].sample_count == 50

    def test_client_count_mismatch(self):
        ds = synthetic_blobs(100, seed=3, dim=8)
        with pytest.raises(ValueError):
            make_noniid_plan(ds, 3, SkewConfig((5, 3), (10, 10)), seed=0)


class TestEvalSplit:
    def test_disjoint_and_exhaustive(self):
        ds = synthetic_blobs(200, seed=6, dim=8)
        ev, rest = shared_eval_split(ds, 0.25, seed=8)
        assert len(ev) == 50 and len(rest) == 150
        ei, ri = eval_split_indices(200, 0.25, seed=8)
        assert set(ei.tolist()).isdisjoint(ri.tolist())
        assert set(ei.tolist()) | set(ri.tolist()) == set(range(200))

    def test_deterministic(self):
        a, _ = eval_split_indices(100, 0.1, seed=3)
        b, _ = eval_split_indices(100, 0.1, seed=3)
        assert np.array_equal(a, b)

    def test_fraction_bounds(self):
        ds = synthetic_blobs(20, seed=6, dim=8)
        for bad in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError):
                shared_eval_split(ds, bad, seed=0)


class TestMaterialize:
    def test_partitions_match_plan(self):
        ds = synthetic_blobs(80, seed=10, dim=8)
        plan = make_iid_plan(ds, 4, 15, seed=1)
        parts = materialize(plan, ds)
        assert [p.client_id for p in parts] == [0, 1, 2, 3]
        for p, sl in zip(parts, plan.per_client):
            assert np.array_equal(p.train.labels, ds.labels[sl.sample_indices])

    def test_validate_catches_out_of_range(self):
        ds = synthetic_blobs(10, seed=10, dim=8)
        plan = PartitionPlan([ClientSlice(0, ALL_LABELS, np.array([0, 99]))])
        with pytest.raises(ValueError):
            materialize(plan, ds)

    def test_validate_catches_foreign_labels(self):
        ds = synthetic_blobs(100, seed=10, dim=8)
        only = ds.labels[0]
        others = frozenset(range(10)) - {int(only)}
        plan = PartitionPlan([ClientSlice(0, others, np.array([0]))])
        with pytest.raises(ValueError, match="outside its label set"):
            plan.validate(ds)


class TestPlanJson:
    def test_roundtrip(self):
        ds = synthetic_blobs(300, seed=12, dim=8)
        skew = SkewConfig((4, 2), (40, 20))
        plan = make_noniid_plan(ds, 2, skew, seed=13)
        back = plan_from_json(plan_to_json(plan))
        for a, b in zip(plan.per_client, back.per_client):
            assert a.client_id == b.client_id
            assert a.label_set == b.label_set
            assert np.array_equal(a.sample_indices, b.sample_indices)


class TestSyntheticBlobs:
    def test_balanced_labels(self):
        ds = synthetic_blobs(1000, seed=20, dim=8)
        counts = np.bincount(ds.labels, minlength=10)
        assert np.all(counts == 100)

    def test_near_balanced_when_not_divisible(self):
        ds = synthetic_blobs(1003, seed=20, dim=8)
        counts = np.bincount(ds.labels, minlength=10)
        assert counts.max() - counts.min() <= 1 and counts.sum() == 1003

    def test_range_and_shape(self):
        ds = synthetic_blobs(50, seed=21, dim=784)
        assert ds.images.shape == (50, 784)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_deterministic(self):
        a = synthetic_blobs(30, seed=22, dim=8)
        b = synthetic_blobs(30, seed=22, dim=8)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_classes_are_separable_in_the_mean(self):
        ds = synthetic_blobs(2000, seed=23, dim=32)
        mean0 = ds.images[ds.labels == 0].mean(axis=0)
        mean1 = ds.images[ds.labels == 1].mean(axis=0)
        assert np.linalg.norm(mean0 - mean1) > 0.05


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(min_value=20, max_value=120),
    k=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_iid_plan_indices_always_in_range(n, k, seed):
    ds = synthetic_blobs(n, seed=99, dim=8)
    count = max(1, n // (k + 1))
    plan = make_iid_plan(ds, k, count, seed=seed)
    for sl in plan.per_client:
        assert sl.sample_count == count
        assert sl.sample_indices.min() >= 0
        assert sl.sample_indices.max() < n
        assert len(set(sl.sample_indices.tolist())) == count
