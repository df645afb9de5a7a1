import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csefsl.data import (
    IID,
    ClientShard,
    Dataset,
    Dirichlet,
    LabelShards,
    batches,
    center_crop,
    label_histogram,
    load_csv,
    load_idx,
    partition,
    sample_participants,
    standardize,
    synth_dataset,
    train_test_split,
    write_idx,
)
from csefsl.errors import DataError, FormatError, PlanError


def _write(path, raw):
    path.write_bytes(raw)
    return path


def test_idx_hand_crafted_fixture(tmp_path):
    img = _write(tmp_path / "img", struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 51, 102]))
    lab = _write(tmp_path / "lab", struct.pack(">II", 0x801, 1) + bytes([7]))
    ds = load_idx(img, lab, num_classes=10)
    assert ds.features.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(ds.features[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    assert ds.labels.tolist() == [7]


def test_idx_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    write_idx(images, labels, tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_allclose(ds.features[:, 0] * 255, images)
    assert ds.num_classes == 3


def test_idx_empty_file(tmp_path):
    lab = _write(tmp_path / "lab", struct.pack(">II", 0x801, 0))
    with pytest.raises(FormatError, match="byte offset 0"):
        load_idx(_write(tmp_path / "img", b""), lab)


def test_idx_bad_magic_reports_offset(tmp_path):
    img = _write(tmp_path / "img", struct.pack(">IIII", 0x999, 1, 1, 1) + b"\x00")
    lab = _write(tmp_path / "lab", struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(FormatError, match="magic.*byte offset 0"):
        load_idx(img, lab)


def test_idx_truncated_and_trailing(tmp_path):
    lab = _write(tmp_path / "lab", struct.pack(">II", 0x801, 1) + b"\x00")
    short = _write(tmp_path / "short", struct.pack(">IIII", 0x803, 1, 2, 2) + b"\x00\x00")
    with pytest.raises(FormatError, match="truncated.*byte offset 18"):
        load_idx(short, lab)
    extra = _write(tmp_path / "extra", struct.pack(">IIII", 0x803, 1, 1, 1) + b"\x00\x01")
    with pytest.raises(FormatError, match="trailing.*byte offset 17"):
        load_idx(extra, lab)


def test_idx_label_count_mismatch(tmp_path):
    img = _write(tmp_path / "img", struct.pack(">IIII", 0x803, 2, 1, 1) + b"\x00\x01")
    lab = _write(tmp_path / "lab", struct.pack(">II", 0x801, 1) + b"\x00")
    with pytest.raises(FormatError, match="label count"):
        load_idx(img, lab)


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,a,b,c,d\n1,0,255,0,0\n0,255,255,255,255\n")
    ds = load_csv(p, (1, 2, 2))
    assert ds.features.shape == (2, 1, 2, 2)
    assert ds.labels.tolist() == [1, 0]
    p.write_text("1,0,255\n")
    with pytest.raises(DataError):
        load_csv(p, (1, 2, 2))


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), np.array([0]), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 3)), np.array([5]), 2)


def test_synth_determinism_and_balance():
    a, b = synth_dataset(3, 100, 6, 4, 3.0), synth_dataset(3, 100, 6, 4, 3.0)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [25] * 4


def _centroid_accuracy(train, test):
    means = np.stack([train.features[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    d = ((test.features[:, None, :] - means[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test.labels).mean())


def test_synth_large_separation_is_linearly_separable():
    ds = synth_dataset(0, 2000, 8, 4, separation=12.0)
    # nearest-centroid is a linear classifier
    assert _centroid_accuracy(ds, ds) >= 0.99


def test_synth_zero_separation_is_chance():
    train = synth_dataset(0, 4000, 8, 4, separation=1e-9)
    test = synth_dataset(0, 4000, 8, 4, separation=1e-9, sample_seed=99)
    assert abs(_centroid_accuracy(train, test) - 0.25) < 0.05


def test_train_test_split_disjoint():
    ds = synth_dataset(0, 50, 3, 2, 2.0)
    tr, te = train_test_split(ds, 10, 0)
    assert len(tr) == 40 and len(te) == 10


def test_standardize_and_crop():
    ds = Dataset(np.random.default_rng(0).normal(3, 2, size=(20, 2, 6, 6)), np.zeros(20, int), 2)
    (st_,) = standardize(ds)
    np.testing.assert_allclose(st_.features.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert center_crop(ds, 4).features.shape == (20, 2, 4, 4)


def test_iid_even_split():
    ds = synth_dataset(0, 10, 2, 2, 1.0)
    shards = partition(ds, IID(), 2, 0)
    assert [len(s) for s in shards] == [5, 5]


def test_label_shards_extreme_skew():
    ds = synth_dataset(0, 40, 2, 2, 1.0)
    shards = partition(ds, LabelShards(1), 2, 0)
    for s in shards:
        assert len(np.unique(ds.labels[s.indices])) == 1


def test_label_shards_infeasible():
    ds = synth_dataset(0, 10, 2, 2, 1.0)
    with pytest.raises(PlanError):
        partition(ds, LabelShards(3), 4, 0)


def test_dirichlet_concentration_controls_skew():
    ds = synth_dataset(0, 2000, 2, 10, 1.0)

    def tv(alpha, seed):
        shards = partition(ds, Dirichlet(alpha), 5, seed)
        out = []
        for s in shards:
            h = label_histogram(ds, s)
            if h.sum():
                out.append(0.5 * np.abs(h / h.sum() - 0.1).sum())
        return np.mean(out)

    low = [tv(0.1, s) for s in range(20)]
    high = [tv(100.0, s) for s in range(20)]
    assert all(a > b for a, b in zip(low, high))


@settings(max_examples=30, deadline=None)
@given(n_samples=st.integers(10, 200), n=st.integers(1, 10), seed=st.integers(0, 1000),
       plan=st.sampled_from([IID(), Dirichlet(0.5), Dirichlet(5.0), LabelShards(1)]))
def test_partition_is_disjoint_cover(n_samples, n, seed, plan):
    ds = synth_dataset(seed, n_samples, 2, 3, 1.0)
    shards = partition(ds, plan, n, seed)
    allidx = np.concatenate([s.indices for s in shards])
    assert sorted(allidx.tolist()) == list(range(n_samples))
    if isinstance(plan, IID):
        sizes = [len(s) for s in shards]
        assert max(sizes) - min(sizes) <= 1


def test_batches_cover_and_drop_last():
    ds = synth_dataset(0, 101, 2, 2, 1.0)
    full = ClientShard(0, np.arange(100))
    bl = batches(full, ds, 50, 7)
    assert len(bl) == 2
    assert sorted(np.concatenate([b.indices for b in bl]).tolist()) == list(range(100))
    odd = ClientShard(0, np.arange(101))
    bl = batches(odd, ds, 50, 7)
    assert len(bl) == 2 and sum(len(b.indices) for b in bl) == 100
    again = batches(odd, ds, 50, 7)
    for a, b in zip(bl, again):
        np.testing.assert_array_equal(a.indices, b.indices)


def test_batch_larger_than_shard():
    ds = synth_dataset(0, 10, 2, 2, 1.0)
    with pytest.raises(DataError):
        batches(ClientShard(0, np.arange(3)), ds, 5, 0)


def test_sample_participants():
    assert sample_participants(5, 5, 3, 0) == [0, 1, 2, 3, 4]
    picked = sample_participants(10, 3, 2, 0)
    assert len(set(picked)) == 3 and picked == sample_participants(10, 3, 2, 0)
    with pytest.raises(PlanError):
        sample_participants(3, 4, 0, 0)
