import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fgl.datasets import (ClassMixture, ClientShard, FormatError, GmmSpec, LabeledDataset,
                          PartitionSpec, default_gmm, gen_client_shifted, gen_gmm,
                          largest_remainder, load_csv, load_idx, partition, write_csv, write_idx)


def two_point_gmm():
    return GmmSpec([ClassMixture([1.0], [[-5.0]], [[0.01]]), ClassMixture([1.0], [[5.0]], [[0.01]])])


def test_well_separated_classes_do_not_overlap():
    data = gen_gmm(two_point_gmm(), 100, seed=3)
    assert data.features[data.labels == 0].max() < 0 < data.features[data.labels == 1].min()


def test_gen_gmm_rejects_zero_samples():
    with pytest.raises(ValueError):
        gen_gmm(two_point_gmm(), 0, seed=0)


def test_gen_gmm_is_deterministic():
    a, b = gen_gmm(default_gmm(), 500, 7), gen_gmm(default_gmm(), 500, 7)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    c = gen_gmm(default_gmm(), 500, 8)
    assert not np.array_equal(a.features, c.features)


def test_gen_gmm_class_counts():
    data = gen_gmm(default_gmm(3), 30, 0, class_counts=[10, 15, 5])
    assert np.bincount(data.labels).tolist() == [10, 15, 5]
    with pytest.raises(ValueError):
        gen_gmm(default_gmm(3), 30, 0, class_counts=[10, 10, 5])


def test_default_gmm_layout():
    spec = default_gmm()
    means = np.array([c.means[0] for c in spec.classes])
    assert np.allclose(np.linalg.norm(means, axis=1), 5.0)
    assert spec.num_classes == 10 and spec.dim == 2


def test_mixture_invariants():
    with pytest.raises(ValueError):
        ClassMixture([0.5, 0.4], [[0.0], [1.0]], [[1.0], [1.0]])
    with pytest.raises(ValueError):
        ClassMixture([1.0], [[0.0]], [[-1.0]])
    with pytest.raises(ValueError):
        GmmSpec([])
    with pytest.raises(ValueError):
        GmmSpec([ClassMixture([1.0], [[0.0]], [[0.0]])])


def test_mixture_moments():
    mix = ClassMixture([0.25, 0.75], [[0.0], [4.0]], [[1.0], [2.0]])
    assert mix.mean() == pytest.approx([3.0])
    # E[x^2] = .25*1 + .75*(2+16) = 13.75
    assert mix.variance() == pytest.approx([13.75 - 9.0])


def test_labeled_dataset_checks():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)


def test_client_shifted_shards():
    train, shards, test = gen_client_shifted(default_gmm(), 4, 50, 1.0, seed=0, n_test=80)
    assert len(train) == 200 and len(test) == 80
    assert [s.n for s in shards] == [50] * 4
    assert np.array_equal(np.sort(np.concatenate([s.indices for s in shards])), np.arange(200))


# -- IDX / CSV -------------------------------------------------------------------

def _images(n=6, h=4, w=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (n, h, w), dtype=np.uint8), rng.integers(0, 10, n).astype(np.uint8)


def test_idx_round_trip(tmp_path):
    imgs, labels = _images()
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", imgs, labels)
    data = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=10)
    assert data.features.shape == (6, 4, 3, 1)
    assert np.array_equal(np.rint(data.features[..., 0] * 255).astype(np.uint8), imgs)
    assert np.array_equal(data.labels, labels)
    assert data.features.min() >= 0 and data.features.max() <= 1


def test_idx_gzip(tmp_path):
    imgs, labels = _images()
    write_idx(tmp_path / "i.idx", tmp_path / "l.idx", imgs, labels)
    for name in ("i.idx", "l.idx"):
        (tmp_path / (name + ".gz")).write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    a = load_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    b = load_idx(tmp_path / "i.idx.gz", tmp_path / "l.idx.gz")
    assert np.array_equal(a.features, b.features)


def test_idx_header_layout(tmp_path):
    imgs, labels = _images(n=2, h=28, w=28)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    raw = (tmp_path / "i").read_bytes()
    assert raw[:16] == struct.pack(">IIII", 0x00000803, 2, 28, 28)
    assert len(raw) == 16 + 2 * 28 * 28
    assert (tmp_path / "l").read_bytes()[:8] == struct.pack(">II", 0x00000801, 2)


def test_idx_bad_magic(tmp_path):
    imgs, labels = _images()
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    raw = bytearray((tmp_path / "i").read_bytes())
    raw[3] = 0x01
    (tmp_path / "i").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="byte offset 0"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_truncated(tmp_path):
    imgs, labels = _images()
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match=f"byte offset {len(raw) - 5}"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    imgs, labels = _images()
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels[:5])
    with pytest.raises(FormatError, match="5 labels"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_csv_round_trip(tmp_path):
    data = gen_gmm(default_gmm(), 40, 2)
    write_csv(tmp_path / "d.csv", data)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "f0,f1,label"
    back = load_csv(tmp_path / "d.csv", 10)
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels)


def test_csv_bad_header(tmp_path):
    (tmp_path / "d.csv").write_text("x,y,label\n1,2,0\n")
    with pytest.raises(FormatError):
        load_csv(tmp_path / "d.csv")


# -- partitioning ------------------------------------------------------------------

def _labels_dataset(n, classes, seed):
    rng = np.random.default_rng(seed)
    return LabeledDataset(np.zeros((n, 1)), rng.integers(0, classes, n), classes)


def test_iid_divisible_case():
    shards = partition(_labels_dataset(100, 4, 0), PartitionSpec("iid"), 5)
    assert [s.n for s in shards] == [20] * 5


def test_iid_class_proportions():
    data = gen_gmm(default_gmm(), 6000, 0)
    shards = partition(data, PartitionSpec("iid", seed=3), 5)
    glob = np.bincount(data.labels, minlength=10) / len(data)
    for s in shards:
        local = np.bincount(data.labels[s.indices], minlength=10) / s.n
        assert np.max(np.abs(local - glob)) < 0.01


@given(alpha=st.floats(0.05, 100.0), seed=st.integers(0, 2**31), K=st.integers(1, 12),
       iid=st.booleans())
def test_partition_is_exact_cover(alpha, seed, K, iid):
    data = _labels_dataset(300, 5, seed % 97)
    spec = PartitionSpec("iid" if iid else "dirichlet", alpha, 1, seed)
    shards = partition(data, spec, K)
    assert len(shards) == K
    allidx = np.concatenate([s.indices for s in shards])
    assert allidx.size == len(data) == sum(s.n for s in shards)
    assert np.array_equal(np.sort(allidx), np.arange(len(data)))
    assert min(s.n for s in shards) >= 1
    if iid:
        sizes = [s.n for s in shards]
        assert max(sizes) - min(sizes) <= 1


def test_partition_deterministic():
    data = _labels_dataset(500, 10, 1)
    spec = PartitionSpec("dirichlet", 0.3, seed=11)
    a, b = partition(data, spec, 7), partition(data, spec, 7)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_partition_errors():
    data = _labels_dataset(10, 2, 0)
    with pytest.raises(ValueError):
        partition(data, PartitionSpec("iid"), 11)
    with pytest.raises(ValueError):
        partition(data, PartitionSpec("dirichlet", 0.5, min_samples=3), 5)
    with pytest.raises(ValueError, match="Dirichlet draws"):
        partition(_labels_dataset(200, 2, 0), PartitionSpec("dirichlet", 0.01, min_samples=30), 5)
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 0.0)
    with pytest.raises(ValueError):
        PartitionSpec("roundrobin")


def test_min_samples_respected():
    data = _labels_dataset(1000, 10, 4)
    for seed in range(5):
        shards = partition(data, PartitionSpec("dirichlet", 0.5, 20, seed), 10)
        assert min(s.n for s in shards) >= 20


def test_client_shard_invariants():
    with pytest.raises(ValueError):
        ClientShard(0, [])
    with pytest.raises(ValueError):
        ClientShard(0, [1, 1])
    assert ClientShard(0, [3, 1, 2]).indices.tolist() == [1, 2, 3]


@given(st.integers(0, 500), st.lists(st.floats(0.01, 10.0), min_size=1, max_size=8))
def test_largest_remainder(total, props):
    counts = largest_remainder(total, np.array(props))
    assert counts.sum() == total
    exact = total * np.array(props) / np.sum(props)
    assert np.all(np.abs(counts - exact) < 1.0 + 1e-9)
