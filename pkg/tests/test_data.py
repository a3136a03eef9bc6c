import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gpp.data import (LabeledDataset, build_mnist_composite, gen_correlated_synthetic,
                      load_csv_labeled, load_dataset_cache, load_mnist, parse_idx,
                      partition_horizontal, read_idx_file, save_dataset_cache,
                      train_test_split, write_idx)
from gpp.errors import ConfigError, DataError, DomainError, ParseError


def test_minimal_image_file():
    raw = struct.pack(">IIII", 0x803, 1, 1, 1) + b"\xff"
    np.testing.assert_array_equal(parse_idx(raw), [[[1.0]]])


def test_label_file():
    raw = struct.pack(">II", 0x801, 3) + bytes([0, 5, 9])
    np.testing.assert_array_equal(parse_idx(raw), [0, 5, 9])


def test_bad_magic_names_offset():
    with pytest.raises(ParseError) as err:
        parse_idx(struct.pack(">II", 0x999, 1) + b"\x00")
    assert err.value.offset == 0 and "offset 0" in str(err.value)


def test_truncated_payload():
    with pytest.raises(ParseError) as err:
        parse_idx(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
    assert err.value.offset is not None


def test_truncated_header():
    with pytest.raises(ParseError):
        parse_idx(struct.pack(">I", 0x803) + b"\x00\x00")


def test_dimension_overflow():
    with pytest.raises(ParseError):
        parse_idx(struct.pack(">IIII", 0x803, 0xFFFFFFFF, 0xFFFF, 0xFFFF))


@given(hnp.arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5))))
def test_image_round_trip(pixels):
    imgs = pixels / 255.0
    np.testing.assert_array_equal(parse_idx(write_idx(imgs)), imgs)


@given(hnp.arrays(np.uint8, st.integers(0, 30)))
def test_label_round_trip(labels):
    np.testing.assert_array_equal(parse_idx(write_idx(labels.astype(np.int64))), labels)


def test_gz_file_read(tmp_path):
    path = tmp_path / "x-idx1-ubyte.gz"
    with gzip.open(path, "wb") as fh:
        fh.write(write_idx(np.array([1, 2, 3])))
    np.testing.assert_array_equal(read_idx_file(path), [1, 2, 3])


def _loop_first_image(raw):
    # independent test-only reader for the first image
    n_rows = int.from_bytes(raw[8:12], "big")
    n_cols = int.from_bytes(raw[12:16], "big")
    return [[raw[16 + r * n_cols + c] for c in range(n_cols)] for r in range(n_rows)]


def test_mnist_file_first_image_matches_loop_reader():
    images, labels = load_mnist("train")
    from gpp.data import data_dir, MNIST_FILES, SAMPLE_FILES
    d = data_dir()
    name = MNIST_FILES["train"][0]
    path = d / name if (d / name).exists() else d / SAMPLE_FILES["train"][0]
    ref = np.array(_loop_first_image(path.read_bytes()), dtype=np.float64) / 255.0
    assert images.shape[1:] == (28, 28) and images.shape[0] == labels.shape[0]
    if images.shape[0] == 60000:
        assert labels.shape == (60000,)
    assert images[0].tobytes() == ref.tobytes()


def test_composite_labels_by_hand():
    imgs = np.zeros((2, 28, 28))
    ds = build_mnist_composite(imgs, [3, 4], seed=0)
    assert ds.u[0, 0] == 7 and ds.s[0, 0] == 1 and ds.d_x == 1568
    ds = build_mnist_composite(imgs, [0, 0], seed=0)
    assert ds.u[0, 0] == 0 and ds.s[0, 0] == 0


def test_composite_drops_odd_sample():
    ds = build_mnist_composite(np.zeros((5, 28, 28)), [1, 2, 3, 4, 5], seed=1)
    assert ds.n == 2


def test_composite_parity_rate_matches_convolution():
    images, labels = load_mnist("train")
    ds = build_mnist_composite(images, labels, seed=0, n_pairings=5)
    freq = np.bincount(labels, minlength=10) / labels.size
    sums = np.convolve(freq, freq)
    p_even = sums[0::2].sum()
    assert abs(np.mean(ds.s[:, 0] == 0) - p_even) < 0.02


def test_synthetic_rho_one_copies():
    ds = gen_correlated_synthetic(2000, 10, 1.0, 0)
    assert np.array_equal(ds.u, ds.s)


def test_synthetic_rho_zero_uncorrelated():
    ds = gen_correlated_synthetic(10_000, 10, 0.0, 1)
    assert abs(np.corrcoef(ds.u[:, 0], ds.s[:, 0])[0, 1]) < 0.03


def test_synthetic_rho_point_six():
    ds = gen_correlated_synthetic(100_000, 8, 0.6, 2)
    assert abs(np.corrcoef(ds.u[:, 0], ds.s[:, 0])[0, 1] - 0.6) < 0.01


@pytest.mark.parametrize("rho", [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
def test_synthetic_marginals_are_fair(rho):
    ds = gen_correlated_synthetic(100_000, 8, rho, 3)
    ci = 3 * np.sqrt(0.25 / ds.n)
    assert abs(ds.u.mean() - 0.5) < ci and abs(ds.s.mean() - 0.5) < ci


def test_synthetic_rejects_bad_rho():
    with pytest.raises(DomainError):
        gen_correlated_synthetic(10, 8, 1.5, 0)


def _write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text)
    return p


def test_csv_two_rows_standardize_to_unit(tmp_path):
    p = _write(tmp_path, "f1,f2,activity,subject\n1,10,1,7\n3,30,2,9\n")
    ds, (mean, std), (uv, sv) = load_csv_labeled(p)
    np.testing.assert_allclose(ds.x, [[-1, -1], [1, 1]])
    assert list(ds.u[:, 0]) == [0, 1] and list(sv) == [7, 9]


def test_csv_missing_label_column(tmp_path):
    with pytest.raises(ConfigError):
        load_csv_labeled(_write(tmp_path, "f1,activity\n1,1\n"))


def test_csv_ragged_row_names_row(tmp_path):
    with pytest.raises(ParseError) as err:
        load_csv_labeled(_write(tmp_path, "f1,activity,subject\n1,1,1\n2,1\n"))
    assert err.value.offset == 3


def test_csv_non_numeric_cell(tmp_path):
    with pytest.raises(ParseError):
        load_csv_labeled(_write(tmp_path, "f1,activity,subject\nx,1,1\n"))


def test_csv_test_split_uses_train_stats(tmp_path):
    train = _write(tmp_path, "f1,activity,subject\n0,1,1\n2,2,2\n")
    _, stats, _ = load_csv_labeled(train)
    test = tmp_path / "t.csv"
    test.write_text("f1,activity,subject\n1,1,3\n")
    ds, _, _ = load_csv_labeled(test, stats=stats)
    assert ds.x[0, 0] == 0.0


def test_single_shard_is_everything(tiny_synth):
    (sh,) = partition_horizontal(tiny_synth, 1)
    np.testing.assert_array_equal(sh.indices, np.arange(tiny_synth.n))


def test_uniform_shards_equal_sizes(rng):
    ds = LabeledDataset(rng.standard_normal((100, 3)), np.zeros(100, int), np.zeros(100, int),
                        (1,), (1,))
    assert [len(s.indices) for s in partition_horizontal(ds, 5, seed=4)] == [20] * 5


def test_subject_partition_keeps_subjects_together(rng):
    s = rng.integers(0, 30, 600)
    ds = LabeledDataset(rng.standard_normal((600, 3)), np.zeros(600, int), s, (1,), (30,))
    shards = partition_horizontal(ds, 5, "by-sensitive-class", seed=0)
    owners = {}
    for sh in shards:
        for subj in np.unique(s[sh.indices]):
            assert owners.setdefault(int(subj), sh.client_id) == sh.client_id


@given(st.integers(1, 12), st.integers(0, 1000), st.sampled_from(["uniform-random",
                                                                 "by-sensitive-class"]))
def test_partition_is_disjoint_cover(t, seed, mode):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 15, 60)
    ds = LabeledDataset(np.zeros((60, 2)), np.zeros(60, int), s, (1,), (15,))
    try:
        shards = partition_horizontal(ds, t, mode, seed)
    except ConfigError:
        assert mode == "by-sensitive-class" and np.unique(s).size < t
        return
    allidx = np.concatenate([sh.indices for sh in shards])
    assert np.array_equal(np.sort(allidx), np.arange(60))


def test_split_is_stratified(tiny_synth):
    tr, te = train_test_split(tiny_synth, 0.25, seed=0)
    assert tr.n + te.n == tiny_synth.n
    assert abs(te.s.mean() - tiny_synth.s.mean()) < 0.02


def test_dataset_cache_round_trip(tmp_path, tiny_synth):
    p = tmp_path / "c.gppd"
    save_dataset_cache(tiny_synth, p)
    back = load_dataset_cache(p)
    np.testing.assert_array_equal(back.x, tiny_synth.x.astype(np.float32))
    assert np.array_equal(back.u, tiny_synth.u) and back.s_card == tiny_synth.s_card
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ParseError):
        load_dataset_cache(p)


def test_label_outside_cardinality():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 2)), [0, 3], [0, 0], (2,), (1,))
