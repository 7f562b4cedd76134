import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from deformer.data import (POWER_DROP, POWER_NOISE, DataError, SyntheticJoint, binarize, configurations,
                           exact_nll_oracle, is_impossible, load_power, parse_idx, preprocess_tabular, read_csv,
                           read_idx, read_pgm, split_sizes, split_validation, write_idx, write_pgm)

# --- IDX --------------------------------------------------------------------

TINY = bytes([0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2]) + bytes([0, 255, 7, 128])


def test_idx_tiny_image():
    a = parse_idx(TINY)
    assert a.shape == (1, 2, 2) and a.dtype == np.uint8
    assert a.ravel().tolist() == [0, 255, 7, 128]


def test_idx_labels():
    assert parse_idx(bytes([0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1])).tolist() == [7, 2, 1]


def test_idx_unsupported_magic():
    with pytest.raises(DataError, match="unsupported magic"):
        parse_idx(bytes([0, 0, 8, 2]) + TINY[4:])


def test_idx_truncated():
    buf = bytes([0, 0, 8, 1, 0, 0, 0, 2, 9])
    with pytest.raises(DataError, match="truncated"):
        parse_idx(buf)


def test_idx_trailing():
    with pytest.raises(DataError, match="trailing bytes"):
        parse_idx(TINY + b"\x00")


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.one_of(st.tuples(st.integers(0, 30)),
                                  st.tuples(st.integers(0, 4), st.integers(1, 6), st.integers(1, 6)))))
def test_idx_round_trip(a):
    b = parse_idx(write_idx(a))
    assert b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_read_idx_gzip(tmp_path):
    p = tmp_path / "x.idx.gz"
    p.write_bytes(gzip.compress(TINY))
    np.testing.assert_array_equal(read_idx(p), parse_idx(TINY))


# --- binarization and images ------------------------------------------------

def test_binarize_threshold_examples():
    assert not binarize(np.zeros((28, 28), np.uint8)).any()
    assert binarize(np.array([128, 127], np.uint8)).tolist() == [1, 0]


def test_binarize_stochastic_extremes():
    img = np.array([255, 0] * 500, np.uint8)
    out = binarize(img, "stochastic", seed=3)
    assert out[::2].all() and not out[1::2].any()


def test_binarize_stochastic_rate_and_seed():
    img = np.full(100000, 64, np.uint8)
    a = binarize(img, "stochastic", seed=1)
    np.testing.assert_array_equal(a, binarize(img, "stochastic", seed=1))
    p = 64 / 255
    assert abs(a.mean() - p) < 4 * math.sqrt(p * (1 - p) / img.size)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (6, 7), elements=st.sampled_from([0, 255])))
def test_binarize_idempotent_on_two_level_images(img):
    once = binarize(img)
    np.testing.assert_array_equal(binarize(once * np.uint8(255)), once)


def test_split_validation_default_is_last_block():
    imgs = np.arange(10)
    tr, va = split_validation(imgs, 3)
    assert tr.tolist() == list(range(7)) and va.tolist() == [7, 8, 9]
    tr2, va2 = split_validation(imgs, 3, seed=0)
    assert sorted(tr2.tolist() + va2.tolist()) == list(range(10))
    with pytest.raises(DataError):
        split_validation(imgs, 10)


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 2, (5, 4))
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img * 255)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5")


# --- CSV and tabular preprocessing -----------------------------------------

def test_csv_non_numeric_cell_located():
    with pytest.raises(DataError, match=r"row 3, column 2"):
        read_csv("a,b\n1,2\n3,x\n", text=True)


@pytest.mark.parametrize("text", ["", "1,2\n3,4\n", "a;b\n1;2\n", "a,b\n1,2,3\n"])
def test_csv_dialect_rejections(text):
    with pytest.raises(DataError):
        read_csv(text, text=True)


def test_csv_parses():
    header, rows = read_csv("a,b\n1,2.5\n-3,4e1\n", text=True)
    assert header == ["a", "b"]
    np.testing.assert_array_equal(rows, [[1, 2.5], [-3, 40]])


def test_zero_variance_rejected():
    with pytest.raises(DataError, match="zero variance"):
        preprocess_tabular(np.c_[np.arange(20.0), np.ones(20)], shuffle=False, test_fraction=0,
                           validation_fraction=0)


def test_two_row_table_standardizes_to_unit():
    ds = preprocess_tabular([[0.0], [2.0]], shuffle=False, test_fraction=0, validation_fraction=0)
    assert ds.train.ravel().tolist() == [-1.0, 1.0]
    np.testing.assert_array_equal(ds.inverse_transform(ds.train), [[0.0], [2.0]])


def test_power_split_sizes():
    assert split_sizes(2049280) == (1659917, 184435, 204928)


def test_training_split_is_standardized():
    raw = np.random.default_rng(0).standard_normal((1000, 8)) * [1, 2, 3, 4, 5, 6, 7, 8] + 10
    ds = preprocess_tabular(raw, drop_columns=POWER_DROP, noise_scales=POWER_NOISE)
    assert ds.train.shape[1] == 6
    assert np.abs(ds.train.mean(axis=0)).max() < 1e-9
    assert np.abs(ds.train.std(axis=0) - 1).max() < 1e-9
    assert len(ds.train) + len(ds.validation) + len(ds.test) == 1000


def test_power_loader(tmp_path):
    rng = np.random.default_rng(1)
    rows = rng.random((200, 8)) * 10
    p = tmp_path / "power.csv"
    p.write_text("c0,c1,c2,c3,c4,c5,c6,c7\n" + "\n".join(",".join(repr(float(v)) for v in r) for r in rows) + "\n")
    ds = load_power(p)
    assert ds.columns == ["c0", "c2", "c4", "c5", "c6", "c7"]
    assert (len(ds.train), len(ds.validation), len(ds.test)) == split_sizes(200)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        load_power(p)


# --- synthetic joints -------------------------------------------------------

def test_configurations_are_lexicographic():
    assert configurations(2).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    j = SyntheticJoint.random(3, seed=0)
    for i, x in enumerate(configurations(3)):
        assert j.index(x) == i


def test_uniform_oracle():
    j = SyntheticJoint.uniform(3)
    np.testing.assert_allclose(exact_nll_oracle(j, configurations(3)), 3 * math.log(2), rtol=1e-15)


def test_point_mass_oracle():
    j = SyntheticJoint(np.eye(8)[0])
    nll = exact_nll_oracle(j, configurations(3))
    assert nll[0] == 0.0
    assert np.all(np.isinf(nll[1:]))
    assert is_impossible(j, [1, 0, 1]) and not is_impossible(j, [0, 0, 0])


def test_entropy_direct_vs_monte_carlo():
    j = SyntheticJoint.random(5, seed=11)
    nll = exact_nll_oracle(j, j.sample(10**6, np.random.default_rng(0)))
    se = nll.std() / math.sqrt(len(nll))
    assert abs(nll.mean() - j.entropy()) < 3 * se


def test_sampling_frequencies():
    j = SyntheticJoint.random(4, seed=2)
    n = 10**6
    counts = np.bincount(j.index(j.sample(n, np.random.default_rng(1))), minlength=16)
    sigma = np.sqrt(n * j.table * (1 - j.table))
    assert np.all(np.abs(counts - n * j.table) <= 4 * sigma)


def test_joint_text_round_trip():
    j = SyntheticJoint.random(3, seed=4)
    text = j.to_text()
    assert text.splitlines()[0] == "3" and len(text.splitlines()) == 9
    np.testing.assert_array_equal(SyntheticJoint.from_text(text).table, j.table)
    with pytest.raises(DataError):
        SyntheticJoint.from_text("3\n0.5\n0.5\n")


@pytest.mark.parametrize("table", [[0.5, 0.5, 0.1], [1.2, -0.2], [0.3, 0.3]])
def test_joint_validation(table):
    with pytest.raises(ValueError):
        SyntheticJoint(table)


def test_idx_header_layout_matches_big_endian():
    a = np.zeros((2, 3, 4), np.uint8)
    assert write_idx(a)[:16] == struct.pack(">IIII", 0x803, 2, 3, 4)
