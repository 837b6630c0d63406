import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mlda.data import (BLOB_SIGMA, Dataset, ShiftSpec, apply_shift, class_means, gen_blob_images,
                       gen_blobs, make_domains, split, split_indices)
from mlda.tensorio import (BadMagicError, ShapeMismatchError, TruncatedError, decode_tensors,
                           encode_tensors, load_tensors, save_tensors)


def test_blobs_deterministic():
    a, b = gen_blobs(90, 3, 4, seed=7), gen_blobs(90, 3, 4, seed=7)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert gen_blobs(90, 3, 4, seed=8).samples.tobytes() != a.samples.tobytes()


def test_blobs_balanced():
    data = gen_blobs(200, 2, 2, seed=0)
    assert np.bincount(data.labels).tolist() == [100, 100]


@pytest.mark.parametrize("seed", range(6))
def test_blob_means_within_sampling_bound(seed):
    n, k, d = 600, 3, 2
    data = gen_blobs(n, k, d, seed)
    means = class_means(k, d)
    bound = 3 * BLOB_SIGMA / np.sqrt(n / k)
    for c in range(k):
        assert np.all(np.abs(data.samples[data.labels == c].mean(0) - means[c]) <= bound)
    np.testing.assert_allclose(np.linalg.norm(means[:, :2], axis=1), 4.0)


@pytest.mark.parametrize("args", [(10, 1, 2), (10, 3, 2), (9, 3, 1)])
def test_blobs_reject_bad_sizes(args):
    with pytest.raises(ValueError):
        gen_blobs(*args, seed=0)


def test_blob_images_shape():
    data = gen_blob_images(12, 3, seed=0)
    assert data.samples.shape == (12, 8, 8, 3)
    assert np.bincount(data.labels).tolist() == [4, 4, 4]


def test_identity_shift_keeps_samples():
    data = gen_blobs(30, 3, 2, seed=1)
    shifted = apply_shift(data, ShiftSpec(), seed=5)
    assert ShiftSpec().is_identity
    assert shifted.samples.tobytes() == data.samples.tobytes()
    assert shifted.domain == 1 != data.domain


@pytest.mark.parametrize("make", [lambda: gen_blobs(30, 3, 2, seed=2),
                                  lambda: gen_blob_images(6, 3, seed=2)])
def test_half_turn_twice_is_identity(make):
    data = make()
    half = ShiftSpec(rotation=180)
    twice = apply_shift(apply_shift(data, half, 0), half, 0)
    np.testing.assert_allclose(twice.samples, data.samples, rtol=0, atol=1e-9)


def test_vector_rotation_is_exact_on_first_two_axes():
    data = Dataset(np.array([[1.0, 0.0, 5.0]]), [0])
    out = apply_shift(data, ShiftSpec(rotation=90), 0).samples[0]
    np.testing.assert_allclose(out, [0.0, 1.0, 5.0], atol=1e-15)


def test_channel_bias_shifts_means():
    data = gen_blob_images(30, 3, seed=3)
    shifted = apply_shift(data, ShiftSpec(bias=(0.5, 0.0, -0.5)), 0)
    delta = shifted.samples.mean(axis=(0, 1, 2)) - data.samples.mean(axis=(0, 1, 2))
    np.testing.assert_allclose(delta, [0.5, 0.0, -0.5], atol=1e-12)


def test_noise_shift_changes_spread_not_mean():
    data = gen_blobs(3000, 3, 2, seed=4)
    shifted = apply_shift(data, ShiftSpec(noise=0.3), seed=9)
    assert np.all(np.abs(shifted.samples.mean(0) - data.samples.mean(0)) < 0.05)
    assert np.std(shifted.samples - data.samples) == pytest.approx(0.3, rel=0.05)


def test_shift_errors():
    with pytest.raises(ValueError):
        ShiftSpec(noise=-1)
    with pytest.raises(ValueError, match="multiple of 90"):
        apply_shift(gen_blob_images(3, 3, 0), ShiftSpec(rotation=45), 0)
    with pytest.raises(ValueError, match="displacement"):
        apply_shift(gen_blobs(6, 3, 2, 0), ShiftSpec(displacement=(1.0, 2.0, 3.0)), 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), rotation=st.floats(-720, 720), bias=st.floats(-3, 3),
       noise=st.floats(0, 2))
def test_shift_preserves_labels(seed, rotation, bias, noise):
    data = gen_blobs(60, 3, 2, seed)
    shifted = apply_shift(data, ShiftSpec(rotation, bias, noise), seed)
    assert np.array_equal(shifted.labels, data.labels)


def test_make_domains_defaults():
    pair = make_domains(seed=0)
    assert len(pair.source) == len(pair.target) == 600
    assert pair.shift == ShiftSpec(rotation=45.0, bias=1.0)
    assert pair.target.domain == 1 and pair.source.domain == 0
    again = make_domains(seed=0)
    assert again.target.samples.tobytes() == pair.target.samples.tobytes()


# --- split -----------------------------------------------------------------

def test_split_single_fraction_is_whole():
    data = gen_blobs(30, 3, 2, seed=0)
    (whole,) = split(data, [1.0], seed=0)
    assert sorted(whole.samples.tolist()) == sorted(data.samples.tolist())


def test_split_stratified_80_20():
    data = gen_blobs(100, 2, 2, seed=0)
    train, val = split(data, [0.8, 0.2], seed=1)
    assert (len(train), len(val)) == (80, 20)
    assert np.bincount(train.labels).tolist() == [40, 40]
    assert np.bincount(val.labels).tolist() == [10, 10]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(3, 40),
       fractions=st.sampled_from([[0.5, 0.5], [0.7, 0.3], [0.6, 0.2, 0.2]]))
def test_split_is_a_partition(seed, n, fractions):
    labels = np.random.default_rng(seed).integers(0, 2, n)
    data = Dataset(np.arange(n, dtype=float)[:, None], labels)
    try:
        parts = split_indices(data, fractions, seed)
    except ValueError:
        return  # some class too small for every part
    assert sorted(np.concatenate(parts).tolist()) == list(range(n))
    again = split_indices(data, fractions, seed)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_split_errors():
    data = gen_blobs(6, 3, 2, seed=0)
    with pytest.raises(ValueError, match="empty part"):
        split(data, [0.9, 0.1], seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        split(data, [0.5, 0.2], seed=0)


# --- tensor files ----------------------------------------------------------

def test_roundtrip_empty_name_scalar(tmp_path):
    path = tmp_path / "s.ladt"
    save_tensors(path, {"": np.float64(3.5)})
    out = load_tensors(path)
    assert list(out) == [""] and out[""].shape == () and out[""] == 3.5


def test_resave_is_byte_identical(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4, 5))
    first, second = tmp_path / "a.ladt", tmp_path / "b.ladt"
    save_tensors(first, {"x": x})
    save_tensors(second, load_tensors(first))
    assert first.read_bytes() == second.read_bytes()


def test_header_layout():
    raw = encode_tensors({"ab": np.zeros((2, 1))})
    assert raw[:4] == b"LADT"
    assert struct.unpack("<HHH", raw[4:10]) == (1, 1, 2)
    assert raw[10:12] == b"ab" and raw[12] == 2
    assert struct.unpack("<II", raw[13:21]) == (2, 1)
    assert len(raw) == 21 + 16


def test_corrupted_length_reports_truncation():
    raw = bytearray(encode_tensors({"x": np.ones((2, 2))}))
    # magic(4) version(2) count(2) name_len(2) "x"(1) rank(1) -> extents at 12
    raw[12:16] = struct.pack("<I", 1000)
    with pytest.raises(TruncatedError, match="truncated payload"):
        decode_tensors(bytes(raw))


def test_short_file_and_bad_magic_and_trailing_bytes():
    raw = encode_tensors({"x": np.ones(3)})
    with pytest.raises(TruncatedError):
        decode_tensors(raw[:-1])
    with pytest.raises(BadMagicError):
        decode_tensors(b"NOPE" + raw[4:])
    with pytest.raises(ShapeMismatchError):
        decode_tensors(raw + b"\0" * 8)


@settings(max_examples=60, deadline=None)
@given(arr=arrays(np.float64, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
                  elements=st.floats(allow_nan=False)),
       name=st.text(max_size=12))
def test_roundtrip_property(arr, name):
    out = decode_tensors(encode_tensors({name: arr}))
    assert out[name].shape == arr.shape
    assert out[name].tobytes() == arr.tobytes()


def test_dataset_save_load(tmp_path):
    data = gen_blobs(12, 3, 2, seed=4)
    data.save(tmp_path / "d.ladt")
    back = Dataset.load(tmp_path / "d.ladt")
    assert back.samples.tobytes() == data.samples.tobytes()
    assert np.array_equal(back.labels, data.labels) and back.seed == 4
    unl = data.unlabeled()
    unl.save(tmp_path / "u.ladt")
    assert Dataset.load(tmp_path / "u.ladt").labels is None
