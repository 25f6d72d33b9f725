import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hrgr.tensor import (BadMagicError, ShapeError, TruncatedPayloadError,
                         UnsupportedDtypeError, UnsupportedVersionError, as_tensor, load,
                         matmul, resize_nearest_index, save)


def triple_loop(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r), dtype=a.dtype)
    for i in range(p):
        for j in range(r):
            acc = a.dtype.type(0)
            for t in range(q):
                acc = acc + a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    np.testing.assert_array_equal(matmul(np.eye(2), np.array([[3.0], [4.0]])), [[3.0], [4.0]])


def test_matmul_row_by_column():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_matmul_random_7x5_by_5x3_is_bitwise_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    assert np.abs(matmul(a, b) - triple_loop(a, b)).max() == 0.0


def test_matmul_64x64_is_bitwise_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31))
def test_matmul_matches_triple_loop_property(p, q, r, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((p, q)), rng.standard_normal((q, r))
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


def test_matmul_float32_matches_triple_loop():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((6, 11)).astype(np.float32)
    b = rng.standard_normal((11, 4)).astype(np.float32)
    assert np.array_equal(matmul(a, b), triple_loop(a, b))


@pytest.mark.parametrize("a,b", [
    (np.ones((2, 3)), np.ones((2, 3))),
    (np.ones(3), np.ones((3, 1))),
    (np.ones((2, 2)), np.ones((2, 2), dtype=np.float32)),
    (np.ones((2, 2), dtype=np.uint32), np.ones((2, 2), dtype=np.uint32)),
])
def test_matmul_rejects_bad_operands(a, b):
    with pytest.raises(ShapeError):
        matmul(a, b)


def test_resize_integer_upscale_fills_quadrants():
    out = resize_nearest_index(np.array([[1, 2], [3, 4]]), 4, 4)
    expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(out, expected)


def test_resize_to_own_size_is_identity():
    j = np.random.default_rng(0).integers(1, 9, size=(5, 7))
    np.testing.assert_array_equal(resize_nearest_index(j, 5, 7), j)


def test_resize_3x3_to_2x2_matches_per_cell_formula():
    j = np.arange(1, 10).reshape(3, 3)
    out = resize_nearest_index(j, 2, 2)
    for y in range(2):
        for x in range(2):
            assert out[y, x] == j[(y * 3) // 2, (x * 3) // 2]
    np.testing.assert_array_equal(out, [[1, 2], [4, 5]])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.uint32, st.tuples(st.integers(1, 9), st.integers(1, 9)),
                  elements=st.integers(1, 20)),
       st.integers(1, 17), st.integers(1, 17))
def test_resize_never_invents_labels(j, th, tw):
    out = resize_nearest_index(j, th, tw)
    assert out.shape == (th, tw)
    assert set(np.unique(out)) <= set(np.unique(j))


def test_as_tensor_dtypes():
    assert as_tensor([1.5]).dtype == np.float64
    assert as_tensor(np.array([1, 2], dtype=np.int64)).dtype == np.uint32
    with pytest.raises(ValueError):
        as_tensor(np.array([-1]))
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))
    with pytest.raises(UnsupportedDtypeError):
        as_tensor(np.array(["a"]))


def test_header_size_2x3_float32(tmp_path):
    p = tmp_path / "t.hrgt"
    save(np.arange(6, dtype=np.float32).reshape(2, 3), p)
    raw = p.read_bytes()
    assert len(raw) == 4 + 1 + 1 + 1 + 16 + 24 == 47
    assert raw[:4] == b"HRGT"
    assert raw[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2Q", raw[7:23]) == (2, 3)
    np.testing.assert_array_equal(np.frombuffer(raw[23:], dtype="<f4"), np.arange(6))


def test_load_then_save_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.hrgt", tmp_path / "b.hrgt"
    save(np.random.default_rng(0).standard_normal((3, 2, 4)), a)
    save(load(a), b)
    assert a.read_bytes() == b.read_bytes()


def _write(path, data):
    path.write_bytes(data)
    return path


def test_bad_magic(tmp_path):
    with pytest.raises(BadMagicError):
        load(_write(tmp_path / "x", b"XXXX" + bytes([1, 1, 1]) + struct.pack("<Q", 1) + bytes(8)))


def test_bad_version(tmp_path):
    with pytest.raises(UnsupportedVersionError):
        load(_write(tmp_path / "x", b"HRGT" + bytes([2, 1, 1]) + struct.pack("<Q", 1) + bytes(8)))


def test_bad_dtype_code(tmp_path):
    with pytest.raises(UnsupportedDtypeError):
        load(_write(tmp_path / "x", b"HRGT" + bytes([1, 9, 1]) + struct.pack("<Q", 1) + bytes(8)))


@pytest.mark.parametrize("cut", [5, 10, 23, 46])
def test_truncated_file(tmp_path, cut):
    p = tmp_path / "t.hrgt"
    save(np.zeros((2, 3), dtype=np.float32), p)
    raw = p.read_bytes()
    with pytest.raises(TruncatedPayloadError):
        load(_write(tmp_path / "cut", raw[:cut]))


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "t.hrgt"
    save(np.zeros(3), p)
    with pytest.raises(TruncatedPayloadError):
        load(_write(tmp_path / "long", p.read_bytes() + b"\0"))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([np.float32, np.float64, np.uint32]).flatmap(
    lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5))))
def test_round_trip_bit_exact_property(tmp_path_factory, x):
    p = tmp_path_factory.mktemp("rt") / "x.hrgt"
    save(x, p)
    y = load(p)
    assert y.dtype == x.dtype and y.shape == x.shape
    assert y.tobytes() == np.ascontiguousarray(x).tobytes()
