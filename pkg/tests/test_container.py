import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from codaseg.autodiff import Tensor
from codaseg.container import FormatError, decode, encode, read_tensor, write_tensor

DTYPES = [np.float32, np.int32, np.uint8, np.float64]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(DTYPES).flatmap(
    lambda dt: arrays(dt, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple))))
def test_round_trip_is_bit_exact(arr):
    back = decode(encode(arr))
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_golden_header_for_f32_2x3(tmp_path):
    path = tmp_path / "t.cdat"
    write_tensor(Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)), path)
    raw = path.read_bytes()
    assert raw[:9] == b"CDAT" + bytes([1, 0, 0, 0]) + bytes([0])
    assert raw[9] == 2
    assert struct.unpack("<II", raw[10:18]) == (2, 3)
    assert len(raw) == 18 + 6 * 4
    np.testing.assert_array_equal(read_tensor(path), np.arange(6, dtype=np.float32).reshape(2, 3))


@pytest.mark.parametrize("dtype,code", [(np.float32, 0), (np.int32, 1), (np.uint8, 2), (np.float64, 3)])
def test_dtype_codes(dtype, code):
    assert encode(np.zeros(1, dtype))[8] == code


def test_payload_is_little_endian():
    raw = encode(np.array([1], dtype=np.int32))
    assert raw[-4:] == b"\x01\x00\x00\x00"


def test_truncated_payload_reports_sizes():
    raw = encode(np.zeros((4, 4), np.float64))
    with pytest.raises(FormatError, match=f"expected {len(raw)} bytes, got {len(raw) - 5}") as ei:
        decode(raw[:-5])
    assert ei.value.offset == len(raw) - 5


def test_bad_magic():
    raw = bytearray(encode(np.zeros(3, np.uint8)))
    raw[:4] = b"XDAT"
    with pytest.raises(FormatError, match="magic") as ei:
        decode(bytes(raw))
    assert ei.value.offset == 0


def test_unknown_dtype_code():
    raw = bytearray(encode(np.zeros(3, np.uint8)))
    raw[8] = 9
    with pytest.raises(FormatError, match="dtype") as ei:
        decode(bytes(raw))
    assert ei.value.offset == 8


def test_truncated_extents_and_trailing_bytes():
    raw = encode(np.zeros((2, 2), np.uint8))
    with pytest.raises(FormatError):
        decode(raw[:12])
    with pytest.raises(FormatError, match="trailing"):
        decode(raw + b"\x00")
