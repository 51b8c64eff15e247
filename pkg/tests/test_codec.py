"""DTNS tensor and record files"""
import struct

import numpy as np
import pytest

from deltadiff.errors import IoError, ParseError
from deltadiff.tensor import (
    Tensor, decode_records, decode_tensor, encode_records, encode_tensor, read_records, read_tensor,
    write_records, write_tensor,
)


def test_header_layout():
    data = encode_tensor(Tensor([[1.0, 2.0, 3.0]]))
    assert data[:4] == b"DTNS"
    assert struct.unpack_from("<I", data, 4)[0] == 1
    assert data[8] == 2
    assert struct.unpack_from("<2I", data, 9) == (1, 3)
    assert np.frombuffer(data[17:], dtype="<f4").tolist() == [1.0, 2.0, 3.0]


def test_decode_preserves_bits():
    original = Tensor(np.array([[-0.0, np.float32(1e-40), np.inf]], dtype=np.float32))
    decoded, end = decode_tensor(encode_tensor(original))
    assert end == len(encode_tensor(original))
    assert decoded.bitwise_equal(original)


def test_bad_magic():
    data = bytearray(encode_tensor(Tensor([1.0])))
    data[:4] = b"XXXX"
    with pytest.raises(ParseError):
        decode_tensor(bytes(data))


def test_unsupported_version():
    data = bytearray(encode_tensor(Tensor([1.0])))
    struct.pack_into("<I", data, 4, 7)
    with pytest.raises(ParseError):
        decode_tensor(bytes(data))


def test_truncated_payload():
    data = encode_tensor(Tensor(np.ones((2, 2))))
    with pytest.raises(ParseError):
        decode_tensor(data[:-1])


def test_truncated_header():
    with pytest.raises(ParseError):
        decode_tensor(b"DTN")


def test_trailing_bytes_in_tensor_file(tmp_path):
    path = tmp_path / "t.dtns"
    path.write_bytes(encode_tensor(Tensor([1.0])) + b"\x00")
    with pytest.raises(ParseError):
        read_tensor(path)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        read_tensor(tmp_path / "nope.dtns")


def test_tensor_file(tmp_path):
    t = Tensor(np.arange(6, dtype=np.float32).reshape(1, 2, 3))
    write_tensor(tmp_path / "t.dtns", t)
    assert read_tensor(tmp_path / "t.dtns").bitwise_equal(t)


def test_records_keep_order_and_names(tmp_path):
    records = [("b.weight", Tensor([1.0, 2.0])), ("a.bias", Tensor([3.0]))]
    write_records(tmp_path / "w.bin", records)
    loaded = read_records(tmp_path / "w.bin")
    assert list(loaded) == ["b.weight", "a.bias"]
    assert loaded["a.bias"].bitwise_equal(Tensor([3.0]))


def test_duplicate_record_name():
    data = encode_records([("x", Tensor([1.0]))]) * 2
    with pytest.raises(ParseError):
        decode_records(data)


def test_truncated_record_name():
    data = encode_records([("weight", Tensor([1.0]))])
    with pytest.raises(ParseError):
        decode_records(data[:4])


def test_record_name_longer_than_the_length_field():
    with pytest.raises(ParseError, match="65535-byte limit"):
        encode_records([("n" * 0x10000, Tensor([1.0]))])
    # multi-byte characters count in encoded bytes
    with pytest.raises(ParseError):
        encode_records([("é" * 0x8000, Tensor([1.0]))])


def test_record_name_at_the_limit():
    name = "n" * 0xFFFF
    assert list(decode_records(encode_records([(name, Tensor([1.0]))]))) == [name]
