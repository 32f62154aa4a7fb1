import numpy as np
import pytest

from wsvd import io


def test_matrix_roundtrip_and_layout(tmp_path, rng):
    m = rng.normal(size=(3, 5))
    p = tmp_path / "m.mat"
    io.save_matrix(p, m)
    raw = p.read_bytes()
    assert raw[:8] == b"WSVDMAT1"
    assert int.from_bytes(raw[8:16], "little") == 3 and int.from_bytes(raw[16:24], "little") == 5
    assert np.array_equal(np.frombuffer(raw[24:], "<f8").reshape(3, 5), m)
    assert np.array_equal(io.load_matrix(p), m)


def test_int8_roundtrip(tmp_path):
    q = np.arange(-127, 128).reshape(15, 17)
    io.save_int8(tmp_path / "q.i8", q)
    assert np.array_equal(io.load_int8(tmp_path / "q.i8"), q)
    with pytest.raises(ValueError):
        io.save_int8(tmp_path / "bad.i8", np.array([[200]]))


def test_corrupt_files_rejected(tmp_path, rng):
    p = tmp_path / "m.mat"
    io.save_matrix(p, rng.normal(size=(2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(io.FormatError, match="payload"):
        io.load_matrix(p)
    p.write_bytes(b"NOTMAGIC" + bytes(16))
    with pytest.raises(io.FormatError, match="magic"):
        io.load_matrix(p)
    p.write_bytes(b"abc")
    with pytest.raises(io.FormatError):
        io.load_matrix(p)


def test_non_finite_not_written(tmp_path):
    with pytest.raises(ValueError):
        io.save_matrix(tmp_path / "x.mat", np.array([[np.inf]]))
    assert not (tmp_path / "x.mat").exists()


def test_json_is_byte_stable(tmp_path):
    io.dump_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    io.dump_json(tmp_path / "b.json", {"a": [1.5, 2], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert io.load_json(tmp_path / "a.json") == {"a": [1.5, 2], "b": 1}
