import numpy as np
import pytest

from vlab import checkpoint as ck
from vlab.tensor import ContractError


def sample():
    rng = np.random.default_rng(0)
    return ck.Checkpoint(
        {"a.weight": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
         "c": np.float64(2.5) * np.ones((2, 1, 2)), "scalar": np.array(1.5, dtype=np.float32)},
        "abc123", 42, {"seed": 7}, ["stage1"], {"kind": "stage1", "note": "x"})


def test_round_trip_is_exact(tmp_path):
    c = sample()
    path = ck.save(tmp_path / "sub" / "x.ckpt", c)
    back = ck.load(path)
    assert back.header() == c.header()
    assert set(back.tensors) == set(c.tensors)
    for k, v in c.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(back.tensors[k], v)
    assert ck.dumps(back) == ck.dumps(c)


def test_layout_header():
    buf = ck.dumps(sample())
    assert buf[:4] == b"VLAB"
    assert int.from_bytes(buf[4:8], "little") == 1


def test_trailing_bytes_and_bad_magic_rejected():
    buf = ck.dumps(sample())
    with pytest.raises(ContractError):
        ck.loads(buf + b"\0")
    with pytest.raises(ContractError):
        ck.loads(b"NOPE" + buf[4:])
    with pytest.raises(ContractError):
        ck.load("/nonexistent/x.ckpt")


def test_unsupported_dtype():
    with pytest.raises(ContractError):
        ck.dumps(ck.Checkpoint({"z": np.zeros(2, dtype=np.complex64)}))


def test_prefix_helpers():
    state = {"w": 1, "b": 2}
    p = ck.prefixed(state, "m.")
    assert p == {"m.w": 1, "m.b": 2}
    assert ck.strip({**p, "other": 3}, "m.") == state
