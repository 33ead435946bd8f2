import struct
import zlib

import numpy as np
import pytest

from gafm import precision
from gafm.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from gafm.model import GafmConfig, GafmNetwork, parameter_census
from gafm.nn import ParamSet


def test_roundtrip_bit_exact(tmp_path):
    net = GafmNetwork(GafmConfig(), seed=3)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net.state_dict(), path, {"note": "x"})
    back = load_checkpoint(path)
    state = net.state_dict()
    assert list(back) == list(state)
    for k in state:
        assert back[k].dtype == state[k].dtype
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()
    assert back.meta == {"note": "x"}


def test_roundtrip_double_and_scalar(tmp_path):
    params = ParamSet({"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}, meta={"k": 1})
    save_checkpoint(params, tmp_path / "p.ckpt")
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert back["a"].dtype == np.float64 and np.array_equal(back["a"], params["a"])
    assert back["s"].shape == () and back["s"] == 2.5
    assert back.meta == {"k": 1}


def test_desk_checkpoint_name_census(tmp_path):
    net = GafmNetwork(GafmConfig(), seed=0)
    save_checkpoint(net.state_dict(), tmp_path / "n.ckpt")
    names = list(load_checkpoint(tmp_path / "n.ckpt"))
    census = parameter_census(net)
    assert len(names) == len(set(names))
    assert set(census["parameters"]) <= set(names)
    assert set(names) == set(census["parameters"]) | set(census["buffers"])


def test_wrong_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    save_checkpoint({"w": np.ones(3, dtype=np.float32)}, p)
    raw = bytearray(p.read_bytes())
    raw[:5] = b"XXXX1"
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checksum_mismatch(tmp_path):
    p = tmp_path / "c.ckpt"
    save_checkpoint({"w": np.ones(3, dtype=np.float32)}, p)
    raw = bytearray(p.read_bytes())
    raw[-6] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_truncated_record_names_field(tmp_path):
    p = tmp_path / "t.ckpt"
    save_checkpoint({"weights": np.ones(4, dtype=np.float32)}, p)
    body = p.read_bytes()[:-4]
    p.write_bytes(_with_crc(body[:-3]))
    with pytest.raises(CheckpointError, match="weights data"):
        load_checkpoint(p)


def test_unknown_dtype_code(tmp_path):
    meta = b"{}"
    body = MAGIC + struct.pack("<I", len(meta)) + meta + struct.pack("<I", 1)
    body += struct.pack("<H", 1) + b"w" + struct.pack("<BB", 2, 1) + struct.pack("<I", 1) + b"\x00\x00"
    p = tmp_path / "d.ckpt"
    p.write_bytes(_with_crc(body))
    with pytest.raises(CheckpointError, match="dtype"):
        load_checkpoint(p)


def test_float_layout_little_endian(tmp_path):
    p = tmp_path / "le.ckpt"
    save_checkpoint({"x": np.array([1.0], dtype=np.float64)}, p)
    assert struct.pack("<d", 1.0) in p.read_bytes()


def test_load_state_dict_rejects_mismatch():
    net = GafmNetwork(GafmConfig.tiny(), seed=0)
    state = net.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        net.load_state_dict(state)


def test_loaded_network_reproduces_outputs(tmp_path):
    from gafm import Tensor

    with precision("double"):
        net = GafmNetwork(GafmConfig.tiny(), seed=9)
        other = GafmNetwork(GafmConfig.tiny(), seed=10)
    save_checkpoint(net.state_dict(), tmp_path / "n.ckpt")
    other.load_state_dict(load_checkpoint(tmp_path / "n.ckpt"))
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 16, 16)))
    assert net(x, False).data.tobytes() == other(x, False).data.tobytes()
