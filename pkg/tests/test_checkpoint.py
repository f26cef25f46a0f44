import json
import struct

import numpy as np
import pytest

from caet_swin import container
from caet_swin.errors import FormatError
from caet_swin.fusion import CAETSWinModel
from caet_swin.plans import SCALED
from caet_swin.training.checkpoint import (CHECKPOINT_MAGIC, checkpoint_bytes, load_checkpoint, parse_checkpoint,
                                           save_checkpoint)


def test_model_roundtrip_bit_exact(tmp_path, rng):
    m = CAETSWinModel(SCALED, rng)
    save_checkpoint(tmp_path / "m.ckpt", m.state_dict(), "caet-swin", {"plan": "scaled"})
    kind, tensors, meta = load_checkpoint(tmp_path / "m.ckpt", "caet-swin")
    assert kind == "caet-swin" and meta == {"plan": "scaled"}
    other = CAETSWinModel(SCALED, np.random.default_rng(5))
    other.load_state_dict(tensors)
    for (n, a), (_, b) in zip(m.named_parameters(), other.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    assert checkpoint_bytes(other.state_dict(), "caet-swin", {"plan": "scaled"}) == \
        (tmp_path / "m.ckpt").read_bytes()


def test_float64_and_scalars():
    t = {"a": np.arange(3.0), "b": np.float32(2.5) * np.ones(()), "c": np.zeros((0, 4), np.float32)}
    _, back, _ = parse_checkpoint(checkpoint_bytes(t, "x"))
    for k in t:
        assert back[k].dtype == t[k].dtype and back[k].shape == t[k].shape and np.array_equal(back[k], t[k])
    with pytest.raises(TypeError):
        checkpoint_bytes({"i": np.arange(3)}, "x")


def rebuild(header, payload):
    raw = container.encode_header(header)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(raw)) + raw + payload


def test_corruptions(tmp_path):
    blob = checkpoint_bytes({"w": np.ones((4, 4), np.float32), "b": np.zeros(4, np.float32)}, "swin")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header, payload = json.loads(blob[8:8 + hlen]), blob[8 + hlen:]
    flipped = bytearray(blob)
    flipped[-3] ^= 1
    big = json.loads(json.dumps(header))
    big["tensors"]["w"]["shape"] = [1 << 40, 1 << 40]
    cases = {
        "bad-magic": blob.replace(CHECKPOINT_MAGIC, b"CSVL", 1),
        "bad-version": rebuild(dict(header, format_version=0), payload),
        "truncated": blob[:-4],
        "checksum": bytes(flipped),
        "dim-overflow": rebuild(big, payload),
        "bad-header": rebuild(dict(header, tensors=[1, 2]), payload),
    }
    for code, bad in cases.items():
        with pytest.raises(FormatError) as exc:
            parse_checkpoint(bad)
        assert exc.value.code == code
    save_checkpoint(tmp_path / "c.ckpt", {"w": np.ones(2, np.float32)}, "swin")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.ckpt", expect_kind="caet")
