import numpy as np
import pytest
import torch

from advlab.core.checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from advlab.core.errors import CheckpointIntegrityError, CheckpointVersionError
from advlab.nets import build_denoiser, build_restorer


@pytest.fixture
def restorer_ckpt():
    r = build_restorer(64, seed=3)
    return r, Checkpoint.from_module("restorer", r, {"model": r.spec()}, {"loss": 0.5})


def test_round_trip_identical(tmp_path, restorer_ckpt):
    r, ckpt = restorer_ckpt
    save_checkpoint(ckpt, tmp_path / "r.advckpt")
    back = load_checkpoint(tmp_path / "r.advckpt")
    assert back == ckpt
    fresh = build_restorer(64, seed=99)
    back.load_into(fresh)
    for a, b in zip(r.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(a, b)


def test_denoiser_round_trip_keeps_bn_buffers(tmp_path):
    d = build_denoiser(1, seed=0, width=0.25)
    ckpt = Checkpoint.from_module("denoiser", d, {"model": d.spec()})
    save_checkpoint(ckpt, tmp_path / "d.advckpt")
    back = load_checkpoint(tmp_path / "d.advckpt")
    assert any("running_var" in k for k in back.parameters)
    assert back == ckpt


def test_future_version_rejected(tmp_path, restorer_ckpt):
    _, ckpt = restorer_ckpt
    save_checkpoint(ckpt, tmp_path / "v.advckpt", format_version=FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.advckpt")


def test_flipped_payload_byte_rejected(tmp_path, restorer_ckpt):
    _, ckpt = restorer_ckpt
    path = tmp_path / "f.advckpt"
    save_checkpoint(ckpt, path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path, restorer_ckpt):
    _, ckpt = restorer_ckpt
    path = tmp_path / "t.advckpt"
    save_checkpoint(ckpt, path)
    path.write_bytes(path.read_bytes()[:-40])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_bad_kind():
    with pytest.raises(ValueError):
        Checkpoint("optimizer", {})


def test_equality_is_bitwise():
    a = Checkpoint("target", {"w": np.array([0.0], dtype=np.float32)})
    b = Checkpoint("target", {"w": np.array([-0.0], dtype=np.float32)})
    assert a != b
