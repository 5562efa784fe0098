import numpy as np
import pytest

from sanet.checkpoint import Checkpoint, CheckpointError, MAGIC, decode, encode, load, save
from sanet.tensor import SeededRng


def sample_checkpoint():
    rng = SeededRng(0)
    return Checkpoint("model.num_classes = 5\n", {
        "stem.weight": rng.normal((4, 3, 3, 3)),
        "head.bias": rng.normal((5,)),
        "opt.m/head.bias": rng.normal((5,)),
        "opt.v/head.bias": np.abs(rng.normal((5,))),
    }, step=17)


def test_save_load_save_is_byte_stable(tmp_path):
    ck = sample_checkpoint()
    save(tmp_path / "a.ckpt", ck)
    back = load(tmp_path / "a.ckpt")
    save(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.step == 17 and back.config_text == ck.config_text
    assert all(np.array_equal(back.tensors[k], v) for k, v in ck.tensors.items())


def test_params_and_moments_split():
    ck = sample_checkpoint()
    assert set(ck.params()) == {"stem.weight", "head.bias"}
    m, v = ck.moments()
    assert set(m) == set(v) == {"head.bias"}


def test_scalar_entry_round_trips():
    ck = Checkpoint("", {"s": np.array(2.5)})
    assert decode(encode(ck)).tensors["s"].item() == 2.5


def test_corrupt_input_rejected():
    data = encode(sample_checkpoint())
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"X" + data[1:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(data + b"\0")
    with pytest.raises(CheckpointError, match="version"):
        decode(MAGIC + (99).to_bytes(4, "little") + data[12:])
