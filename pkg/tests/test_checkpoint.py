import numpy as np
import pytest
import torch

from mrsynth.checkpoint import (
    Checkpoint, CheckpointError, load_checkpoint, load_module_tensors, module_tensors,
    save_checkpoint,
)


def test_roundtrip_and_deterministic_bytes(tmp_path):
    tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.float32(2.5) * np.ones(())}
    ck = Checkpoint("clip", {"x": [1, 2]}, tensors, {"epoch": 3})
    save_checkpoint(tmp_path / "1.ckpt", ck)
    save_checkpoint(tmp_path / "2.ckpt", Checkpoint("clip", {"x": [1, 2]}, dict(reversed(tensors.items())),
                                                    {"epoch": 3}))
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()
    back = load_checkpoint(tmp_path / "1.ckpt")
    assert back.stage == "clip" and back.config == {"x": [1, 2]} and back.state == {"epoch": 3}
    assert np.array_equal(back.tensors["b"], tensors["b"])
    assert back.tensors["a"].shape == ()
    assert not (tmp_path / "1.ckpt.tmp").exists()


def test_rejects_bad_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"garbage")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)
    save_checkpoint(p, Checkpoint("synth", {}, {}))
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
    with pytest.raises(CheckpointError, match="stage"):
        save_checkpoint(p, Checkpoint("other", {}, {}))


def test_module_roundtrip():
    torch.manual_seed(0)
    a, b = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    load_module_tensors(b, module_tensors(a, "m."), "m.")
    assert torch.equal(a.weight, b.weight)
    with pytest.raises(CheckpointError, match="lacks"):
        load_module_tensors(b, {}, "m.")
