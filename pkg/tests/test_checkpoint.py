import numpy as np
import pytest

from mixdiv.checkpoint import (load_checkpoint, load_model, save_checkpoint,
                               save_model)
from mixdiv.errors import FileFormatError
from mixdiv.model import ModelConfig, Parameters
from mixdiv.rng import RngHub
from mixdiv.tensor import AdamState, Tensor, adam_step


def small_config():
    return ModelConfig(src_vocab_size=9, tgt_vocab_size=7, num_layers=1,
                       num_heads=2, d_model=8, d_ff=16, max_len=8,
                       dropout=0.0, label_smoothing=0.1)


def test_raw_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "b.c": np.array([np.float32(1e-40), np.float32(-0.0), np.float32(3.14)]),
        "scalar_vec": rng.normal(size=7).astype(np.float32),
    }
    header = {"alpha": "1.0", "note": "hello world"}
    path = tmp_path / "ck.mixdiv"
    save_checkpoint(path, header, tensors)
    got_header, got = load_checkpoint(path)
    assert got_header == header
    assert set(got) == set(tensors)
    for name in tensors:
        assert got[name].shape == tensors[name].shape
        assert got[name].tobytes() == tensors[name].tobytes()


def test_save_is_deterministic(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "a", tmp_path / "b"
    save_checkpoint(p1, {"k": "v"}, tensors)
    save_checkpoint(p2, {"k": "v"}, tensors)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOTMIX1\n")
    with pytest.raises(FileFormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_tensor(tmp_path):
    path = tmp_path / "trunc"
    save_checkpoint(path, {}, {"w": np.zeros((4, 4), np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FileFormatError, match="w"):
        load_checkpoint(path)


def test_model_roundtrip(tmp_path):
    cfg = small_config()
    params = Parameters.init(cfg, RngHub(1))
    path = tmp_path / "model.mixdiv"
    save_model(path, cfg, params, extra={"step": "123"})
    cfg2, params2, header, adam = load_model(path)
    assert cfg2 == cfg
    assert header["step"] == "123"
    assert adam is None
    for name, t in params.items():
        assert t.data.tobytes() == params2[name].data.tobytes()


def test_optimizer_state_roundtrip(tmp_path):
    cfg = small_config()
    params = Parameters.init(cfg, RngHub(2))
    state = AdamState(base_lr=2e-3, warmup_steps=40)
    rng = np.random.default_rng(3)
    for _ in range(3):
        for _, t in params.items():
            t.grad = rng.normal(size=t.shape).astype(np.float32)
        adam_step(params.as_dict(), state)

    path = tmp_path / "resume.mixdiv"
    save_model(path, cfg, params, adam=state)
    _, params2, _, state2 = load_model(path)
    assert state2 is not None
    assert state2.step == 3
    assert state2.base_lr == pytest.approx(2e-3)
    assert state2.warmup_steps == 40

    # One more identical step from both copies stays bitwise equal.
    for (_, a), (_, b) in zip(params.items(), params2.items()):
        g = rng.normal(size=a.shape).astype(np.float32)
        a.grad = g.copy()
        b.grad = g.copy()
    adam_step(params.as_dict(), state)
    adam_step(params2.as_dict(), state2)
    for name, t in params.items():
        assert t.data.tobytes() == params2[name].data.tobytes()
