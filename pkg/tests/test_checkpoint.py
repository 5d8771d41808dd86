import numpy as np
import pytest

from vltrack import checkpoint
from vltrack.errors import CheckpointError
from vltrack.experiments import load_model, save_model
from vltrack.lang import LanguageInput
from vltrack.supernet import TINY_PLAN, sample_genome, prune
from vltrack.tensor import Tensor, no_grad
from vltrack.tracker import TrackerNet


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.standard_normal((3, 4, 2, 2)).astype(np.float32), "b": np.float32(rng.standard_normal(5)), "s": np.array(2.5, np.float32)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors, {"genome": "g", "n": 3})
    back, meta = checkpoint.load(path)
    assert meta == {"genome": "g", "n": 3}
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].dtype == np.float32


def test_layout_header():
    raw = checkpoint.dumps({"w": np.ones((2,), np.float32)}, {})
    assert raw[:8] == b"VLTCKPT1"
    assert int.from_bytes(raw[8:12], "little") == 2  # "{}"
    assert raw[-8:] == np.ones(2, "<f4").tobytes()


@pytest.mark.parametrize("mangle", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_files_are_rejected(mangle):
    raw = checkpoint.dumps({"w": np.ones((2, 3), np.float32)}, {"k": 1})
    with pytest.raises(CheckpointError):
        checkpoint.loads(mangle(raw))


def test_shape_mismatch_names_the_parameter():
    net = TrackerNet(TINY_PLAN, seed=0)
    state = dict(net.state_dict())
    name = "head.cls_out.weight"
    state[name] = np.zeros((2, 2), np.float32)
    with pytest.raises(CheckpointError, match=name):
        net.load_state_dict(state)


def test_missing_parameter_is_reported():
    net = TrackerNet(TINY_PLAN, seed=0)
    state = dict(net.state_dict())
    del state["head.cls_out.bias"]
    with pytest.raises(CheckpointError, match="head.cls_out.bias"):
        net.load_state_dict(state)


def test_pruned_model_round_trip_reproduces_outputs(tmp_path):
    net = TrackerNet(TINY_PLAN, seed=1)
    g = sample_genome(np.random.default_rng(2))
    sub = prune(net, g)
    sub.eval()
    save_model(tmp_path / "m.ckpt", sub, g, "fp", pruned=True)
    loaded = load_model(tmp_path / "m.ckpt")
    assert loaded.genome == g and loaded.meta["config_fingerprint"] == "fp"
    rng = np.random.default_rng(3)
    x_t = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    x_s = Tensor(rng.random((1, 3, 160, 160)).astype(np.float32))
    lin = LanguageInput(["the small red square"])
    with no_grad():
        a, b = sub(x_t, x_s, lin, g), loaded.model(x_t, x_s, lin, g)
    np.testing.assert_array_equal(a.cls.data, b.cls.data)
    np.testing.assert_array_equal(a.reg.data, b.reg.data)


def test_pruned_checkpoint_rejects_another_genome(tmp_path):
    net = TrackerNet(TINY_PLAN, seed=4)
    rng = np.random.default_rng(5)
    g = sample_genome(rng)
    save_model(tmp_path / "m.ckpt", prune(net, g), g, "fp", pruned=True)
    other = sample_genome(rng)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m.ckpt", genome=other)
