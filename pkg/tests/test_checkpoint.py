import os

import numpy as np
import pytest

from cocodistill.checkpoint import CheckpointError, load_network, load_tensors, save_network, save_tensors, sidecar_path
from cocodistill.data import load_split
from cocodistill.nn import NetworkSpec, build_network
from cocodistill.train import evaluate


def test_tensor_round_trip_bytes(tmp_path, rng):
    tensors = {"a": rng.normal(size=(2, 3)), "scalar": np.array(np.pi), "é": rng.normal(size=(1, 2, 3, 4)),
               "empty": np.zeros((0, 3))}
    p = str(tmp_path / "t.ccdn")
    save_tensors(p, tensors)
    back = load_tensors(p)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_corrupt_files(tmp_path, rng):
    p = str(tmp_path / "t.ccdn")
    save_tensors(p, {"a": rng.normal(size=10)})
    raw = open(p, "rb").read()
    bad = str(tmp_path / "bad.ccdn")
    for blob in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        open(bad, "wb").write(blob)
        with pytest.raises(CheckpointError):
            load_tensors(bad)


def test_network_round_trip_metrics(tmp_path):
    net = build_network(NetworkSpec("student", [4, 8]), 9)
    p = str(tmp_path / "s.ccdn")
    save_network(p, net, {"note": "x"})
    assert os.path.exists(sidecar_path(p))
    back, info = load_network(p)
    assert info["note"] == "x" and info["role"] == "student"
    for k, v in net.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    val = load_split(0, "val", 5, 32)
    assert evaluate(net, val)[:2] == evaluate(back, val)[:2]
