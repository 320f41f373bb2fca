import struct

import numpy as np
import pytest

from vogn.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from vogn.network import BatchNorm, Conv2d, Dense, Flatten, Network, ReLU, forward
from vogn.optimizers import Hyperparams, OptimizerState, Prior
from vogn.tensor import RngStream


def net():
    return Network([Conv2d(1, 2, 3, padding=1), BatchNorm(2), ReLU(), Flatten(), Dense(32, 3)], (1, 4, 4))


def test_roundtrip_preserves_everything(tmp_path):
    model = net().init_params(RngStream(0))
    forward(model, RngStream(1).normal((5, 1, 4, 4)))  # move running stats off their defaults
    hp = Hyperparams(lr=0.02, decay_epochs=(3, 5), prior_prec=2.0)
    state = OptimizerState.zeros(model.params, n_eff=40.0, hp=hp)
    state.s = [np.abs(RngStream(2, j).normal(p.shape)) for j, p in enumerate(model.params)]
    state.step = 17
    state.kfac[4] = {"A": np.eye(3), "S": 2 * np.eye(3)}
    prior = Prior([p * 0.5 for p in model.params], [np.full_like(p, 0.1) for p in model.params])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, "vogn", hp, state, prior, meta={"seed": 3})
    ck = load_checkpoint(path)
    m2 = ck["model"]
    assert m2.spec() == model.spec()
    assert all(np.array_equal(a, b) for a, b in zip(m2.params, model.params))
    for i in model.running:
        assert np.array_equal(m2.running[i]["var"], model.running[i]["var"])
    assert ck["optimizer"] == "vogn" and ck["hp"] == hp and ck["meta"] == {"seed": 3}
    assert ck["state"].step == 17 and ck["state"].n_eff == 40.0 and ck["state"].dtilde == state.dtilde
    assert all(np.array_equal(a, b) for a, b in zip(ck["state"].s, state.s))
    assert np.array_equal(ck["state"].kfac[4]["S"], 2 * np.eye(3))
    assert all(np.array_equal(a, b) for a, b in zip(ck["prior"].mean, prior.mean))
    x = RngStream(4).normal((3, 1, 4, 4))
    assert np.array_equal(forward(m2, x, "eval")[0], forward(model, x, "eval")[0])


def test_point_checkpoint_without_state(tmp_path):
    model = net().init_params(RngStream(5))
    save_checkpoint(tmp_path / "p.ckpt", model, "adam")
    ck = load_checkpoint(tmp_path / "p.ckpt")
    assert ck["state"] is None and ck["prior"] is None and ck["hp"] is None


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_rejects_unknown_version(tmp_path):
    (tmp_path / "v.ckpt").write_bytes(MAGIC + struct.pack("<II", 99, 2) + b"{}")
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")


def test_rejects_truncated_payload(tmp_path):
    model = net().init_params(RngStream(6))
    save_checkpoint(tmp_path / "t.ckpt", model)
    raw = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
