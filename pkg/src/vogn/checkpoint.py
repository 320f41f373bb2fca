"""Versioned checkpoint files.

Layout: the 8-byte magic ``b"VOGNCKPT"``, ``u32`` format version, ``u32``
header length, a UTF-8 JSON header, then every tensor named in
``header["tensors"]`` in that order, each in the binary tensor format of
:mod:`vogn.tensor`.
"""
import json
import struct

from .network import Network
from .optimizers import Hyperparams, OptimizerState, Prior
from .tensor import read_tensor, write_tensor

MAGIC = b"VOGNCKPT"
VERSION = 1


def save_checkpoint(path, model, optimizer=None, hp=None, state=None, prior=None, meta=None):
    tensors = {f"param.{j}": p for j, p in enumerate(model.params)}
    for i, run in model.running.items():
        tensors[f"running.{i}.mean"] = run["mean"]
        tensors[f"running.{i}.var"] = run["var"]
    if state is not None:
        tensors.update({f"state.{k}": v for k, v in state.tensors().items()})
    if prior is not None:
        for j, (mu, pr) in enumerate(zip(prior.mean, prior.prec)):
            tensors[f"prior.mean.{j}"] = mu
            tensors[f"prior.prec.{j}"] = pr
    header = {
        "version": VERSION,
        "network": model.spec(),
        "param_names": model.param_names,
        "optimizer": optimizer,
        "hyperparams": hp.to_dict() if hp is not None else None,
        "state": state.meta() if state is not None else None,
        "meta": meta or {},
        "tensors": list(tensors),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for name in header["tensors"]:
            write_tensor(fh, tensors[name])


def load_checkpoint(path):
    """Returns a dict with ``model``, ``optimizer``, ``hp``, ``state``, ``prior`` and ``meta``."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        tensors = {name: read_tensor(fh) for name in header["tensors"]}
    model = Network.from_spec(header["network"])
    if header["param_names"] != model.param_names:
        raise ValueError(f"{path}: parameter names do not match the stored architecture")
    for j, p in enumerate(model.params):
        t = tensors[f"param.{j}"]
        if t.shape != p.shape:
            raise ValueError(f"{path}: parameter {model.param_names[j]} has shape {t.shape}, expected {p.shape}")
        model.params[j] = t.copy()
    for i in model.running:
        model.running[i] = {"mean": tensors[f"running.{i}.mean"].copy(), "var": tensors[f"running.{i}.var"].copy()}
    state = None
    if header["state"] is not None:
        st = {k[len("state."):]: v.copy() for k, v in tensors.items() if k.startswith("state.")}
        state = OptimizerState.from_tensors(st, header["state"])
    prior = None
    if "prior.mean.0" in tensors:
        n = len(model.params)
        prior = Prior([tensors[f"prior.mean.{j}"].copy() for j in range(n)],
                      [tensors[f"prior.prec.{j}"].copy() for j in range(n)])
    hp = Hyperparams.from_dict(header["hyperparams"]) if header["hyperparams"] else None
    return {"model": model, "optimizer": header["optimizer"], "hp": hp, "state": state,
            "prior": prior, "meta": header["meta"]}
