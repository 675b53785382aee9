"""Checkpoint files: structured text holding the run configuration, named
parameter arrays, optimizer state, and the iteration counter.

Arrays are serialized as hexadecimal (base-16) strings of their
little-endian float64 bytes inside a JSON document, so checkpoints are
diffable, language-neutral, and round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .config import RunConfig
from .errors import DataError, ParseError
from .nn import Adam

CHECKPOINT_FORMAT = "dmnc-checkpoint"
CHECKPOINT_VERSION = 1


def encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "hex": data.tobytes().hex()}


def decode_array(obj: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = bytes.fromhex(obj["hex"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed array record: {e}") from e
    flat = np.frombuffer(raw, dtype="<f8")
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ParseError(f"array of shape {shape} needs {expected} values, "
                         f"got {flat.size}")
    return flat.reshape(shape).astype(float)


class Checkpoint:
    """In-memory form of a checkpoint file."""

    def __init__(self, run_config: RunConfig, parameters: dict[str, np.ndarray],
                 iteration: int = 0,
                 optimizer_state: dict[str, np.ndarray] | None = None,
                 optimizer_t: int = 0):
        self.run_config = run_config
        self.parameters = parameters
        self.iteration = iteration
        self.optimizer_state = optimizer_state
        self.optimizer_t = optimizer_t


def save_checkpoint(path, run_config: RunConfig, model,
                    optimizer: Adam | None = None, iteration: int = 0) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "run_config": run_config.to_dict(),
        "iteration": int(iteration),
        "parameters": {name: encode_array(p.data)
                       for name, p in model.named_parameters().items()},
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "t": optimizer.t,
            "state": {name: encode_array(arr)
                      for name, arr in optimizer.state_arrays().items()},
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"checkpoint is not valid JSON: {e.msg}") from e
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a checkpoint file: format={doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        run_config = RunConfig.from_dict(doc["run_config"])
        parameters = {name: decode_array(obj)
                      for name, obj in doc["parameters"].items()}
        iteration = int(doc["iteration"])
    except KeyError as e:
        raise ParseError(f"checkpoint missing field {e.args[0]}") from e
    optimizer_state = None
    optimizer_t = 0
    if "optimizer" in doc:
        optimizer_state = {name: decode_array(obj)
                           for name, obj in doc["optimizer"]["state"].items()}
        optimizer_t = int(doc["optimizer"]["t"])
    return Checkpoint(run_config, parameters, iteration, optimizer_state,
                      optimizer_t)


def apply_parameters(model, parameters: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into a freshly built model, validating names and
    shapes both ways."""
    own = model.named_parameters()
    missing = set(own) - set(parameters)
    extra = set(parameters) - set(own)
    if missing or extra:
        raise DataError(f"parameter names do not match the model: "
                        f"missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in own.items():
        arr = parameters[name]
        if arr.shape != p.data.shape:
            raise DataError(f"parameter {name} has shape {arr.shape}, "
                            f"model expects {p.data.shape}")
        p.data[...] = arr


def restore_model(checkpoint: Checkpoint):
    """Rebuild the model named by the run config and load its parameters."""
    from .baselines import make_model
    model = make_model(checkpoint.run_config.model,
                       checkpoint.run_config.model_config,
                       checkpoint.run_config.seed)
    apply_parameters(model, checkpoint.parameters)
    return model


def restore_optimizer(checkpoint: Checkpoint, model,
                      train_config=None) -> Adam:
    tc = train_config if train_config is not None else checkpoint.run_config.train_config
    optimizer = Adam(model.named_parameters(), lr=tc.lr, beta1=tc.beta1,
                     beta2=tc.beta2, eps=tc.eps)
    if checkpoint.optimizer_state is not None:
        optimizer.load_state_arrays(checkpoint.optimizer_state,
                                    checkpoint.optimizer_t)
    return optimizer


def checkpoint_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
