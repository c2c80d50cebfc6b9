"""Versioned binary checkpoints.

Layout (little-endian)::

    b"RDIT1" | u16 version | u32 header length | JSON header | tensor blobs

The header is sorted-key JSON holding the config snapshot, step counter, rng
state, vocabulary and a tensor table of (name, shape, offset, nbytes); blobs
are float32 in table order. Optimizer moments are stored as ``opt.*`` tensors.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from core.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"RDIT1"
VERSION = 1
PREAMBLE = struct.Struct("<HI")
DTYPE = np.dtype("<f4")
OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None
    optimizer: Optional[Dict[str, np.ndarray]] = None
    skipped: int = 0
    vocab: List[str] = field(default_factory=list)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    named = list(ckpt.tensors.items())
    if ckpt.optimizer:
        named += [(OPT_PREFIX + k, v) for k, v in ckpt.optimizer.items()]
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise CheckpointError("tensor names must be unique")
    table, blobs, offset = [], [], 0
    for name, value in named:
        blob = np.ascontiguousarray(value, dtype=DTYPE).tobytes()
        table.append({"name": name, "shape": list(np.shape(value)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "skipped": int(ckpt.skipped),
        "rng_state": ckpt.rng_state,
        "vocab": list(ckpt.vocab),
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + PREAMBLE.pack(VERSION, len(head)) + head + b"".join(blobs)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse a whole checkpoint or raise CheckpointError; never returns partial state."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an RDIT checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + PREAMBLE.size:
        raise CheckpointError("checkpoint truncated in preamble")
    version, head_len = PREAMBLE.unpack_from(data, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; this build reads version {VERSION}")
    pos += PREAMBLE.size
    if len(data) < pos + head_len:
        raise CheckpointError("checkpoint truncated in header")
    try:
        header = json.loads(data[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = memoryview(data)[pos + head_len:]

    tensors, optimizer = {}, {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize:
            raise CheckpointError(f"tensor {entry['name']}: size does not match shape {shape}")
        if start + nbytes > len(body):
            raise CheckpointError(f"checkpoint truncated in tensor {entry['name']}")
        value = np.frombuffer(body[start:start + nbytes], dtype=DTYPE).reshape(shape).copy()
        name = entry["name"]
        if name.startswith(OPT_PREFIX):
            optimizer[name[len(OPT_PREFIX):]] = value
        else:
            tensors[name] = value
    return Checkpoint(
        config=header.get("config", {}),
        tensors=tensors,
        step=int(header.get("step", 0)),
        rng_state=header.get("rng_state"),
        optimizer=optimizer or None,
        skipped=int(header.get("skipped", 0)),
        vocab=list(header.get("vocab", [])),
    )


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.info(f"checkpoint written to {path} at step {ckpt.step}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    ckpt = decode_checkpoint(path.read_bytes())
    logger.info(f"checkpoint loaded from {path} (step {ckpt.step}, {len(ckpt.tensors)} tensors)")
    return ckpt


def rng_to_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def rng_from_state(state: Dict[str, Any]) -> np.random.Generator:
    try:
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"unusable rng state in checkpoint: {exc}") from None
    return np.random.Generator(bit_generator)


def training_checkpoint(model, state, config: Dict[str, Any], vocab) -> Checkpoint:
    return Checkpoint(
        config=config,
        tensors=model.state_dict(),
        step=state.step,
        rng_state=rng_to_state(state.rng),
        optimizer=state.optimizer.state_dict(),
        skipped=state.skipped,
        vocab=list(vocab.tokens),
    )


def restore_training(ckpt: Checkpoint, model, state):
    """Load parameters, optimizer moments, rng and counters in place."""
    model.load_state_dict(ckpt.tensors)
    if ckpt.optimizer is not None:
        state.optimizer.load_state_dict(ckpt.optimizer)
    if ckpt.rng_state is not None:
        state.rng = rng_from_state(ckpt.rng_state)
    state.step = ckpt.step
    state.skipped = ckpt.skipped
    return state
