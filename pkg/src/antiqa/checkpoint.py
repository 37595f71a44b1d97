"""Binary checkpoint container.

Layout: an 8-byte magic string, a little-endian uint64 header length,
a canonical JSON header (sorted keys, no whitespace), then the raw
tensor blobs back to back. Every blob is little-endian IEEE float in
C order; the header's tensor directory records name, shape, dtype and
byte offset relative to the start of the blob section. Identical state
always serializes to identical bytes, which the reproducibility tests
rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .model import ArchConfig, AntiqaNet
from .tensor import Tensor

MAGIC = b"ANTIQCK1"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


@dataclass
class Checkpoint:
    """Everything needed to resume or reproduce a run."""
    arch: ArchConfig
    params: Dict[str, np.ndarray]
    optim_moments: Dict[str, np.ndarray] = field(default_factory=dict)
    optim_step: int = 0
    epoch: int = 0
    stage: str = ""
    rng_state: Optional[dict] = None
    dtype: str = "float64"

    @classmethod
    def from_net(cls, net: AntiqaNet, optimizer=None, epoch: int = 0,
                 stage: str = "", rng: Optional[np.random.Generator] = None) -> "Checkpoint":
        moments = {}
        step = 0
        if optimizer is not None:
            moments = {k: v.copy() for k, v in optimizer.state_arrays().items()}
            step = optimizer.step_count
        return cls(
            arch=net.config,
            params={k: t.data.copy() for k, t in net.params.items()},
            optim_moments=moments,
            optim_step=step,
            epoch=epoch,
            stage=stage,
            rng_state=rng.bit_generator.state if rng is not None else None,
            dtype=str(net.param_dtype()),
        )

    def build_net(self) -> AntiqaNet:
        """Reconstruct the network with these exact parameter values."""
        params = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.params.items()}
        return AntiqaNet(self.arch, params)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    directory = []
    blobs = []
    offset = 0

    def push(name, arr, kind):
        nonlocal offset
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr.astype(arr.dtype, copy=False)).astype(dt).tobytes()
        directory.append({"name": name, "kind": kind, "shape": list(arr.shape),
                          "dtype": str(arr.dtype), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name in sorted(ckpt.params):
        push(name, ckpt.params[name], "param")
    for name in sorted(ckpt.optim_moments):
        push(name, ckpt.optim_moments[name], "moment")

    header = {
        "format_version": FORMAT_VERSION,
        "arch": ckpt.arch.to_dict(),
        "dtype": ckpt.dtype,
        "epoch": ckpt.epoch,
        "stage": ckpt.stage,
        "optim_step": ckpt.optim_step,
        "rng_state": _encode_rng(ckpt.rng_state),
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        head_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(head_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('format_version')}")
        blob = fh.read()

    params: Dict[str, np.ndarray] = {}
    moments: Dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        dt = _DTYPES.get(ent["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown tensor dtype {ent['dtype']}")
        raw = blob[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).astype(ent["dtype"])
        (params if ent["kind"] == "param" else moments)[ent["name"]] = arr

    return Checkpoint(
        arch=ArchConfig.from_dict(header["arch"]),
        params=params,
        optim_moments=moments,
        optim_step=header["optim_step"],
        epoch=header["epoch"],
        stage=header["stage"],
        rng_state=_decode_rng(header["rng_state"]),
        dtype=header["dtype"],
    )


def _encode_rng(state: Optional[dict]):
    # PCG64 state is a nested dict of (arbitrary-precision) ints and
    # strings; JSON round-trips it losslessly
    return state


def _decode_rng(state):
    return state
