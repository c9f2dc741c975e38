"""Checkpoint container for network parameters.

Layout::

    b"CDCK1"                 5-byte magic (format version 1)
    u32 little-endian        length N of the JSON header
    N bytes                  UTF-8 JSON header
    payload                  concatenated little-endian arrays

The header holds ``config`` (NetConfig fields), ``schedule_fingerprint``,
``step``, an ``extra`` dict, and ``tensors``: a list of
``{"name", "dtype", "shape", "offset"}`` records. Parameter names are
``theta/<module path>`` for the restoration network, ``phi/<module path>``
for the error-modulation network and ``opt/...`` for optimizer state.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .net import CLEARNet, NetConfig

MAGIC = b"CDCK1"


class CheckpointError(ValueError):
    pass


def param_key(name: str) -> str:
    return ("phi/" + name[len("emm."):]) if name.startswith("emm.") else "theta/" + name


def module_name(key: str) -> str:
    group, name = key.split("/", 1)
    return "emm." + name if group == "phi" else name


@dataclass
class NetParams:
    """A network plus the bookkeeping that ties it to a schedule."""

    net: CLEARNet
    schedule_fingerprint: str
    step: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> NetConfig:
        return self.net.cfg

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {param_key(n): p.detach().cpu().numpy() for n, p in self.net.named_parameters()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.named_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]

    def check_schedule(self, schedule) -> None:
        if schedule.fingerprint != self.schedule_fingerprint:
            raise CheckpointError(
                f"schedule fingerprint mismatch: params {self.schedule_fingerprint}, "
                f"schedule {schedule.fingerprint}"
            )
        if schedule.T != self.config.T:
            raise CheckpointError(f"network built for T={self.config.T}, schedule has T={schedule.T}")


def save_checkpoint(path, params: NetParams, optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    arrays = params.named_arrays()
    for k, v in (optimizer_state or {}).items():
        arrays["opt/" + k] = np.asarray(v)
    records, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        buf = a.astype(dt).tobytes()
        records.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "config": params.config.to_dict(),
        "schedule_fingerprint": params.schedule_fingerprint,
        "step": params.step,
        "extra": params.extra,
        "tensors": records,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for c in chunks:
            f.write(c)


def load_checkpoint(path, dtype=torch.float32) -> tuple[NetParams, dict[str, np.ndarray]]:
    """Return ``(params, optimizer_state)``."""
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a CDCK1 checkpoint")
    (n,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + n].decode())
    payload = memoryview(raw)[9 + n:]
    arrays = {}
    for r in header["tensors"]:
        dt = np.dtype(r["dtype"])
        count = int(np.prod(r["shape"])) if r["shape"] else 1
        a = np.frombuffer(payload, dtype=dt, count=count, offset=r["offset"])
        arrays[r["name"]] = a.reshape(r["shape"]).copy()

    net = CLEARNet(NetConfig(**header["config"])).to(dtype)
    state = {}
    for key, arr in arrays.items():
        if key.startswith("opt/"):
            continue
        state[module_name(key)] = torch.from_numpy(arr).to(dtype)
    missing = set(dict(net.named_parameters())) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    net.load_state_dict(state, strict=False)
    params = NetParams(net, header["schedule_fingerprint"], int(header["step"]), header.get("extra", {}))
    opt = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return params, opt
