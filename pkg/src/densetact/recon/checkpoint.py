"""Binary checkpoint format.

Layout (little-endian)::

    b"DTNN" | u16 version | u32 config length | config JSON (utf-8)
    u32 n_tensors | per tensor: u16 name length, name, u8 ndim, u32 dims...
    raw float32 parameters in table order
    32-byte sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError
from .net import ReconNet

MAGIC = b"DTNN"
VERSION = 1


def checkpoint_bytes(net: ReconNet, extra: dict | None = None) -> bytes:
    config = {"arch": type(net).__name__, "net": net.config(), "extra": extra or {}}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    state = net.state_dict()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(state))]
    raw = []
    for name, t in state.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        raw.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    body = b"".join(parts + raw)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(net: ReconNet, path, extra: dict | None = None) -> str:
    data = checkpoint_bytes(net, extra)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def parse_checkpoint(data: bytes):
    """Return ``(config, {name: float32 array})`` after verifying the hash."""
    if len(data) < 4 + 6 + 4 + 32 or data[:4] != MAGIC:
        raise FormatError("not a DTNN checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint content hash mismatch")
    version, clen = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    try:
        config = json.loads(body[off:off + clen].decode())
        off += clen
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        table = []
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", body, off)
            name = body[off + 2:off + 2 + nl].decode()
            off += 2 + nl
            (nd,) = struct.unpack_from("<B", body, off)
            shape = struct.unpack_from(f"<{nd}I", body, off + 1)
            off += 1 + 4 * nd
            table.append((name, shape))
        tensors = {}
        for name, shape in table:
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            off += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return config, tensors


def load_checkpoint(path):
    """Rebuild the network; returns ``(net, extra)``."""
    config, tensors = parse_checkpoint(Path(path).read_bytes())
    if config.get("arch") != "ReconNet":
        raise FormatError(f"unknown architecture {config.get('arch')!r}")
    c = config["net"]
    net = ReconNet(channels=c["channels"], in_channels=c["in_channels"], target_range=c["target_range"],
                   seed=c["seed"], decoder_channels=c["decoder_channels"],
                   bottleneck_channels=c["bottleneck_channels"], pool=c["pool"])
    expected = net.state_dict()
    if set(expected) != set(tensors) or any(tuple(expected[k].shape) != tensors[k].shape for k in tensors):
        raise FormatError("checkpoint layer table does not match the declared architecture")
    net.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return net, config.get("extra", {})
