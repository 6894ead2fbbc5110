"""Binary network checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then each parameter tensor as raw little-endian float32 in
layer order (W before b).  The JSON header records the architecture,
the input shape, and an optional ``extra`` dict for callers that embed
their own metadata (predictor checkpoints reuse this with a different
magic).
"""

import json
import struct

import numpy as np

from ..errors import CheckpointError
from .layers import LayerSpec
from .network import Network

MAGIC = b"CNLCKPT1"


def checkpoint_save(net: Network, path, magic: bytes = MAGIC, extra: dict | None = None):
    """Write the network to ``path``; the round trip is bitwise exact."""
    header = {
        "input_shape": list(net.input_shape),
        "layers": [s.to_dict() for s in net.specs],
        "param_shapes": [
            None if p is None else {"W": list(p["W"].shape), "b": list(p["b"].shape)}
            for p in net.params
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.params:
            if p is not None:
                fh.write(np.ascontiguousarray(p["W"], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(p["b"], dtype="<f4").tobytes())


def checkpoint_load(path, magic: bytes = MAGIC) -> Network:
    """Load a network; structured errors on bad magic or truncation."""
    net, _ = checkpoint_load_with_extra(path, magic)
    return net


def checkpoint_load_with_extra(path, magic: bytes = MAGIC):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic) + 4:
        raise CheckpointError(f"checkpoint shorter than its header: {path}")
    found = raw[:len(magic)]
    if found != magic:
        raise CheckpointError(
            f"bad checkpoint magic {found!r}, expected {magic!r}",
            found_magic=found, expected_magic=magic)
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        specs = [LayerSpec.from_dict(d) for d in header["layers"]]
        input_shape = tuple(header["input_shape"])
        shapes = header["param_shapes"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    offset = 12 + hlen
    params = []
    for entry in shapes:
        if entry is None:
            params.append(None)
            continue
        layer = {}
        for key in ("W", "b"):
            shape = tuple(entry[key])
            nbytes = int(np.prod(shape)) * 4
            chunk = raw[offset:offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"truncated parameter payload: {path}")
            layer[key] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
            offset += nbytes
        params.append(layer)
    if offset != len(raw):
        raise CheckpointError(
            f"{len(raw) - offset} trailing bytes after parameters: {path}")
    return Network(specs, input_shape, params), header.get("extra", {})
