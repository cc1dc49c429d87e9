"""Binary wire format shared by the simulated and socket transports.

Framing: a 4-byte big-endian length prefix, then a 1-byte kind tag, a fixed
header (sender, receiver, batch id), then the body. Tensors are encoded as a
shape list followed by raw little-endian float64 data, so equality checks on
replicated weights are plain byte comparisons.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import ParamPair, WeightSet

KIND_ACTIVATION = 1
KIND_GRADIENT = 2
KIND_WEIGHT_SNAPSHOT = 3
KIND_PROBE = 4
KIND_PROBE_ACK = 5
KIND_STATE_SYNC = 6
KIND_REPARTITION = 7
KIND_WEIGHT_FETCH = 8
KIND_WEIGHT_FETCH_ACK = 9
KIND_FETCH_DONE = 10
KIND_COMMIT = 11
KIND_BANDWIDTH_PROBE = 12
KIND_BANDWIDTH_ACK = 13

KIND_NAMES = {
    KIND_ACTIVATION: "Activation",
    KIND_GRADIENT: "Gradient",
    KIND_WEIGHT_SNAPSHOT: "WeightSnapshot",
    KIND_PROBE: "Probe",
    KIND_PROBE_ACK: "ProbeAck",
    KIND_STATE_SYNC: "StateSync",
    KIND_REPARTITION: "Repartition",
    KIND_WEIGHT_FETCH: "WeightFetch",
    KIND_WEIGHT_FETCH_ACK: "WeightFetchAck",
    KIND_FETCH_DONE: "FetchDone",
    KIND_COMMIT: "Commit",
    KIND_BANDWIDTH_PROBE: "BandwidthProbe",
    KIND_BANDWIDTH_ACK: "BandwidthAck",
}

_LEN = struct.Struct(">I")
_HEADER = struct.Struct(">Bhhq")  # kind, sender, receiver, batch_id


class WireError(ValueError):
    """Malformed frame or body."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _json_chunk(obj) -> bytes:
    raw = canonical_json(obj)
    return _LEN.pack(len(raw)) + raw


def _read_json(buf: bytes, off: int):
    (n,) = _LEN.unpack_from(buf, off)
    off += 4
    obj = json.loads(buf[off:off + n].decode("utf-8"))
    return obj, off + n


def encode_tensor(arr) -> bytes:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack(">I", a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    return head + a.astype("<f8", copy=False).tobytes()


def decode_tensor(buf: bytes, off: int = 0) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from(">I", buf, off)
    off += 4
    shape = struct.unpack_from(f">{ndim}I", buf, off)
    off += 4 * ndim
    count = 1
    for d in shape:
        count *= d
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
    return arr.astype(np.float64), off + 8 * count


def tensor_block_size(shape) -> int:
    """Independent size formula: 4 + 4*ndim header bytes plus 8 bytes per entry."""
    count = 1
    for d in shape:
        count *= d
    return 4 + 4 * len(shape) + 8 * count


def _encode_pair(pair: ParamPair | None) -> bytes:
    if pair is None:
        return b"\x00"
    return b"\x01" + encode_tensor(pair[0]) + encode_tensor(pair[1])


def _decode_pair(buf: bytes, off: int):
    flag = buf[off]
    off += 1
    if flag == 0:
        return None, off
    w, off = decode_tensor(buf, off)
    b, off = decode_tensor(buf, off)
    return (w, b), off


def encode_weightset(ws: WeightSet) -> bytes:
    out = [_json_chunk({"start": ws.start, "end": ws.end, "version": ws.version})]
    for pair in ws.params:
        out.append(_encode_pair(pair))
    for pair in ws.velocity:
        out.append(_encode_pair(pair))
    return b"".join(out)


def decode_weightset(buf: bytes, off: int = 0) -> tuple[WeightSet, int]:
    meta, off = _read_json(buf, off)
    n = meta["end"] - meta["start"] + 1
    params = []
    for _ in range(n):
        pair, off = _decode_pair(buf, off)
        params.append(pair)
    vel = []
    for _ in range(n):
        pair, off = _decode_pair(buf, off)
        vel.append(pair)
    ws = WeightSet(meta["start"], meta["end"], meta["version"], tuple(params), tuple(vel))
    return ws, off


def encode_layer_params(pair: ParamPair | None, vel: ParamPair | None) -> bytes:
    """One layer's parameters + momentum, used for fetch replies and audits."""
    return _encode_pair(pair) + _encode_pair(vel)


# --- message bodies -------------------------------------------------------

def activation_body(meta: dict, x, labels) -> bytes:
    return _json_chunk(meta) + encode_tensor(x) + encode_tensor(np.asarray(labels, dtype=np.float64))


def parse_activation_body(body: bytes):
    meta, off = _read_json(body, 0)
    x, off = decode_tensor(body, off)
    labels, _ = decode_tensor(body, off)
    return meta, x, labels.astype(np.int64)


def gradient_body(meta: dict, grad) -> bytes:
    return _json_chunk(meta) + encode_tensor(grad)


def parse_gradient_body(body: bytes):
    meta, off = _read_json(body, 0)
    grad, _ = decode_tensor(body, off)
    return meta, grad


def snapshot_body(header: dict, ws: WeightSet) -> bytes:
    return _json_chunk(header) + encode_weightset(ws)


def parse_snapshot_body(body: bytes):
    header, off = _read_json(body, 0)
    ws, _ = decode_weightset(body, off)
    return header, ws


def control_body(obj: dict) -> bytes:
    return canonical_json(obj)


def parse_control_body(body: bytes) -> dict:
    return json.loads(body.decode("utf-8"))


def fetch_ack_body(header: dict, layers: list[tuple[int, ParamPair | None, ParamPair | None]]) -> bytes:
    """header plus (layer index, params, velocity) entries in ascending order."""
    header = dict(header)
    header["layers"] = [j for j, _, _ in layers]
    out = [_json_chunk(header)]
    for _, pair, vel in layers:
        out.append(encode_layer_params(pair, vel))
    return b"".join(out)


def parse_fetch_ack_body(body: bytes):
    header, off = _read_json(body, 0)
    layers = []
    for j in header["layers"]:
        pair, off = _decode_pair(body, off)
        vel, off = _decode_pair(body, off)
        layers.append((j, pair, vel))
    return header, layers


# --- framing ---------------------------------------------------------------

def frame(kind: int, sender: int, receiver: int, batch_id: int, body: bytes) -> bytes:
    payload = _HEADER.pack(kind, sender, receiver, batch_id) + body
    return _LEN.pack(len(payload)) + payload


def parse_payload(payload: bytes):
    kind, sender, receiver, batch_id = _HEADER.unpack_from(payload, 0)
    return kind, sender, receiver, batch_id, payload[_HEADER.size:]


def read_frame(sock) -> bytes | None:
    """Read one length-prefixed payload from a socket; None on clean EOF."""
    head = _read_exact(sock, 4)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    payload = _read_exact(sock, n)
    if payload is None:
        raise WireError("truncated frame")
    return payload


def _read_exact(sock, n: int) -> bytes | None:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            if chunks:
                raise WireError("connection closed mid-frame")
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)
