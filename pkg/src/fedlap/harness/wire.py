"""Binary message encoding and length-prefixed framing.

Frame: 4-byte big-endian payload length, then the payload::

    u8   kind        0 = GlobalMsg, 1 = ClientMsg
    u32  round       little endian
    u32  client id   little endian, 0xFFFFFFFF for the server
    repeated fields, in ascending tag order:
        u8   tag
        u32  count   little endian, number of float64 values
        f64  values  little endian IEEE-754

Soft labels travel as two fields: the memory ids (as float64, exact below
2**53) and the row-major label matrix, whose row count is the id count.
"""

from __future__ import annotations

import socket
import struct

import numpy as np

from ..errors import WireError
from ..strategies import SERVER_ID, ClientMsg, GlobalMsg

KIND_GLOBAL = 0
KIND_CLIENT = 1
MAX_FRAME = 1 << 30

TAG_W_G = 1
TAG_S_G = 2
TAG_V = 3
TAG_V_DIAG = 4
TAG_W = 5
TAG_SOFT_IDS = 6
TAG_SOFT = 7

_GLOBAL_FIELDS = {TAG_W_G: "w_g", TAG_S_G: "S_g", TAG_SOFT_IDS: "soft_label_ids", TAG_SOFT: "soft_labels"}
_CLIENT_FIELDS = {TAG_V: "v", TAG_V_DIAG: "V", TAG_W: "w", TAG_SOFT_IDS: "soft_label_ids",
                  TAG_SOFT: "soft_labels"}

_HEADER = struct.Struct("<BII")
_FIELD = struct.Struct("<BI")
_LEN = struct.Struct(">I")


def _fields_of(msg) -> list[tuple[int, np.ndarray]]:
    table = _GLOBAL_FIELDS if isinstance(msg, GlobalMsg) else _CLIENT_FIELDS
    out = []
    for tag, name in sorted(table.items()):
        value = getattr(msg, name)
        if value is None:
            continue
        out.append((tag, np.asarray(value, dtype="<f8").ravel()))
    return out


def encode_payload(msg: GlobalMsg | ClientMsg) -> bytes:
    if isinstance(msg, GlobalMsg):
        kind, cid = KIND_GLOBAL, SERVER_ID
    elif isinstance(msg, ClientMsg):
        kind, cid = KIND_CLIENT, msg.client_id
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    if (msg.soft_labels is None) != (msg.soft_label_ids is None):
        raise WireError("soft labels and their ids must travel together")
    parts = [_HEADER.pack(kind, msg.round, cid)]
    for tag, values in _fields_of(msg):
        parts.append(_FIELD.pack(tag, values.size))
        parts.append(values.tobytes())
    return b"".join(parts)


def encode_msg(msg: GlobalMsg | ClientMsg) -> bytes:
    payload = encode_payload(msg)
    return _LEN.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> GlobalMsg | ClientMsg:
    if len(payload) < _HEADER.size:
        raise WireError(f"truncated header: {len(payload)} bytes")
    kind, rnd, cid = _HEADER.unpack_from(payload, 0)
    if kind == KIND_GLOBAL:
        table = _GLOBAL_FIELDS
    elif kind == KIND_CLIENT:
        table = _CLIENT_FIELDS
    else:
        raise WireError(f"unknown message kind {kind}")
    pos = _HEADER.size
    values: dict[str, np.ndarray] = {}
    last_tag = 0
    while pos < len(payload):
        if len(payload) - pos < _FIELD.size:
            raise WireError("truncated field header")
        tag, count = _FIELD.unpack_from(payload, pos)
        pos += _FIELD.size
        if tag not in table:
            raise WireError(f"unknown field tag {tag} for message kind {kind}")
        if tag <= last_tag:
            raise WireError(f"field tag {tag} out of order or repeated")
        last_tag = tag
        nbytes = 8 * count
        if nbytes > len(payload) - pos:
            raise WireError(f"field {tag} claims {count} values but only {len(payload) - pos} bytes remain")
        values[table[tag]] = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += nbytes

    ids = values.get("soft_label_ids")
    soft = values.get("soft_labels")
    if (ids is None) != (soft is None):
        raise WireError("soft labels and their ids must travel together")
    if ids is not None:
        if len(ids) == 0:
            soft = soft.reshape(0, 0) if soft.size == 0 else None
            if soft is None:
                raise WireError("soft labels present without ids")
        else:
            if soft.size % len(ids):
                raise WireError(f"{soft.size} soft-label values do not split into {len(ids)} rows")
            soft = soft.reshape(len(ids), -1)
        values["soft_label_ids"] = ids.astype(np.int64)
        values["soft_labels"] = soft
    if kind == KIND_GLOBAL:
        if cid != SERVER_ID:
            raise WireError(f"global message with client id {cid}")
        if "w_g" not in values:
            raise WireError("global message without w_g")
        return GlobalMsg(round=rnd, **values)
    return ClientMsg(client_id=cid, round=rnd, **values)


def decode_msg(frame: bytes) -> GlobalMsg | ClientMsg:
    if len(frame) < _LEN.size:
        raise WireError("truncated length prefix")
    (n,) = _LEN.unpack_from(frame, 0)
    if n > MAX_FRAME:
        raise WireError(f"frame length {n} exceeds the {MAX_FRAME}-byte limit")
    if len(frame) - _LEN.size != n:
        raise WireError(f"frame says {n} payload bytes, got {len(frame) - _LEN.size}")
    return decode_payload(frame[_LEN.size:])


def msgs_equal(a, b) -> bool:
    """Bit-level equality of two messages (NaNs compare by bit pattern)."""
    if type(a) is not type(b) or encode_payload(a) != encode_payload(b):
        return False
    return True


# --- socket framing ---------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int, allow_eof: bool) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0 and allow_eof:
                return None
            raise WireError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def send_msg(sock: socket.socket, msg) -> int:
    data = encode_msg(msg)
    sock.sendall(data)
    return len(data)


def recv_msg(sock: socket.socket):
    """Next message, or None on a clean end of stream."""
    head = _recv_exact(sock, _LEN.size, allow_eof=True)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise WireError(f"frame length {n} exceeds the {MAX_FRAME}-byte limit")
    return decode_payload(_recv_exact(sock, n, allow_eof=False))
