"""Wire formats: the 23-byte fragment header and control-channel frames.

Fragment datagram (network byte order)::

    magic        4s  b"JNS1"
    msg_type     B   0 = data/parity fragment, 1 = rate probe
    level        B   1-based level number
    ftg_index    I   FTG number within the level
    frag_index   B   position in the group, data first
    k            B   data fragments in the group
    m            B   parity fragments in the group
    global_seq   Q   per-session send counter, retransmissions included
    payload_len  H   bytes that follow

Control frames travel over a stream socket as ``u32 length`` (covering the
rest), ``u8 version``, ``u8 type`` and a UTF-8 JSON body.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

MAGIC = b"JNS1"
HEADER = struct.Struct("!4sBBIBBBQH")
HEADER_SIZE = HEADER.size  # 23

MSG_FRAGMENT = 0
MSG_PROBE = 1

CONTROL_VERSION = 1
_FRAME = struct.Struct("!IBB")
MAX_FRAME = 64 << 20

SESSION_START = 1
SESSION_READY = 2
LOSS_RATE_UPDATE = 3
TRANSMISSION_ENDED = 4
LOST_FTG_LIST = 5
SESSION_DONE = 6
SESSION_ABORT = 7
PROBE_DONE = 8
PROBE_RESULT = 9

CONTROL_NAMES = {
    SESSION_START: "SessionStart",
    SESSION_READY: "SessionReady",
    LOSS_RATE_UPDATE: "LossRateUpdate",
    TRANSMISSION_ENDED: "TransmissionEnded",
    LOST_FTG_LIST: "LostFtgList",
    SESSION_DONE: "SessionDone",
    SESSION_ABORT: "SessionAbort",
    PROBE_DONE: "ProbeDone",
    PROBE_RESULT: "ProbeResult",
}


class WireError(ValueError):
    pass


class ControlClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Packet:
    level: int
    ftg_index: int
    fragment_index: int
    k: int
    m: int
    global_seq: int
    payload: bytes
    msg_type: int = MSG_FRAGMENT

    def encode(self) -> bytes:
        if self.msg_type == MSG_FRAGMENT and self.fragment_index >= self.k + self.m:
            raise WireError("fragment index outside its group")
        try:
            head = HEADER.pack(
                MAGIC, self.msg_type, self.level, self.ftg_index, self.fragment_index,
                self.k, self.m, self.global_seq, len(self.payload),
            )
        except struct.error as exc:
            raise WireError(str(exc)) from exc
        return head + self.payload

    @classmethod
    def decode(cls, buf: bytes) -> "Packet":
        if len(buf) < HEADER_SIZE:
            raise WireError(f"datagram of {len(buf)} bytes is shorter than the header")
        magic, mtype, level, ftg, frag, k, m, seq, plen = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise WireError("bad magic")
        if len(buf) != HEADER_SIZE + plen:
            raise WireError(f"payload length {plen} disagrees with datagram size {len(buf)}")
        if mtype == MSG_FRAGMENT and frag >= k + m:
            raise WireError("fragment index outside its group")
        return cls(level, ftg, frag, k, m, seq, bytes(buf[HEADER_SIZE:]), mtype)


def encode_header(level, ftg_index, fragment_index, k, m, global_seq, payload_len, msg_type=MSG_FRAGMENT) -> bytes:
    return HEADER.pack(MAGIC, msg_type, level, ftg_index, fragment_index, k, m, global_seq, payload_len)


# -- control frames ---------------------------------------------------------------


def encode_control(mtype: int, body: dict | None = None) -> bytes:
    data = json.dumps(body or {}, separators=(",", ":")).encode()
    return _FRAME.pack(len(data) + 2, CONTROL_VERSION, mtype) + data


def _decode_body(version: int, mtype: int, data: bytes) -> tuple[int, dict]:
    if version != CONTROL_VERSION:
        raise WireError(f"control version {version} not supported")
    if mtype not in CONTROL_NAMES:
        raise WireError(f"unknown control type {mtype}")
    try:
        body = json.loads(data.decode()) if data else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError(f"bad control body: {exc}") from exc
    if not isinstance(body, dict):
        raise WireError("control body must be a JSON object")
    return mtype, body


class FrameBuffer:
    """Incremental frame decoder for non-blocking readers."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, dict]]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (length,) = struct.unpack_from("!I", self._buf)
            if length < 2 or length > MAX_FRAME:
                raise WireError(f"bad frame length {length}")
            if len(self._buf) < 4 + length:
                break
            version, mtype = self._buf[4], self._buf[5]
            data = bytes(self._buf[6 : 4 + length])
            del self._buf[: 4 + length]
            out.append(_decode_body(version, mtype, data))
        return out


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks, got = [], 0
    while got < size:
        chunk = sock.recv(size - got)
        if not chunk:
            raise ControlClosed("control channel closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_control(sock: socket.socket) -> tuple[int, dict]:
    """Blocking read of one frame."""
    length, version, mtype = _FRAME.unpack(_recv_exact(sock, _FRAME.size))
    if length < 2 or length > MAX_FRAME:
        raise WireError(f"bad frame length {length}")
    return _decode_body(version, mtype, _recv_exact(sock, length - 2))


def send_control(sock: socket.socket, mtype: int, body: dict | None = None) -> None:
    sock.sendall(encode_control(mtype, body))
