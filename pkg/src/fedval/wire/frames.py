"""Length-prefixed binary framing for the TCP mode.

Every frame is a 4-byte big-endian length followed by one message-type
byte and the payload; the length covers the type byte plus the payload,
so the smallest legal frame is length 1. Payload scalars are packed
little-endian: client ids as unsigned 16-bit, round indices and counts as
unsigned 32-bit, reals as IEEE-754 doubles. Parameter vectors travel as a
flat run of doubles after the fixed header fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..protocol import ClientReport

MSG_HELLO = 0x01
MSG_GLOBAL_MODEL = 0x02
MSG_REPORT = 0x03
MSG_MODEL_REQUEST = 0x04
MSG_MODEL_UPLOAD = 0x05
MSG_ROUND_DONE = 0x06
MSG_ERROR = 0x7F

MSG_TYPES = frozenset(
    {
        MSG_HELLO,
        MSG_GLOBAL_MODEL,
        MSG_REPORT,
        MSG_MODEL_REQUEST,
        MSG_MODEL_UPLOAD,
        MSG_ROUND_DONE,
        MSG_ERROR,
    }
)

# Generous ceiling so a corrupt length prefix cannot demand an absurd
# allocation: a (784, 128, 10) model is ~800 KB, so 256 MB leaves room
# for models three orders of magnitude larger.
MAX_FRAME_BYTES = 256 * 1024 * 1024

_LEN = struct.Struct(">I")
_HELLO = struct.Struct("<H")
_MODEL_HEAD = struct.Struct("<IH")  # round, client_id; doubles follow
_REPORT = struct.Struct("<IHddIB")  # round, client_id, value, acc, samples, upload_ok
_REQUEST = struct.Struct("<IH")
_ROUND_DONE = struct.Struct("<IHB")  # round, client_id, terminal


class FrameError(Exception):
    """Malformed frame: bad length, unknown type, or a payload that does
    not match its message's layout."""


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes

    def encode(self) -> bytes:
        if self.msg_type not in MSG_TYPES:
            raise FrameError(f"unknown message type 0x{self.msg_type:02x}")
        length = len(self.payload) + 1
        if length > MAX_FRAME_BYTES:
            raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
        return _LEN.pack(length) + bytes([self.msg_type]) + self.payload


def parse_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the head of a buffer.

    Returns the frame and the number of bytes consumed; raises FrameError
    if the buffer holds a complete but malformed frame. An incomplete
    buffer raises too, so callers that stream should check lengths first.
    """
    if len(data) < _LEN.size:
        raise FrameError("buffer shorter than the length prefix")
    (length,) = _LEN.unpack_from(data)
    if length < 1:
        raise FrameError("frame length must cover the type byte")
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
    end = _LEN.size + length
    if len(data) < end:
        raise FrameError("buffer truncated mid-frame")
    msg_type = data[_LEN.size]
    if msg_type not in MSG_TYPES:
        raise FrameError(f"unknown message type 0x{msg_type:02x}")
    return Frame(msg_type, bytes(data[_LEN.size + 1 : end])), end


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise FrameError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Frame:
    """Block until one whole frame arrives on the socket."""
    (length,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if length < 1:
        raise FrameError("frame length must cover the type byte")
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} cap")
    body = _recv_exact(sock, length)
    msg_type = body[0]
    if msg_type not in MSG_TYPES:
        raise FrameError(f"unknown message type 0x{msg_type:02x}")
    return Frame(msg_type, body[1:])


def write_frame(sock, frame: Frame) -> None:
    sock.sendall(frame.encode())


def _expect(frame: Frame, msg_type: int, name: str) -> None:
    if frame.msg_type != msg_type:
        raise FrameError(
            f"expected {name} (0x{msg_type:02x}), got 0x{frame.msg_type:02x}"
        )


def _params_bytes(params: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(params, dtype="<f8")
    return arr.tobytes()


def _params_from(payload: bytes, offset: int, what: str) -> np.ndarray:
    body = payload[offset:]
    if len(body) % 8:
        raise FrameError(f"{what} parameter block is not a whole number of doubles")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def encode_hello(client_id: int) -> Frame:
    return Frame(MSG_HELLO, _HELLO.pack(client_id))


def decode_hello(frame: Frame) -> int:
    _expect(frame, MSG_HELLO, "HELLO")
    if len(frame.payload) != _HELLO.size:
        raise FrameError("HELLO payload must be exactly a client id")
    (client_id,) = _HELLO.unpack(frame.payload)
    return client_id


def encode_global_model(round_index: int, client_id: int, params: np.ndarray) -> Frame:
    head = _MODEL_HEAD.pack(round_index, client_id)
    return Frame(MSG_GLOBAL_MODEL, head + _params_bytes(params))


def decode_global_model(frame: Frame) -> tuple[int, int, np.ndarray]:
    _expect(frame, MSG_GLOBAL_MODEL, "GLOBAL_MODEL")
    if len(frame.payload) < _MODEL_HEAD.size:
        raise FrameError("GLOBAL_MODEL payload shorter than its header")
    round_index, client_id = _MODEL_HEAD.unpack_from(frame.payload)
    params = _params_from(frame.payload, _MODEL_HEAD.size, "GLOBAL_MODEL")
    return round_index, client_id, params


def encode_report(report: ClientReport, upload_ok: bool) -> Frame:
    payload = _REPORT.pack(
        report.round_index,
        report.client_id,
        report.value,
        report.local_acc,
        report.sample_count,
        1 if upload_ok else 0,
    )
    return Frame(MSG_REPORT, payload)


def decode_report(frame: Frame) -> tuple[ClientReport, bool]:
    _expect(frame, MSG_REPORT, "REPORT")
    if len(frame.payload) != _REPORT.size:
        raise FrameError(f"REPORT payload must be {_REPORT.size} bytes")
    round_index, client_id, value, acc, samples, upload_ok = _REPORT.unpack(
        frame.payload
    )
    report = ClientReport(
        client_id=client_id,
        value=value,
        local_acc=acc,
        sample_count=samples,
        round_index=round_index,
    )
    return report, bool(upload_ok)


def encode_model_request(round_index: int, client_id: int) -> Frame:
    return Frame(MSG_MODEL_REQUEST, _REQUEST.pack(round_index, client_id))


def decode_model_request(frame: Frame) -> tuple[int, int]:
    _expect(frame, MSG_MODEL_REQUEST, "MODEL_REQUEST")
    if len(frame.payload) != _REQUEST.size:
        raise FrameError(f"MODEL_REQUEST payload must be {_REQUEST.size} bytes")
    return _REQUEST.unpack(frame.payload)


def encode_model_upload(round_index: int, client_id: int, params: np.ndarray) -> Frame:
    head = _MODEL_HEAD.pack(round_index, client_id)
    return Frame(MSG_MODEL_UPLOAD, head + _params_bytes(params))


def decode_model_upload(frame: Frame) -> tuple[int, int, np.ndarray]:
    _expect(frame, MSG_MODEL_UPLOAD, "MODEL_UPLOAD")
    if len(frame.payload) < _MODEL_HEAD.size:
        raise FrameError("MODEL_UPLOAD payload shorter than its header")
    round_index, client_id = _MODEL_HEAD.unpack_from(frame.payload)
    params = _params_from(frame.payload, _MODEL_HEAD.size, "MODEL_UPLOAD")
    return round_index, client_id, params


def encode_round_done(round_index: int, client_id: int, terminal: bool) -> Frame:
    return Frame(MSG_ROUND_DONE, _ROUND_DONE.pack(round_index, client_id, 1 if terminal else 0))


def decode_round_done(frame: Frame) -> tuple[int, int, bool]:
    _expect(frame, MSG_ROUND_DONE, "ROUND_DONE")
    if len(frame.payload) != _ROUND_DONE.size:
        raise FrameError(f"ROUND_DONE payload must be {_ROUND_DONE.size} bytes")
    round_index, client_id, terminal = _ROUND_DONE.unpack(frame.payload)
    return round_index, client_id, bool(terminal)


def encode_error(message: str) -> Frame:
    return Frame(MSG_ERROR, message.encode("utf-8"))


def decode_error(frame: Frame) -> str:
    _expect(frame, MSG_ERROR, "ERROR")
    return frame.payload.decode("utf-8", errors="replace")
