"""Real-network mode: the round logic from `protocol` run over framed TCP.

`frames` defines the binary envelope, `server` the coordinator that drives
rounds over live connections, `client` the per-participant loop and the
partition bundle files it feeds on.
"""

from .frames import (
    Frame,
    FrameError,
    MSG_ERROR,
    MSG_GLOBAL_MODEL,
    MSG_HELLO,
    MSG_MODEL_REQUEST,
    MSG_MODEL_UPLOAD,
    MSG_REPORT,
    MSG_ROUND_DONE,
    decode_error,
    decode_global_model,
    decode_hello,
    decode_model_request,
    decode_model_upload,
    decode_report,
    decode_round_done,
    encode_error,
    encode_global_model,
    encode_hello,
    encode_model_request,
    encode_model_upload,
    encode_report,
    encode_round_done,
    parse_frame,
    read_frame,
    write_frame,
)
from .client import ClientBundle, client_main, load_bundle, save_bundle
from .server import make_bundles, serve

__all__ = [
    "Frame",
    "FrameError",
    "MSG_ERROR",
    "MSG_GLOBAL_MODEL",
    "MSG_HELLO",
    "MSG_MODEL_REQUEST",
    "MSG_MODEL_UPLOAD",
    "MSG_REPORT",
    "MSG_ROUND_DONE",
    "ClientBundle",
    "client_main",
    "load_bundle",
    "save_bundle",
    "make_bundles",
    "serve",
    "decode_error",
    "decode_global_model",
    "decode_hello",
    "decode_model_request",
    "decode_model_upload",
    "decode_report",
    "decode_round_done",
    "encode_error",
    "encode_global_model",
    "encode_hello",
    "encode_model_request",
    "encode_model_upload",
    "encode_report",
    "encode_round_done",
    "parse_frame",
    "read_frame",
    "write_frame",
]
