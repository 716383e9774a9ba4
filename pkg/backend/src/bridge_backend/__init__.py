"""Reference denoiser backend for the bridge wire protocol."""

from .protocol import ProtocolError, decode_payload, encode_payload, parse_request
from .server import handle_request, serve_stdio, serve_tcp
from .worlds import GaussianWorld, ShiftWorld, load_world

__all__ = [
    "ProtocolError",
    "decode_payload",
    "encode_payload",
    "parse_request",
    "handle_request",
    "serve_stdio",
    "serve_tcp",
    "GaussianWorld",
    "ShiftWorld",
    "load_world",
]
