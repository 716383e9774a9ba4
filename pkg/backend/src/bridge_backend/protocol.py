"""Wire protocol: one JSON object per line, tensors as base64 float32.

Payloads are little-endian 32-bit floats in frame-major order. Every
request carries an id; responses echo it. A request the server cannot
even attribute to an id gets an error frame with id null.
"""
from __future__ import annotations

import base64
import json
import math

import numpy as np

__all__ = [
    "MAX_PAYLOAD_BYTES",
    "MAX_LINE_BYTES",
    "ProtocolError",
    "encode_payload",
    "decode_payload",
    "parse_request",
    "ok_response",
    "error_response",
]

# Hard ceiling on a single decoded tensor; desk-scale latents are far
# smaller and anything bigger is a malformed or hostile request.
MAX_PAYLOAD_BYTES = 1 << 24
# A line longer than this cannot be a valid request for a payload we accept.
MAX_LINE_BYTES = 64 * MAX_PAYLOAD_BYTES // 16

_OPS = ("denoise", "ping", "shutdown")
_ROLES = ("start", "end", "none")


class ProtocolError(ValueError):
    """Malformed request. Carries the request id when one was readable."""

    def __init__(self, message: str, request_id=None):
        super().__init__(message)
        self.request_id = request_id


def encode_payload(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_payload(text: str, shape) -> np.ndarray:
    try:
        raw = base64.b64decode(str(text).encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise ValueError(f"payload is not valid base64: {exc}") from exc
    expect = int(math.prod(shape)) * 4
    if len(raw) != expect:
        raise ValueError(f"payload carries {len(raw)} bytes, shape {list(shape)} needs {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(tuple(shape)).astype(np.float64)


def _request_id(obj) -> object:
    rid = obj.get("id") if isinstance(obj, dict) else None
    # Only JSON scalars are echoable; anything else is as good as missing.
    return rid if isinstance(rid, (int, float, str)) or rid is None else None


def parse_request(line: bytes | str) -> dict:
    """Validate one request line into a plain dict.

    Returns {op, id} for ping/shutdown and adds sigma, cond_role, shape,
    data (ndarray), cond (ndarray or None) for denoise. Raises
    ProtocolError, with the id attached when one could be read.
    """
    if isinstance(line, bytes):
        if len(line) > MAX_LINE_BYTES:
            raise ProtocolError(f"line exceeds {MAX_LINE_BYTES} bytes")
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"line is not valid UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"line is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError(f"request must be a JSON object, got {type(obj).__name__}")
    rid = _request_id(obj)
    if rid is None and "id" in obj and obj["id"] is not None:
        raise ProtocolError("id must be a JSON scalar", None)
    op = obj.get("op")
    if op not in _OPS:
        raise ProtocolError(f"op must be one of {list(_OPS)}, got {op!r}", rid)
    if op != "denoise":
        return {"op": op, "id": rid}

    try:
        sigma = float(obj["sigma"])
    except (KeyError, TypeError, ValueError):
        raise ProtocolError("denoise needs a numeric sigma", rid) from None
    if not math.isfinite(sigma) or sigma < 0.0:
        raise ProtocolError(f"sigma must be finite and >= 0, got {sigma}", rid)

    role = obj.get("cond_role", "none")
    if role not in _ROLES:
        raise ProtocolError(f"cond_role must be one of {list(_ROLES)}, got {role!r}", rid)

    shape = obj.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 4
        or not all(isinstance(d, int) and d > 0 for d in shape)
    ):
        raise ProtocolError(f"shape must be 4 positive ints [N, C, H, W], got {shape!r}", rid)
    if math.prod(shape) * 4 > MAX_PAYLOAD_BYTES:
        raise ProtocolError(f"shape {shape} exceeds the {MAX_PAYLOAD_BYTES} byte payload limit", rid)

    if "data" not in obj:
        raise ProtocolError("denoise needs a data payload", rid)
    try:
        data = decode_payload(obj["data"], shape)
    except ValueError as exc:
        raise ProtocolError(str(exc), rid) from exc
    if not np.isfinite(data).all():
        raise ProtocolError("data payload contains non-finite values", rid)

    cond = None
    if role != "none":
        if "cond_data" not in obj:
            raise ProtocolError("cond_role set but no cond_data payload", rid)
        frame_shape = shape[1:]
        try:
            cond = decode_payload(obj["cond_data"], frame_shape)
        except ValueError as exc:
            raise ProtocolError(str(exc), rid) from exc
        if not np.isfinite(cond).all():
            raise ProtocolError("cond_data payload contains non-finite values", rid)
    elif "cond_data" in obj:
        raise ProtocolError("cond_data supplied without a cond_role", rid)

    return {"op": op, "id": rid, "sigma": sigma, "cond_role": role, "shape": shape,
            "data": data, "cond": cond}


def ok_response(rid, **fields) -> bytes:
    body = {"id": rid, "status": "ok", **fields}
    return json.dumps(body).encode("ascii") + b"\n"


def error_response(rid, message: str) -> bytes:
    body = {"id": rid, "status": "error", "error": str(message)}
    return json.dumps(body).encode("ascii") + b"\n"
