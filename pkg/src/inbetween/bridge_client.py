"""Client for external denoiser backends.

One request per line of JSON over a TCP socket; tensor payloads travel as
base64-encoded little-endian float32 in frame-major order. The sampler is
sequential, so the client keeps exactly one request in flight and matches
responses by echoed id.
"""
from __future__ import annotations

import base64
import json
import socket

import numpy as np

from .denoisers import FrameCondition
from .errors import BackendUnavailableError
from .latents import VideoLatent
from .stepper import DenoisedPair

__all__ = ["BridgeDenoiser", "encode_payload", "decode_payload"]


def encode_payload(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def decode_payload(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    expect = int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise ValueError(f"payload carries {len(raw)} bytes, shape {shape} needs {expect}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


class BridgeDenoiser:
    """Denoiser protocol adapter that forwards calls to a TCP backend.

    Connection failures and protocol breakage raise BackendUnavailableError;
    an error response for a specific request raises RuntimeError with the
    backend's message.
    """

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = int(port)
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._fh = None
        self._next_id = 0

    @classmethod
    def from_endpoint(cls, endpoint: str, timeout: float = 30.0) -> "BridgeDenoiser":
        host, _, port = endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
        return cls(host, int(port), timeout)

    def _ensure_connected(self) -> None:
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            self._fh = self._sock.makefile("rwb")
        except OSError as exc:
            self._sock = None
            raise BackendUnavailableError(
                f"cannot reach denoiser backend at {self.host}:{self.port}: {exc}"
            ) from exc

    def _roundtrip(self, request: dict) -> dict:
        self._ensure_connected()
        self._next_id += 1
        request["id"] = self._next_id
        try:
            self._fh.write(json.dumps(request).encode("ascii") + b"\n")
            self._fh.flush()
            line = self._fh.readline()
        except OSError as exc:
            self.close()
            raise BackendUnavailableError(f"backend connection broke: {exc}") from exc
        if not line:
            self.close()
            raise BackendUnavailableError("backend closed the connection")
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            self.close()
            raise BackendUnavailableError(f"backend sent unparseable response: {exc}") from exc
        if response.get("id") != request["id"]:
            self.close()
            raise BackendUnavailableError(
                f"response id {response.get('id')} does not match request {request['id']}"
            )
        return response

    def ping(self) -> None:
        response = self._roundtrip({"op": "ping"})
        if response.get("status") != "ok":
            raise BackendUnavailableError(f"ping failed: {response.get('error')}")

    def shutdown(self) -> None:
        """Ask the backend process to exit, then drop the connection."""
        try:
            self._roundtrip({"op": "shutdown"})
        finally:
            self.close()

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
            except OSError:
                pass
            self._fh = None
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __call__(
        self, x_t: VideoLatent, sigma: float, cond: FrameCondition | None
    ) -> DenoisedPair:
        request = {
            "op": "denoise",
            "sigma": float(sigma),
            "cond_role": cond.role if cond is not None else "none",
            "shape": list(x_t.data.shape),
            "data": encode_payload(x_t.data),
        }
        if cond is not None:
            request["cond_data"] = encode_payload(cond.latent)
        response = self._roundtrip(request)
        if response.get("status") != "ok":
            raise RuntimeError(f"backend denoise failed: {response.get('error')}")
        try:
            uncond = decode_payload(response["x0_uncond"], x_t.data.shape)
            cond_est = decode_payload(response["x0_cond"], x_t.data.shape)
        except (KeyError, ValueError) as exc:
            self.close()
            raise BackendUnavailableError(f"malformed denoise response: {exc}") from exc
        return DenoisedPair(uncond=VideoLatent(uncond), cond=VideoLatent(cond_est))
