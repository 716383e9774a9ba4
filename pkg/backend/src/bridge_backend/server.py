"""Serving loops: one connection at a time, one request per line.

Bad input of any kind gets an error response (with the request's id when
one was readable, id null otherwise); only a shutdown request or EOF ends
a connection. The process must survive arbitrary bytes on the wire.
"""
from __future__ import annotations

import socket
import sys

from .protocol import (
    MAX_LINE_BYTES,
    ProtocolError,
    encode_payload,
    error_response,
    ok_response,
    parse_request,
)

__all__ = ["handle_request", "serve_stream", "serve_tcp", "serve_stdio"]


def handle_request(world, parsed: dict) -> tuple[bytes, bool]:
    """Evaluate one validated request; returns (response line, shutdown?)."""
    rid = parsed["id"]
    op = parsed["op"]
    if op == "ping":
        return ok_response(rid), False
    if op == "shutdown":
        return ok_response(rid), True
    try:
        uncond, cond_est = world.denoise(
            parsed["data"], parsed["sigma"], parsed["cond"], parsed["cond_role"]
        )
    except ValueError as exc:
        return error_response(rid, str(exc)), False
    return (
        ok_response(rid, x0_uncond=encode_payload(uncond), x0_cond=encode_payload(cond_est)),
        False,
    )


def _read_line(fh) -> tuple[bytes | None, bool]:
    """One newline-terminated line, or (None, False) at EOF. The second
    element flags a line that blew the length cap (its tail is drained)."""
    line = fh.readline(MAX_LINE_BYTES + 1)
    if not line:
        return None, False
    if len(line) > MAX_LINE_BYTES and not line.endswith(b"\n"):
        while True:
            chunk = fh.readline(MAX_LINE_BYTES)
            if not chunk or chunk.endswith(b"\n"):
                break
        return line, True
    return line, False


def serve_stream(world, reader, writer) -> bool:
    """Serve one byte-stream connection until EOF or shutdown.

    Returns True when a shutdown request asked the whole server to stop.
    """
    while True:
        try:
            line, overflow = _read_line(reader)
        except OSError:
            return False
        if line is None:
            return False
        if not line.strip():
            continue
        if overflow:
            writer.write(error_response(None, f"line exceeds {MAX_LINE_BYTES} bytes"))
            writer.flush()
            continue
        try:
            parsed = parse_request(line)
        except ProtocolError as exc:
            writer.write(error_response(exc.request_id, str(exc)))
            writer.flush()
            continue
        try:
            response, stop = handle_request(world, parsed)
        except Exception as exc:  # denoiser bug: report, do not die
            response, stop = error_response(parsed["id"], f"internal error: {exc}"), False
        writer.write(response)
        writer.flush()
        if stop:
            return True


def _announce_stdout(message: str) -> None:
    print(message, flush=True)


def serve_tcp(world, host: str, port: int, *, announce=_announce_stdout) -> None:
    """Bind, announce the bound port as "LISTENING <port>", and serve
    connections sequentially until a shutdown request."""
    with socket.create_server((host, port)) as server:
        announce(f"LISTENING {server.getsockname()[1]}")
        while True:
            conn, _ = server.accept()
            with conn:
                fh = conn.makefile("rwb")
                try:
                    stop = serve_stream(world, fh, fh)
                finally:
                    try:
                        fh.close()
                    except OSError:
                        pass
            if stop:
                return


def serve_stdio(world) -> None:
    """Serve a single connection over the standard streams."""
    serve_stream(world, sys.stdin.buffer, sys.stdout.buffer)
