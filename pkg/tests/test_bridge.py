"""Integration tests for the TCP denoiser bridge.

Everything here needs the separately-packaged backend installed; the rest
of the suite runs without it. Coverage: single-call parity against the
in-process denoisers, full sampler loopback, harness wiring, and protocol
abuse against a live subprocess.
"""
from __future__ import annotations

import dataclasses
import json
import random
import socket
import string
import subprocess
import sys
import threading
import queue

import numpy as np
import pytest

pytest.importorskip("bridge_backend")

from bridge_backend import load_world, serve_tcp

from inbetween.bridge_client import BridgeDenoiser
from inbetween.denoisers import (
    FrameCondition,
    GaussianDenoiser,
    GaussianWorldSpec,
    MotionWorldSpec,
    ShiftWorldDenoiser,
    render_frame,
)
from inbetween.distill import mpd_sample
from inbetween.errors import BackendUnavailableError
from inbetween.latents import VideoLatent
from inbetween.samplers import SamplerConfig, gaussian_task, motion_task, run_sampler

# f32 wire quantization: 1 ulp at the largest latents we ship (~30) is 2e-6,
# and both sides compute in float64 on identical inputs.
WIRE_ATOL = 1e-5


def f32(arr: np.ndarray) -> np.ndarray:
    """Round-trip through the wire dtype so both sides see identical input."""
    return np.asarray(arr, dtype="<f4").astype(np.float64)


def start_thread_server(world_spec: dict):
    """Run the backend in-process on an ephemeral port; returns (port, thread)."""
    world = load_world(world_spec)
    announces: queue.Queue = queue.Queue()
    thread = threading.Thread(
        target=serve_tcp,
        args=(world, "127.0.0.1", 0),
        kwargs={"announce": announces.put},
        daemon=True,
    )
    thread.start()
    banner = announces.get(timeout=10.0)
    return int(str(banner).split()[-1]), thread


def spawn_backend(tmp_path, world_spec: dict) -> tuple[subprocess.Popen, int]:
    spec_path = tmp_path / "world.json"
    spec_path.write_text(json.dumps(world_spec))
    proc = subprocess.Popen(
        [sys.executable, "-m", "bridge_backend.cli", str(spec_path), "--transport", "tcp", "--port", "0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    banner = proc.stdout.readline()
    assert banner.startswith("LISTENING"), f"backend did not come up: {banner!r}"
    return proc, int(banner.split()[-1])


GAUSSIAN_SPEC = {"kind": "gaussian", "mu": 0.7, "shape": [1, 6, 6], "sigma_d": 1.3}
MOTION_SPEC = {
    "kind": "motion",
    "grid": [16, 16],
    "blob_sigma": 1.5,
    "n_frames": 5,
    "bias_velocity": [0.3, -0.2],
    "bias_strength": 1.0,
}


def gaussian_world() -> GaussianWorldSpec:
    return GaussianWorldSpec(mu=np.full((1, 6, 6), 0.7), sigma_d=1.3)


def motion_world() -> MotionWorldSpec:
    return MotionWorldSpec(
        grid=(16, 16),
        blob_sigma=1.5,
        n_frames=5,
        bias_velocity=(0.3, -0.2),
        bias_strength=1.0,
    )


@pytest.fixture(scope="module")
def gaussian_port():
    port, _ = start_thread_server(GAUSSIAN_SPEC)
    client = BridgeDenoiser("127.0.0.1", port)
    yield port
    client.shutdown()


@pytest.fixture(scope="module")
def motion_port():
    port, _ = start_thread_server(MOTION_SPEC)
    client = BridgeDenoiser("127.0.0.1", port)
    yield port
    client.shutdown()


class TestClientBasics:
    def test_ping(self, gaussian_port):
        client = BridgeDenoiser("127.0.0.1", gaussian_port)
        client.ping()
        client.close()

    def test_unreachable_endpoint(self):
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        dead_port = sock.getsockname()[1]
        sock.close()
        client = BridgeDenoiser("127.0.0.1", dead_port, timeout=2.0)
        with pytest.raises(BackendUnavailableError):
            client.ping()

    def test_bad_endpoint_string(self):
        with pytest.raises(ValueError):
            BridgeDenoiser.from_endpoint("no-port-here")

    def test_request_error_is_per_call(self, gaussian_port):
        # A shape the world rejects must fail that call only; the
        # connection stays usable for the next one.
        client = BridgeDenoiser("127.0.0.1", gaussian_port)
        bad = VideoLatent(np.zeros((3, 2, 6, 6)))
        with pytest.raises(RuntimeError, match="frame shape"):
            client(bad, 1.0, None)
        good = VideoLatent(np.zeros((3, 1, 6, 6)))
        pair = client(good, 1.0, None)
        np.testing.assert_allclose(pair.uncond.data, 0.7 / (1.3**2 + 1.0), atol=WIRE_ATOL)
        client.close()


class TestSingleCallParity:
    def test_gaussian_uncond_and_cond(self, gaussian_port):
        client = BridgeDenoiser("127.0.0.1", gaussian_port)
        local = GaussianDenoiser(gaussian_world())
        rng = np.random.default_rng(11)
        for sigma in (0.0, 0.4, 3.0, 40.0):
            x = VideoLatent(f32(rng.normal(size=(4, 1, 6, 6)) * (1.0 + sigma)))
            for cond in (None, FrameCondition(f32(rng.normal(size=(1, 6, 6))), "start"),
                         FrameCondition(f32(rng.normal(size=(1, 6, 6))), "end")):
                got = client(x, sigma, cond)
                want = local(x, sigma, cond)
                np.testing.assert_allclose(got.uncond.data, want.uncond.data, atol=WIRE_ATOL)
                np.testing.assert_allclose(got.cond.data, want.cond.data, atol=WIRE_ATOL)
        client.close()

    def test_motion_uncond_and_cond(self, motion_port):
        client = BridgeDenoiser("127.0.0.1", motion_port)
        world = motion_world()
        local = ShiftWorldDenoiser(world)
        rng = np.random.default_rng(12)
        track = np.stack(
            [render_frame(world, np.array([3.0 + t, 8.0])) for t in range(5)]
        )[:, None]
        pin = render_frame(world, np.array([3.0, 8.0]))[None]
        for sigma in (0.05, 0.8, 4.0):
            x = VideoLatent(f32(track + sigma * rng.normal(size=track.shape)))
            for cond in (None, FrameCondition(f32(pin), "start")):
                got = client(x, sigma, cond)
                want = local(x, sigma, cond)
                np.testing.assert_allclose(got.uncond.data, want.uncond.data, atol=WIRE_ATOL)
                np.testing.assert_allclose(got.cond.data, want.cond.data, atol=WIRE_ATOL)
        client.close()

    def test_random_case_conformance(self, gaussian_port, motion_port):
        # Smaller cousin of the acceptance sweep: random shapes, sigmas and
        # roles against both analytic worlds.
        rng = np.random.default_rng(13)
        g_client = BridgeDenoiser("127.0.0.1", gaussian_port)
        g_local = GaussianDenoiser(gaussian_world())
        for _ in range(60):
            n = int(rng.integers(2, 7))
            sigma = float(rng.uniform(0.0, 30.0))
            x = VideoLatent(f32(rng.normal(size=(n, 1, 6, 6)) * (1.0 + sigma)))
            role = ("none", "start", "end")[int(rng.integers(3))]
            cond = None if role == "none" else FrameCondition(f32(rng.normal(size=(1, 6, 6))), role)
            got, want = g_client(x, sigma, cond), g_local(x, sigma, cond)
            np.testing.assert_allclose(got.uncond.data, want.uncond.data, atol=WIRE_ATOL)
            np.testing.assert_allclose(got.cond.data, want.cond.data, atol=WIRE_ATOL)
        g_client.close()

        world = motion_world()
        m_client = BridgeDenoiser("127.0.0.1", motion_port)
        m_local = ShiftWorldDenoiser(world)
        for _ in range(40):
            sigma = float(rng.uniform(0.01, 6.0))
            p = rng.uniform(2.0, 14.0, size=2)
            v = rng.uniform(-1.5, 1.5, size=2)
            clean = np.stack(
                [render_frame(world, p + t * v) for t in range(world.n_frames)]
            )[:, None]
            x = VideoLatent(f32(clean + sigma * rng.normal(size=clean.shape)))
            role = ("none", "start", "end")[int(rng.integers(3))]
            cond = None if role == "none" else FrameCondition(
                f32(render_frame(world, rng.uniform(2.0, 14.0, size=2))[None]), role
            )
            got, want = m_client(x, sigma, cond), m_local(x, sigma, cond)
            np.testing.assert_allclose(got.uncond.data, want.uncond.data, atol=WIRE_ATOL)
            np.testing.assert_allclose(got.cond.data, want.cond.data, atol=WIRE_ATOL)
        m_client.close()


class TestSamplerLoopback:
    def test_forward_run_matches_in_process(self, gaussian_port):
        world = gaussian_world()
        rng = np.random.default_rng(21)
        start = rng.normal(size=(1, 6, 6))
        task = gaussian_task(world, n_frames=6, start_frame=start)
        cfg = SamplerConfig(steps=8, mode="forward-only", seed=5, sigma_max=5.0)
        local_video, _ = run_sampler(task, cfg)
        bridged = dataclasses.replace(
            task, denoiser=BridgeDenoiser("127.0.0.1", gaussian_port)
        )
        bridge_video, _ = run_sampler(bridged, cfg)
        bridged.denoiser.close()
        gap = np.max(np.abs(local_video.data - bridge_video.data))
        assert gap <= 1e-5, f"forward loopback max-abs gap {gap:.3e}"

    @pytest.mark.parametrize("mode", ["mpd+sequential", "mpd+parallel"])
    def test_mpd_run_matches_in_process(self, gaussian_port, mode):
        world = gaussian_world()
        rng = np.random.default_rng(22)
        task = gaussian_task(
            world,
            n_frames=8,
            start_frame=rng.normal(size=(1, 6, 6)),
            end_frame=rng.normal(size=(1, 6, 6)),
        )
        cfg = SamplerConfig(steps=10, mode=mode, seed=3, sigma_max=5.0)
        local_video, _ = mpd_sample(task, cfg)
        bridged = dataclasses.replace(
            task, denoiser=BridgeDenoiser("127.0.0.1", gaussian_port)
        )
        bridge_video, _ = mpd_sample(bridged, cfg)
        bridged.denoiser.close()
        gap = np.max(np.abs(local_video.data - bridge_video.data))
        assert gap <= 1e-5, f"{mode} loopback max-abs gap {gap:.3e}"


class TestSubprocessBackend:
    def test_harness_run_through_bridge(self, tmp_path):
        # End to end: the CLI checks the endpoint, swaps the denoiser and
        # produces the usual run directory.
        proc, port = spawn_backend(tmp_path, MOTION_SPEC)
        try:
            config = tmp_path / "bridge_run.yaml"
            config.write_text(
                "\n".join(
                    [
                        "world:",
                        "  kind: motion",
                        "  grid: [16, 16]",
                        "  blob_sigma: 1.5",
                        "  n_frames: 5",
                        "  bias_velocity: [0.3, -0.2]",
                        "  bias_strength: 1.0",
                        "  p_start: [3.0, 8.0]",
                        "  p_end: [12.0, 8.0]",
                        "modes: [forward-only]",
                        "seeds: {count: 1, base: 0}",
                        "sampler: {steps: 4, sigma_max: 4.0}",
                        f"bridge: 127.0.0.1:{port}",
                        f"out_dir: {tmp_path / 'out'}",
                        "",
                    ]
                )
            )
            res = subprocess.run(
                [sys.executable, "-m", "inbetween.cli", "run", str(config)],
                capture_output=True,
                text=True,
                timeout=120,
            )
            assert res.returncode == 0, res.stderr
            assert (tmp_path / "out" / "forward-only" / "base" / "0" / "report.json").exists()
        finally:
            proc.terminate()
            proc.wait(timeout=10)

    def test_fuzz_lines_then_live_ping(self, tmp_path):
        # A couple hundred hostile lines; the process must answer each with
        # one frame, never die, and still serve a clean request afterwards.
        proc, port = spawn_backend(tmp_path, GAUSSIAN_SPEC)
        try:
            rng = random.Random(77)
            sock = socket.create_connection(("127.0.0.1", port), timeout=10.0)
            fh = sock.makefile("rwb")
            for i in range(200):
                kind = rng.randrange(5)
                if kind == 0:
                    line = "".join(rng.choices(string.printable.replace("\n", "").replace("\r", ""), k=rng.randrange(1, 60))).encode()
                elif kind == 1:
                    line = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 40)))
                    line = line.replace(b"\n", b"_")
                elif kind == 2:
                    line = json.dumps({"id": i, "op": rng.choice(["denoize", "", 42, None])}).encode()
                elif kind == 3:
                    line = json.dumps({"id": i, "op": "denoise", "sigma": rng.choice(["x", -1, float("1e400")]), "shape": [1, 1, 2, 2], "cond_role": "none", "data": "AAAA"}).encode()
                else:
                    line = json.dumps({"id": i, "op": "denoise", "sigma": 1.0, "shape": [1, 1, 2, 2], "cond_role": "none", "data": "!!notbase64!!"}).encode()
                fh.write(line + b"\n")
                fh.flush()
                reply = fh.readline()
                assert reply, f"backend went silent at line {i}"
                parsed = json.loads(reply)
                assert parsed.get("status") in ("ok", "error")
            fh.close()
            sock.close()
            client = BridgeDenoiser("127.0.0.1", port)
            client.ping()
            client.shutdown()
            assert proc.wait(timeout=10) == 0
        finally:
            if proc.poll() is None:
                proc.terminate()
                proc.wait(timeout=10)
