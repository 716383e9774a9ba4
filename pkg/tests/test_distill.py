"""Distillation algebra and loop tests.

The reconstruction pipeline is pinned down two independent ways: worked
scalar examples for each primitive, and the mirrored-index delta identity
plus the end anchor, which together determine the reconstructed video
uniquely. Loop orchestration is checked by replaying the rng and chaining
the public primitives by hand.
"""
import math
from fractions import Fraction

import numpy as np
import pytest

from inbetween.denoisers import (
    CallAuditor,
    FrameCondition,
    GaussianDenoiser,
    GaussianWorldSpec,
)
from inbetween.distill import (
    MpdPhasePlan,
    forward_noise_residual,
    fuse_estimates,
    init_backward_eps,
    mpd_sample,
    mpd_step,
    plan_phases,
    reconstruct_backward_eps,
    reconstruct_backward_estimate,
)
from inbetween.latents import (
    ResidualStack,
    RngStream,
    VideoLatent,
    build_schedule,
    frame_residual,
    temporal_flip,
)
from inbetween.samplers import SamplerConfig, SamplingTask, gaussian_task, run_sampler
from inbetween.stepper import euler_step_uncond_anchor, renoise


def _video(*values):
    """Scalar-per-frame video, shape (n, 1, 1, 1)."""
    return VideoLatent(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1))


def _world(mu_value=0.3, sigma_d=1.1, shape=(1, 2, 2)):
    return GaussianWorldSpec(mu=np.full(shape, mu_value), sigma_d=sigma_d)


class TestPhasePlan:
    def test_gamma_zero_disables_distillation(self):
        plan = plan_phases(25, 0.0, "parallel")
        assert plan.distill_steps == ()
        assert not any(plan.is_distill(t) for t in range(1, 26))

    def test_gamma_one_covers_every_step(self):
        plan = plan_phases(25, 1.0, "sequential")
        assert plan.distill_steps == tuple(range(25, 0, -1))

    def test_fifth_of_schedule(self):
        plan = plan_phases(25, 0.2, "sequential")
        assert plan.distill_steps == (25, 24, 23, 22, 21, 20)

    def test_three_tenths_of_schedule(self):
        plan = plan_phases(25, 0.3, "parallel")
        assert plan.distill_steps == tuple(range(25, 17, -1))
        assert len(plan.distill_steps) == 8

    def test_counts_match_exact_rational_ceiling(self):
        # The float epsilon in the boundary exists only to reproduce exact
        # rational arithmetic; check it against Fraction-based ceilings.
        for steps in range(1, 31):
            for g100 in range(0, 101, 5):
                plan = plan_phases(steps, g100 / 100.0, "parallel")
                if g100 == 0:
                    assert plan.distill_steps == ()
                    continue
                bound = max(math.ceil(Fraction(100 - g100, 100) * steps), 1)
                assert len(plan.distill_steps) == steps - bound + 1
                assert plan.distill_steps[0] == steps
                assert plan.distill_steps[-1] == bound

    def test_is_distill_boundaries(self):
        plan = plan_phases(6, 0.2, "parallel")
        assert plan.distill_steps == (6, 5)
        assert plan.is_distill(6) and plan.is_distill(5)
        assert not plan.is_distill(4) and not plan.is_distill(7)

    def test_mode_prefix_is_stripped(self):
        assert plan_phases(5, 0.5, "mpd+parallel").tail_mode == "parallel"
        assert plan_phases(5, 0.5, "mpd+sequential").tail_mode == "sequential"

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="tail_mode"):
            plan_phases(5, 0.5, "forward-only")
        with pytest.raises(ValueError, match="gamma"):
            plan_phases(5, 1.5, "parallel")
        with pytest.raises(ValueError, match="steps"):
            plan_phases(0, 0.5, "parallel")

    def test_plan_rejects_gappy_steps(self):
        with pytest.raises(ValueError, match="contiguous"):
            MpdPhasePlan((6, 4), "parallel")


class TestForwardNoiseResidual:
    def test_worked_example(self):
        dx_t = frame_residual(_video(1.0, 3.0))
        dx0 = frame_residual(_video(0.0, 1.0))
        out = forward_noise_residual(dx_t, dx0, 2.0)
        np.testing.assert_allclose(out.deltas.ravel(), [0.5])

    def test_equal_residuals_give_zero(self):
        dx = frame_residual(_video(1.0, 4.0, 2.0))
        out = forward_noise_residual(dx, dx, 3.0)
        np.testing.assert_array_equal(out.deltas, np.zeros_like(out.deltas))

    def test_rearrangement_recovers_input(self):
        rng = np.random.default_rng(0)
        dx_t = ResidualStack(rng.normal(size=(3, 1, 2, 2)))
        dx0 = ResidualStack(rng.normal(size=(3, 1, 2, 2)))
        out = forward_noise_residual(dx_t, dx0, 1.7)
        np.testing.assert_allclose(1.7 * out.deltas + dx0.deltas, dx_t.deltas, atol=1e-12)

    def test_rejects_bad_sigma_and_shapes(self):
        dx = frame_residual(_video(1.0, 2.0))
        with pytest.raises(ValueError, match="sigma"):
            forward_noise_residual(dx, dx, 0.0)
        other = frame_residual(_video(1.0, 2.0, 3.0))
        with pytest.raises(ValueError, match="disagree"):
            forward_noise_residual(dx, other, 1.0)


class TestInitBackwardEps:
    def test_worked_example(self):
        out = init_backward_eps(np.full((1, 1, 1), 5.0), np.full((1, 1, 1), 3.0), 2.0)
        np.testing.assert_allclose(out, np.full((1, 1, 1), 1.0))

    def test_on_target_gives_zero(self):
        z = np.full((1, 2, 2), 0.7)
        np.testing.assert_array_equal(init_backward_eps(z, z, 4.0), np.zeros((1, 2, 2)))

    def test_rearrangement(self):
        rng = np.random.default_rng(1)
        frame, z = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3, 3))
        eps = init_backward_eps(frame, z, 2.3)
        np.testing.assert_allclose(z + 2.3 * eps, frame, atol=1e-12)

    def test_rejects(self):
        z = np.zeros((1, 1, 1))
        with pytest.raises(ValueError, match="sigma"):
            init_backward_eps(z, z, -1.0)
        with pytest.raises(ValueError, match="shape"):
            init_backward_eps(z, np.zeros((1, 2, 1)), 1.0)


class TestReconstructBackwardEps:
    def test_worked_example(self):
        eps1 = np.full((1, 1, 1), 1.0)
        deltas = ResidualStack(np.array([0.5, -0.25]).reshape(2, 1, 1, 1))
        out = reconstruct_backward_eps(eps1, deltas)
        np.testing.assert_allclose(out.data.ravel(), [1.0, 0.5, 0.75])

    def test_zero_increments_give_constant(self):
        eps1 = np.full((1, 2, 2), 0.4)
        out = reconstruct_backward_eps(eps1, ResidualStack(np.zeros((3, 1, 2, 2))))
        for i in range(4):
            np.testing.assert_array_equal(out.frame(i), eps1)

    def test_own_residuals_are_negated_increments(self):
        rng = np.random.default_rng(2)
        deltas = ResidualStack(rng.normal(size=(4, 1, 2, 2)))
        out = reconstruct_backward_eps(rng.normal(size=(1, 2, 2)), deltas)
        np.testing.assert_allclose(frame_residual(out).deltas, -deltas.deltas, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="match"):
            reconstruct_backward_eps(np.zeros((1, 2, 2)), ResidualStack(np.zeros((2, 1, 3, 3))))


class TestReconstructBackwardEstimate:
    def test_worked_example(self):
        x_flipped = _video(5.0, 4.0, 3.0)
        eps = _video(1.0, 0.5, 0.75)
        out = reconstruct_backward_estimate(x_flipped, eps, 2.0)
        np.testing.assert_allclose(out.data.ravel(), [3.0, 3.0, 1.5])

    def test_zero_noise_returns_input(self):
        x = _video(2.0, -1.0)
        out = reconstruct_backward_estimate(x, _video(0.0, 0.0), 5.0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_rejects(self):
        x = _video(1.0, 2.0)
        with pytest.raises(ValueError, match="sigma"):
            reconstruct_backward_estimate(x, x, 0.0)
        with pytest.raises(ValueError, match="shape"):
            reconstruct_backward_estimate(x, _video(1.0, 2.0, 3.0), 1.0)


class TestFuseEstimates:
    def test_endpoints(self):
        a, b = _video(2.0, 2.0), _video(4.0, 4.0)
        np.testing.assert_array_equal(fuse_estimates(a, b, 0.0).data, a.data)
        np.testing.assert_array_equal(fuse_estimates(a, b, 1.0).data, b.data)

    def test_midpoint(self):
        out = fuse_estimates(_video(2.0, 2.0), _video(4.0, 4.0), 0.5)
        np.testing.assert_allclose(out.data.ravel(), [3.0, 3.0])

    def test_rejects(self):
        a = _video(1.0, 1.0)
        with pytest.raises(ValueError, match="lam"):
            fuse_estimates(a, a, 1.5)
        with pytest.raises(ValueError, match="shape"):
            fuse_estimates(a, _video(1.0, 1.0, 1.0), 0.5)


def _reconstruct(x: VideoLatent, estimate: VideoLatent, z_end: np.ndarray, sigma: float):
    """The full reconstruction pipeline as the sampler composes it."""
    d_eps = forward_noise_residual(frame_residual(x), frame_residual(estimate), sigma)
    x_flip = temporal_flip(x)
    eps1 = init_backward_eps(x_flip.frame(0), z_end, sigma)
    eps_bwd = reconstruct_backward_eps(eps1, d_eps)
    recon = reconstruct_backward_estimate(x_flip, eps_bwd, sigma)
    return eps_bwd, recon


class TestResidualTransfer:
    """The reconstructed video is uniquely determined by two facts checked
    here straight from the raw arrays: its last original-order frame is the
    end target, and each of its frame deltas equals the local input delta
    minus the mirrored noise surplus of the forward estimate."""

    def _random_case(self, rng, n_frames):
        shape = (n_frames, 1, 2, 2)
        sigma = float(rng.uniform(0.3, 8.0))
        x = VideoLatent(sigma * rng.normal(size=shape) + rng.normal())
        estimate = VideoLatent(rng.normal(size=shape))
        z_end = rng.normal(size=(1, 2, 2))
        return x, estimate, z_end, sigma

    def test_end_anchor_and_mirrored_deltas(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n = int(rng.integers(2, 7))
            x, estimate, z_end, sigma = self._random_case(rng, n)
            _, recon = _reconstruct(x, estimate, z_end, sigma)
            back = temporal_flip(recon).data  # original orientation
            np.testing.assert_allclose(back[-1], z_end, atol=1e-10)

            xv, ev = x.data, estimate.data
            for k in range(1, n):  # delta between original frames k-1 and k
                expect = (
                    xv[k] - xv[k - 1]
                    - (xv[n - k] - xv[n - k - 1])
                    + (ev[n - k] - ev[n - k - 1])
                )
                np.testing.assert_allclose(back[k] - back[k - 1], expect, atol=1e-10)

    def test_loss_linkage_to_noise_mismatch(self):
        # The discrepancy between the forward estimate and the flipped
        # reconstruction is exactly the squared mismatch between the
        # rebuilt backward noise (read in original order) and the forward
        # conditional noise.
        from inbetween.diagnostics import path_discrepancy_loss

        rng = np.random.default_rng(8)
        for trial in range(20):
            x, estimate, z_end, sigma = self._random_case(rng, 5)
            eps_bwd, recon = _reconstruct(x, estimate, z_end, sigma)
            loss = path_discrepancy_loss(estimate, temporal_flip(recon), sigma)
            eps_cond = (x.data - estimate.data) / sigma
            direct = float(np.sum((temporal_flip(eps_bwd).data - eps_cond) ** 2))
            np.testing.assert_allclose(loss, direct, rtol=1e-9)

    def test_perfect_estimate_reconstructs_conditionally_shifted_input(self):
        # With estimate == x the noise increments vanish, so the rebuilt
        # noise is constant and the reconstruction is x shifted frame-wise
        # by the anchor defect.
        rng = np.random.default_rng(9)
        x = VideoLatent(rng.normal(size=(4, 1, 2, 2)))
        z_end = rng.normal(size=(1, 2, 2))
        _, recon = _reconstruct(x, x, z_end, 2.0)
        defect = x.data[-1] - z_end
        np.testing.assert_allclose(temporal_flip(recon).data, x.data - defect, atol=1e-12)


class TestMpdStep:
    def _setup(self, steps=5):
        world = _world()
        z_s = world.mu + 1.0
        z_e = world.mu - 1.0
        sched = build_schedule(steps, sigma_min=0.05, sigma_max=6.0, rho=5.0)
        task = gaussian_task(world, 4, z_s, z_e)
        return world, sched, task

    def test_single_pass_unguided_is_anchored_euler(self):
        # k=1 with lam=0 fuses nothing: the step must be exactly the
        # unconditional-anchored Euler update toward the conditional
        # estimate.
        _, sched, task = self._setup()
        cfg = SamplerConfig(steps=5, mode="mpd+parallel", k=1, lam=0.0, gamma=0.5)
        t = 4
        sigma_t, sigma_prev = sched.sigma(t), sched.sigma(t - 1)
        x = VideoLatent(sigma_t * RngStream(seed=13).normal((4, 1, 2, 2)))

        out = mpd_step(
            x, task.denoiser, sched, t, task.c_start, task.z_end(), cfg, RngStream(seed=1)
        )

        pair = task.denoiser(x, sigma_t, task.c_start)
        expect = euler_step_uncond_anchor(x, pair.cond, pair.uncond, sigma_t, sigma_prev)
        np.testing.assert_array_equal(out.data, expect.data)

    def test_two_pass_step_matches_primitive_chain(self):
        _, sched, task = self._setup()
        cfg = SamplerConfig(steps=5, mode="mpd+sequential", k=2, lam=0.5, gamma=0.5)
        t = 5
        sigma_t, sigma_prev = sched.sigma(t), sched.sigma(t - 1)
        x = VideoLatent(sigma_t * RngStream(seed=14).normal((4, 1, 2, 2)))

        out = mpd_step(
            x, task.denoiser, sched, t, task.c_start, task.z_end(), cfg, RngStream(seed=2)
        )

        def one_pass(cur):
            pair = task.denoiser(cur, sigma_t, task.c_start)
            _, recon = _reconstruct(cur, pair.cond, task.z_end(), sigma_t)
            fused = fuse_estimates(pair.cond, temporal_flip(recon), 0.5)
            return euler_step_uncond_anchor(cur, fused, pair.uncond, sigma_t, sigma_prev)

        replay = RngStream(seed=2)
        lifted = renoise(one_pass(x), sigma_t, sigma_prev, replay)
        expect = one_pass(lifted)
        np.testing.assert_array_equal(out.data, expect.data)

    def test_draw_budget_is_k_minus_one(self):
        _, sched, task = self._setup()
        x = VideoLatent(sched.sigma(5) * RngStream(seed=15).normal((4, 1, 2, 2)))
        for k in (1, 2, 4):
            cfg = SamplerConfig(steps=5, mode="mpd+parallel", k=k, lam=0.5, gamma=0.5)
            rng = RngStream(seed=3)
            mpd_step(x, task.denoiser, sched, 5, task.c_start, task.z_end(), cfg, rng)
            assert rng.counter == k - 1

    def test_never_calls_the_denoiser_with_an_end_condition(self):
        world, sched, _ = self._setup()
        auditor = CallAuditor(GaussianDenoiser(world))
        cfg = SamplerConfig(steps=5, mode="mpd+parallel", k=3, lam=0.5, gamma=0.5)
        x = VideoLatent(sched.sigma(5) * RngStream(seed=16).normal((4, 1, 2, 2)))
        c_start = FrameCondition(world.mu + 1.0, "start")
        mpd_step(x, auditor, sched, 5, c_start, world.mu - 1.0, cfg, RngStream(seed=4))
        assert auditor.total == 3
        assert auditor.count_role("start") == 3
        assert auditor.count_role("end") == 0

    def test_trace_record(self):
        _, sched, task = self._setup()
        cfg = SamplerConfig(steps=5, mode="mpd+sequential", k=2, lam=1.0, gamma=0.5)
        x = VideoLatent(sched.sigma(3) * RngStream(seed=17).normal((4, 1, 2, 2)))
        trace = []
        mpd_step(
            x, task.denoiser, sched, 3, task.c_start, task.z_end(), cfg, RngStream(seed=5),
            trace=trace, snapshot=True,
        )
        (rec,) = trace
        assert rec.t == 3 and rec.sigma_t == sched.sigma(3)
        assert rec.denoiser_calls == 2
        assert rec.discrepancy_loss > 0.0
        assert rec.x0_forward is not None and rec.x0_backward is not None


class TestMpdSample:
    def _task(self):
        world = _world()
        return gaussian_task(world, 4, world.mu + 1.0, world.mu - 1.0)

    @pytest.mark.parametrize(
        "mode,baseline", [("mpd+parallel", "parallel"), ("mpd+sequential", "sequential")]
    )
    def test_gamma_zero_is_bit_exact_baseline(self, mode, baseline):
        task = self._task()
        dist_cfg = SamplerConfig.defaults_for(mode, gamma=0.0, steps=6, sigma_max=5.0, seed=3)
        base_cfg = SamplerConfig(mode=baseline, steps=6, sigma_max=5.0, seed=3)
        a, trace_a = run_sampler(task, dist_cfg)
        b, trace_b = run_sampler(task, base_cfg)
        np.testing.assert_array_equal(a.data, b.data)
        assert [r.denoiser_calls for r in trace_a] == [r.denoiser_calls for r in trace_b]

    def test_gamma_one_never_uses_end_conditioned_calls(self):
        world = _world()
        auditor = CallAuditor(GaussianDenoiser(world))
        task = SamplingTask(
            denoiser=auditor,
            n_frames=4,
            frame_shape=world.mu.shape,
            c_start=FrameCondition(world.mu + 1.0, "start"),
            c_end=FrameCondition(world.mu - 1.0, "end"),
        )
        cfg = SamplerConfig.defaults_for("mpd+sequential", gamma=1.0, steps=6, sigma_max=5.0)
        run_sampler(task, cfg)
        assert auditor.count_role("end") == 0
        assert auditor.count_role("start") == 6 * cfg.k
        assert auditor.total == 6 * cfg.k

    def test_mixed_plan_call_accounting(self):
        world = _world()
        auditor = CallAuditor(GaussianDenoiser(world))
        task = SamplingTask(
            denoiser=auditor,
            n_frames=4,
            frame_shape=world.mu.shape,
            c_start=FrameCondition(world.mu + 1.0, "start"),
            c_end=FrameCondition(world.mu - 1.0, "end"),
        )
        # steps=6, gamma=0.2 distills t in {6, 5}; k=3 inner passes each;
        # the sequential tail spends one start- and one end-conditioned
        # call on each of the remaining four steps.
        cfg = SamplerConfig.defaults_for("mpd+sequential", steps=6, sigma_max=5.0)
        run_sampler(task, cfg)
        assert auditor.count_role("start") == 2 * 3 + 4
        assert auditor.count_role("end") == 4
        assert auditor.total == 14

    def test_rejects_non_distill_mode(self):
        task = self._task()
        cfg = SamplerConfig(mode="parallel", steps=4)
        with pytest.raises(ValueError, match="mpd"):
            mpd_sample(task, cfg)

    def test_requires_end_condition(self):
        world = _world()
        task = gaussian_task(world, 4, world.mu + 1.0)
        cfg = SamplerConfig.defaults_for("mpd+parallel", steps=4)
        with pytest.raises(ValueError, match="end-frame"):
            run_sampler(task, cfg)

    def test_deterministic_replay(self):
        task = self._task()
        cfg = SamplerConfig.defaults_for("mpd+sequential", steps=4, sigma_max=5.0, seed=21)
        a, _ = run_sampler(task, cfg)
        b, _ = run_sampler(task, cfg)
        np.testing.assert_array_equal(a.data, b.data)
