import numpy as np
import pytest
import torch

from mimicproj.corruption_zoo import CorruptionSpec, apply_corruption
from mimicproj.generator_zoo import generate, param_checksum
from mimicproj.projector import (NonFiniteLossError, ProjectorConfig, clip_latent,
                                 compute_loss, encoder_baseline_project, init_latents,
                                 known_f_project, mimicgan_project, pgd_project, project)
from mimicproj.surrogate import identity_surrogate, init_surrogate


class TestInitLatents:
    def test_all_rows_identical(self, mini_gan16):
        z = init_latents(mini_gan16, 7, seed=3)
        assert z.shape == (7, mini_gan16.latent_dim)
        assert (z == z[0]).all()

    def test_within_range(self, mini_gan16):
        z = init_latents(mini_gan16, 2, seed=0)
        assert z.abs().max().item() <= 1.0

    def test_near_zero_across_seeds(self, mini_gan16):
        bound = 5.0 / np.sqrt(3000.0)
        for seed in range(30):
            z = init_latents(mini_gan16, 1, seed=seed)
            assert z.abs().max().item() < bound

    def test_deterministic(self, mini_gan16):
        assert torch.equal(init_latents(mini_gan16, 3, seed=5),
                           init_latents(mini_gan16, 3, seed=5))

    def test_n_zero_rejected(self, mini_gan16):
        with pytest.raises(ValueError):
            init_latents(mini_gan16, 0, seed=0)


def test_clip_latent():
    z = np.array([1.5, -0.3, -2.0, 0.99])
    assert np.array_equal(clip_latent(z), [1.0, -0.3, -1.0, 0.99])
    t = torch.tensor([1.5, -0.3, -2.0])
    assert torch.equal(clip_latent(t), torch.tensor([1.0, -0.3, -1.0]))


class TestComputeLoss:
    def test_zero_residual(self, mini_gan16):
        cfg = ProjectorConfig(seed=0)
        z = init_latents(mini_gan16, 4, 0) + 0.1
        surr = init_surrogate(tuple(mini_gan16.resolution), seed=1)
        with torch.no_grad():
            y = surr(mini_gan16.generator(z))
        lb = compute_loss(mini_gan16, surr, z, y, cfg)
        assert float(lb.obs_term) == 0.0

    def test_zero_adv_weight(self, mini_gan16):
        cfg = ProjectorConfig(adv_weight=0.0)
        z = init_latents(mini_gan16, 2, 0)
        y = torch.zeros(2, *mini_gan16.resolution)
        lb = compute_loss(mini_gan16, None, z, y, cfg)
        assert float(lb.total) == float(lb.obs_term)

    def test_arithmetic_identity_exact(self, mini_gan16):
        cfg = ProjectorConfig(adv_weight=1e-4)
        z = init_latents(mini_gan16, 3, 1) + 0.05
        y = torch.zeros(3, *mini_gan16.resolution)
        lb = compute_loss(mini_gan16, None, z, y, cfg)
        recomputed = lb.obs_term + cfg.adv_weight * lb.adv_term
        assert float(lb.total - recomputed) == 0.0

    def test_scalar_oracle(self):
        # 2.0 + 1e-4 * (-0.5) = 1.99995
        obs = torch.tensor(2.0)
        adv = torch.tensor(-0.5)
        assert float(obs + 1e-4 * adv) == pytest.approx(1.99995, abs=1e-12)

    def test_l2_norm_option(self, mini_gan16):
        cfg = ProjectorConfig(obs_norm="L2", adv_weight=0.0)
        z = init_latents(mini_gan16, 2, 0)
        y = torch.zeros(2, *mini_gan16.resolution)
        lb = compute_loss(mini_gan16, None, z, y, cfg)
        with torch.no_grad():
            x = mini_gan16.generator(z)
        expected = np.linalg.norm(x.numpy().reshape(2, -1), axis=1).sum()
        assert float(lb.obs_term) == pytest.approx(expected, rel=1e-5)

    def test_non_finite_raises_with_term_name(self, mini_gan16):
        cfg = ProjectorConfig()
        z = init_latents(mini_gan16, 1, 0)
        y = torch.full((1, *mini_gan16.resolution), float("inf"))
        with pytest.raises(NonFiniteLossError, match="obs_term"):
            compute_loss(mini_gan16, None, z, y, cfg)

    def test_batch_mismatch_rejected(self, mini_gan16):
        cfg = ProjectorConfig()
        with pytest.raises(ValueError):
            compute_loss(mini_gan16, None, init_latents(mini_gan16, 2, 0),
                         torch.zeros(3, *mini_gan16.resolution), cfg)

    def test_gradients_match_finite_differences(self, mini_gan16):
        ckpt = mini_gan16.as_double()
        surr = init_surrogate(tuple(ckpt.resolution), seed=2).double()
        cfg = ProjectorConfig(obs_norm="L2")  # smooth a.e.; L1 kinks at 0 residual
        rng = np.random.default_rng(0)
        h = 1e-6
        for probe in range(20):
            z = torch.tensor(rng.uniform(-0.4, 0.4, (2, ckpt.latent_dim)),
                             requires_grad=True)
            y = torch.tensor(rng.uniform(-1, 1, (2, *ckpt.resolution)))
            lb = compute_loss(ckpt, surr, z, y, cfg)
            (gz,) = torch.autograd.grad(lb.total, (z,))
            d = torch.tensor(rng.standard_normal((2, ckpt.latent_dim)))
            d = d / d.norm()
            with torch.no_grad():
                fp = compute_loss(ckpt, surr, z + h * d, y, cfg).total
                fm = compute_loss(ckpt, surr, z - h * d, y, cfg).total
            fd = (fp - fm) / (2 * h)
            an = (gz * d).sum()
            rel = abs(float(fd - an)) / max(abs(float(fd)), abs(float(an)), 1e-8)
            assert rel < 1e-4, f"probe {probe}: rel err {rel}"


class TestPgd:
    def test_zero_iterations_returns_init(self, mini_gan16):
        cfg = ProjectorConfig(outer_iters=0, seed=4)
        y = np.zeros((3, *mini_gan16.resolution), dtype=np.float32)
        res = pgd_project(mini_gan16, y, cfg)
        assert np.allclose(res.z_star, init_latents(mini_gan16, 3, 4).numpy())
        assert res.mimic_error == []

    def test_fixed_point_when_initialized_at_solution(self, mini_gan16):
        cfg = ProjectorConfig(outer_iters=1, latent_iters=5, adv_weight=0.0, seed=0)
        z0 = init_latents(mini_gan16, 2, 0) + 0.2
        y = generate(mini_gan16, z0.numpy())
        res = pgd_project(mini_gan16, y, cfg, z_init=z0)
        assert res.mimic_error[-1] == 0.0
        assert np.array_equal(res.z_star, z0.numpy())

    def test_descent_on_clean_samples(self, mini_gan16, corpus16):
        cfg = ProjectorConfig(outer_iters=4, latent_iters=10, seed=0)
        finals, initials = [], []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            y = corpus16.images[rng.choice(len(corpus16), 4, replace=False)]
            res = pgd_project(mini_gan16, y, ProjectorConfig(
                outer_iters=4, latent_iters=10, seed=seed))
            initials.append(res.mimic_error[0])
            finals.append(res.mimic_error[-1])
        assert np.median(finals) <= np.median(initials)
        assert np.isfinite(finals).all()

    def test_latent_range_invariant_fuzz(self, mini_gan16, corpus16):
        cfg = ProjectorConfig(outer_iters=4, latent_iters=25, latent_lr=0.3,
                              pgd_lr=0.3, seed=1, record_latent_trace=True)
        y = corpus16.images[:3]
        res = pgd_project(mini_gan16, y, cfg)
        assert len(res.latent_trace) == 100
        for z in res.latent_trace:
            assert np.abs(z).max() <= 1.0


class TestReduction:
    def test_identity_surrogate_reduces_to_pgd(self, mini_gan16, corpus16):
        ckpt = mini_gan16.as_double()
        y = corpus16.images[:4].astype(np.float64)
        cfg = ProjectorConfig(outer_iters=1, latent_iters=10, surrogate_iters=0,
                              latent_lr=1e-2, pgd_lr=1e-2, seed=7,
                              record_latent_trace=True, early_stop_patience=0)
        pgd = pgd_project(ckpt, y, cfg)
        surr = identity_surrogate(tuple(ckpt.resolution)).double()
        mim, _ = mimicgan_project(ckpt, y, cfg, surrogate=surr, freeze_surrogate=True)
        assert len(pgd.latent_trace) == len(mim.latent_trace) == 10
        for za, zb in zip(pgd.latent_trace, mim.latent_trace):
            assert np.abs(za - zb).max() < 1e-6

    def test_known_f_identity_matches_pgd(self, mini_gan16, corpus16):
        y = corpus16.images[:3]
        cfg = ProjectorConfig(outer_iters=2, latent_iters=5, seed=3,
                              record_latent_trace=True, early_stop_patience=0)
        a = pgd_project(mini_gan16, y, cfg)
        b = known_f_project(mini_gan16, y, CorruptionSpec("identity"), cfg)
        for za, zb in zip(a.latent_trace, b.latent_trace):
            assert np.abs(za - zb).max() < 1e-7


class TestMimicgan:
    def test_zero_outer_iters(self, mini_gan16):
        cfg = ProjectorConfig(outer_iters=0, seed=2)
        y = np.zeros((2, *mini_gan16.resolution), dtype=np.float32)
        res, surr = mimicgan_project(mini_gan16, y, cfg)
        assert np.allclose(res.z_star, init_latents(mini_gan16, 2, 2).numpy())
        ref = init_surrogate(tuple(mini_gan16.resolution), seed=2)
        for p, q in zip(surr.parameters(), ref.parameters()):
            assert torch.equal(p, q)

    def test_single_observation_warns(self, mini_gan16, corpus16):
        cfg = ProjectorConfig(outer_iters=1, surrogate_iters=1, latent_iters=1, seed=0)
        with pytest.warns(UserWarning, match="single observation"):
            mimicgan_project(mini_gan16, corpus16.images[:1], cfg)

    def test_empty_batch_rejected(self, mini_gan16):
        with pytest.raises(ValueError):
            mimicgan_project(mini_gan16, np.zeros((0, *mini_gan16.resolution),
                                                  dtype=np.float32),
                             ProjectorConfig())

    def test_frozen_generator_checksums(self, mini_gan16, corpus16):
        g0 = param_checksum(mini_gan16.generator)
        d0 = param_checksum(mini_gan16.discriminator)
        cfg = ProjectorConfig(outer_iters=2, surrogate_iters=5, latent_iters=5, seed=0)
        mimicgan_project(mini_gan16, corpus16.images[:4], cfg)
        assert param_checksum(mini_gan16.generator) == g0
        assert param_checksum(mini_gan16.discriminator) == d0

    def test_mimic_error_trace_length_and_early_stop(self, mini_gan16, corpus16):
        cfg = ProjectorConfig(outer_iters=3, surrogate_iters=2, latent_iters=2,
                              seed=0, early_stop_patience=0)
        res, _ = mimicgan_project(mini_gan16, corpus16.images[:2], cfg)
        assert len(res.mimic_error) == 3
        assert res.meta["stopped_early"] is False


class TestKnownF:
    def test_non_differentiable_kind_rejected(self, mini_gan16):
        y = np.zeros((2, *mini_gan16.resolution), dtype=np.float32)
        with pytest.raises(ValueError, match="differentiable"):
            known_f_project(mini_gan16, y, CorruptionSpec("fgsm_adv", {"eps": 0.1}),
                            ProjectorConfig())

    def test_known_rotation_beats_pgd(self, mini_gan16, corpus16):
        spec = CorruptionSpec("rotate", {"angle": 30.0}, seed=5)
        rng = np.random.default_rng(0)
        x_gt = corpus16.images[rng.choice(len(corpus16), 8, replace=False)]
        y = apply_corruption(spec, x_gt).images
        cfg = ProjectorConfig(outer_iters=6, latent_iters=25, seed=0)
        blind = pgd_project(mini_gan16, y, cfg, x_gt=x_gt)
        informed = known_f_project(mini_gan16, y, spec, cfg, x_gt=x_gt)
        assert informed.d_proj.mean() < blind.d_proj.mean()


class TestEncoderBaseline:
    def test_descent_and_clipping(self, mini_gan16, corpus16):
        y = corpus16.images[:8]
        init = encoder_baseline_project(mini_gan16, y,
                                        ProjectorConfig(encoder_iters=0, seed=1), x_gt=y)
        fit = encoder_baseline_project(mini_gan16, y,
                                       ProjectorConfig(encoder_iters=60, seed=1), x_gt=y)
        assert np.isfinite(fit.d_proj).all()
        assert fit.d_proj.mean() <= init.d_proj.mean()
        assert np.abs(fit.z_star).max() <= 1.0

    def test_deterministic(self, mini_gan16, corpus16):
        y = corpus16.images[:4]
        cfg = ProjectorConfig(encoder_iters=10, seed=9)
        a = encoder_baseline_project(mini_gan16, y, cfg)
        b = encoder_baseline_project(mini_gan16, y, cfg)
        assert np.array_equal(a.z_star, b.z_star)


def test_project_dispatch(self=None, *, _unused=None):
    pass


class TestDispatch:
    def test_unknown_method(self, mini_gan16):
        with pytest.raises(ValueError, match="unknown projection method"):
            project(mini_gan16, np.zeros((1, *mini_gan16.resolution), dtype=np.float32),
                    ProjectorConfig(), "nope")

    def test_known_f_requires_spec(self, mini_gan16):
        with pytest.raises(ValueError, match="corruption spec"):
            project(mini_gan16, np.zeros((1, *mini_gan16.resolution), dtype=np.float32),
                    ProjectorConfig(), "known_f")
