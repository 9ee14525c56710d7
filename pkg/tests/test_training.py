import math

import numpy as np
import pytest
import torch

from supernerf import scene
from supernerf.errors import ConfigurationError
from supernerf.fields import FieldConfig, RadianceField
from supernerf.latent_sr import (BackboneConfig, box_downsample_t, super_resolve_consistent,
                                 make_texture_corpus, pretrain_sr_backbone)
from supernerf.training import (AlphaSchedule, PretrainConfig, TrainConfig, TrainState,
                                alpha, apply_hybrid_fraction, load_bundle, loss_range,
                                loss_sr, mutual_learning_step, pretrain_lr_nerf,
                                save_bundle, train_super_nerf)


def toy_dataset(n_views=4, lr=8, s=4, seed=0):
    spec = scene.SceneSpec(
        spheres=(scene.Sphere((0.0, 0.0, 0.0), 0.7, (0.8, 0.4, 0.3)),),
        plane=None,
    )
    return scene.generate_synthetic_scene(spec, n_views, seed, lr * s, lr * s, s)


def tiny_lr_config():
    return FieldConfig(2, 16, 2, 8, "LR")


def tiny_hr_config():
    return FieldConfig(3, 24, 2, 12, "HR")


@pytest.fixture(scope="module")
def tiny_backbone():
    corpus = make_texture_corpus(3, 32, 32, seed=0)
    return pretrain_sr_backbone(corpus, BackboneConfig(4, 8, 2), seed=0, steps=5)


@pytest.fixture(scope="module")
def tiny_lr_field():
    ds = apply_hybrid_fraction(toy_dataset(), 0.0)
    return pretrain_lr_nerf(ds, tiny_lr_config(), PretrainConfig(iterations=10, rays_per_step=64))


class TestAlpha:
    def test_starts_at_one(self):
        assert alpha(AlphaSchedule(tau=500), 0) == 1.0

    def test_limit_is_floor(self):
        sched = AlphaSchedule(tau=100)
        assert alpha(sched, 10**7) == 0.0
        assert alpha(AlphaSchedule(tau=100, floor=0.05), 10**7) == 0.05

    def test_exponential_value(self):
        assert abs(alpha(AlphaSchedule(tau=1000), 1000) - math.exp(-1)) < 1e-12

    def test_nonincreasing(self):
        sched = AlphaSchedule(tau=37.0)
        vals = [alpha(sched, t) for t in range(0, 370)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            AlphaSchedule(tau=0)
        with pytest.raises(ConfigurationError):
            AlphaSchedule(kind="linear")


class TestLosses:
    def test_coincident_images_zero(self):
        x = torch.rand(8, 8, 3)
        for a in (0.0, 0.3, 1.0):
            assert float(loss_sr(x, x, x, a)) == 0.0

    def test_alpha_one_ignores_hr_field_render(self):
        g = torch.Generator().manual_seed(0)
        ln, hr = torch.rand(8, 8, 3, generator=g), torch.rand(8, 8, 3, generator=g)
        a = loss_sr(ln, torch.zeros(8, 8, 3), hr, 1.0)
        b = loss_sr(ln, torch.rand(8, 8, 3, generator=g), hr, 1.0)
        assert float(a) == float(b)

    def test_alpha_zero_ignores_lr_field_render(self):
        g = torch.Generator().manual_seed(0)
        hn, hr = torch.rand(8, 8, 3, generator=g), torch.rand(8, 8, 3, generator=g)
        a = loss_sr(torch.zeros(8, 8, 3), hn, hr, 0.0)
        b = loss_sr(torch.rand(8, 8, 3, generator=g), hn, hr, 0.0)
        assert float(a) == float(b)

    def test_hand_case(self):
        ln = torch.zeros(2, 2, 3)
        hn = torch.ones(2, 2, 3)
        hr = torch.full((2, 2, 3), 0.25)
        assert abs(float(loss_sr(ln, hn, hr, 0.5)) - 0.5) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            loss_sr(torch.zeros(4, 4, 3), torch.zeros(4, 4, 3), torch.zeros(2, 2, 3), 0.5)

    def test_range_cases(self):
        assert float(loss_range(torch.rand(4, 4, 3))) == 0.0
        assert abs(float(loss_range(torch.tensor([1.5, 0.5, 0.5, 0.5]))) - 0.125) < 1e-7


class TestHybridSplit:
    def test_fraction_zero_all_lr(self):
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        assert all(v.tag == "LR" for v in ds.views)
        assert ds.views[0].image.shape == (8, 8, 3)
        assert ds.views[0].pose.width == 8

    def test_fraction_one_all_hr(self):
        ds = apply_hybrid_fraction(toy_dataset(), 1.0)
        assert all(v.tag == "HR" for v in ds.views)

    def test_partial_fraction(self):
        ds = apply_hybrid_fraction(toy_dataset(n_views=5), 0.4)
        assert sum(v.tag == "HR" for v in ds.views) == 2

    def test_requires_hr_source(self):
        lr_ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        with pytest.raises(ConfigurationError):
            apply_hybrid_fraction(lr_ds, 0.5)

    def test_degraded_views_match_box_downsample(self):
        src = toy_dataset()
        ds = apply_hybrid_fraction(src, 0.0)
        assert np.allclose(ds.views[1].image,
                           scene.box_downsample(src.views[1].image, 4))


class TestPretrainLrNerf:
    def test_zero_iterations_is_init(self):
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        f = pretrain_lr_nerf(ds, tiny_lr_config(), PretrainConfig(iterations=0))
        fresh = RadianceField(tiny_lr_config(), seed=0)
        assert np.array_equal(f.flat_parameters(), fresh.flat_parameters())

    def test_seeded_determinism(self):
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        cfg = PretrainConfig(iterations=5, rays_per_step=32, seed=3)
        a = pretrain_lr_nerf(ds, tiny_lr_config(), cfg)
        b = pretrain_lr_nerf(ds, tiny_lr_config(), cfg)
        assert np.array_equal(a.flat_parameters(), b.flat_parameters())

    def test_frozen_after_return(self):
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        f = pretrain_lr_nerf(ds, tiny_lr_config(), PretrainConfig(iterations=2, rays_per_step=16))
        assert all(not p.requires_grad for p in f.parameters())


class TestMutualLearning:
    def make_state(self, tiny_lr_field, tiny_backbone, **kw):
        cfg = TrainConfig(iterations=20, rays_per_step=32, checkpoint_every=10, **kw)
        ds = apply_hybrid_fraction(toy_dataset(), cfg.hybrid_hr_fraction)
        return TrainState(ds, tiny_lr_field, tiny_backbone, tiny_hr_config(), cfg)

    def test_report_additivity(self, tiny_lr_field, tiny_backbone):
        state = self.make_state(tiny_lr_field, tiny_backbone)
        for t in range(4):
            rep = mutual_learning_step(state, t % 4, t)
            assert rep.loss_total == rep.loss_sr + rep.loss_range
            assert rep.loss_sr >= 0 and rep.loss_range >= 0

    def test_latent_updates_preserve_lr_consistency(self, tiny_lr_field, tiny_backbone):
        state = self.make_state(tiny_lr_field, tiny_backbone)
        for t in range(8):
            mutual_learning_step(state, t % 4, t)
        for i, v in enumerate(state.dataset.views):
            out = super_resolve_consistent(state.backbone, state._lr_images[i],
                               state.store[i], state.kernel).detach()
            resid = float((box_downsample_t(out, 4) - state._lr_images[i]).abs().max())
            assert resid < 1e-5

    def test_hybrid_full_hr_has_no_codes(self, tiny_lr_field, tiny_backbone):
        state = self.make_state(tiny_lr_field, tiny_backbone, hybrid_hr_fraction=1.0)
        assert len(state.store) == 0
        rep = mutual_learning_step(state, 0, 0)
        assert rep.loss_range == 0.0

    def test_no_lr_guidance_alpha_zero(self, tiny_backbone):
        cfg = TrainConfig(iterations=5, rays_per_step=16, use_lr_guidance=False)
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        state = TrainState(ds, None, tiny_backbone, tiny_hr_config(), cfg)
        rep = mutual_learning_step(state, 0, 0)
        assert rep.alpha_t == 0.0

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(iterations=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(hybrid_hr_fraction=1.5)
        with pytest.raises(ConfigurationError):
            TrainConfig(latent_downsample=3)


class TestTrainLoop:
    def run(self, tiny_lr_field, tiny_backbone, tmp_path, tag, resume_from=None, iters=12):
        # pin the schedule so runs with different iteration counts share it
        cfg = TrainConfig(iterations=iters, rays_per_step=32, checkpoint_every=6, seed=5,
                          alpha_schedule=AlphaSchedule(tau=2.4))
        ds = apply_hybrid_fraction(toy_dataset(), 0.0)
        ckpt = tmp_path / tag
        ckpt.mkdir(exist_ok=True)
        bundle = train_super_nerf(ds, tiny_lr_field, tiny_backbone, tiny_hr_config(), cfg,
                                  checkpoint_dir=str(ckpt), resume_from=resume_from,
                                  log_path=str(tmp_path / f"{tag}.log"))
        return bundle, ckpt

    def test_deterministic_rerun(self, tiny_lr_field, tiny_backbone, tmp_path):
        b1, _ = self.run(tiny_lr_field, tiny_backbone, tmp_path, "a")
        b2, _ = self.run(tiny_lr_field, tiny_backbone, tmp_path, "b")
        assert np.array_equal(b1.hr_field.flat_parameters(), b2.hr_field.flat_parameters())
        for i in b1.latent_store.codes:
            assert torch.equal(b1.latent_store[i].values.detach(),
                               b2.latent_store[i].values.detach())

    def test_resume_matches_uninterrupted(self, tiny_lr_field, tiny_backbone, tmp_path):
        full, _ = self.run(tiny_lr_field, tiny_backbone, tmp_path, "full", iters=12)
        _, ckpt = self.run(tiny_lr_field, tiny_backbone, tmp_path, "half", iters=6)
        resumed, _ = self.run(tiny_lr_field, tiny_backbone, tmp_path, "resumed",
                              resume_from=str(ckpt / "bundle_final.pt"), iters=12)
        assert np.array_equal(full.hr_field.flat_parameters(),
                              resumed.hr_field.flat_parameters())
        for i in full.latent_store.codes:
            assert torch.equal(full.latent_store[i].values.detach(),
                               resumed.latent_store[i].values.detach())

    def test_frozen_modules_unchanged(self, tiny_lr_field, tiny_backbone, tmp_path):
        before_lr = tiny_lr_field.flat_parameters().copy()
        before_bb = tiny_backbone.flat_parameters().copy()
        self.run(tiny_lr_field, tiny_backbone, tmp_path, "frozen")
        assert np.array_equal(tiny_lr_field.flat_parameters(), before_lr)
        assert np.array_equal(tiny_backbone.flat_parameters(), before_bb)

    def test_log_stream_additivity(self, tiny_lr_field, tiny_backbone, tmp_path):
        self.run(tiny_lr_field, tiny_backbone, tmp_path, "logged")
        rows = [ln.split() for ln in (tmp_path / "logged.log").read_text().splitlines()]
        assert len(rows) == 12
        for r in rows:
            assert abs(float(r[5]) - (float(r[3]) + float(r[4]))) <= 1e-9

    def test_bundle_loadable(self, tiny_lr_field, tiny_backbone, tmp_path):
        trained, ckpt = self.run(tiny_lr_field, tiny_backbone, tmp_path, "reload")
        bundle = load_bundle(str(ckpt / "bundle_final.pt"))
        assert bundle.t == 12
        assert np.array_equal(bundle.hr_field.flat_parameters(),
                              trained.hr_field.flat_parameters())
        assert len(bundle.latent_store) == len(trained.latent_store)
