# test_backbone.py
import math
import unittest

import torch
import torch.nn as nn

from backbone import (
    ControlBranch,
    DiffusionBackbone,
    LatentCodec,
    LoRALinear,
    NoiseSchedule,
    UNet,
    count_parameters,
    lora_parameters,
    pretrain_step,
    set_lora_enabled,
)
from conditioning import KeypointSet
from config import tiny_config
from exceptions import ConfigurationError, DimensionError, TimestepOutOfRangeError


def random_keypoints(batch, n, image_size, seed=0):
    gen = torch.Generator().manual_seed(seed)
    coords = torch.rand(batch, n, 2, generator=gen, dtype=torch.float64) * image_size
    visible = torch.rand(batch, n, generator=gen) > 0.2
    return KeypointSet.from_visibility(coords, visible)


class TestNoiseSchedule(unittest.TestCase):
    def setUp(self):
        self.schedule = NoiseSchedule.linear(100, 1e-4, 0.02)

    def test_alpha_bar_shape_and_order(self):
        ab = self.schedule.alpha_bar
        self.assertEqual(ab.shape[0], 101)
        self.assertEqual(ab[0].item(), 1.0)
        self.assertTrue((ab[1:] < ab[:-1]).all())
        self.assertAlmostEqual(ab[1].item(), 1.0 - 1e-4, places=12)

    def test_zero_timestep_returns_clean_latent(self):
        z0 = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(z0)
        self.assertTrue(torch.equal(self.schedule.add_noise(z0, torch.zeros(2, dtype=torch.long), eps), z0))

    def test_closed_form(self):
        z0 = torch.randn(3, 2, dtype=torch.float64)
        eps = torch.randn_like(z0)
        t = torch.tensor([5, 50, 100])
        zt = self.schedule.add_noise(z0, t, eps)
        for i, step in enumerate(t.tolist()):
            ab = self.schedule.alpha_bar[step].item()
            expected = math.sqrt(ab) * z0[i] + math.sqrt(1.0 - ab) * eps[i]
            self.assertTrue(torch.allclose(zt[i], expected, atol=1e-12))

    def test_timestep_out_of_range(self):
        z0 = torch.zeros(1, 2)
        with self.assertRaises(TimestepOutOfRangeError):
            self.schedule.add_noise(z0, torch.tensor([101]), torch.zeros(1, 2))
        with self.assertRaises(TimestepOutOfRangeError):
            self.schedule.add_noise(z0, torch.tensor([-1]), torch.zeros(1, 2))

    def test_noise_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            self.schedule.add_noise(torch.zeros(1, 2), torch.tensor([3]), torch.zeros(1, 3))

    def test_non_monotone_schedule_rejected(self):
        with self.assertRaises(ConfigurationError):
            NoiseSchedule(torch.tensor([1.0, 0.5, 0.7], dtype=torch.float64))


class TestLoRA(unittest.TestCase):
    def test_identity_at_init(self):
        torch.manual_seed(0)
        base = nn.Linear(6, 5).double()
        adapted = LoRALinear(base, rank=3).double()
        x = torch.randn(4, 6, dtype=torch.float64)
        self.assertTrue(torch.equal(adapted(x), base(x)))

    def test_update_is_low_rank(self):
        torch.manual_seed(0)
        base = nn.Linear(6, 5, bias=False).double()
        adapted = LoRALinear(base, rank=2, alpha=4.0).double()
        with torch.no_grad():
            adapted.lora_B.normal_()
        delta = adapted(torch.eye(6, dtype=torch.float64)) - base(torch.eye(6, dtype=torch.float64))
        self.assertEqual(torch.linalg.matrix_rank(delta).item(), 2)
        self.assertEqual(adapted.scaling, 2.0)

    def test_rank_zero_has_no_adapter(self):
        adapted = LoRALinear(nn.Linear(3, 3), rank=0)
        self.assertIsNone(adapted.lora_A)
        self.assertEqual(lora_parameters(adapted), [])


class TestUNetAndControl(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.cfg = tiny_config().backbone
        self.unet = UNet(self.cfg, 4, self.cfg.prompt_dim).double()
        self.z = torch.randn(2, 4, 4, 4, dtype=torch.float64)
        self.t = torch.tensor([0, 7])
        self.context = torch.randn(2, 24, self.cfg.prompt_dim, dtype=torch.float64)

    def test_output_shapes(self):
        out = self.unet(self.z, self.t, self.context)
        self.assertEqual(tuple(out.eps_pred.shape), (2, 4, 4, 4))
        self.assertEqual([tuple(f.shape[-2:]) for f in out.features], [(1, 1), (2, 2), (4, 4)])
        self.assertEqual([f.shape[1] for f in out.features], list(self.unet.skip_channels))
        self.assertEqual(tuple(out.attention[2].shape), (2, 24, 4, 4))

    def test_attention_rows_sum_to_one(self):
        out = self.unet(self.z, self.t, self.context)
        for probs in out.attention:
            self.assertTrue(torch.allclose(probs.sum(dim=1), torch.ones_like(probs[:, 0]), atol=1e-12))

    def test_fresh_control_branch_is_identity(self):
        control = ControlBranch.from_unet(self.unet, 4 + 24).double()
        c_j = torch.randn(2, 28, 4, 4, dtype=torch.float64)
        residuals = control(c_j, self.t, self.context)
        self.assertTrue(all((r == 0).all() for r in residuals))
        with_control = self.unet(self.z, self.t, self.context, residuals)
        without = self.unet(self.z, self.t, self.context)
        self.assertTrue(torch.equal(with_control.eps_pred, without.eps_pred))

    def test_residuals_match_skip_shapes(self):
        control = ControlBranch.from_unet(self.unet, 28).double()
        residuals = control(torch.randn(2, 28, 4, 4, dtype=torch.float64), self.t, self.context)
        self.assertEqual([r.shape[1] for r in residuals], list(self.unet.skip_channels))

    def test_wrong_residual_count(self):
        with self.assertRaises(DimensionError):
            self.unet(self.z, self.t, self.context, residuals=[torch.zeros(1)])

    def test_control_rejects_wrong_condition_channels(self):
        control = ControlBranch.from_unet(self.unet, 28).double()
        with self.assertRaises(DimensionError):
            control(torch.zeros(2, 5, 4, 4, dtype=torch.float64), self.t, self.context)


class TestLatentCodec(unittest.TestCase):
    def test_shapes(self):
        codec = LatentCodec(3, 4, 8)
        z = codec.encode(torch.zeros(1, 3, 32, 32))
        self.assertEqual(tuple(z.shape), (1, 4, 4, 4))
        self.assertEqual(tuple(codec.decode(z).shape), (1, 3, 32, 32))

    def test_indivisible_size(self):
        with self.assertRaises(DimensionError):
            LatentCodec(3, 4, 8).encode(torch.zeros(1, 3, 30, 32))


class TestDiffusionBackbone(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.cfg = tiny_config().backbone
        self.images = torch.rand(2, 3, 32, 32, dtype=torch.float64)
        self.kps = random_keypoints(2, 24, 32)

    def build(self, mode="z0+cj+ct"):
        return DiffusionBackbone(self.cfg, 24, 32, mode).double()

    def test_pyramid_shapes(self):
        pyramid = self.build().extract_features(self.images, self.kps)
        self.assertEqual(pyramid.shapes, [(1, 1), (2, 2), (4, 4)])
        self.assertEqual([m.shape[1] for m in pyramid.merged], [16, 16, 16])
        self.assertEqual([l.shape[1] for l in pyramid.levels], [32 + 24, 16 + 24, 8 + 24])

    def test_every_condition_mode_runs(self):
        for mode in ("z0", "z0+cj", "z0+cj_add", "z0+cj+ct"):
            backbone = self.build(mode)
            c_j, c_t = backbone.build_conditions(backbone.encode_latent(self.images), self.kps)
            expected = 4 + 24 if mode in ("z0+cj", "z0+cj+ct") else 4
            self.assertEqual(c_j.shape[1], expected, mode)
            self.assertEqual(tuple(c_t.shape), (2, 24, self.cfg.prompt_dim))
            self.assertEqual(len(backbone.extract_features(self.images, self.kps).merged), 3)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            DiffusionBackbone(self.cfg, 24, 32, "z0+ct")

    def test_lora_is_identity_at_init(self):
        backbone = self.build()
        enabled = backbone.extract_features(self.images, self.kps)
        set_lora_enabled(backbone, False)
        disabled = backbone.extract_features(self.images, self.kps)
        for a, b in zip(enabled.merged, disabled.merged):
            self.assertTrue(torch.equal(a, b))

    def test_finetune_split(self):
        backbone = self.build().configure_finetune()
        for name, p in backbone.unet.named_parameters():
            self.assertEqual(p.requires_grad, "lora_" in name, name)
        self.assertTrue(all(not p.requires_grad for p in backbone.codec.parameters()))
        self.assertTrue(all(p.requires_grad for p in backbone.control.zero_convs.parameters()))
        counts = count_parameters(backbone)
        self.assertLess(counts["trainable"], counts["total"])

    def test_pretrain_keeps_lora_frozen(self):
        backbone = self.build()
        self.assertTrue(all(not p.requires_grad for p in lora_parameters(backbone)))
        self.assertTrue(all(p.requires_grad for n, p in backbone.unet.named_parameters() if "lora_" not in n))

    def test_pretrain_step_updates_control(self):
        backbone = self.build()
        before = backbone.control.zero_convs[0].weight.detach().clone()
        optimizer = torch.optim.SGD(backbone.trainable_parameters(), lr=0.1)
        loss = pretrain_step(backbone, self.images, self.kps, torch.Generator().manual_seed(0), optimizer)
        self.assertTrue(math.isfinite(loss))
        self.assertFalse(torch.equal(before, backbone.control.zero_convs[0].weight))

    def test_pretrain_loss_is_mse_of_noise(self):
        backbone = self.build()
        loss, eps, eps_pred = backbone.pretrain_loss(
            self.images, self.kps, generator=torch.Generator().manual_seed(1), return_terms=True
        )
        self.assertAlmostEqual(loss.item(), ((eps - eps_pred) ** 2).mean().item(), places=12)

    def test_attention_mass_bounds(self):
        backbone = self.build()
        pyramid = backbone.extract_features(self.images, self.kps)
        full = backbone.attention_mass(pyramid, torch.ones(2, 24, dtype=torch.bool))
        empty = backbone.attention_mass(pyramid, torch.zeros(2, 24, dtype=torch.bool))
        self.assertTrue(torch.allclose(full, torch.ones(2, dtype=torch.float64), atol=1e-12))
        self.assertTrue(torch.equal(empty, torch.zeros(2, dtype=torch.float64)))

    def test_attention_mass_needs_attention(self):
        cfg = self.cfg.model_copy(update={"use_attention": False})
        backbone = DiffusionBackbone(cfg, 24, 32).double()
        pyramid = backbone.extract_features(self.images, self.kps)
        self.assertEqual([l.shape[1] for l in pyramid.levels], [32, 16, 8])
        with self.assertRaises(ConfigurationError):
            backbone.attention_mass(pyramid, torch.ones(2, 24, dtype=torch.bool))


if __name__ == "__main__":
    unittest.main()
