# test_conditioning.py
import math
import unittest

import torch

from conditioning import (
    HeatmapAddEncoder,
    KeypointPromptMLP,
    KeypointSet,
    build_condition,
    corrupt_keypoints,
    embed_keypoints,
    make_heatmaps,
)
from config import NoiseConfig
from exceptions import ConfigurationError, DimensionError
from validation import validate_keypoints


def keypoints(coords, visible=None, confidence=None):
    coords = torch.tensor(coords, dtype=torch.float64)
    n = coords.shape[-2]
    visible = torch.ones(n, dtype=torch.bool) if visible is None else torch.tensor(visible)
    confidence = visible.to(torch.float64) if confidence is None else torch.tensor(confidence, dtype=torch.float64)
    return KeypointSet(coords, confidence, visible)


class TestHeatmaps(unittest.TestCase):
    def test_peak_at_pixel_centre(self):
        hm = make_heatmaps(keypoints([[10.5, 7.5]]), sigma=2.0, height=16, width=16)
        self.assertEqual(hm.maps[0, 7, 10].item(), 1.0)
        self.assertEqual(hm.maps.max().item(), 1.0)

    def test_invisible_channel_is_zero(self):
        hm = make_heatmaps(keypoints([[4.0, 4.0], [8.0, 8.0]], visible=[True, False]), 2.0, 16, 16)
        self.assertTrue((hm.maps[1] == 0).all())
        self.assertTrue((hm.maps[0] > 0).any())

    def test_matches_pointwise_kernel(self):
        u, v, sigma, conf = 5.37, 9.81, 1.7, 0.8
        hm = make_heatmaps(keypoints([[u, v]], confidence=[conf]), sigma, 12, 14)
        for y in range(12):
            for x in range(14):
                expected = conf * math.exp(-((x + 0.5 - u) ** 2 + (y + 0.5 - v) ** 2) / (2 * sigma**2))
                self.assertAlmostEqual(hm.maps[0, y, x].item(), expected, delta=1e-9)

    def test_rescales_image_pixels(self):
        hm = make_heatmaps(keypoints([[42.0, 18.0]]), 1.0, 8, 8, image_size=64)
        peak = torch.argmax(hm.maps[0]).item()
        self.assertEqual(divmod(peak, 8), (2, 5))

    def test_homogeneous_in_confidence(self):
        full = make_heatmaps(keypoints([[3.2, 6.1]], confidence=[1.0]), 2.0, 10, 10)
        half = make_heatmaps(keypoints([[3.2, 6.1]], confidence=[0.5]), 2.0, 10, 10)
        self.assertTrue(torch.allclose(half.maps, 0.5 * full.maps, atol=1e-15))

    def test_argmax_is_nearest_pixel(self):
        gen = torch.Generator().manual_seed(0)
        coords = torch.rand(20, 2, generator=gen, dtype=torch.float64) * 15.0
        hm = make_heatmaps(KeypointSet.from_visibility(coords, torch.ones(20, dtype=torch.bool)), 1.5, 16, 16)
        for n in range(20):
            y, x = divmod(torch.argmax(hm.maps[n]).item(), 16)
            self.assertEqual((x, y), (int(coords[n, 0].item()), int(coords[n, 1].item())))

    def test_far_outside_frame_is_invisible(self):
        hm = make_heatmaps(keypoints([[100.0, 5.0]]), 2.0, 16, 16)
        self.assertTrue((hm.maps == 0).all())

    def test_channel_max_bounded_by_confidence(self):
        hm = make_heatmaps(keypoints([[3.9, 2.2], [7.1, 1.0]], confidence=[0.3, 0.9]), 2.0, 8, 8)
        self.assertLessEqual(hm.maps[0].max().item(), 0.3 + 1e-6)
        self.assertLessEqual(hm.maps[1].max().item(), 0.9 + 1e-6)

    def test_sigma_must_be_positive(self):
        with self.assertRaises(ConfigurationError):
            make_heatmaps(keypoints([[1.0, 1.0]]), 0.0, 4, 4)


class TestBuildCondition(unittest.TestCase):
    def test_concatenates_latent_first(self):
        z0 = torch.randn(4, 32, 32, dtype=torch.float64)
        maps = torch.rand(24, 32, 32, dtype=torch.float64)
        c = build_condition(z0, maps)
        self.assertEqual(tuple(c.shape), (28, 32, 32))
        self.assertTrue(torch.equal(c[:4], z0))
        for n in range(24):
            self.assertTrue(torch.equal(c[4 + n], maps[n]))

    def test_zero_heatmaps_keep_latent(self):
        z0 = torch.randn(2, 4, 8, 8)
        c = build_condition(z0, torch.zeros(2, 3, 8, 8))
        self.assertTrue(torch.equal(c[:, :4], z0))

    def test_size_mismatch_raises(self):
        with self.assertRaises(DimensionError):
            build_condition(torch.zeros(4, 8, 8), torch.zeros(3, 4, 4))

    def test_add_encoder_keeps_latent_shape(self):
        enc = HeatmapAddEncoder(num_keypoints=3, latent_channels=4)
        out = enc(torch.zeros(2, 4, 8, 8), torch.rand(2, 3, 8, 8))
        self.assertEqual(tuple(out.shape), (2, 4, 8, 8))


class TestPromptEmbedding(unittest.TestCase):
    def test_token_shape(self):
        mlp = KeypointPromptMLP(num_keypoints=24, hidden=32, token_dim=16)
        kps = keypoints(torch.rand(24, 2).mul(64).tolist())
        self.assertEqual(tuple(embed_keypoints(kps, mlp, 64).tokens.shape), (24, 16))

    def test_zero_weights_give_final_bias(self):
        mlp = KeypointPromptMLP(num_keypoints=5, hidden=8, token_dim=6).double()
        with torch.no_grad():
            mlp.fc1.weight.zero_()
            mlp.fc1.bias.zero_()
            mlp.fc2.weight.zero_()
            mlp.fc2.bias.copy_(torch.arange(6, dtype=torch.float64))
        tokens = embed_keypoints(keypoints(torch.rand(5, 2).tolist()), mlp, 32).tokens
        self.assertTrue(torch.equal(tokens, torch.arange(6, dtype=torch.float64).expand(5, 6)))

    def test_invisible_joints_use_sentinel(self):
        mlp = KeypointPromptMLP(num_keypoints=2, hidden=8, token_dim=4).double()
        a = embed_keypoints(keypoints([[1.0, 1.0], [5.0, 5.0]], visible=[False, True]), mlp, 32).tokens
        b = embed_keypoints(keypoints([[20.0, 3.0], [5.0, 5.0]], visible=[False, True]), mlp, 32).tokens
        self.assertTrue(torch.equal(a, b))

    def test_gradient_matches_finite_differences(self):
        mlp = KeypointPromptMLP(num_keypoints=3, hidden=8, token_dim=4).double()
        visible = torch.ones(3, dtype=torch.bool)

        def fn(coords):
            return embed_keypoints(KeypointSet(coords, visible.double(), visible), mlp, 32).tokens

        coords = (torch.rand(3, 2, dtype=torch.float64) * 32).requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(fn, (coords,), eps=1e-6, atol=1e-6, rtol=1e-4))

    def test_joint_count_mismatch_raises(self):
        mlp = KeypointPromptMLP(num_keypoints=4, hidden=8, token_dim=4)
        with self.assertRaises(DimensionError):
            embed_keypoints(keypoints([[1.0, 1.0]]), mlp, 32)


class TestCorruptKeypoints(unittest.TestCase):
    def setUp(self):
        gen = torch.Generator().manual_seed(0)
        coords = torch.rand(24, 2, generator=gen, dtype=torch.float64) * 64
        self.gt = KeypointSet.from_visibility(coords, torch.ones(24, dtype=torch.bool))

    def test_zero_config_is_identity(self):
        cfg = NoiseConfig(jitter_sigma=0.0, miss_prob=0.0, swap_prob=0.0)
        out = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(1))
        self.assertTrue(torch.equal(out.coords, self.gt.coords))
        self.assertTrue(torch.equal(out.confidence, self.gt.confidence))
        self.assertTrue(torch.equal(out.visible, self.gt.visible))

    def test_miss_everything(self):
        cfg = NoiseConfig(jitter_sigma=1.0, miss_prob=1.0, swap_prob=0.0)
        out = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(1))
        self.assertFalse(out.visible.any())
        self.assertTrue((out.confidence == 0).all())
        self.assertTrue(validate_keypoints(out))

    def test_swap_exchanges_pairs(self):
        cfg = NoiseConfig(jitter_sigma=0.0, miss_prob=0.0, swap_prob=1.0, swap_pairs=[(1, 2)])
        out = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(1))
        self.assertTrue(torch.equal(out.coords[1], self.gt.coords[2]))
        self.assertTrue(torch.equal(out.coords[2], self.gt.coords[1]))
        self.assertTrue(torch.equal(out.coords[0], self.gt.coords[0]))

    def test_jitter_std(self):
        coords = torch.zeros(100000, 1, 2, dtype=torch.float64)
        gt = KeypointSet.from_visibility(coords, torch.ones(100000, 1, dtype=torch.bool))
        cfg = NoiseConfig(jitter_sigma=4.0, miss_prob=0.0, swap_prob=0.0, swap_pairs=[])
        out = corrupt_keypoints(gt, cfg, torch.Generator().manual_seed(2))
        for axis in range(2):
            self.assertAlmostEqual(out.coords[..., axis].std().item(), 4.0, delta=0.08)

    def test_confidence_decays_with_displacement(self):
        cfg = NoiseConfig(jitter_sigma=3.0, miss_prob=0.0, swap_prob=0.0, swap_pairs=[])
        out = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(3))
        disp2 = ((out.coords - self.gt.coords) ** 2).sum(-1)
        expected = torch.exp(-disp2 / (2.0 * 9.0**2))
        self.assertTrue(torch.allclose(out.confidence, expected, atol=1e-12))

    def test_deterministic_given_seed(self):
        cfg = NoiseConfig()
        a = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(5))
        b = corrupt_keypoints(self.gt, cfg, torch.Generator().manual_seed(5))
        self.assertTrue(torch.equal(a.coords, b.coords))
        self.assertTrue(torch.equal(a.visible, b.visible))


if __name__ == "__main__":
    unittest.main()
