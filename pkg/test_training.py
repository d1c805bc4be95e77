# test_training.py
import math
import os
import tempfile
import unittest
from unittest.mock import patch

import torch

from body_model import template_from_config
from config import LossWeights, TrainConfig, tiny_config
from pipeline import TEMPLATE_SEED
from synth_data import SampleDataset, collate_records, generate_records
from training import (
    build_model,
    compute_losses,
    loss_2d,
    loss_3d,
    loss_nkr,
    loss_smpl,
    make_optimizer,
    pretrain_backbone,
    total_loss,
    train_student,
    train_teacher,
    train_vqvae,
)
from utils import load_json


class TestLosses(unittest.TestCase):
    def test_loss_2d_value(self):
        pred = torch.tensor([[[10.0, 10.0], [0.0, 0.0]]], dtype=torch.float64)
        gt = torch.tensor([[[13.0, 14.0], [5.0, 5.0]]], dtype=torch.float64)
        visible = torch.tensor([[True, False]])
        loss, has_visible = loss_2d(pred, gt, visible, 100)
        self.assertTrue(has_visible)
        self.assertAlmostEqual(loss.item(), 0.05, places=12)

    def test_loss_2d_without_visible_joints(self):
        pred = torch.randn(1, 3, 2, dtype=torch.float64, requires_grad=True)
        loss, has_visible = loss_2d(pred, torch.zeros(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool), 32)
        self.assertFalse(has_visible)
        self.assertEqual(loss.item(), 0.0)
        loss.backward()
        self.assertTrue(torch.equal(pred.grad, torch.zeros_like(pred)))

    def test_loss_3d_is_root_relative(self):
        gt = torch.randn(2, 5, 3, dtype=torch.float64)
        shifted = gt + torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
        self.assertAlmostEqual(loss_3d(shifted, gt).item(), 0.0, places=12)

    def test_loss_smpl_convention(self):
        rot = torch.eye(3, dtype=torch.float64).expand(2, 4, 3, 3)
        beta_gt = torch.zeros(2, 10, dtype=torch.float64)
        beta_pred = beta_gt.clone()
        beta_pred[:, :2] = 1.0
        self.assertAlmostEqual(loss_smpl(rot, beta_pred, rot, beta_gt).item(), 2.0, places=12)
        self.assertEqual(loss_smpl(rot, beta_gt, rot, beta_gt).item(), 0.0)

    def test_gradients_match_finite_differences(self):
        gen = torch.Generator().manual_seed(0)
        pred2d = torch.randn(2, 4, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        gt2d = torch.randn(2, 4, 2, generator=gen, dtype=torch.float64)
        visible = torch.tensor([[True, True, False, True], [True, False, True, True]])
        self.assertTrue(torch.autograd.gradcheck(lambda p: loss_2d(p, gt2d, visible, 8)[0], (pred2d,)))

        pred3d = torch.randn(2, 4, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        gt3d = torch.randn(2, 4, 3, generator=gen, dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda p: loss_3d(p, gt3d), (pred3d,)))

        rot = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
        beta = torch.randn(2, 5, generator=gen, dtype=torch.float64, requires_grad=True)
        rot_gt = torch.randn(2, 4, 3, 3, generator=gen, dtype=torch.float64)
        beta_gt = torch.randn(2, 5, generator=gen, dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda r, b: loss_smpl(r, b, rot_gt, beta_gt), (rot, beta)))

        student = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
        teacher = torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda s: loss_nkr([s], [teacher], 0.5)[0], (student,)))

    def test_nkr_batch_of_one_uses_mse_only(self):
        s = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        t = torch.randn(1, 4, 2, 2, dtype=torch.float64)
        loss, contrastive = loss_nkr([s], [t])
        self.assertFalse(contrastive)
        self.assertAlmostEqual(loss.item(), ((s - t) ** 2).mean().item(), places=12)

    def test_nkr_gradient_stops_at_teacher(self):
        s = torch.randn(4, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        t = torch.randn(4, 3, 2, 2, dtype=torch.float64, requires_grad=True)
        loss, contrastive = loss_nkr([s], [t])
        loss.backward()
        self.assertTrue(contrastive)
        self.assertIsNone(t.grad)
        self.assertIsNotNone(s.grad)

    def test_nkr_closed_form_for_orthogonal_features(self):
        for n, tau in ((4, 0.1), (3, 0.5), (6, 1.0)):
            eye = torch.eye(n, dtype=torch.float64).view(n, n, 1, 1)
            loss, contrastive = loss_nkr([eye], [eye.clone()], tau)
            expected = -math.log(math.exp(1.0 / tau) / (math.exp(1.0 / tau) + n - 1))
            self.assertTrue(contrastive)
            self.assertAlmostEqual(loss.item(), expected, places=9)

    def test_total_loss_weights(self):
        weights = LossWeights(lambda_2d=5.0, lambda_3d=2.0, lambda_smpl=1.0, lambda_nkr=0.1)
        parts = {k: torch.tensor(1.0) for k in ("2d", "3d", "smpl", "nkr")}
        self.assertAlmostEqual(total_loss(parts, weights).item(), 8.0, places=6)
        self.assertAlmostEqual(total_loss(parts, weights, include_nkr=True).item(), 8.1, places=6)


class TestOptimizer(unittest.TestCase):
    def test_learning_rate_drops_for_final_sixth(self):
        param = torch.nn.Parameter(torch.zeros(1))
        cfg = TrainConfig(lr=1e-4, final_lr=1e-5, final_fraction=1.0 / 6.0)
        optimizer, scheduler = make_optimizer([param], cfg.lr, cfg, total_steps=12)
        rates = []
        for _ in range(12):
            rates.append(optimizer.param_groups[0]["lr"])
            optimizer.step()
            scheduler.step()
        self.assertTrue(all(abs(r - 1e-4) < 1e-15 for r in rates[:10]))
        self.assertTrue(all(abs(r - 1e-5) < 1e-15 for r in rates[10:]))


class TestStages(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = tiny_config()
        cls.template = template_from_config(cls.config.body, seed=TEMPLATE_SEED)
        cls.dataset = SampleDataset(generate_records(cls.config, cls.template, 4, seed=0))
        cls.vqvae, cls.history = train_vqvae(cls.config, seed=0)

    def test_vqvae_history(self):
        self.assertEqual(len(self.history), self.config.codebook.epochs)
        self.assertTrue(all(torch.isfinite(torch.tensor(h["loss"])) for h in self.history))

    def test_vqvae_is_deterministic(self):
        _, again = train_vqvae(self.config, seed=0)
        self.assertEqual([h["loss"] for h in again], [h["loss"] for h in self.history])

    def test_compute_losses_components(self):
        model = build_model(self.config, self.vqvae, seed=0)
        batch = collate_records(self.dataset.records[:2])
        total, parts, _ = compute_losses(model, batch, self.config.losses, "noisy")
        self.assertTrue(torch.isfinite(total))
        self.assertEqual(set(parts), {"2d", "3d", "smpl", "smpl_params", "token_ce", "total"})

    def test_full_pipeline_writes_metrics(self):
        with tempfile.TemporaryDirectory() as tmp:
            metrics = os.path.join(tmp, "metrics.jsonl")
            backbone = pretrain_backbone(self.config, self.dataset, 0, self.template.num_regressed, metrics_path=metrics)
            teacher = train_teacher(self.config, self.dataset, self.vqvae, 0, backbone, metrics_path=metrics)
            student = train_student(self.config, self.dataset, self.vqvae, 0, teacher, backbone, metrics_path=metrics)
            with open(metrics, "r", encoding="utf-8") as f:
                stages = [line for line in f.read().splitlines() if line]
        self.assertEqual(len(stages), 3)
        self.assertIn('"nkr"', stages[-1])
        self.assertTrue(all(not p.requires_grad for p in teacher.parameters()))
        self.assertTrue(any(p.requires_grad for p in student.parameters()))

    def test_student_training_leaves_teacher_weights_unchanged(self):
        teacher = train_teacher(self.config, self.dataset, self.vqvae, 0)
        before = {k: v.clone() for k, v in teacher.state_dict().items()}
        train_student(self.config, self.dataset, self.vqvae, 0, teacher=teacher)
        after = teacher.state_dict()
        self.assertEqual(set(after), set(before))
        for name, value in before.items():
            self.assertTrue(torch.equal(after[name], value), name)

    def test_student_without_nkr_never_runs_teacher(self):
        config = self.config.model_copy(
            update={"losses": self.config.losses.model_copy(update={"lambda_nkr": 0.0})}
        )
        teacher = build_model(config, self.vqvae, seed=1)
        with patch.object(teacher.backbone, "extract_features", side_effect=AssertionError("teacher ran")) as mocked:
            train_student(config, self.dataset, self.vqvae, 0, teacher)
        mocked.assert_not_called()

    def test_pretrained_backbone_weights_are_copied(self):
        backbone = pretrain_backbone(self.config, self.dataset, 0, self.template.num_regressed)
        model = build_model(self.config, self.vqvae, seed=3, backbone=backbone)
        self.assertTrue(torch.equal(model.backbone.control.zero_convs[0].weight, backbone.control.zero_convs[0].weight))


if __name__ == "__main__":
    unittest.main()
