import unittest
from pathlib import Path

import sys

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "bin"))

import torch  # noqa: E402

import ghost_stereo_model as model_mod  # noqa: E402
from ghost_stereo_train import stereo_loss  # noqa: E402
from ghost_stereo_types import ModelConfig, ShapeMismatch, preset_configs  # noqa: E402
from test.support.oracles import gradcheck_sampled, gradients_agree  # noqa: E402


def miniature_config(**changes) -> ModelConfig:
    base = dict(
        max_disparity=32,
        num_groups=4,
        topk=8,
        stem_channels=4,
        feature_channels=(4, 8, 8, 8),
        bypass_channels=4,
        fused_channels=8,
        aggregation_channels=(4, 4, 8, 8),
        upsample_hidden=8,
        seed=0,
    )
    base.update(changes)
    return ModelConfig(**base)


class GhostStereoTests(unittest.TestCase):
    def test_desk_forward_shapes_and_bounds(self):
        cfg, _ = preset_configs("desk")
        net = model_mod.build_model(cfg).eval()
        left, right = torch.rand(2, 3, 64, 96), torch.rand(2, 3, 64, 96)
        with torch.no_grad():
            pred = net(left, right)
        self.assertEqual((2, 64, 96), tuple(pred.full.values.shape))
        self.assertEqual((2, 16, 24), tuple(pred.quarter.values.shape))
        self.assertEqual((2, 8, 16, 24), tuple(pred.scores.shape))
        self.assertTrue(pred.quarter.is_valid())
        self.assertLessEqual(float(pred.quarter.values.max()), cfg.disparity_levels - 1 + 1e-5)
        self.assertLessEqual(float(pred.full.values.max()), cfg.max_disparity - 4 + 1e-4)
        self.assertGreaterEqual(float(pred.full.values.min()), 0.0)

    def test_single_sample_input_is_batched(self):
        net = model_mod.build_model(miniature_config()).eval()
        with torch.no_grad():
            pred = net(torch.rand(3, 32, 32), torch.rand(3, 32, 32))
        self.assertEqual((1, 32, 32), tuple(pred.full.values.shape))

    def test_ablation_configurations_share_output_shape(self):
        base, _ = preset_configs("desk")
        left, right = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        counts = {}
        for use_cve in (False, True):
            for use_cva in (False, True):
                cfg = ModelConfig(**{**base.__dict__, "use_cve": use_cve, "use_cva": use_cva})
                net = model_mod.build_model(cfg).eval()
                with torch.no_grad():
                    pred = net(left, right)
                self.assertEqual((1, 64, 64), tuple(pred.full.values.shape))
                counts[(use_cve, use_cva)] = {
                    name: sum(p.numel() for p in getattr(net, name).parameters())
                    for name in ("features", "cve", "cva", "upsample")
                }
        self.assertEqual(counts[(False, False)]["features"], counts[(True, True)]["features"])
        self.assertLess(counts[(False, True)]["cve"], counts[(True, True)]["cve"])
        self.assertLess(counts[(True, True)]["cva"], counts[(True, False)]["cva"])
        self.assertEqual(counts[(False, True)]["cva"], counts[(True, True)]["cva"])

    def test_build_model_is_seeded(self):
        a = model_mod.build_model(miniature_config(seed=3))
        b = model_mod.build_model(miniature_config(seed=3))
        for pa, pb in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(pa, pb))

    def test_mismatched_pair_is_rejected(self):
        net = model_mod.build_model(miniature_config())
        with self.assertRaises(ShapeMismatch):
            net(torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 64))

    def test_pad_and_crop_round_trip(self):
        image = torch.rand(1, 3, 40, 70)
        padded, size = model_mod.pad_to_multiple(image)
        self.assertEqual((1, 3, 64, 96), tuple(padded.shape))
        self.assertEqual((40, 70), size)
        self.assertTrue(torch.equal(image, model_mod.crop_to_size(padded, size)))
        self.assertTrue(torch.equal(padded[..., 63, 95], image[..., 39, 69]))
        same, _ = model_mod.pad_to_multiple(torch.rand(3, 32, 64))
        self.assertEqual((3, 32, 64), tuple(same.shape))

    def test_end_to_end_gradients(self):
        cfg = miniature_config()
        net = model_mod.build_model(cfg).double().eval()
        gen = torch.Generator().manual_seed(0)
        left = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
        right = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64)
        gt = torch.rand(1, 32, 32, generator=gen, dtype=torch.float64) * 20 + 1
        mask = torch.ones(1, 32, 32, dtype=torch.bool)

        def loss():
            pred = net(left, right)
            return stereo_loss(pred.quarter, pred.full, gt, mask, cfg.loss_weights).total

        pairs = gradcheck_sampled(loss, list(net.parameters()), samples=20, seed=1)
        self.assertGreaterEqual(len(pairs), 20)
        self.assertTrue(gradients_agree(pairs), pairs)


if __name__ == "__main__":
    unittest.main()
