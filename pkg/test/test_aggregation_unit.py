import unittest
from pathlib import Path

import sys

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "bin"))

import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402

import ghost_stereo_aggregation as agg  # noqa: E402
from ghost_stereo_blocks import count_macs, count_params  # noqa: E402
from ghost_stereo_types import CostVolume, ModelConfig, ShapeError, ShapeMismatch, preset_configs  # noqa: E402
from test.support.oracles import cgf_loop, gradcheck_sampled, gradients_agree  # noqa: E402

CONTEXT = (16, 24, 32)


def hourglass_config(**changes) -> ModelConfig:
    base, _ = preset_configs("desk")
    return ModelConfig(**{**base.__dict__, **changes})


def contexts(batch: int, h: int, w: int) -> list[torch.Tensor]:
    """Decoder features for a quarter-resolution volume of size ``h x w``."""
    return [torch.randn(batch, c, h // (2 ** (i + 1)), w // (2 ** (i + 1))) for i, c in enumerate(CONTEXT)]


class ContextGeometryFusionTests(unittest.TestCase):
    def test_zero_parameters_halve_geometry(self):
        cgf = agg.ContextGeometryFusion(4, 6)
        for p in cgf.parameters():
            nn.init.zeros_(p)
        geo = torch.randn(1, 4, 3, 2, 2)
        out = agg.cgf_fuse(geo, torch.randn(1, 6, 2, 2), cgf)
        self.assertTrue(torch.allclose(out, 0.5 * geo))

    def test_saturated_gate_passes_geometry(self):
        cgf = agg.ContextGeometryFusion(4, 6)
        for p in cgf.parameters():
            nn.init.zeros_(p)
        nn.init.constant_(cgf.geometry.bias, 100.0)
        geo = torch.randn(1, 4, 3, 2, 2)
        self.assertTrue(torch.allclose(cgf(geo, torch.randn(1, 6, 2, 2)), geo))

    def test_matches_loop_oracle(self):
        torch.manual_seed(0)
        cgf = agg.ContextGeometryFusion(3, 5).double()
        geo = torch.randn(2, 3, 2, 3, 4, dtype=torch.float64)
        ctx = torch.randn(2, 5, 3, 4, dtype=torch.float64)
        out = cgf(geo, ctx).detach().numpy()
        expected = cgf_loop(
            geo.numpy(), ctx.numpy(),
            cgf.geometry.weight.detach().numpy()[:, :, 0, 0, 0], cgf.geometry.bias.detach().numpy(),
            cgf.context.weight.detach().numpy()[:, :, 0, 0], cgf.context.bias.detach().numpy(),
        )
        self.assertLess(np.abs(out - expected).max(), 1e-6)

    def test_scale_mismatch(self):
        cgf = agg.ContextGeometryFusion(4, 6)
        with self.assertRaises(ShapeMismatch):
            cgf(torch.randn(1, 4, 3, 2, 2), torch.randn(1, 6, 4, 4))

    def test_gradients(self):
        torch.manual_seed(1)
        cgf = agg.ContextGeometryFusion(8, 6).double()
        geo = torch.randn(1, 8, 2, 3, 3, dtype=torch.float64)
        ctx = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        pairs = gradcheck_sampled(lambda: cgf(geo, ctx).pow(2).sum(), list(cgf.parameters()), samples=20)
        self.assertGreaterEqual(len(pairs), 20)
        self.assertTrue(gradients_agree(pairs), pairs)


class GhostCVATests(unittest.TestCase):
    def test_shape_trace(self):
        torch.manual_seed(0)
        cfg = hourglass_config(max_disparity=192, topk=2)
        cva = agg.GhostCVA(cfg, CONTEXT).eval()
        levels = []
        handles = [m.register_forward_hook(lambda _m, _a, out: levels.append(tuple(out.shape))) for m in cva.down]
        vol = CostVolume(torch.randn(1, cfg.num_groups, 48, 16, 24), cfg.num_groups)
        out = cva(vol, contexts(1, 16, 24))
        for h in handles:
            h.remove()
        self.assertEqual([(24, 8, 12), (12, 4, 6), (6, 2, 3)], [s[2:] for s in levels])
        self.assertEqual((1, 48, 16, 24), tuple(out.shape))

    def test_vanilla_variant_has_same_output_shape(self):
        cfg = hourglass_config(use_cva=False)
        cva = agg.GhostCVA(cfg, CONTEXT).eval()
        vol = CostVolume(torch.randn(2, cfg.num_groups, 8, 8, 16), cfg.num_groups)
        self.assertEqual((2, 8, 8, 16), tuple(cva(vol, contexts(2, 8, 16)).shape))

    def test_ghost_encoder_is_cheaper_than_vanilla(self):
        ghost = agg.GhostCVA(hourglass_config(), CONTEXT).encoder_spec()
        vanilla = agg.GhostCVA(hourglass_config(use_cva=False), CONTEXT).encoder_spec()
        shape = (1, 8, 8, 16, 24)
        self.assertLess(count_params(ghost), count_params(vanilla))
        self.assertLess(count_macs(ghost, shape), count_macs(vanilla, shape))

    def test_zeroed_context_path_is_still_finite(self):
        cfg = hourglass_config()
        cva = agg.GhostCVA(cfg, CONTEXT).eval()
        for fusion in cva.cgf:
            for p in fusion.parameters():
                nn.init.zeros_(p)
        ctx = [torch.zeros_like(c) for c in contexts(1, 8, 16)]
        out = cva(CostVolume(torch.randn(1, 8, 8, 8, 16), 8), ctx)
        self.assertEqual((1, 8, 8, 16), tuple(out.shape))
        self.assertTrue(torch.isfinite(out).all())

    def test_rejects_dimensions_not_divisible_by_eight(self):
        cva = agg.GhostCVA(hourglass_config(), CONTEXT)
        with self.assertRaises(ShapeError):
            cva(CostVolume(torch.randn(1, 8, 8, 6, 16), 8), contexts(1, 8, 16))


if __name__ == "__main__":
    unittest.main()
