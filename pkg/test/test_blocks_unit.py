import unittest
from pathlib import Path

import sys

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "bin"))

import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn as nn  # noqa: E402

import ghost_stereo_blocks as blocks  # noqa: E402
from ghost_stereo_types import ConfigError, UnknownBlockKind  # noqa: E402
from test.support.oracles import gradcheck_sampled, gradients_agree  # noqa: E402


def numel(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class CountingTests(unittest.TestCase):
    def test_ghost3d_versus_dense_conv(self):
        ghost = blocks.Ghost3DSpec(16, 32, ratio=2, cheap_kernel=3, bn=False)
        self.assertEqual(688, blocks.count_params(ghost))
        self.assertEqual(13824, blocks.count_params(blocks.conv3d(16, 32, 3)))

    def test_ghost3d_is_under_a_quarter_of_dense_conv3d(self):
        for c in range(8, 129, 4):
            with self.subTest(channels=c):
                ghost = blocks.count_params(blocks.Ghost3DSpec(c, c, ratio=2, cheap_kernel=3, bn=False))
                dense = blocks.count_params(blocks.conv3d(c, c, 3))
                self.assertLess(ghost, dense / 4)

    def test_ghost_macs_on_a_small_volume(self):
        ghost = blocks.Ghost3DSpec(16, 32, bn=False)
        shape = (1, 16, 4, 8, 8)
        positions = 4 * 8 * 8
        self.assertEqual(positions * (16 * 16 + 16 * 27), blocks.count_macs(ghost, shape))
        self.assertEqual(positions * 16 * 32 * 27, blocks.count_macs(blocks.conv3d(16, 32, 3), shape))
        self.assertEqual((1, 32, 4, 8, 8), blocks.output_shape(ghost, shape))

    def test_spec_counts_match_live_modules(self):
        cases = [
            blocks.GhostModule(8, 12, ratio=3, dims=3),
            blocks.SqueezeExcite(16, 4, dims=3),
            blocks.GhostBottleneck(8, 16, 16, stride=2, use_se=True, dims=3),
            blocks.GhostBottleneck(16, 32, 16, stride=1, use_se=False, dims=3),
            blocks.GhostBottleneck(8, 16, 24, stride=1, projection_shortcut=True, dims=2),
            blocks.VanillaBlock(8, 16, stride=2, dims=3),
            blocks.ConvBN(4, 8, 4, stride=2, padding=1, dims=3, transposed=True),
        ]
        for module in cases:
            with self.subTest(module=type(module).__name__):
                self.assertEqual(numel(module), blocks.count_params(module.spec))

    def test_profile_matches_analytic_macs(self):
        torch.manual_seed(0)
        block = blocks.GhostBottleneck(8, 16, 16, stride=2, use_se=True, dims=3)
        x = torch.randn(2, 8, 4, 8, 8)
        profile = blocks.profile_module(block, x, depth=0)
        total_macs = sum(p.macs for p in profile.values())
        total_params = sum(p.params for p in profile.values())
        self.assertEqual(blocks.count_macs(block.spec, x.shape), total_macs)
        self.assertEqual(numel(block), total_params)
        self.assertTrue(block.training)

    def test_unknown_description_raises(self):
        with self.assertRaises(UnknownBlockKind):
            blocks.count_params(object())
        with self.assertRaises(UnknownBlockKind):
            blocks.count_macs("conv", (1, 1, 1, 1, 1))


class ModuleTests(unittest.TestCase):
    def test_ghost_module_truncates_and_keeps_intrinsic_first(self):
        torch.manual_seed(0)
        m = blocks.GhostModule(4, 5, ratio=2, dims=3).eval()
        x = torch.randn(1, 4, 3, 6, 6)
        out = m(x)
        self.assertEqual((1, 5, 3, 6, 6), tuple(out.shape))
        self.assertTrue(torch.allclose(out[:, :3], m.primary(x)))

    def test_se_gate_is_half_with_zero_weights(self):
        se = blocks.SqueezeExcite(8, 4)
        for p in se.parameters():
            nn.init.zeros_(p)
        x = torch.randn(2, 8, 2, 3, 3)
        self.assertTrue(torch.allclose(se(x), 0.5 * x))

    def test_se_rejects_indivisible_channels(self):
        with self.assertRaises(ConfigError):
            blocks.SqueezeExcite(6, 4)

    def test_bottleneck_shapes(self):
        x = torch.randn(1, 8, 8, 8, 12)
        down = blocks.GhostBottleneck(8, 16, 16, stride=2)
        same = blocks.GhostBottleneck(8, 16, 8, stride=1)
        self.assertEqual((1, 16, 4, 4, 6), tuple(down(x).shape))
        self.assertEqual(tuple(x.shape), tuple(same(x).shape))

    def test_bottleneck_argument_errors(self):
        with self.assertRaises(ConfigError):
            blocks.GhostBottleneck(8, 16, 8, stride=3)
        with self.assertRaises(ConfigError):
            blocks.GhostBottleneck(8, 16, 12, stride=1)
        with self.assertRaises(ConfigError):
            blocks.GhostModule(8, 8, ratio=1)

    def test_delta_cheap_kernel_copies_intrinsic_channels(self):
        torch.manual_seed(4)
        m = blocks.GhostModule(4, 8, ratio=2, bn=False, dims=3)
        with torch.no_grad():
            m.cheap.conv.weight.zero_()
            m.cheap.conv.weight[:, 0, 1, 1, 1] = 1.0
        out = m(torch.randn(2, 4, 3, 5, 5))
        self.assertTrue(torch.allclose(out[:, 4:], out[:, :4], rtol=0.0, atol=1e-7))

    def test_ghost_module_maps_zero_to_zero(self):
        torch.manual_seed(5)
        m = blocks.GhostModule(6, 10, ratio=2, dims=3).eval()
        for bn in (m.primary.bn, m.cheap.bn):
            nn.init.zeros_(bn.bias)
        out = m(torch.zeros(1, 6, 2, 4, 4))
        self.assertTrue(torch.equal(out, torch.zeros(1, 10, 2, 4, 4)))

    def test_se_matches_loop_with_hand_set_weights(self):
        se = blocks.SqueezeExcite(4, 2).double()
        w1 = [[0.5, -1.0, 2.0, 0.25], [-0.75, 1.5, 0.0, 1.0]]
        b1 = [0.1, -0.2]
        w2 = [[4.0, -1.0], [-3.0, 2.0], [0.5, 0.5], [10.0, 8.0]]
        b2 = [0.0, 1.0, -0.5, 2.0]
        with torch.no_grad():
            se.fc1.weight.copy_(torch.tensor(w1))
            se.fc1.bias.copy_(torch.tensor(b1))
            se.fc2.weight.copy_(torch.tensor(w2))
            se.fc2.bias.copy_(torch.tensor(b2))
        x = np.random.default_rng(6).standard_normal((1, 4, 2, 3, 3))
        out = se(torch.from_numpy(x)).detach().numpy()

        expected = np.zeros_like(x)
        pooled = [x[0, c].sum() / x[0, c].size for c in range(4)]
        hidden = [max(0.0, sum(w1[j][c] * pooled[c] for c in range(4)) + b1[j]) for j in range(2)]
        for c in range(4):
            z = sum(w2[c][j] * hidden[j] for j in range(2)) + b2[c]
            gate = min(1.0, max(0.0, z / 6.0 + 0.5))
            for idx in np.ndindex(x.shape[2:]):
                expected[(0, c) + idx] = x[(0, c) + idx] * gate
        self.assertLess(np.abs(out - expected).max(), 1e-6)

    def test_se_pools_a_constant_input_to_that_constant(self):
        se = blocks.SqueezeExcite(4, 2)
        seen = []
        se.fc1.register_forward_pre_hook(lambda module, args: seen.append(args[0].clone()))
        values = torch.tensor([0.25, -1.5, 3.0, 0.0])
        se(values.view(1, 4, 1, 1, 1).expand(1, 4, 3, 4, 5).contiguous())
        self.assertTrue(torch.equal(values.view(1, 4), seen[0]))

    def test_se_output_never_exceeds_input_magnitude(self):
        torch.manual_seed(7)
        se = blocks.SqueezeExcite(8, 4)
        with torch.no_grad():
            for p in se.parameters():
                p.mul_(20.0)
        x = torch.randn(3, 8, 2, 4, 4) * 5
        self.assertTrue(torch.all(se(x).abs() <= x.abs()))

    def test_stride_one_bottleneck_without_residual_branch_is_identity(self):
        torch.manual_seed(8)
        block = blocks.GhostBottleneck(8, 16, 8, stride=1).eval()
        for part in (block.ghost1, block.se, block.ghost2):
            for p in part.parameters():
                nn.init.zeros_(p)
        x = torch.randn(1, 8, 4, 4, 4)
        self.assertTrue(torch.equal(x, block(x)))


class GradientTests(unittest.TestCase):
    def _check(self, module: nn.Module, x: torch.Tensor) -> None:
        module = module.double().eval()
        x = x.double()
        target = torch.randn_like(module(x))
        params = [p for p in module.parameters()]
        pairs = gradcheck_sampled(lambda: ((module(x) - target) ** 2).mean(), params, samples=20)
        self.assertGreaterEqual(len(pairs), 20)
        self.assertTrue(gradients_agree(pairs), pairs)

    def test_bottleneck_stride_one(self):
        torch.manual_seed(1)
        self._check(blocks.GhostBottleneck(8, 16, 8, stride=1), torch.randn(1, 8, 4, 4, 4))

    def test_bottleneck_stride_two(self):
        torch.manual_seed(2)
        self._check(blocks.GhostBottleneck(8, 16, 16, stride=2), torch.randn(1, 8, 4, 4, 4))

    def test_squeeze_excite(self):
        torch.manual_seed(3)
        self._check(blocks.SqueezeExcite(16, 4), torch.randn(2, 16, 2, 3, 3))

    def test_checker_skips_parameters_straddling_a_kink(self):
        w = nn.Parameter(torch.tensor([5e-4, 0.5, -0.5], dtype=torch.float64))
        pairs = gradcheck_sampled(lambda: torch.relu(w).sum() + 0.5 * w.pow(2).sum(), [w], samples=3)
        self.assertEqual(2, len(pairs))
        self.assertTrue(gradients_agree(pairs), pairs)

    def test_checker_skips_hard_sigmoid_saturation_edges(self):
        w = nn.Parameter(torch.tensor([3.0 + 5e-4, 1.0], dtype=torch.float64))
        pairs = gradcheck_sampled(lambda: nn.functional.hardsigmoid(w).sum(), [w], samples=2)
        self.assertEqual(1, len(pairs))
        self.assertAlmostEqual(1.0 / 6.0, pairs[0][0], places=9)
        self.assertAlmostEqual(1.0 / 6.0, pairs[0][1], places=6)


if __name__ == "__main__":
    unittest.main()
