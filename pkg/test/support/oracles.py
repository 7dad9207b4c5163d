"""Brute-force reference implementations and the finite-difference checker."""

from __future__ import annotations

import math
import os
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

SLOW_TESTS_ENV = "GHOSTSTEREO_RUN_SLOW_TESTS"


def slow_tests_enabled() -> bool:
    return os.environ.get(SLOW_TESTS_ENV, "") == "1"


def require_slow_tests() -> Optional[str]:
    if not slow_tests_enabled():
        return f"set {SLOW_TESTS_ENV}=1 to run the slow acceptance tests"
    return None


def gwc_volume_loop(f_left: np.ndarray, f_right: np.ndarray, groups: int, levels: int) -> np.ndarray:
    """Triple loop over (group, disparity, x); no normalization."""
    b, c, h, w = f_left.shape
    per = c // groups
    out = np.zeros((b, groups, levels, h, w), dtype=np.float64)
    for g in range(groups):
        chans = slice(g * per, (g + 1) * per)
        for d in range(levels):
            for x in range(d, w):
                out[:, g, d, :, x] = (f_left[:, chans, :, x] * f_right[:, chans, :, x - d]).sum(axis=1) / per
    return out


def cgf_loop(geometry: np.ndarray, context: np.ndarray, w3: np.ndarray, b3: np.ndarray,
             w2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """``sigmoid(W3 g + b3 + W2 c + b2) * g`` evaluated voxel by voxel (1x1 weights as matrices)."""
    b, c, d, h, w = geometry.shape
    out = np.zeros_like(geometry, dtype=np.float64)
    for n in range(b):
        for z in range(d):
            for y in range(h):
                for x in range(w):
                    g = geometry[n, :, z, y, x]
                    att = w3 @ g + b3 + w2 @ context[n, :, y, x] + b2
                    out[n, :, z, y, x] = g / (1.0 + np.exp(-att))
    return out


def convex_upsample_uniform_loop(coarse: np.ndarray) -> np.ndarray:
    """Uniform 3x3 weights: 4 x the replicate-padded neighborhood mean, repeated over each 4x4 block."""
    b, h, w = coarse.shape
    out = np.zeros((b, 4 * h, 4 * w), dtype=np.float64)
    for n in range(b):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy = min(max(y + dy, 0), h - 1)
                        xx = min(max(x + dx, 0), w - 1)
                        acc += coarse[n, yy, xx]
                out[n, 4 * y:4 * y + 4, 4 * x:4 * x + 4] = 4.0 * acc / 9.0
    return out


def epe_loop(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    total, count = 0.0, 0
    for idx in np.ndindex(gt.shape):
        if mask[idx]:
            total += abs(float(pred[idx]) - float(gt[idx]))
            count += 1
    return total / count


def d1_loop(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    bad, count = 0, 0
    for idx in np.ndindex(gt.shape):
        if mask[idx]:
            err = abs(float(pred[idx]) - float(gt[idx]))
            bad += int(err > 3.0 and err > 0.05 * abs(float(gt[idx])))
            count += 1
    return 100.0 * bad / count


def bad_loop(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, tau: float) -> float:
    bad, count = 0, 0
    for idx in np.ndindex(gt.shape):
        if mask[idx]:
            bad += int(abs(float(pred[idx]) - float(gt[idx])) > tau)
            count += 1
    return 100.0 * bad / count


def ssd_match(left: np.ndarray, right: np.ndarray, max_disp: int) -> np.ndarray:
    """Exhaustive per-pixel RGB SSD scan; ``[3, H, W]`` inputs."""
    _, h, w = left.shape
    best = np.zeros((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            costs = [
                float(((left[:, y, x] - right[:, y, x - d]) ** 2).sum()) if x - d >= 0 else math.inf
                for d in range(max_disp + 1)
            ]
            best[y, x] = int(np.argmin(costs))
    return best


_RELU_FUNCS = {F.relu, torch.relu, torch.relu_, torch.Tensor.relu, torch.Tensor.relu_}
_HARDSIGMOID_FUNCS = {F.hardsigmoid}


class ActivationPatternRecorder(TorchFunctionMode):
    """Records which side of each ReLU / hard-sigmoid kink every input sits on."""

    def __init__(self):
        super().__init__()
        self.patterns: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func in _RELU_FUNCS:
            self.patterns.append(args[0].detach() > 0)
        elif func in _HARDSIGMOID_FUNCS:
            x = args[0].detach()
            self.patterns.append((x > -3).to(torch.int8) + (x >= 3).to(torch.int8))
        return func(*args, **kwargs)


def activation_pattern(loss_fn: Callable[[], torch.Tensor]) -> tuple[float, list[torch.Tensor]]:
    recorder = ActivationPatternRecorder()
    with recorder:
        loss = float(loss_fn())
    return loss, recorder.patterns


def same_pattern(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def gradcheck_sampled(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.nn.Parameter],
    *,
    samples: int = 20,
    step: float = 1e-3,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """Central differences on ``samples`` random scalar parameters.

    Returns ``(analytic, numeric)`` pairs. Parameters must be float64. A
    parameter whose +/- ``step`` moves any ReLU or hard-sigmoid input across
    its kink is skipped and the next one in the seeded order is tried; the
    loss is not differentiable across the step there.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    with torch.no_grad():
        _, base = activation_pattern(loss_fn)
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    order = np.random.default_rng(seed).permutation(len(flat))
    pairs = []
    with torch.no_grad():
        for k in order:
            if len(pairs) >= samples:
                break
            i, j = flat[int(k)]
            view = params[i].view(-1)
            analytic = float(params[i].grad.view(-1)[j])
            orig = float(view[j])
            view[j] = orig + step
            plus, plus_pattern = activation_pattern(loss_fn)
            view[j] = orig - step
            minus, minus_pattern = activation_pattern(loss_fn)
            view[j] = orig
            if not (same_pattern(base, plus_pattern) and same_pattern(base, minus_pattern)):
                continue
            pairs.append((analytic, (plus - minus) / (2 * step)))
    return pairs


def gradients_agree(pairs: Sequence[tuple[float, float]], rel: float = 1e-3, abs_tol: float = 1e-5) -> bool:
    return all(abs(a - n) <= rel * max(abs(a), abs(n)) + abs_tol for a, n in pairs)
