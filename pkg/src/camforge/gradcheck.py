"""Finite-difference verification of the analytic gradients used in training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camforge import fusion
from camforge.model import MINIMAL_CONFIG, ModelConfig, ModelState, forward, init
from camforge.objective import multilabel_soft_margin, noisy_branch_loss, total_loss
from camforge.tensor import Tensor, finite_diff_check, gap, softmax_rows

TOLERANCE = 1e-6
EPS = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_soft_margin(rng: np.random.Generator, classes: int = 4) -> float:
    z = rng.normal(scale=3.0, size=(classes,))
    y = rng.integers(0, 2, size=classes)
    return finite_diff_check(lambda t: multilabel_soft_margin(t, y), z, EPS)


def check_fused_branch(rng: np.random.Generator, blocks: int = 2, heads: int = 2, grid: int = 2,
                       classes: int = 2, k: float = 1.0) -> float:
    """Refine -> inject noise -> GAP -> soft margin, w.r.t. attention logits and the CAM."""
    tokens = 1 + grid * grid
    logits = rng.normal(size=(blocks, heads, tokens, tokens))
    cam = rng.normal(size=(classes, grid, grid))
    y = rng.integers(0, 2, size=classes)

    def via_logits(t):
        att = softmax_rows(t)
        fused = fusion.fuse(att)
        noisy = fusion.inject_noise(fused.A_bar_star, fusion.refine_cam(fused.A_star, Tensor(cam)), k)
        return multilabel_soft_margin(gap(noisy), y)

    def via_cam(t):
        fused = fusion.fuse(softmax_rows(Tensor(logits)))
        noisy = fusion.inject_noise(fused.A_bar_star, fusion.refine_cam(fused.A_star, t), k)
        return multilabel_soft_margin(gap(noisy), y)

    return max(finite_diff_check(via_logits, logits, EPS), finite_diff_check(via_cam, cam, EPS))


def check_total_loss(state: ModelState, images: np.ndarray, labels: np.ndarray, noise=1.0) -> float:
    """Max relative error of d(total loss)/d(param) over every parameter tensor."""
    worst = 0.0
    for name in state.params:
        def f(t, name=name):
            return total_loss(state.replace(**{name: t}), forward(state.replace(**{name: t}), images),
                              labels, noise).total
        worst = max(worst, finite_diff_check(f, state[name], EPS))
    return worst


def minimal_problem(seed: int = 0, batch: int = 2, config: ModelConfig = MINIMAL_CONFIG):
    rng = np.random.default_rng(seed)
    state = init(config)
    images = rng.uniform(size=(batch, 3, config.image_size, config.image_size))
    labels = np.zeros((batch, config.num_classes), dtype=np.int64)
    labels[np.arange(batch), rng.integers(config.num_classes, size=batch)] = 1
    return state, images, labels


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    state, images, labels = minimal_problem(seed)
    return [
        CheckResult("soft_margin", check_soft_margin(rng)),
        CheckResult("fused_branch", check_fused_branch(rng)),
        CheckResult("total_loss", check_total_loss(state, images, labels)),
    ]
