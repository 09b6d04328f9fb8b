"""Losses, optimizer and training loop.

Noise modes for the attention-refined branch:

* ``"off"``   -- train on the classification loss alone.
* ``"plain"`` -- add the soft-margin loss on GAP(A* . M) with no noise matrix.
* ``k >= 0``  -- add the soft-margin loss on GAP((k * A_bar*) . A* . M).
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from camforge import fusion
from camforge.model import ForwardArtifacts, ModelState, class_token_logits, forward
from camforge.tensor import (
    Tensor,
    add,
    all_finite,
    as_tensor,
    gap,
    mean_axis,
    mul,
    parameter,
    softplus,
    scale,
)

log = logging.getLogger(__name__)

NoiseMode = Union[str, float]


class NonFiniteLossError(FloatingPointError):
    pass


def parse_noise(value) -> NoiseMode:
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("off", "plain"):
            return v
        try:
            value = float(v)
        except ValueError:
            raise ValueError(f"noise must be 'off', 'plain' or a multiplier >= 0, got {value!r}") from None
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ValueError(f"noise multiplier must be finite and >= 0, got {value}")
    return value


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    noise: NoiseMode = 1.0
    seed: int = 0
    detach_attention: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        object.__setattr__(self, "noise", parse_noise(self.noise))


@dataclass(frozen=True)
class LossReport:
    L_cls: Tensor
    L_Mss: Tensor
    total: Tensor
    z: Tensor | None
    z_cls: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.L_cls.item(), self.L_Mss.item(), self.total.item()


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 0 or y.shape[-1] < 1:
        raise ValueError("labels need at least one class")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be multi-hot with entries in {0, 1}")
    return y


def multilabel_soft_margin(z, y) -> Tensor:
    """Mean over classes (and batch) of y*softplus(-z) + (1-y)*softplus(z).

    Equal to -mean[y ln sigmoid(z) + (1-y) ln(1 - sigmoid(z))].
    """
    z = as_tensor(z)
    y = _check_labels(y)
    if y.shape[-1] != z.shape[-1]:
        raise ValueError(f"label width {y.shape[-1]} does not match logits {z.shape}")
    per = add(mul(y, softplus(scale(z, -1.0))), mul(1.0 - y, softplus(z)))
    return mean_axis(per)


def noisy_branch_loss(artifacts: ForwardArtifacts, cam, y, k: float = 1.0,
                      *, detach: bool = False) -> tuple[Tensor, Tensor]:
    """Soft-margin loss on GAP(M**), M** = (k A_bar*) . (A* . M). Returns (loss, z)."""
    att = artifacts.attention.detach() if detach else artifacts.attention
    fused = fusion.fuse(att)
    refined = fusion.refine_cam(fused.A_star, cam)
    noisy = fusion.inject_noise(fused.A_bar_star, refined, k)
    z = gap(noisy)
    return multilabel_soft_margin(z, y), z


def plain_branch_loss(artifacts: ForwardArtifacts, cam, y, *, detach: bool = False) -> tuple[Tensor, Tensor]:
    """Soft-margin loss on GAP(A* . M) with no noise matrix."""
    att = artifacts.attention.detach() if detach else artifacts.attention
    fused = fusion.fuse(att)
    z = gap(fusion.refine_cam(fused.A_star, cam))
    return multilabel_soft_margin(z, y), z


def cls_logits(state: ModelState, artifacts: ForwardArtifacts, cam) -> Tensor:
    return add(gap(cam), class_token_logits(state, artifacts.tokens))


def cls_loss(state: ModelState, artifacts: ForwardArtifacts, cam, y) -> tuple[Tensor, Tensor]:
    """Soft-margin loss on GAP(M) + head(class token). Returns (loss, z_cls)."""
    z_cls = cls_logits(state, artifacts, cam)
    return multilabel_soft_margin(z_cls, y), z_cls


def total_loss(state: ModelState, artifacts: ForwardArtifacts, y, noise: NoiseMode = 1.0,
               *, detach_attention: bool = False) -> LossReport:
    noise = parse_noise(noise)
    cam = artifacts.cam
    l_cls, z_cls = cls_loss(state, artifacts, cam, y)
    if noise == "off":
        l_mss, z = Tensor(0.0), None
    elif noise == "plain":
        l_mss, z = plain_branch_loss(artifacts, cam, y, detach=detach_attention)
    else:
        l_mss, z = noisy_branch_loss(artifacts, cam, y, noise, detach=detach_attention)
    return LossReport(l_cls, l_mss, add(l_cls, l_mss), z, z_cls)


def loss_fn(state: ModelState, images, y, noise: NoiseMode = 1.0, **kw) -> LossReport:
    return total_loss(state, forward(state, images), y, noise, **kw)


class AdamW:
    """Adam moments with decoupled weight decay, also scaled by the learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            new = p.data * (1 - self.lr * self.weight_decay) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            out[name] = parameter(new)
        return out


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for epoch, _, _, _, total in self.rows:
            by_epoch.setdefault(epoch, []).append(total)
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "step", "L_cls", "L_Mss", "total"])
            for epoch, step, lc, lm, tot in self.rows:
                w.writerow([epoch, step, repr(lc), repr(lm), repr(tot)])


def train(state: ModelState, data: Sequence, cfg: TrainConfig) -> tuple[ModelState, TrainLog]:
    """Minibatch AdamW on the total loss.

    ``data`` is a sequence of samples with ``image`` (3, S, S) and ``labels``
    (S-1,) arrays. Batch order is drawn from ``cfg.seed``; everything else is
    a fixed-order computation, so equal seeds give bit-equal results.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(state.params, cfg.learning_rate, cfg.weight_decay)
    # fresh leaves: never accumulate into the caller's tensors
    params = {k: parameter(v.data) for k, v in state.params.items()}
    history = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                from camforge.synth import augment
                batch = [augment(s, rng) for s in batch]
            images = np.stack([s.image for s in batch])
            labels = np.stack([s.labels for s in batch]).astype(np.float64)
            current = ModelState(state.config, params)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    report = loss_fn(current, images, labels, cfg.noise, detach_attention=cfg.detach_attention)
                    values = report.values()
                    if not all(math.isfinite(v) for v in values):
                        raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {values}")
                    report.total.backward()
            except NonFiniteLossError:
                raise
            except FloatingPointError as exc:
                raise NonFiniteLossError(f"diverged at epoch {epoch} step {step}: {exc}") from exc
            grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLossError(f"non-finite gradient at epoch {epoch} step {step}")
            params = opt.step(params, grads)
            history.rows.append((epoch, step, *values))
            step += 1
        log.info("epoch %d mean loss %.6f", epoch, history.epoch_means()[-1])
    new_state = ModelState(state.config, params)
    if not all_finite(new_state.params.values()):
        raise NonFiniteLossError("parameters became non-finite")
    return new_state, history


def write_loss_csv(history: TrainLog, path) -> None:
    history.write_csv(Path(path))
