"""Attention aggregation and CAM refinement.

Attention stacks have shape (..., B, H, 1+N, 1+N) with the class token at
index 0 of both token axes. CAMs have shape (..., C, g, g) with g*g == N and
patches enumerated row-major, matching the model's patch order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

from camforge.tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    divide,
    matmul,
    reshape,
    scale,
    sum_axis,
    swapaxes,
)

_noise_observers: list[list] = []


@contextlib.contextmanager
def watch_noise():
    """Record every ``inject_noise`` call made inside the block.

    Yields a list that receives one entry (the multiplier) per call.
    """
    calls: list = []
    _noise_observers.append(calls)
    try:
        yield calls
    finally:
        _noise_observers.remove(calls)


@dataclass(frozen=True)
class FusedAttention:
    A: Tensor           # block sum, rows sum to B
    A_star: Tensor      # A without the class token
    A_bar: Tensor       # block mean, rows sum to 1
    A_bar_star: Tensor  # A_bar without the class token


def head_average(stack) -> Tensor:
    """(..., B, H, T, T) -> (..., B, T, T)."""
    stack = as_tensor(stack)
    if stack.ndim < 4:
        raise ShapeError(f"attention stack needs (..., B, H, T, T), got {stack.shape}")
    return divide(sum_axis(stack, axis=-3), stack.shape[-3])


def block_sum(head_avg) -> Tensor:
    """(..., B, T, T) -> (..., T, T)."""
    head_avg = as_tensor(head_avg)
    if head_avg.ndim < 3:
        raise ShapeError(f"expected (..., B, T, T), got {head_avg.shape}")
    return sum_axis(head_avg, axis=-3)


def block_mean(head_avg) -> Tensor:
    head_avg = as_tensor(head_avg)
    return divide(block_sum(head_avg), head_avg.shape[-3])


def strip_class_token(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"need a (1+N)x(1+N) matrix with N >= 1, got {x.shape}")
    return x[..., 1:, 1:]


def fuse(stack) -> FusedAttention:
    avg = head_average(stack)
    total = block_sum(avg)
    mean = divide(total, avg.shape[-3])
    return FusedAttention(total, strip_class_token(total), mean, strip_class_token(mean))


def _propagate(mat: Tensor, cam: Tensor) -> Tensor:
    cam = as_tensor(cam)
    if cam.ndim < 3:
        raise ShapeError(f"CAM needs (..., C, g, g), got {cam.shape}")
    g_h, g_w = cam.shape[-2:]
    n = mat.shape[-1]
    if mat.shape[-2] != n or g_h * g_w != n:
        raise ShapeError(f"grid mismatch: attention {mat.shape} vs CAM {cam.shape}")
    flat = reshape(cam, cam.shape[:-2] + (n,))
    # out[c, i] = sum_j mat[i, j] * flat[c, j]
    out = matmul(flat, swapaxes(mat, -1, -2))
    return reshape(out, out.shape[:-1] + (g_h, g_w))


def refine_cam(a_star, cam) -> Tensor:
    """Propagate each class map through the stripped attention: M*_s = A* . M_s."""
    return _propagate(as_tensor(a_star), cam)


def inject_noise(a_bar_star, refined, k: float = 1.0) -> Tensor:
    """Training-only noise step: M**_s = (k * A_bar*) . M*_s."""
    if k < 0:
        raise ValueError(f"noise multiplier must be >= 0, got {k}")
    for calls in _noise_observers:
        calls.append(k)
    return _propagate(scale(as_tensor(a_bar_star), float(k)), refined)
