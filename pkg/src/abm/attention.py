"""Multi-scale coverage attention.

Energies at every feature cell combine the decoder query, the projected
feature map and two convolutions of the coverage map (the running sum of past
attention maps) with a small and a large kernel.  A masked softmax turns the
energies into the attention map, and the context vector is the
attention-weighted sum of feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from abm import ops
from abm.encoder import FeatureMap
from abm.nn import ConfigError, Init, Module
from abm.tensor import ShapeError, Tensor


def kernel_combo_params(k_s: int, k_l: int, coverage_channels: int) -> int:
    """Trainable scalars in the two coverage convolutions (no bias)."""
    for k in (k_s, k_l):
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"coverage kernel sizes must be odd, got {k}")
    return coverage_channels * (k_s * k_s + k_l * k_l)


@dataclass
class AttentionState:
    """Coverage accumulator ``beta`` (``(B, M)``) and the attention maps so far."""

    beta: Tensor
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, fmap: FeatureMap) -> "AttentionState":
        B = fmap.batch
        H, W = fmap.grid
        return cls(Tensor(np.zeros((B, H * W), dtype=fmap.features.dtype)))


def coverage_update(state: AttentionState, alpha: Tensor) -> AttentionState:
    if alpha.shape != state.beta.shape:
        raise ShapeError(f"attention map {alpha.shape} does not match coverage {state.beta.shape}")
    return AttentionState(ops.add(state.beta, alpha), state.history + [alpha])


@dataclass
class AttentionContext:
    """Per-image quantities reused at every decoding step."""

    a: Tensor          # (B, M, D)
    proj: Tensor       # (B, M, d): feature projection plus bias
    mask: np.ndarray   # (B, M)
    grid: tuple


class Attention(Module):
    def __init__(self, init: Init, hidden: int, feat_dim: int, attn_dim: int,
                 k_s: int = 5, k_l: int = 11, coverage_channels: int = 64,
                 multiscale: bool = True) -> None:
        super().__init__()
        kernel_combo_params(k_s, k_l, coverage_channels)
        if multiscale and k_s >= k_l:
            raise ConfigError(f"small kernel must be smaller than large kernel, got ({k_s}, {k_l})")
        self.k_s, self.k_l, self.multiscale = k_s, k_l, multiscale
        self.U_f = init.weight(feat_dim, attn_dim)
        self.b_f = init.zeros(attn_dim)
        self.W_hh = init.weight(hidden, attn_dim)
        self.U_s = init.weight(coverage_channels, 1, k_s, k_s)
        self.W_s = init.weight(coverage_channels, attn_dim)
        if multiscale:
            self.U_l = init.weight(coverage_channels, 1, k_l, k_l)
            self.W_l = init.weight(coverage_channels, attn_dim)
        self.v_a = init.weight(attn_dim, 1)

    def prepare(self, fmap: FeatureMap) -> AttentionContext:
        a = fmap.a
        proj = ops.add(ops.matmul(a, self.U_f), self.b_f)
        return AttentionContext(a, proj, fmap.flat_mask(), fmap.grid)

    def energies(self, h_hat: Tensor, ctx: AttentionContext, state: AttentionState) -> Tensor:
        B, M = state.beta.shape
        H, W = ctx.grid
        if M != H * W or ctx.mask.shape != (B, M):
            raise ShapeError(f"coverage {state.beta.shape} inconsistent with feature grid {ctx.grid}")
        cov = ops.reshape(state.beta, (B, 1, H, W))
        A_s = ops.conv2d(cov, self.U_s, padding=self.k_s // 2, flatten=True)  # (B, M, C)
        pre = ops.add(ctx.proj, ops.reshape(ops.matmul(h_hat, self.W_hh), (B, 1, -1)))
        pre = ops.add(pre, ops.matmul(A_s, self.W_s))
        if self.multiscale:
            A_l = ops.conv2d(cov, self.U_l, padding=self.k_l // 2, flatten=True)
            pre = ops.add(pre, ops.matmul(A_l, self.W_l))
        return ops.reshape(ops.matmul(ops.tanh(pre), self.v_a), (B, M))

    def attend(self, h_hat: Tensor, ctx: AttentionContext, state: AttentionState):
        """Returns ``(alpha, context)`` with shapes ``(B, M)`` and ``(B, D)``."""
        e = self.energies(h_hat, ctx, state)
        alpha = ops.softmax_masked(e, ctx.mask, axis=1)
        return alpha, context_vector(alpha, ctx.a)


def context_vector(alpha: Tensor, a: Tensor) -> Tensor:
    B, M = alpha.shape
    return ops.reshape(ops.matmul(ops.reshape(alpha, (B, 1, M)), a), (B, a.shape[-1]))
