"""Cross-entropy, temperature-softened KL between branches, and the total loss.

Reduction convention: sum over time steps, mean over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from abm import ops
from abm.decoder import L2R, BranchOutput, decoder_inputs
from abm.nn import ConfigError
from abm.tensor import ShapeError, Tensor
from abm.vocab import VocabularyError


class AlignmentError(ShapeError):
    """Branch outputs cannot be paired position by position."""


@dataclass
class LossBreakdown:
    ce_l2r: Tensor
    ce_r2l: Tensor
    kl: Tensor
    total: Tensor
    lam: float
    temperature: float

    def values(self) -> dict:
        return {"ce_l2r": self.ce_l2r.item(), "ce_r2l": self.ce_r2l.item(),
                "kl": self.kl.item(), "total": self.total.item()}


def soften(logits, S: float):
    """Temperature softmax ``exp(z/S) / sum exp(z/S)`` over the last axis."""
    if not S > 0:
        raise ConfigError(f"temperature must be positive, got {S}")
    if isinstance(logits, Tensor):
        return ops.softmax(ops.scale(logits, 1.0 / S), axis=-1)
    z = np.asarray(logits, dtype=np.float64) / S
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def symbol_logits(output: BranchOutput) -> Tensor:
    """Drop the final (end-marker) prediction: ``(B, T+1, K) -> (B, T, K)``."""
    return output.logits[:, :-1]


def align_r2l(r2l, lengths: Sequence[int] | None = None):
    """Reverse right-to-left predictions so position ``i`` pairs with L2R position ``i``.

    Accepts a :class:`BranchOutput` (its end-marker prediction is dropped first),
    a ``(B, T, K)`` Tensor/array, or a plain Python list of per-step items.
    With ``lengths``, each batch row is reversed within its own length and
    padded positions stay where they are.  On sequences this is an involution.
    """
    if isinstance(r2l, BranchOutput):
        r2l = symbol_logits(r2l)
    if isinstance(r2l, (list, tuple)):
        return list(r2l)[::-1]
    B, T = r2l.shape[0], r2l.shape[1]
    lengths = [T] * B if lengths is None else list(lengths)
    if len(lengths) != B or max(lengths, default=0) > T:
        raise AlignmentError(f"lengths {lengths} do not fit sequence tensor of shape {r2l.shape}")
    idx = np.tile(np.arange(T), (B, 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n)[::-1]
    idx = idx.reshape(B, T, *([1] * (len(r2l.shape) - 2)))
    if isinstance(r2l, Tensor):
        return ops.take_along_axis(r2l, np.broadcast_to(idx, r2l.shape), axis=1)
    return np.take_along_axis(np.asarray(r2l), np.broadcast_to(idx, np.shape(r2l)), axis=1)


def kl_loss(l2r: Tensor, other: Tensor, S: float, mask: np.ndarray | None = None,
            detach_target: bool = False) -> Tensor:
    """``S^2 * sum_i sum_j p_ij (log p_ij - log q_ij)``, batch mean.

    ``l2r`` and ``other`` are aligned ``(B, T, K)`` logits (or ``(T, K)``);
    ``p``/``q`` are their temperature-softened distributions.  ``mask``
    ``(B, T)`` selects the positions that count.
    """
    if not S > 0:
        raise ConfigError(f"temperature must be positive, got {S}")
    if l2r.shape != other.shape:
        raise AlignmentError(f"cannot pair logits of shape {l2r.shape} with {other.shape}")
    single = l2r.ndim == 2
    if single:
        l2r = ops.reshape(l2r, (1,) + l2r.shape)
        other = ops.reshape(other, (1,) + other.shape)
    if detach_target:
        other = other.detach()
    inv = 1.0 / S
    logp = ops.log_softmax(ops.scale(l2r, inv), axis=-1)
    logq = ops.log_softmax(ops.scale(other, inv), axis=-1)
    p = ops.exp(logp)
    per_step = ops.sum(ops.mul(p, ops.sub(logp, logq)), axis=-1)  # (B, T)
    if mask is not None:
        if mask.shape != per_step.shape:
            raise AlignmentError(f"mask {mask.shape} does not match steps {per_step.shape}")
        per_step = ops.mul(per_step, mask.astype(per_step.dtype))
    B = per_step.shape[0]
    return ops.scale(ops.sum(per_step), S * S / B)


def ce_loss(output: BranchOutput, targets, direction: str | None = None) -> Tensor:
    """Summed negative log-likelihood of the gold sequence (end marker included), batch mean."""
    direction = direction or output.direction
    _, gold, mask = decoder_inputs(targets, direction)
    logits = output.logits
    B, steps, K = logits.shape
    if gold.shape != (B, steps):
        raise AlignmentError(f"targets imply {gold.shape} steps, outputs have {(B, steps)}")
    if gold.max() >= K:
        raise VocabularyError(f"target id {int(gold.max())} outside vocabulary of size {K}")
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.reshape(ops.take_along_axis(logp, gold[..., None], axis=2), (B, steps))
    nll = ops.neg(ops.mul(picked, mask.astype(logits.dtype)))
    return ops.scale(ops.sum(nll), 1.0 / B)


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def total_loss(primary: BranchOutput, secondary: BranchOutput | None, targets, lam: float = 0.5,
               S: float = 2.0, detach_target: bool = False) -> LossBreakdown:
    """``ce(primary) + ce(secondary) + lam * KL(primary || aligned secondary)``.

    ``secondary`` may be None (single-branch training) or a branch in either
    direction; a same-direction partner is paired step by step without reversal.
    """
    ce1 = ce_loss(primary, targets)
    if secondary is None:
        zero = _zero(ce1)
        if primary.direction == L2R:
            return LossBreakdown(ce1, zero, zero, ops.add(ce1, zero), lam, S)
        return LossBreakdown(zero, ce1, zero, ops.add(zero, ce1), lam, S)
    ce2 = ce_loss(secondary, targets)
    lengths = [len(t) for t in targets]
    steps = primary.logits.shape[1]
    mask = np.arange(steps - 1)[None, :] < np.asarray(lengths)[:, None]
    p_sym = symbol_logits(primary)
    q_sym = symbol_logits(secondary)
    if primary.direction != secondary.direction:
        q_sym = align_r2l(q_sym, lengths)
    if primary.direction != L2R:
        p_sym = align_r2l(p_sym, lengths)
        q_sym = align_r2l(q_sym, lengths)
    kl = kl_loss(p_sym, q_sym, S, mask, detach_target)
    total = ops.add(ops.add(ce1, ce2), ops.scale(kl, lam))
    return LossBreakdown(ce1, ce2, kl, total, lam, S)
