"""A GRU decoding branch with coverage attention and a maxout classifier.

Per step, with previous symbol ``y``::

    h_hat  = GRU_1(h_prev, E[y])
    alpha, c = attend(h_hat, features, coverage)
    h      = GRU_2(h_hat, c)
    logits = W_o . maxout(E[y] W_y + h W_h + c W_t + b)

The model instantiates two branches with independent parameters, one per
decoding direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from abm import ops
from abm.attention import Attention, AttentionContext, AttentionState, coverage_update
from abm.encoder import FeatureMap
from abm.nn import ConfigError, Init, Module
from abm.tensor import ShapeError, Tensor, no_grad
from abm.vocab import EOS, PAD, SOS, VocabularyError

L2R, R2L = "l2r", "r2l"


@dataclass
class DecoderConfig:
    vocab_size: int
    hidden: int = 64            # n
    attn_dim: int = 128         # d
    k_s: int = 5
    k_l: int = 11
    coverage_channels: int = 64
    multiscale: bool = True
    maxout_pieces: int = 2

    def validate(self) -> None:
        if self.attn_dim % self.maxout_pieces:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by maxout pieces {self.maxout_pieces}")
        if self.vocab_size <= 3:
            raise ConfigError("vocabulary must contain at least one symbol besides the reserved ids")


class GRUCell(Module):
    """``W`` maps the input to all three gates; ``U_zr``/``U_c`` are the recurrent maps."""

    def __init__(self, init: Init, in_dim: int, hidden: int) -> None:
        super().__init__()
        self.W = init.weight(in_dim, 3 * hidden)
        self.U_zr = init.weight(hidden, 2 * hidden)
        self.U_c = init.weight(hidden, hidden)
        self.b = init.zeros(3 * hidden)

    @property
    def hidden(self) -> int:
        return self.U_c.shape[0]


def gru_step(cell: GRUCell, x: Tensor, h_prev: Tensor) -> Tensor:
    """z = sig(x Wz + h Uz), r = sig(x Wr + h Ur), h~ = tanh(x Wc + (r*h) Uc), h' = (1-z) h + z h~."""
    n = cell.hidden
    if x.shape[-1] != cell.W.shape[0] or h_prev.shape[-1] != n:
        raise ShapeError(f"gru_step: input {x.shape} / state {h_prev.shape} do not fit W {cell.W.shape}, "
                         f"hidden {n}")
    gx = ops.add(ops.matmul(x, cell.W), cell.b)
    zr = ops.sigmoid(ops.add(gx[..., : 2 * n], ops.matmul(h_prev, cell.U_zr)))
    z, r = zr[..., :n], zr[..., n:]
    cand = ops.tanh(ops.add(gx[..., 2 * n:], ops.matmul(ops.mul(r, h_prev), cell.U_c)))
    return ops.add(h_prev, ops.mul(z, ops.sub(cand, h_prev)))


@dataclass
class DecoderState:
    h: Tensor
    h_hat: Optional[Tensor]
    attention: AttentionState


class StepOutput(NamedTuple):
    logits: Tensor
    state: DecoderState
    alpha: Tensor
    feature: Tensor


@dataclass
class BranchOutput:
    logits: Tensor                 # (B, T+1, K)
    alphas: list = field(default_factory=list)
    features: list = field(default_factory=list)
    direction: str = L2R
    state: Optional[DecoderState] = None


@dataclass
class Hypothesis:
    tokens: list                   # symbol ids in reading (left-to-right) order
    truncated: bool = False
    score: float = 0.0             # length-normalized log-probability
    alphas: list = field(default_factory=list)


class Branch(Module):
    def __init__(self, config: DecoderConfig, feat_dim: int, init: Init, direction: str = L2R) -> None:
        super().__init__()
        config.validate()
        if direction not in (L2R, R2L):
            raise ConfigError(f"direction must be {L2R!r} or {R2L!r}, got {direction!r}")
        self.config = config
        self.direction = direction
        n, d, K = config.hidden, config.attn_dim, config.vocab_size
        self.E = init.weight(K, n)
        self.W_init = init.weight(feat_dim, n)
        self.b_init = init.zeros(n)
        self.gru1 = GRUCell(init, n, n)
        self.att = Attention(init, n, feat_dim, d, config.k_s, config.k_l,
                             config.coverage_channels, config.multiscale)
        self.gru2 = GRUCell(init, feat_dim, n)
        self.W_y = init.weight(n, d)
        self.W_h = init.weight(n, d)
        self.W_t = init.weight(feat_dim, d)
        self.b_u = init.zeros(d)
        self.W_o = init.weight(d // config.maxout_pieces, K)
        self.b_o = init.zeros(K)

    @property
    def start_id(self) -> int:
        return SOS if self.direction == L2R else EOS

    @property
    def end_id(self) -> int:
        return EOS if self.direction == L2R else SOS

    def prepare(self, fmap: FeatureMap) -> AttentionContext:
        return self.att.prepare(fmap)

    def initial_state(self, ctx: AttentionContext) -> DecoderState:
        m = ctx.mask.astype(ctx.a.dtype)
        weights = Tensor((m / m.sum(axis=1, keepdims=True))[:, None, :])
        mean = ops.reshape(ops.matmul(weights, ctx.a), (m.shape[0], -1))
        h0 = ops.tanh(ops.add(ops.matmul(mean, self.W_init), self.b_init))
        B, M = ctx.mask.shape
        beta = Tensor(np.zeros((B, M), dtype=ctx.a.dtype))
        return DecoderState(h0, None, AttentionState(beta))

    def step(self, y_prev, state: DecoderState, ctx: AttentionContext) -> StepOutput:
        y_prev = np.asarray(y_prev, dtype=np.int64)
        K = self.config.vocab_size
        if y_prev.size and (y_prev.min() < 0 or y_prev.max() >= K):
            raise VocabularyError(f"token id outside vocabulary of size {K}: {y_prev.tolist()}")
        emb = ops.embedding(self.E, y_prev)
        h_hat = gru_step(self.gru1, emb, state.h)
        alpha, c = self.att.attend(h_hat, ctx, state.attention)
        h = gru_step(self.gru2, c, h_hat)
        u = ops.add(ops.add(ops.add(ops.matmul(emb, self.W_y), ops.matmul(h, self.W_h)),
                            ops.matmul(c, self.W_t)), self.b_u)
        feat = ops.maxout(u, self.config.maxout_pieces)
        logits = ops.add(ops.matmul(feat, self.W_o), self.b_o)
        new_state = DecoderState(h, h_hat, coverage_update(state.attention, alpha))
        return StepOutput(logits, new_state, alpha, feat)


def decoder_inputs(targets, direction: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing inputs, gold outputs and step mask for a list of id sequences.

    L2R feeds ``<sos> Y1..YT`` and predicts ``Y1..YT <eos>``; R2L feeds
    ``<eos> YT..Y1`` and predicts ``YT..Y1 <sos>``.  Arrays are ``(B, Tmax+1)``.
    """
    if not len(targets) or any(len(t) == 0 for t in targets):
        from abm.encoder import InputError

        raise InputError("teacher forcing needs non-empty targets")
    B = len(targets)
    steps = max(len(t) for t in targets) + 1
    start, end = (SOS, EOS) if direction == L2R else (EOS, SOS)
    inp = np.full((B, steps), PAD, dtype=np.int64)
    out = np.full((B, steps), PAD, dtype=np.int64)
    mask = np.zeros((B, steps), dtype=bool)
    for b, t in enumerate(targets):
        seq = list(t) if direction == L2R else list(t)[::-1]
        T = len(seq)
        inp[b, 0] = start
        inp[b, 1:T + 1] = seq
        out[b, :T] = seq
        out[b, T] = end
        mask[b, :T + 1] = True
    return inp, out, mask


def decode_teacher_forced(branch: Branch, fmap_or_ctx, targets) -> BranchOutput:
    ctx = fmap_or_ctx if isinstance(fmap_or_ctx, AttentionContext) else branch.prepare(fmap_or_ctx)
    inp, _, _ = decoder_inputs(targets, branch.direction)
    state = branch.initial_state(ctx)
    logits, alphas, feats = [], [], []
    for t in range(inp.shape[1]):
        so = branch.step(inp[:, t], state, ctx)
        state = so.state
        logits.append(so.logits)
        alphas.append(so.alpha)
        feats.append(so.feature)
    return BranchOutput(ops.stack(logits, axis=1), alphas, feats, branch.direction, state)


def _allowed_logits(branch: Branch, logits: np.ndarray) -> np.ndarray:
    """Block the reserved ids that are never emitted (start marker and padding)."""
    out = logits.astype(np.float64, copy=True)
    out[:, PAD] = -np.inf
    out[:, branch.start_id] = -np.inf
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def decode_greedy(branch: Branch, fmap_or_ctx, max_len: int, keep_alphas: bool = False) -> list[Hypothesis]:
    """Feed back the argmax until the end marker or ``max_len`` symbols, per batch item."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    with no_grad():
        ctx = fmap_or_ctx if isinstance(fmap_or_ctx, AttentionContext) else branch.prepare(fmap_or_ctx)
        B = ctx.mask.shape[0]
        state = branch.initial_state(ctx)
        y = np.full(B, branch.start_id, dtype=np.int64)
        seqs = [[] for _ in range(B)]
        logp = np.zeros(B)
        steps = np.zeros(B, dtype=np.int64)
        alphas = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        ended = np.zeros(B, dtype=bool)
        H, W = ctx.grid
        for _ in range(max_len + 1):
            so = branch.step(y, state, ctx)
            state = so.state
            lp = _log_softmax(_allowed_logits(branch, so.logits.data))
            nxt = lp.argmax(axis=1)
            for b in np.flatnonzero(~done):
                if keep_alphas:
                    alphas[b].append(so.alpha.data[b].reshape(H, W).copy())
                logp[b] += lp[b, nxt[b]]
                steps[b] += 1
                if nxt[b] == branch.end_id:
                    done[b] = ended[b] = True
                elif len(seqs[b]) == max_len:
                    # the step after the cap only exists to look for the end marker
                    done[b] = True
                    logp[b] -= lp[b, nxt[b]]
                    steps[b] -= 1
                    if keep_alphas:
                        alphas[b].pop()
                else:
                    seqs[b].append(int(nxt[b]))
            if done.all():
                break
            y = nxt
    out = []
    for b in range(B):
        toks = seqs[b] if branch.direction == L2R else seqs[b][::-1]
        out.append(Hypothesis(toks, not ended[b], float(logp[b] / max(steps[b], 1)), alphas[b]))
    return out


def _select_ctx(ctx: AttentionContext, idx) -> AttentionContext:
    idx = np.asarray(idx, dtype=np.int64)
    return AttentionContext(Tensor(ctx.a.data[idx]), Tensor(ctx.proj.data[idx]), ctx.mask[idx], ctx.grid)


def _select_state(state: DecoderState, idx) -> DecoderState:
    return DecoderState(Tensor(state.h.data[idx]), None,
                        AttentionState(Tensor(state.attention.beta.data[idx])))


def decode_beam(branch: Branch, fmap_or_ctx, width: int, max_len: int) -> Hypothesis:
    """Beam search for one image; candidates ranked by summed log-probability,
    the result chosen by log-probability divided by the number of steps taken.
    ``width=1`` reproduces :func:`decode_greedy` exactly.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    with no_grad():
        ctx0 = fmap_or_ctx if isinstance(fmap_or_ctx, AttentionContext) else branch.prepare(fmap_or_ctx)
        if ctx0.mask.shape[0] != 1:
            raise ShapeError("decode_beam works on a single image")
        state = branch.initial_state(ctx0)
        live = [([], 0.0)]
        y = np.array([branch.start_id])
        ctx = ctx0
        final: list[tuple[list, float, int, bool]] = []
        for t in range(1, max_len + 1):
            so = branch.step(y, state, ctx)
            lp = _log_softmax(_allowed_logits(branch, so.logits.data))
            cands = []
            for i, (toks, score) in enumerate(live):
                for k in np.flatnonzero(np.isfinite(lp[i])):
                    cands.append((score + lp[i, k], i, int(k)))
            # stable ordering: score desc, then beam index, then token id
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            nxt_live, parents, tokens = [], [], []
            for score, i, k in cands[:width]:
                if k == branch.end_id:
                    final.append((live[i][0], score, t, True))
                elif t == max_len:
                    final.append((live[i][0] + [k], score, t, False))
                else:
                    nxt_live.append((live[i][0] + [k], score))
                    parents.append(i)
                    tokens.append(k)
            if not nxt_live:
                break
            sel = _select_state(so.state, parents)
            state, ctx = sel, _select_ctx(ctx, parents)
            live = nxt_live
            y = np.array(tokens)
    best = max(final, key=lambda f: f[1] / f[2])
    toks = best[0] if branch.direction == L2R else best[0][::-1]
    return Hypothesis(toks, not best[3], float(best[1] / best[2]))
