"""Adadelta, the WER-plateau schedule, the training loop and checkpoint conversion."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from abm.checkpoint import Checkpoint, FormatError, save_checkpoint
from abm.config import TrainConfig, coerce, format_value
from abm.data import Sample, make_batches
from abm.metrics import exprate_at_k, wer
from abm.model import VARIANTS, ABMModel
from abm.nn import stream
from abm.tensor import NumericError, Tensor, backward, fresh_tape
from abm.vocab import Vocabulary

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "ce_l2r", "ce_r2l", "kl", "total")
EPOCH_COLUMNS = ("epoch", "lr", "train_loss", "val_wer", "val_exprate", "seconds")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdadeltaSlot:
    sq_grad: np.ndarray
    sq_update: np.ndarray


def adadelta_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, rho: float = 0.95,
                  eps: float = 1e-6, lr: float = 1.0, names: Sequence[str] | None = None) -> None:
    """In-place Adadelta update; ``state`` maps parameter index to its accumulators.

    ``E[g^2] <- rho E[g^2] + (1-rho) g^2``;
    ``dx = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g``;
    ``E[dx^2] <- rho E[dx^2] + (1-rho) dx^2``; ``p <- p + lr dx``.
    """
    names = list(names) if names is not None else [f"param[{i}]" for i in range(len(params))]
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {names[i]}")
    for i, (p, g) in enumerate(zip(params, grads)):
        slot = state.get(i)
        if slot is None:
            slot = state[i] = AdadeltaSlot(np.zeros_like(p.data), np.zeros_like(p.data))
        slot.sq_grad *= rho
        slot.sq_grad += (1 - rho) * g * g
        dx = -np.sqrt(slot.sq_update + eps) / np.sqrt(slot.sq_grad + eps) * g
        slot.sq_update *= rho
        slot.sq_update += (1 - rho) * dx * dx
        if lr:
            p.data = (p.data + lr * dx).astype(p.data.dtype, copy=False)


def clip_global_norm(grads: list[np.ndarray], threshold: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``threshold``; returns the raw norm."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if threshold > 0 and norm > threshold:
        scale = threshold / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# schedule


@dataclass
class ScheduleState:
    lr: float
    patience: int = 15
    max_drops: int = 10
    best: float = float("inf")
    wait: int = 0
    drops: int = 0


def schedule_update(state: ScheduleState, epoch_val_wer: float) -> tuple[float, bool]:
    """Halve the rate after ``patience`` epochs without a strict WER improvement."""
    if epoch_val_wer < state.best:
        state.best = epoch_val_wer
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= state.patience:
            state.lr /= 2
            state.drops += 1
            state.wait = 0
    return state.lr, state.drops >= state.max_drops


# ---------------------------------------------------------------------------
# checkpoint conversion


def to_checkpoint(model: ABMModel, cfg: TrainConfig, vocab: Vocabulary, epoch: int = 0,
                  best_wer: float = float("inf"), opt_state: dict | None = None,
                  inference_only: bool = False) -> Checkpoint:
    keep = {model.primary_name} if inference_only else set(model.branch_names)
    meta = {k: format_value(v) for k, v in cfg.to_dict().items()}
    meta.update(vocab=" ".join(vocab.symbols), epoch=str(epoch), best_wer=repr(float(best_wer)),
                branches=",".join(n for n in model.branch_names if n in keep))
    tensors = {}

    def wanted(name: str) -> bool:
        head = name.split(".", 1)[0]
        return head == "encoder" or head in keep

    params = list(model.named_parameters())
    for name, p in params:
        if wanted(name):
            tensors["param:" + name] = p.data
    for name, b in model.named_buffers():
        if wanted(name):
            tensors["buffer:" + name] = b
    if opt_state and not inference_only:
        for i, (name, _) in enumerate(params):
            if i in opt_state:
                tensors["opt:sq_grad:" + name] = opt_state[i].sq_grad
                tensors["opt:sq_update:" + name] = opt_state[i].sq_update
    return Checkpoint(meta, tensors)


def config_from_meta(meta: dict) -> TrainConfig:
    fields_ = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: coerce(k, v) for k, v in meta.items() if k in fields_})


def from_checkpoint(ckpt: Checkpoint, inference_only: bool = False):
    """Rebuild ``(model, config, vocab, opt_state)``; optionally keep only the primary branch."""
    try:
        cfg = config_from_meta(ckpt.meta)
        vocab = Vocabulary(ckpt.meta["vocab"].split(" ") if ckpt.meta.get("vocab") else [])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint config unreadable: {exc}") from exc
    present = [b for b in ckpt.meta.get("branches", "").split(",") if b]
    primary = VARIANTS[cfg.variant][0][0]
    keep = [primary] if inference_only else present
    if primary in keep and primary not in present:
        keep = present
    model = ABMModel(cfg.model_config(len(vocab)), seed=cfg.seed, branches=keep)
    params = list(model.named_parameters())
    for name, p in params:
        arr = ckpt.tensors.get("param:" + name)
        if arr is None:
            raise FormatError(f"checkpoint lacks parameter {name}")
        if arr.shape != p.shape:
            raise FormatError(f"parameter {name}: stored shape {arr.shape}, model expects {p.shape}")
        p.data = arr.astype(p.data.dtype).copy()
    for name, buf in model.named_buffers():
        arr = ckpt.tensors.get("buffer:" + name)
        if arr is not None:
            buf[...] = arr
    opt_state = {}
    if not inference_only:
        for i, (name, _) in enumerate(params):
            g = ckpt.tensors.get("opt:sq_grad:" + name)
            u = ckpt.tensors.get("opt:sq_update:" + name)
            if g is not None and u is not None:
                opt_state[i] = AdadeltaSlot(g.copy(), u.copy())
    model.eval()
    return model, cfg, vocab, opt_state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochResult:
    epoch: int
    lr: float
    train_loss: float
    val_wer: float
    val_exprate: float
    seconds: float


@dataclass
class FitResult:
    model: ABMModel
    best_wer: float
    best_epoch: int
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)       # LossBreakdown value dicts with epoch/step
    stop_reason: str = ""


def recognize_all(model: ABMModel, samples: Sequence[Sample], batch_size: int = 16, max_len: int = 64,
                  branch: str | None = None) -> list[list[int]]:
    """Greedy-decode ``samples`` (in order) with one branch."""
    preds = []
    for batch in make_batches(samples, batch_size):
        hyps = model.recognize(batch.images, batch.pixel_mask, branch=branch, max_len=max_len)
        preds.extend(h.tokens for h in hyps)
    return preds


def evaluate(model: ABMModel, samples: Sequence[Sample], batch_size: int = 16, max_len: int = 64,
             branch: str | None = None) -> tuple[float, float]:
    preds = recognize_all(model, samples, batch_size, max_len, branch)
    refs = [s.target for s in samples]
    return wer(preds, refs), exprate_at_k(preds, refs, 0)


def _epoch_batches(samples, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.sort_by_length:
        batches = make_batches(samples, cfg.batch_size, sort_by_length=True)
        return [batches[i] for i in rng.permutation(len(batches))]
    order = rng.permutation(len(samples))
    return make_batches([samples[i] for i in order], cfg.batch_size)


def fit(cfg: TrainConfig, train: Sequence[Sample], val: Sequence[Sample], vocab: Vocabulary,
        out_dir=None, model: ABMModel | None = None,
        on_epoch: Callable[[EpochResult], None] | None = None) -> FitResult:
    """Train ``cfg.variant`` on ``train``; validate with greedy decoding each epoch.

    With ``out_dir`` the step log (``train_log.csv``), epoch log
    (``epochs.csv``) and ``best.abmc`` / ``last.abmc`` are written there.
    A non-finite loss raises :class:`NumericError` after the last good
    checkpoint is already on disk.
    """
    cfg.validate()
    if not train or not val:
        raise ValueError("training and validation sets must be nonempty")
    model = model or ABMModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    named = [(n, p) for n, p in model.named_parameters()
             if not (cfg.freeze_encoder and n.startswith("encoder."))]
    names = [n for n, _ in named]
    params = [p for _, p in named]
    opt_state: dict = {}
    sched = ScheduleState(cfg.lr, cfg.patience, cfg.max_lr_drops)
    rng = stream(cfg.seed, "shuffle")
    val_len = min(cfg.max_len, 2 * max(len(s.target) for s in val) + 5)
    result = FitResult(model, float("inf"), 0)

    step_fh = epoch_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        step_fh = open(out_dir / "train_log.csv", "w", newline="", encoding="utf-8")
        epoch_fh = open(out_dir / "epochs.csv", "w", newline="", encoding="utf-8")
        for fh in (step_fh, epoch_fh):
            fh.writelines(f"# {line}\n" for line in cfg.lines())
        step_csv, epoch_csv = csv.writer(step_fh), csv.writer(epoch_fh)
        step_csv.writerow(LOG_COLUMNS)
        epoch_csv.writerow(EPOCH_COLUMNS)

    def checkpoint(name: str, epoch: int) -> None:
        if out_dir is not None:
            save_checkpoint(out_dir / name, to_checkpoint(model, cfg, vocab, epoch, result.best_wer, opt_state))

    try:
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            losses, sizes = [], []
            for batch in _epoch_batches(train, cfg, rng):
                step += 1
                with fresh_tape():
                    parts = model.loss(batch, cfg.lam, cfg.temperature, cfg.detach_target)
                    row = {"epoch": epoch, "step": step, **parts.values()}
                    if not np.isfinite(row["total"]):
                        raise NumericError(f"non-finite loss at epoch {epoch}, step {step}: {row}")
                    backward(parts.total, params)
                grads = [p.grad for p in params]
                clip_global_norm(grads, cfg.clip)
                adadelta_step(params, grads, opt_state, cfg.rho, cfg.eps, sched.lr, names)
                model.zero_grad()
                result.steps.append(row)
                losses.append(row["total"])
                sizes.append(len(batch))
                if step_fh:
                    step_csv.writerow([row[c] if c in ("epoch", "step") else f"{row[c]:.6f}" for c in LOG_COLUMNS])
            v_wer, v_exp = evaluate(model, val, cfg.batch_size, val_len)
            lr_used = sched.lr
            improved = v_wer < result.best_wer
            if improved:
                result.best_wer, result.best_epoch = v_wer, epoch
            _, stop = schedule_update(sched, v_wer)
            er = EpochResult(epoch, lr_used, float(np.average(losses, weights=sizes)), v_wer, v_exp, time.perf_counter() - t0)
            result.epochs.append(er)
            log.info("epoch %d lr %.4g loss %.4f val WER %.2f ExpRate %.2f (%.1fs)",
                     epoch, lr_used, er.train_loss, v_wer, v_exp, er.seconds)
            if epoch_fh:
                epoch_csv.writerow([epoch, f"{lr_used:.6g}", f"{er.train_loss:.6f}", f"{v_wer:.4f}",
                                    f"{v_exp:.4f}", f"{er.seconds:.3f}"])
                epoch_fh.flush()
                step_fh.flush()
            if improved:
                checkpoint("best.abmc", epoch)
            checkpoint("last.abmc", epoch)
            if on_epoch:
                on_epoch(er)
            if stop:
                result.stop_reason = f"learning rate dropped {sched.drops} times"
                break
            if v_exp >= cfg.target_exprate:
                result.stop_reason = f"validation ExpRate {v_exp:.2f} reached target"
                break
        else:
            result.stop_reason = f"epoch limit {cfg.epochs}"
    finally:
        for fh in (step_fh, epoch_fh):
            if fh:
                fh.close()
    return result
