"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from abm.tensor import NumericError, Tensor, backward, fresh_tape, no_grad


@dataclass
class TensorReport:
    name: str
    shape: tuple
    coords_checked: int
    max_rel_error: float
    worst_coord: tuple | None

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold


@dataclass
class GradCheckReport:
    threshold: float
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.passed(self.threshold) for t in self.tensors)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def failures(self) -> list[TensorReport]:
        return [t for t in self.tensors if not t.passed(self.threshold)]

    def format(self) -> str:
        lines = []
        for t in self.tensors:
            flag = "PASS" if t.passed(self.threshold) else "FAIL"
            lines.append(f"{flag}  {t.name:<40s} {str(t.shape):<18s} n={t.coords_checked:<4d} "
                         f"max_rel_err={t.max_rel_error:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: {len(self.tensors)} tensors, max relative error "
                     f"{self.max_rel_error:.3e} (threshold {self.threshold:.0e})")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _sample_coords(shape, n_samples, rng, full_upto=256):
    size = int(np.prod(shape))
    if size <= max(full_upto, n_samples):
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=n_samples, replace=False))
    return [np.unravel_index(int(i), shape) for i in flat]


def _difference(f, p, c, h, five_point):
    orig = p.data[c]
    offsets = (2, 1, -1, -2) if five_point else (1, -1)
    vals = []
    with no_grad():
        for k in offsets:
            p.data[c] = orig + k * h
            vals.append(f().item())
    p.data[c] = orig
    if five_point:
        return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return (vals[0] - vals[1]) / (2 * h)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    threshold: float = 1e-4,
    n_samples: int = 64,
    seed: int = 0,
    names: Sequence[str] | None = None,
    analytic: Sequence[np.ndarray] | None = None,
    five_point: bool = False,
    full_upto: int = 256,
    retry_eps: float | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must rebuild the loss from the current
    contents of ``params`` each time it is called.  Tensors with at most
    ``full_upto`` elements are checked on every coordinate, larger ones on
    ``n_samples`` random coordinates.  ``analytic`` may supply precomputed gradients
    (used by tests to corrupt them on purpose).

    ``five_point`` switches to the fourth-order stencil
    ``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``, which tolerates a
    larger ``h`` and so keeps rounding noise below tiny gradients of a
    loss with a large absolute value.  A large ``h`` can step over a kink
    (ReLU, max-pool, maxout), so when ``retry_eps`` is given a coordinate
    that disagrees is probed again with a plain central difference at that
    smaller step (once its error exceeds a tenth of the threshold) and keeps
    the better of the two errors.
    """
    report = GradCheckReport(threshold=threshold)
    if not params:
        return report
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    if analytic is None:
        for p in params:
            p.grad = None
        with fresh_tape():
            loss = f()
            if not np.isfinite(loss.data).all():
                raise NumericError(f"grad_check: loss is not finite ({loss.item()})")
            backward(loss, params)
        analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    for name, p, grad in zip(names, params, analytic):
        coords = _sample_coords(p.shape, n_samples, rng, full_upto)
        worst, worst_c = 0.0, None
        for c in coords:
            numeric = _difference(f, p, c, eps, five_point)
            if not np.isfinite(numeric):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name}{c}")
            err = relative_error(float(grad[c]), numeric)
            if err >= 0.1 * threshold and retry_eps is not None:
                err = min(err, relative_error(float(grad[c]), _difference(f, p, c, retry_eps, False)))
            if err > worst or worst_c is None:
                worst, worst_c = err, c
        report.tensors.append(TensorReport(name, tuple(p.shape), len(coords), worst, worst_c))
    return report


# ---------------------------------------------------------------------------
# whole-model check on a tiny configuration

TINY = dict(
    variant="abm", dtype="float64", blocks=1, layers_per_block=2, growth_rate=4, initial_channels=6,
    downsample_factor=2, out_channels=16, hidden=16, attn_dim=32, coverage_channels=4, k_s=5, k_l=11,
)
TINY_SYMBOLS = ("x", "y", "+", "1", "2")   # K = 8 with the three reserved ids
TINY_IMAGE = 24                            # 12 x 12 feature grid after one 2x pool


def tiny_problem(seed: int = 0):
    """Two images (one narrower, so masking is exercised) with 3- and 2-token targets."""
    from abm.data import Sample, collate
    from abm.vocab import Vocabulary

    vocab = Vocabulary(TINY_SYMBOLS)
    rng = np.random.default_rng([seed, 11])
    wide = rng.random((TINY_IMAGE, TINY_IMAGE)).astype(np.float32)
    narrow = rng.random((TINY_IMAGE, TINY_IMAGE - 8)).astype(np.float32)
    batch = collate([Sample("g0", wide, vocab.encode(["x", "+", "1"])),
                     Sample("g1", narrow, vocab.encode(["y", "2"]))])
    return vocab, batch


def check_model(overrides: dict | None = None, seed: int = 0, eps: float = 3e-3, threshold: float = 1e-4,
                n_samples: int = 24) -> GradCheckReport:
    """Finite-difference check of every parameter of a tiny two-branch model
    under the full training objective, in float64 and training mode.

    The loss sums over steps and branches, so its absolute value is around
    20 while some attention gradients sit near 1e-7.  A plain central
    difference cannot resolve those, hence the five-point stencil, with a
    small-step retry for coordinates sitting near a kink.  Each
    tensor is probed on ``n_samples`` coordinates (all of them if smaller).
    """
    from abm.config import TrainConfig
    from abm.model import ABMModel

    cfg = TrainConfig(**{**TINY, **(overrides or {}), "seed": seed})
    vocab, batch = tiny_problem(seed)
    batch.images = batch.images.astype(np.float64)
    model = ABMModel(cfg.model_config(len(vocab)), seed=seed)
    model.train()
    named = list(model.named_parameters())

    def loss():
        return model.loss(batch, cfg.lam, cfg.temperature, cfg.detach_target).total

    return grad_check(loss, [p for _, p in named], eps=eps, threshold=threshold, n_samples=n_samples,
                      seed=seed, names=[n for n, _ in named], five_point=True, full_upto=0,
                      retry_eps=1e-6)
