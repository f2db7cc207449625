"""Acceptance checks, one test per criterion.

Each test appends a ``PASS``/``FAIL`` line to ``RESULTS``; conftest prints
them as a block at the end of the session.  The overfit run (criterion 5)
takes several minutes on one core and its checkpoint is reused by
criterion 6.  Criterion 9 is a long trend report that only runs when
``ABM_TREND=1`` is set and never fails the suite.
"""
import csv
import os
import statistics
import time

import numpy as np
import pytest

from abm import ops
from abm.checkpoint import load_checkpoint
from abm.cli import main
from abm.config import TrainConfig
from abm.data import collate, load_dir
from abm.decoder import GRUCell, decode_teacher_forced, gru_step
from abm.metrics import edit_distance, wer
from abm.nn import Init, stream
from abm.objective import align_r2l, kl_loss, soften, total_loss
from abm.synth import default_vocabulary, gen_synthetic
from abm.tensor import Tensor, no_grad
from abm.trainer import ScheduleState, fit, from_checkpoint, recognize_all, schedule_update, to_checkpoint
from conftest import random_samples, tiny_model
from oracles import conv2d_direct, edit_distance_dp, gru_reference, matmul_loops, softmax_formula

RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    """Desk-config ABM trained through the CLI on 50 short synthetic expressions."""
    root = tmp_path_factory.mktemp("overfit")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "50", "--seed", "7",
                 "--min-len", "3", "--max-len", "8"]) == 0
    t0 = time.perf_counter()
    code = main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--variant", "abm",
                 "--epochs", "200", "--seed", "0", "--val-fraction", "0", "--target-exprate", "95"])
    seconds = time.perf_counter() - t0
    assert code == 0
    return root, seconds


# 1 -----------------------------------------------------------------------------


def test_criterion_1_gradient_suite(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck"])
    seconds = time.perf_counter() - t0
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith(("PASS ", "FAIL "))]
    worst = out.strip().splitlines()[-1]
    ok = code == 0 and len(lines) > 0 and not any(ln.startswith("FAIL") for ln in lines) and seconds < 60
    record(1, ok, f"{len(lines)} tensors, {worst}, {seconds:.1f}s (< 60s)")


# 2 -----------------------------------------------------------------------------


def test_criterion_2_objective_identities():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((3, 5, 9)) * 4)
    self_kl = max(abs(kl_loss(x, x, S).item()) for S in (0.5, 1.0, 2.0, 7.0))
    worst = np.inf
    for _ in range(1000):
        B, T, K = rng.integers(1, 4), rng.integers(1, 5), rng.integers(2, 8)
        p, q = rng.standard_normal((2, B, T, K)) * rng.uniform(0.1, 10)
        worst = min(worst, kl_loss(Tensor(p), Tensor(q), float(rng.uniform(0.2, 5))).item())
    z = rng.standard_normal((6, 11)) * 6
    soft_err = np.abs(soften(z, 1.0) - softmax_formula(z)).max()

    model, _, batch = tiny_model(dtype="float64")
    with no_grad():
        fmap = model.encode(batch.images, batch.pixel_mask)
        outs = [decode_teacher_forced(b, fmap, batch.targets) for b in model.branches()]
    parts = total_loss(outs[0], outs[1], batch.targets, lam=0.0)
    bitwise = parts.total.item() == parts.ce_l2r.item() + parts.ce_r2l.item()

    lengths = [3, 1, 5]
    y = rng.standard_normal((3, 6, 4))
    involution = np.array_equal(align_r2l(align_r2l(y, lengths), lengths), y)

    ok = self_kl == 0.0 and worst >= -1e-9 and soft_err <= 1e-12 and bitwise and involution
    record(2, ok, f"KL(x,x)={self_kl:g}, min KL over 1000 trials={worst:.2e}, "
                  f"soften-softmax={soft_err:.1e}, lambda=0 bitwise={bitwise}, involution={involution}")


# 3 -----------------------------------------------------------------------------


def test_criterion_3_attention_invariants():
    model, vocab, _ = tiny_model(dtype="float64")
    model.eval()
    samples = random_samples(5, vocab, seed=3)
    batch = collate(samples)
    alpha_err = beta_err = outside = 0.0
    with no_grad():
        fmap = model.encode(batch.images, batch.pixel_mask)
        mask = fmap.flat_mask().astype(bool)
        for branch in model.branches():
            out = decode_teacher_forced(branch, fmap, batch.targets)
            for a in out.alphas:
                alpha_err = max(alpha_err, np.abs(a.data.sum(axis=1) - 1).max())
                outside = max(outside, np.abs(a.data[~mask]).max(initial=0.0))
            beta_err = max(beta_err, np.abs(out.state.attention.beta.data - sum(a.data for a in out.alphas)).max())
        batched = model.loss(batch)
        solo = [model.loss(collate([s])) for s in samples]
    pad_err = max(abs(getattr(batched, f).item() - np.mean([getattr(s, f).item() for s in solo]))
                  for f in ("ce_l2r", "ce_r2l", "kl"))
    ok = alpha_err <= 1e-6 and outside == 0.0 and beta_err <= 1e-5 and pad_err <= 1e-5
    record(3, ok, f"|sum(alpha)-1|={alpha_err:.1e}, alpha off-mask={outside:g}, "
                  f"|beta-sum(alpha)|={beta_err:.1e}, padding loss gap={pad_err:.1e}")


# 4 -----------------------------------------------------------------------------


def test_criterion_4_oracle_equivalence():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(10_000):
        a = rng.integers(0, 6, rng.integers(0, 14)).tolist()
        b = rng.integers(0, 6, rng.integers(0, 14)).tolist()
        mismatches += edit_distance(a, b) != edit_distance_dp(a, b)

    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    mm = np.abs(ops.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b)).max()
    conv = 0.0
    for stride, pad, k in [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5)]:
        x, w, bias = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(bias), stride=stride, padding=pad).data
        conv = max(conv, np.abs(got - conv2d_direct(x, w, bias, stride, pad)).max())
    z = rng.standard_normal((4, 9)) * 5
    sm = np.abs(ops.softmax(Tensor(z)).data - softmax_formula(z)).max()

    n, d = 5, 7
    cell = GRUCell(Init(stream(0, "gru"), "glorot", np.float64), d, n)
    cell.b.data = rng.standard_normal(3 * n)
    x, h = rng.standard_normal((4, d)), rng.standard_normal((4, n))
    got = gru_step(cell, Tensor(x), Tensor(h)).data
    W, U, bb = cell.W.data, cell.U_zr.data, cell.b.data
    gru = max(np.abs(got[i] - gru_reference(x[i], h[i], W[:, :n], W[:, n:2 * n], W[:, 2 * n:], U[:, :n],
                                             U[:, n:], cell.U_c.data, bb[:n], bb[n:2 * n], bb[2 * n:])).max()
              for i in range(4))
    ok = mismatches == 0 and mm <= 1e-12 and conv <= 1e-12 and sm <= 1e-12 and gru <= 1e-10
    record(4, ok, f"edit-distance mismatches={mismatches}/10000, matmul={mm:.1e}, conv2d={conv:.1e}, "
                  f"softmax={sm:.1e}, gru={gru:.1e}")


# 5 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_overfit_run(overfit, tmp_path, capsys):
    root, seconds = overfit
    capsys.readouterr()
    with open(root / "run" / "results.csv", newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    ckpt = str(root / "run" / "last.abmc")
    report = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(root / "data"), "--csv", str(report)]) == 0
    with open(report, newline="") as fh:
        eval_rate = float({r["metric"]: r["value"] for r in csv.DictReader(fh)}["exprate"])

    samples, vocab = load_dir(root / "data")
    hits = 0
    for s in samples:
        capsys.readouterr()
        assert main(["infer", "--checkpoint", ckpt, "--image", str(root / "data" / "images" / f"{s.id}.png")]) == 0
        hits += capsys.readouterr().out.strip() == vocab.detokenize(s.target)
    infer_rate = 100.0 * hits / len(samples)
    epochs = int(row["epochs_run"])
    ok = eval_rate >= 95 and infer_rate >= 95 and epochs <= 200 and seconds < 600
    record(5, ok, f"stopped after {epochs} epochs ({row['stop_reason']}), {seconds:.0f}s on "
                  f"{os.cpu_count()} core(s); eval ExpRate={eval_rate:.1f}%, infer matches={infer_rate:.1f}%")


# 6 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_inference_branch_isolation(overfit):
    root, _ = overfit
    model, cfg, vocab, _ = from_checkpoint(load_checkpoint(root / "run" / "last.abmc"))
    test = gen_synthetic(20, 2024, 3, 8, vocab)
    before = recognize_all(model, test, 16, cfg.max_len, "l2r")
    for name, p in model.named_parameters():
        if name.startswith("r2l."):
            p.data[...] = 0
    after = recognize_all(model, test, 16, cfg.max_len, "l2r")
    slim = to_checkpoint(model, cfg, vocab, inference_only=True)
    leaked = [n for n in slim.tensors if "r2l" in n]
    ok = before == after and not leaked
    record(6, ok, f"L2R outputs unchanged on {sum(a == b for a, b in zip(before, after))}/20 images after "
                  f"zeroing R2L; R2L tensors in inference checkpoint: {len(leaked)}")


# 7 -----------------------------------------------------------------------------


def test_criterion_7_schedule_conformance():
    trace = [10.0 - i for i in range(5)] + [6.0] * 15 + [5.0] + [5.0] * 150
    state = ScheduleState(1.0, 15, 10)
    drops, stop_epoch = [], None
    for epoch, w in enumerate(trace, 1):
        before = state.lr
        lr, stop = schedule_update(state, w)
        if lr < before:
            drops.append(epoch)
        if stop:
            stop_epoch = epoch
            break
    expected = [20, 36, 51, 66, 81, 96, 111, 126, 141, 156]
    ok = drops == expected and stop_epoch == 156 and state.lr == 2.0 ** -10
    record(7, ok, f"halvings at epochs {drops}, stop at {stop_epoch}")


# 8 -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fifty(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "50", "--seed", "7",
                 "--min-len", "3", "--max-len", "8"]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.slow
def test_criterion_8_ablation_machinery(fifty, capsys):
    data = str(fifty / "data")
    finished = []
    for variant in ("uni-l2r", "uni-r2l", "aum", "abm"):
        out = fifty / variant
        code = main(["train", "--data", data, "--out", str(out), "--variant", variant, "--epochs", "2"])
        rows = _rows(out / "results.csv") if code == 0 else []
        finished.append(code == 0 and len(rows) == 1 and rows[0]["stop_reason"] and (out / "last.abmc").exists())
    lam = _rows(fifty / "lam" / "results.csv") if main(
        ["train", "--data", data, "--out", str(fifty / "lam"), "--epochs", "1",
         "--lambda", "0.1,0.3,0.5,0.7,1.0"]) == 0 else []
    ker = _rows(fifty / "ker" / "results.csv") if main(
        ["train", "--data", data, "--out", str(fifty / "ker"), "--epochs", "1",
         "--ks", "3,5,7", "--kl-kernel", "7,11,11"]) == 0 else []
    capsys.readouterr()
    lam_ok = [r["lam"] for r in lam] == ["0.1", "0.3", "0.5", "0.7", "1"]
    ker_ok = [(r["k_s"], r["k_l"]) for r in ker] == [("3", "7"), ("5", "11"), ("7", "11")]
    ok = all(finished) and lam_ok and ker_ok
    record(8, ok, f"variants finished={sum(finished)}/4, lambda rows={len(lam)}/5, kernel rows={len(ker)}/3")


# 9 -----------------------------------------------------------------------------


@pytest.mark.skipif(os.environ.get("ABM_TREND") != "1", reason="long trend report; set ABM_TREND=1 to run")
def test_criterion_9_trend_report():
    """Median-of-3-seeds test WER, ABM's L2R branch against a plain L2R model.

    Reported only; the outcome never fails the suite.
    """
    epochs = int(os.environ.get("ABM_TREND_EPOCHS", "30"))
    vocab = default_vocabulary()
    scores = {"abm": [], "uni-l2r": []}
    for seed in range(3):
        data = gen_synthetic(500, 100 + seed, 10, 25, vocab)
        train, test = data[:450], data[450:]
        for variant in scores:
            cfg = TrainConfig(variant=variant, seed=seed, epochs=epochs, val_fraction=0.0, max_len=40)
            res = fit(cfg, train, train[:50], vocab)
            preds = recognize_all(res.model, test, 16, 40, "l2r")
            scores[variant].append(wer(preds, [s.target for s in test]))
    med = {k: statistics.median(v) for k, v in scores.items()}
    holds = med["abm"] <= med["uni-l2r"]
    RESULTS.append(f"INFO  criterion 9 (non-gating): median test WER abm-l2r={med['abm']:.2f} "
                   f"uni-l2r={med['uni-l2r']:.2f} over seeds {scores}; direction holds={holds}")

