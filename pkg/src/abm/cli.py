"""``abm`` command-line entry point.

Exit codes: 0 success, 2 usage, 3 I/O, 4 format or capability, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from abm import __version__
from abm.checkpoint import FormatError, IntegrityError, load_checkpoint
from abm.config import coerce, load_config, parse_lines
from abm.data import DatasetError, load_dir, make_batches, read_image, save_dataset, split_validation, write_pgm
from abm.decoder import L2R, decode_beam, decode_teacher_forced
from abm.metrics import EvalReport
from abm.model import VARIANTS, CapabilityError
from abm.nn import ConfigError
from abm.synth import default_vocabulary, gen_synthetic
from abm.tensor import NumericError, no_grad
from abm.trainer import fit, from_checkpoint, recognize_all
from abm.vocab import VocabularyError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("abm")


class UsageError(Exception):
    pass


def _csv_list(raw: str, kind):
    try:
        return [kind(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {raw!r} as a comma list of {kind.__name__}") from None


def _load_model(path, inference_only: bool):
    return from_checkpoint(load_checkpoint(path), inference_only=inference_only)


def _image_batch(path):
    img = read_image(path)
    return img[None, None], np.ones((1,) + img.shape, dtype=np.float32)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if not 1 <= args.min_len <= args.max_len:
        raise UsageError("need 1 <= --min-len <= --max-len")
    vocab = default_vocabulary()
    samples = gen_synthetic(args.count, args.seed, args.min_len, args.max_len, vocab)
    save_dataset(args.out, samples, vocab)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = coerce(k.strip(), v)
    direct = dict(variant=args.variant, epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                  val_fraction=args.val_fraction, temperature=args.temp, target_exprate=args.target_exprate, lr=args.lr)
    out.update({k: v for k, v in direct.items() if v is not None})
    if args.detach_target:
        out["detach_target"] = True
    return out


RESULT_COLUMNS = ("variant", "lam", "k_s", "k_l", "epochs_run", "best_wer", "train_exprate", "stop_reason")


def cmd_train(args) -> int:
    if args.variant is not None and args.variant not in VARIANTS:
        raise UsageError(f"invalid variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    base = load_config(args.config, _train_overrides(args))
    lams = _csv_list(args.lam, float) if args.lam else [base.lam]
    ks = _csv_list(args.ks, int) if args.ks else [base.k_s]
    kls = _csv_list(args.kl_kernel, int) if args.kl_kernel else [base.k_l]
    if len(ks) != len(kls):
        if len(ks) == 1:
            ks = ks * len(kls)
        elif len(kls) == 1:
            kls = kls * len(ks)
        else:
            raise UsageError("--ks and --kl-kernel lists must have equal length (they are paired)")
    settings = [(lam, k, kl) for lam in lams for k, kl in zip(ks, kls)]
    samples, vocab = load_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    print("\t".join(RESULT_COLUMNS))
    for lam, k, kl in settings:
        cfg = base.replace(lam=lam, k_s=k, k_l=kl)
        cfg.validate()
        run_dir = out if len(settings) == 1 else out / f"{cfg.variant}_lam{lam:g}_k{k}-{kl}"
        for line in cfg.lines():
            log.info("config %s", line)
        train, val = split_validation(samples, cfg.val_fraction, cfg.seed)
        result = fit(cfg, train, val, vocab, run_dir)
        preds = recognize_all(result.model, samples, cfg.batch_size, cfg.max_len)
        report = EvalReport.compute(preds, [s.target for s in samples])
        row = (cfg.variant, f"{lam:g}", k, kl, len(result.epochs), f"{result.best_wer:.4f}",
               f"{report.exprate:.2f}", result.stop_reason)
        rows.append(row)
        print("\t".join(str(v) for v in row), flush=True)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        writer.writerows(rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, vocab, _ = _load_model(args.checkpoint, inference_only=False)
    samples, _ = load_dir(args.data, vocab)
    if not samples:
        raise DatasetError(f"no samples in {args.data}")
    preds = recognize_all(model, samples, cfg.batch_size, args.max_len or cfg.max_len, args.branch)
    report = EvalReport.compute(preds, [s.target for s in samples])
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, cfg, vocab, _ = _load_model(args.checkpoint, inference_only=True)
    images, mask = _image_batch(args.image)
    max_len = args.max_len or cfg.max_len
    if args.beam and args.beam > 1:
        with no_grad():
            hyp = decode_beam(model.branch(), model.encode(images, mask), args.beam, max_len)
    else:
        model.eval()
        hyp = model.recognize(images, mask, max_len=max_len)[0]
    print(vocab.detokenize(hyp.tokens))
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    model, cfg, vocab, _ = _load_model(args.checkpoint, inference_only=True)
    images, mask = _image_batch(args.image)
    hyp = model.recognize(images, mask, max_len=args.max_len or cfg.max_len, keep_alphas=True)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    branch = model.branch()
    emitted = hyp.tokens if branch.direction == L2R else hyp.tokens[::-1]
    labels = vocab.decode(emitted) + ([vocab.decode([branch.end_id])[0]] if not hyp.truncated else [])
    for t, (tok, alpha) in enumerate(zip(labels, hyp.alphas)):
        lines = [tok] + [" ".join(f"{v:.6g}" for v in row) for row in alpha]
        (out / f"step_{t:03d}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if args.pgm:
            write_pgm(out / f"step_{t:03d}.pgm", alpha)
    print(f"wrote {len(hyp.alphas)} steps to {out}")
    return EXIT_OK


def cmd_dump_features(args) -> int:
    model, cfg, vocab, _ = _load_model(args.checkpoint, inference_only=True)
    samples, _ = load_dir(args.data, vocab)
    branch = model.branch()
    model.eval()
    out = Path(args.out)
    if out.parent:
        out.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with open(out, "w", newline="", encoding="utf-8") as fh, no_grad():
        writer = csv.writer(fh)
        dim = cfg.attn_dim // 2
        writer.writerow(["id", "step", "token"] + [f"f{i}" for i in range(dim)])
        for batch in make_batches(samples, cfg.batch_size):
            res = decode_teacher_forced(branch, model.encode(batch.images, batch.pixel_mask), batch.targets)
            for b, (sid, target) in enumerate(zip(batch.ids, batch.targets)):
                order = target if branch.direction == L2R else target[::-1]
                for t, tok in enumerate(order):
                    feat = res.features[t].data[b]
                    writer.writerow([sid, t, vocab.decode([tok])[0]] + [f"{v:.6g}" for v in feat])
                    rows += 1
    print(f"wrote {rows} feature rows to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from abm.gradcheck import check_model

    overrides = parse_lines(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    overrides["dtype"] = "float64"
    report = check_model(overrides, seed=args.seed)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abm", description="Bidirectional mutual-learning math recognizer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--min-len", type=int, default=3)
    g.add_argument("--max-len", type=int, default=8)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one setting or a sweep")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    t.add_argument("--lambda", dest="lam", help="KL weight, or a comma list for a sweep")
    t.add_argument("--temp", type=float, help="softening temperature S")
    t.add_argument("--ks", help="small coverage kernel size (comma list pairs with --kl-kernel)")
    t.add_argument("--kl-kernel", help="large coverage kernel size")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--val-fraction", type=float)
    t.add_argument("--target-exprate", type=float, help="stop once validation ExpRate reaches this")
    t.add_argument("--detach-target", action="store_true", help="stop gradients into the KL target")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--branch", choices=("l2r", "r2l"), default=None)
    e.add_argument("--csv")
    e.add_argument("--max-len", type=int)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="recognize one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--beam", type=int, default=0)
    i.add_argument("--max-len", type=int)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("dump-attention", help="write per-step attention grids")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--image", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--pgm", action="store_true", help="also write PGM heatmaps")
    a.add_argument("--max-len", type=int)
    a.set_defaults(func=cmd_dump_attention)

    f = sub.add_parser("dump-features", help="write pre-classifier features as CSV")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_dump_features)

    c = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    c.add_argument("--config", help="key=value overrides of the tiny configuration")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"abm {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, IntegrityError, CapabilityError, VocabularyError) as exc:
        print(f"abm {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"abm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError) as exc:
        print(f"abm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
