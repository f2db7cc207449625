import csv
from pathlib import Path

import numpy as np
import pytest

from abm import ops
from abm.cli import main
from abm.data import load_dir, read_labels

TINY_CFG = """\
blocks=1
layers_per_block=2
growth_rate=4
initial_channels=6
downsample_factor=2
out_channels=16
hidden=16
attn_dim=32
coverage_channels=4
batch_size=4
val_fraction=0
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "6", "--seed", "2"]) == 0
    (root / "tiny.cfg").write_text(TINY_CFG)
    code = main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config",
                 str(root / "tiny.cfg"), "--variant", "abm", "--epochs", "2", "--seed", "1"])
    assert code == 0
    return root


def test_gen_data_deterministic_and_bounded(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--count", "7", "--seed", "7",
                     "--min-len", "3", "--max-len", "8"]) == 0
    for f in ("labels.txt", "vocab.txt", "images/syn00003.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert all(3 <= len(toks) <= 8 for _, toks in read_labels(tmp_path / "a" / "labels.txt"))


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "0"]) == 2
    main(["gen-data", "--out", str(tmp_path / "d"), "--count", "2"])
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--variant", "bi"]) == 2
    err = capsys.readouterr().err
    assert "uni-l2r" in err and "abm" in err
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_train_outputs(trained):
    run = trained / "run"
    rows = list(csv.reader((run / "results.csv").open()))
    assert rows[0][0] == "variant" and len(rows) == 2
    assert (run / "best.abmc").exists() and (run / "epochs.csv").exists()


def test_eval_report(trained, capsys):
    csv_path = trained / "report.csv"
    assert main(["eval", "--checkpoint", str(trained / "run" / "last.abmc"), "--data", str(trained / "data"),
                 "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out
    vals = {r[0]: float(r[1]) for r in list(csv.reader(csv_path.open()))[1:]}
    assert vals["exprate"] <= vals["le1"] <= vals["le2"]
    assert "wer" in out and "prefix2" in out and "suffix5" in out
    assert main(["eval", "--checkpoint", str(trained / "run" / "last.abmc"), "--data", str(trained / "data"),
                 "--branch", "r2l"]) == 0


def test_eval_missing_branch_is_capability_error(trained, tmp_path):
    from abm.checkpoint import load_checkpoint, save_checkpoint
    from abm.trainer import from_checkpoint, to_checkpoint

    model, cfg, vocab, _ = from_checkpoint(load_checkpoint(trained / "run" / "last.abmc"))
    save_checkpoint(tmp_path / "slim.abmc", to_checkpoint(model, cfg, vocab, inference_only=True))
    assert main(["eval", "--checkpoint", str(tmp_path / "slim.abmc"), "--data", str(trained / "data"),
                 "--branch", "r2l"]) == 4


def test_infer_and_beam_one(trained, capsys):
    img = trained / "data" / "images" / "syn00000.png"
    ck = str(trained / "run" / "last.abmc")
    assert main(["infer", "--checkpoint", ck, "--image", str(img)]) == 0
    greedy = capsys.readouterr().out
    assert main(["infer", "--checkpoint", ck, "--image", str(img), "--beam", "1"]) == 0
    assert capsys.readouterr().out == greedy
    assert len(greedy.splitlines()) == 1
    assert main(["infer", "--checkpoint", ck, "--image", str(img), "--beam", "3"]) == 0


def test_infer_io_and_format_errors(trained, tmp_path):
    ck = str(trained / "run" / "last.abmc")
    assert main(["infer", "--checkpoint", ck, "--image", str(tmp_path / "nope.png")]) == 3
    (tmp_path / "junk.png").write_bytes(b"not an image")
    assert main(["infer", "--checkpoint", ck, "--image", str(tmp_path / "junk.png")]) == 3
    (tmp_path / "bad.abmc").write_bytes(b"nope")
    img = str(trained / "data" / "images" / "syn00000.png")
    assert main(["infer", "--checkpoint", str(tmp_path / "bad.abmc"), "--image", img]) == 4


def test_dump_attention(trained, tmp_path, capsys):
    ck = str(trained / "run" / "last.abmc")
    img = trained / "data" / "images" / "syn00001.png"
    main(["infer", "--checkpoint", ck, "--image", str(img)])
    decoded = capsys.readouterr().out.split()
    assert main(["dump-attention", "--checkpoint", ck, "--image", str(img), "--out", str(tmp_path), "--pgm"]) == 0
    steps = sorted(tmp_path.glob("step_*.txt"))
    truncated = len(decoded) == 64
    assert len(steps) == len(decoded) + (0 if truncated else 1)
    for p in steps:
        lines = p.read_text().splitlines()
        grid = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        assert grid.sum() == pytest.approx(1.0, abs=1e-4)
        pgm = p.with_suffix(".pgm").read_bytes()
        w, h = map(int, pgm.split(b"\n")[1].split())
        assert (h, w) == grid.shape
    assert Path(steps[0]).read_text().splitlines()[0] == (decoded[0] if decoded else "<eos>")


def test_dump_features(trained, tmp_path):
    out = tmp_path / "f.csv"
    ck = str(trained / "run" / "last.abmc")
    assert main(["dump-features", "--checkpoint", ck, "--data", str(trained / "data"), "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    samples, _ = load_dir(trained / "data")
    assert len(rows) - 1 == sum(len(s.target) for s in samples)
    assert len(rows[0]) - 3 == 32 // 2
    first = out.read_bytes()
    main(["dump-features", "--checkpoint", ck, "--data", str(trained / "data"), "--out", str(out)])
    assert out.read_bytes() == first


def test_train_sweep_rows(tmp_path, capsys):
    main(["gen-data", "--out", str(tmp_path / "d"), "--count", "4", "--seed", "3"])
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    capsys.readouterr()
    assert main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--config",
                 str(tmp_path / "tiny.cfg"), "--epochs", "1", "--lambda", "0.1,1.0",
                 "--ks", "3,5", "--kl-kernel", "7,11"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 4
    assert {tuple(ln.split("\t")[1:4]) for ln in lines[1:]} == {
        ("0.1", "3", "7"), ("0.1", "5", "11"), ("1", "3", "7"), ("1", "5", "11")}
    assert len(list((tmp_path / "r").glob("*/last.abmc"))) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    names = [ln.split()[1] for ln in out.splitlines() if ln.startswith(("PASS ", "FAIL "))]
    assert len(names) == len(set(names)) > 0
    assert "encoder.stem" in names and "r2l.att.U_l" in names


def test_gradcheck_catches_sabotaged_tanh(monkeypatch, capsys):
    monkeypatch.setattr(ops, "_tanh_backward", lambda y, g: g * (1 - y * y) * 1.05)
    assert main(["gradcheck"]) == 5
    failed = [ln.split()[1] for ln in capsys.readouterr().out.splitlines() if ln.startswith("FAIL ")]
    assert any(".gru" in name for name in failed)
