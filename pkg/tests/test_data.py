import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abm.data import (
    DatasetError, Sample, collate, load_dataset, load_dir, make_batches, read_image, save_dataset,
    split_validation, write_labels, write_pgm,
)
from abm.synth import SYMBOLS, ParseError, default_vocabulary, gen_synthetic, parse
from abm.vocab import EOS, PAD, SOS, Vocabulary, VocabularyError


def test_vocabulary_reserved_ids_and_bijection():
    v = Vocabulary(["x", "+", "1"])
    assert (v.stoi["<sos>"], v.stoi["<eos>"], v.stoi["<pad>"]) == (SOS, EOS, PAD)
    assert len(v) == 6 and v.symbols == ["x", "+", "1"]
    assert v.tokenize("x + 1") == [3, 4, 5]
    assert v.detokenize(v.tokenize("1 + x")) == "1 + x"
    with pytest.raises(VocabularyError, match="'y'"):
        v.tokenize("x + y")
    with pytest.raises(VocabularyError):
        v.encode(["<pad>"])
    with pytest.raises(VocabularyError):
        Vocabulary(["x", "x"])


def test_vocabulary_file_round_trip(tmp_path):
    v = default_vocabulary()
    v.save(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().split("\n")
    assert lines[:3] == ["<sos>", "<eos>", "<pad>"] and lines[3] == v.symbols[0]
    assert Vocabulary.load(tmp_path / "vocab.txt") == v
    (tmp_path / "bare.txt").write_text("".join(t + "\n" for t in v.symbols))
    assert Vocabulary.load(tmp_path / "bare.txt") == v


def test_default_vocabulary_size():
    assert len(default_vocabulary()) == len(SYMBOLS) + 3 == 32


def test_generator_is_deterministic():
    a, b = gen_synthetic(12, 5), gen_synthetic(12, 5)
    for x, y in zip(a, b):
        assert x.id == y.id and x.target == y.target
        np.testing.assert_array_equal(x.image, y.image)
    assert [s.target for s in gen_synthetic(12, 6)] != [s.target for s in a]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 6))
def test_generator_length_bounds_and_grammar(seed, lo, extra):
    vocab = default_vocabulary()
    hi = lo + extra
    for s in gen_synthetic(8, seed, lo, hi, vocab):
        toks = vocab.decode(s.target)
        assert lo <= len(toks) <= hi
        assert toks.count("{") == toks.count("}")
        assert toks.count("(") == toks.count(")")
        parse(toks)
        assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1


def test_parse_rejects_off_grammar():
    for bad in (["{", "x"], ["x", "}"], ["\\frac", "{", "x", "}"], ["^"]):
        with pytest.raises(ParseError):
            parse(bad)


def test_generator_rejects_zero_count():
    with pytest.raises(ValueError):
        gen_synthetic(0, 1)


def test_label_file_and_dataset_round_trip(tmp_path):
    vocab = default_vocabulary()
    samples = gen_synthetic(6, 3, vocab=vocab)
    save_dataset(tmp_path, samples, vocab)
    raw = (tmp_path / "labels.txt").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    first = raw.split(b"\n")[0].decode()
    assert first == f"{samples[0].id}\t{vocab.detokenize(samples[0].target)}"
    loaded, v2 = load_dir(tmp_path)
    assert v2 == vocab
    for a, b in zip(samples, loaded):
        assert a.id == b.id and a.target == b.target
        np.testing.assert_allclose(a.image, b.image, atol=1 / 255 + 1e-6)


def test_load_dataset_errors(tmp_path):
    vocab = Vocabulary(["x", "+", "1"])
    (tmp_path / "empty.txt").write_text("")
    assert load_dataset(tmp_path, tmp_path / "empty.txt", vocab) == []
    write_pgm(tmp_path / "ex1.pgm", np.eye(4))
    write_labels(tmp_path / "ok.txt", [("ex1", ["x", "+", "1"])])
    (s,) = load_dataset(tmp_path, tmp_path / "ok.txt", vocab)
    assert s.target == [3, 4, 5]
    write_labels(tmp_path / "missing.txt", [("ex2", ["x"])])
    with pytest.raises(DatasetError, match="ex2"):
        load_dataset(tmp_path, tmp_path / "missing.txt", vocab)
    write_labels(tmp_path / "unk.txt", [("ex1", ["x", "y"])])
    with pytest.raises(VocabularyError, match="'y'.*line 1"):
        load_dataset(tmp_path, tmp_path / "unk.txt", vocab)


def test_read_image_inverts_dark_ink(tmp_path):
    from abm.data import write_png
    img = np.zeros((5, 5), np.float32)
    img[2, 2] = 1.0
    write_png(tmp_path / "a.png", img)            # stored dark on white
    np.testing.assert_allclose(read_image(tmp_path / "a.png"), img)
    write_png(tmp_path / "b.png", img, ink_dark=False)
    np.testing.assert_allclose(read_image(tmp_path / "b.png"), img)


def test_batch_padding_and_masks():
    a = Sample("a", np.ones((32, 32), np.float32), [3, 4])
    b = Sample("b", np.ones((32, 48), np.float32), [5, 6, 7])
    batch = collate([a, b])
    assert batch.images.shape == (2, 1, 32, 48)
    assert batch.pixel_mask[0, :, 32:].sum() == 0 and batch.pixel_mask[0, :, :32].all()
    assert batch.images[0, 0, :, 32:].sum() == 0
    assert batch.token_mask.sum() == 5
    np.testing.assert_array_equal(batch.padded[0], [3, 4, PAD])
    single = collate([b])
    assert single.images.shape == (1, 1, 32, 48) and single.pixel_mask.all()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=20), st.integers(1, 6), st.booleans())
def test_make_batches_preserves_samples(lengths, size, sort):
    samples = [Sample(f"s{i}", np.ones((4, 4 + n), np.float32), [3] * n) for i, n in enumerate(lengths)]
    batches = make_batches(samples, size, sort)
    assert sorted(i for b in batches for i in b.ids) == sorted(s.id for s in samples)
    assert sum(b.token_mask.sum() for b in batches) == sum(lengths)
    assert all(len(b) <= size for b in batches)


def test_validation_split_is_deterministic():
    samples = gen_synthetic(20, 1)
    t1, v1 = split_validation(samples, 0.1, 4)
    t2, v2 = split_validation(samples, 0.1, 4)
    assert [s.id for s in v1] == [s.id for s in v2] and len(v1) == 2 and len(t1) == 18
    assert split_validation(samples, 0.0, 4) == (samples, samples)


def _digest(d: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(d.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(d).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_saved_dataset_bytes_are_deterministic(tmp_path):
    vocab = default_vocabulary()
    for name in ("one", "two"):
        save_dataset(tmp_path / name, gen_synthetic(5, 9, vocab=vocab), vocab)
    assert _digest(tmp_path / "one") == _digest(tmp_path / "two")
