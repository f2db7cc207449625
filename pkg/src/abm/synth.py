"""Synthetic expression generator: a small LaTeX grammar plus a box-layout renderer.

Grammar (token level)::

    expr  := item+
    item  := atom | atom ^ { expr } | atom _ { expr } | ( expr )
           | \\frac { expr } { expr } | \\sqrt { expr } | \\int expr d x
    atom  := 0-9 | a b c n x y | + - =

Scripts are rendered at 0.6 scale and shifted above/below the base.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from PIL import Image, ImageDraw

from abm.glyphs import GLYPH_SIZE, render_glyph
from abm.vocab import Vocabulary

DIGITS = list("0123456789")
LETTERS = list("abcnxy")
OPERATORS = ["+", "-", "="]
ATOMS = DIGITS + LETTERS + OPERATORS
STRUCTURE = ["(", ")", "{", "}", "^", "_", "\\frac", "\\sqrt", "\\int", "d"]
SYMBOLS = ATOMS + STRUCTURE


def default_vocabulary() -> Vocabulary:
    return Vocabulary(SYMBOLS)


# ---------------------------------------------------------------------------
# expression trees


@dataclass(frozen=True)
class Atom:
    tok: str


@dataclass(frozen=True)
class Script:
    base: Atom
    kind: str            # "^" or "_"
    body: tuple


@dataclass(frozen=True)
class Frac:
    num: tuple
    den: tuple


@dataclass(frozen=True)
class Sqrt:
    body: tuple


@dataclass(frozen=True)
class Paren:
    body: tuple


@dataclass(frozen=True)
class Integral:
    body: tuple


Node = Union[Atom, Script, Frac, Sqrt, Paren, Integral]


def tokens_of(expr) -> list[str]:
    out: list[str] = []
    for node in expr:
        if isinstance(node, Atom):
            out.append(node.tok)
        elif isinstance(node, Script):
            out += [node.base.tok, node.kind, "{", *tokens_of(node.body), "}"]
        elif isinstance(node, Frac):
            out += ["\\frac", "{", *tokens_of(node.num), "}", "{", *tokens_of(node.den), "}"]
        elif isinstance(node, Sqrt):
            out += ["\\sqrt", "{", *tokens_of(node.body), "}"]
        elif isinstance(node, Paren):
            out += ["(", *tokens_of(node.body), ")"]
        elif isinstance(node, Integral):
            out += ["\\int", *tokens_of(node.body), "d", "x"]
    return out


class ParseError(ValueError):
    pass


def parse(tokens) -> tuple:
    """Inverse of :func:`tokens_of`; raises :class:`ParseError` on anything off-grammar."""
    toks = list(tokens)
    pos = 0

    def peek():
        return toks[pos] if pos < len(toks) else None

    def take(expected=None):
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"unexpected end of input, wanted {expected or 'a token'}")
        tok = toks[pos]
        if expected is not None and tok != expected:
            raise ParseError(f"expected {expected!r} at {pos}, got {tok!r}")
        pos += 1
        return tok

    def group():
        take("{")
        body = expr(stop="}")
        take("}")
        return body

    def expr(stop=None):
        items = []
        while peek() is not None and peek() != stop:
            tok = peek()
            if stop == "\\int-end" and tok == "d" and pos + 1 < len(toks) and toks[pos + 1] == "x":
                break
            items.append(item())
        if not items:
            raise ParseError(f"empty expression at {pos}")
        return tuple(items)

    def item():
        tok = take()
        if tok in ATOMS:
            if peek() in ("^", "_"):
                kind = take()
                return Script(Atom(tok), kind, group())
            return Atom(tok)
        if tok == "\\frac":
            num = group()
            return Frac(num, group())
        if tok == "\\sqrt":
            return Sqrt(group())
        if tok == "(":
            body = expr(stop=")")
            take(")")
            return Paren(body)
        if tok == "\\int":
            body = expr(stop="\\int-end")
            take("d")
            take("x")
            return Integral(body)
        raise ParseError(f"unexpected token {tok!r} at {pos - 1}")

    tree = expr()
    if pos != len(toks):
        raise ParseError(f"trailing tokens from {pos}: {toks[pos:]}")
    return tree


# ---------------------------------------------------------------------------
# length-controlled generation

_MIN_COST = {"atom": 1, "sup": 5, "sub": 5, "frac": 7, "sqrt": 4, "paren": 3, "int": 4}
_WEIGHT = {"atom": 0.5, "sup": 0.14, "sub": 0.08, "frac": 0.08, "sqrt": 0.08, "paren": 0.06, "int": 0.06}


def _gen_expr(rng: np.random.Generator, budget: int, depth: int) -> tuple:
    items = []
    while budget > 0:
        kinds = [k for k, c in _MIN_COST.items() if c <= budget and (k == "atom" or depth < 2)]
        w = np.array([_WEIGHT[k] for k in kinds])
        kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
        if kind == "atom":
            items.append(Atom(ATOMS[int(rng.integers(len(ATOMS)))]))
            budget -= 1
            continue
        if kind in ("sup", "sub"):
            inner = int(rng.integers(1, min(budget - 4, 3) + 1))
            base = Atom((DIGITS + LETTERS)[int(rng.integers(len(DIGITS) + len(LETTERS)))])
            items.append(Script(base, "^" if kind == "sup" else "_", _gen_expr(rng, inner, depth + 1)))
            budget -= 4 + inner
        elif kind == "frac":
            room = min(budget - 5, 8)
            n = int(rng.integers(1, min(room - 1, 4) + 1))
            d = int(rng.integers(1, min(room - n, 4) + 1))
            items.append(Frac(_gen_expr(rng, n, depth + 1), _gen_expr(rng, d, depth + 1)))
            budget -= 5 + n + d
        elif kind == "sqrt":
            inner = int(rng.integers(1, min(budget - 3, 5) + 1))
            items.append(Sqrt(_gen_expr(rng, inner, depth + 1)))
            budget -= 3 + inner
        elif kind == "paren":
            inner = int(rng.integers(1, min(budget - 2, 6) + 1))
            items.append(Paren(_gen_expr(rng, inner, depth + 1)))
            budget -= 2 + inner
        else:
            inner = int(rng.integers(1, min(budget - 3, 5) + 1))
            items.append(Integral(_gen_expr(rng, inner, depth + 1)))
            budget -= 3 + inner
    return tuple(items)


def random_expression(rng: np.random.Generator, min_len: int, max_len: int) -> tuple:
    length = int(rng.integers(min_len, max_len + 1))
    return _gen_expr(rng, length, 0)


# ---------------------------------------------------------------------------
# layout


@dataclass
class Box:
    ink: np.ndarray      # (h, w) uint8
    axis: int            # row the box aligns on

    @property
    def h(self) -> int:
        return self.ink.shape[0]

    @property
    def w(self) -> int:
        return self.ink.shape[1]


def _blank(h, w):
    return np.zeros((max(h, 1), max(w, 1)), dtype=np.uint8)


def _paste(canvas, box_ink, top, left):
    h, w = box_ink.shape
    np.maximum(canvas[top:top + h, left:left + w], box_ink, out=canvas[top:top + h, left:left + w])


def _hcat(boxes: list[Box], gap: int) -> Box:
    above = max(b.axis for b in boxes)
    below = max(b.h - b.axis for b in boxes)
    width = sum(b.w for b in boxes) + gap * (len(boxes) - 1)
    canvas = _blank(above + below, width)
    x = 0
    for b in boxes:
        _paste(canvas, b.ink, above - b.axis, x)
        x += b.w + gap
    return Box(canvas, above)


class Renderer:
    def __init__(self, rng: np.random.Generator, thickness: float = 1.4) -> None:
        self.rng = rng
        self.thickness = thickness

    def _jitter(self) -> np.ndarray:
        s = 1.0 + self.rng.uniform(-0.06, 0.06, size=2)
        shear = self.rng.uniform(-0.08, 0.08)
        shift = self.rng.uniform(-0.04, 0.04, size=2)
        return np.array([[s[0], shear, shift[0] - shear * 0.5], [0.0, s[1], shift[1]]])

    def glyph(self, tok: str, scale: float, tall: float = 1.0) -> Box:
        w = max(4, int(round(GLYPH_SIZE * scale)))
        h = max(4, int(round(GLYPH_SIZE * scale * tall)))
        ink = render_glyph(tok, w, h, self.thickness * max(scale, 0.7), self._jitter())
        return Box(ink, h // 2)

    def expr(self, items, scale: float) -> Box:
        return _hcat([self.node(n, scale) for n in items], gap=max(1, int(round(2 * scale))))

    def node(self, n: Node, scale: float) -> Box:
        if isinstance(n, Atom):
            return self.glyph(n.tok, scale)
        if isinstance(n, Script):
            base = self.glyph(n.base.tok, scale)
            body = self.expr(n.body, scale * 0.6)
            shift = int(round(base.h * 0.45))
            if n.kind == "^":
                top = max(0, body.h - shift)           # body bottom sits `shift` rows above base bottom
                canvas = _blank(top + base.h, base.w + 1 + body.w)
                _paste(canvas, base.ink, top, 0)
                _paste(canvas, body.ink, top + base.h - shift - body.h, base.w + 1)
                return Box(canvas, top + base.axis)
            canvas = _blank(max(base.h, shift + body.h), base.w + 1 + body.w)
            _paste(canvas, base.ink, 0, 0)
            _paste(canvas, body.ink, shift, base.w + 1)
            return Box(canvas, base.axis)
        if isinstance(n, Frac):
            num = self.expr(n.num, scale * 0.85)
            den = self.expr(n.den, scale * 0.85)
            w = max(num.w, den.w) + 4
            gap = max(1, int(round(2 * scale)))
            h = num.h + den.h + 2 * gap + 1
            canvas = _blank(h, w)
            _paste(canvas, num.ink, 0, (w - num.w) // 2)
            bar = num.h + gap
            canvas[bar, 1:w - 1] = 255
            _paste(canvas, den.ink, bar + 1 + gap, (w - den.w) // 2)
            return Box(canvas, bar)
        if isinstance(n, Sqrt):
            body = self.expr(n.body, scale)
            hook = max(5, int(round(8 * scale)))
            h, w = body.h + 3, hook + body.w + 2
            canvas = _blank(h, w)
            _paste(canvas, body.ink, 3, hook + 1)
            # radical: short tick, long down-stroke to the bottom, up to the overbar
            im = Image.fromarray(np.zeros_like(canvas))
            draw = ImageDraw.Draw(im)
            draw.line([(0, h * 0.6), (hook * 0.35, h * 0.5), (hook * 0.6, h - 1), (hook, 0), (w - 1, 0)],
                      fill=255, width=max(1, int(round(self.thickness * scale))))
            canvas = np.maximum(canvas, np.asarray(im))
            return Box(canvas, body.axis + 3)
        if isinstance(n, Paren):
            body = self.expr(n.body, scale)
            tall = max(1.0, body.h / (GLYPH_SIZE * scale))
            lp, rp = self.glyph("(", scale, tall), self.glyph(")", scale, tall)
            lp.axis = rp.axis = body.axis + (lp.h - body.h) // 2
            return _hcat([lp, body, rp], gap=1)
        if isinstance(n, Integral):
            body = self.expr(n.body, scale)
            sign = self.glyph("\\int", scale, 1.5)
            return _hcat([sign, body, self.glyph("d", scale), self.glyph("x", scale)],
                         gap=max(1, int(round(2 * scale))))
        raise TypeError(f"unknown node {n!r}")

    def render(self, expr, margin: int = 4) -> np.ndarray:
        box = self.expr(expr, 1.0)
        return np.pad(box.ink, margin)


def gen_synthetic(count: int, seed: int, min_len: int = 3, max_len: int = 8,
                  vocab: Vocabulary | None = None, id_prefix: str = "syn"):
    """``count`` deterministic samples with target lengths in ``[min_len, max_len]``."""
    from abm.data import Sample

    if count < 1:
        raise ValueError("count must be >= 1")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    vocab = vocab or default_vocabulary()
    rng = np.random.default_rng(seed)
    renderer = Renderer(rng)
    out = []
    width = max(5, len(str(count - 1)))
    for i in range(count):
        expr = random_expression(rng, min_len, max_len)
        toks = tokens_of(expr)
        ink = renderer.render(expr).astype(np.float32) / 255.0
        out.append(Sample(f"{id_prefix}{i:0{width}d}", ink, vocab.encode(toks)))
    return out
