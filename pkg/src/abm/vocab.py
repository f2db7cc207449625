"""Symbol vocabulary with reserved start/end/padding ids."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

SOS, EOS, PAD = 0, 1, 2
RESERVED = ("<sos>", "<eos>", "<pad>")


class VocabularyError(KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class Vocabulary:
    """Bijective token <-> id map; ids 0..2 are ``<sos>``, ``<eos>``, ``<pad>``."""

    def __init__(self, tokens: Iterable[str]) -> None:
        tokens = [t for t in tokens if t not in RESERVED]
        self.itos: list[str] = list(RESERVED) + tokens
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise VocabularyError(f"duplicate token {tok!r} in vocabulary")
            if not tok or any(c.isspace() for c in tok):
                raise VocabularyError(f"token {tok!r} is empty or contains whitespace")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def symbols(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def encode(self, tokens: Sequence[str], where: str = "") -> list[int]:
        ids = []
        for tok in tokens:
            i = self.stoi.get(tok)
            if i is None or i < len(RESERVED):
                loc = f" ({where})" if where else ""
                raise VocabularyError(f"unknown token {tok!r}{loc}")
            ids.append(i)
        return ids

    def tokenize(self, text: str, where: str = "") -> list[int]:
        return self.encode(text.split(" ") if text else [], where)

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            out.append(self.itos[int(i)])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)
