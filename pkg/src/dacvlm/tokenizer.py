"""Word-level tokenizer over the closed synthetic grammar, with byte fallback."""
from __future__ import annotations

import re
from typing import Iterable, List, Sequence

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "gray")
SHAPES = ("circle", "square", "triangle")
NUMBER_WORDS = (
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen sixteen seventeen eighteen nineteen twenty"
).split()

_FUNCTION_WORDS = (
    "a an the empty canvas at row column what color is are how many objects there "
    "left right of above below yes no plus minus equals question answer user assistant "
    "describe image this with shape shapes picture in it has sides round corners "
    "more less than and"
).split()

_PUNCT = (",", ".", "?", ":")
_DIGITS = tuple(str(i) for i in range(10))

_WORDS = tuple(dict.fromkeys(COLORS + SHAPES + tuple(NUMBER_WORDS) + tuple(_FUNCTION_WORDS) + _DIGITS + _PUNCT))

_SPLIT = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Tokenizer:
    """Maps the synthetic grammar's words to ids; unknown words fall back to
    one token per UTF-8 byte.

    >>> tok = Tokenizer()
    >>> tok.decode(tok.encode("a red circle at row 0 column 1, a cyan square"))
    'a red circle at row 0 column 1, a cyan square'
    """

    def __init__(self):
        self.itos: List[str] = list(SPECIALS) + list(_WORDS) + [_byte_token(b) for b in range(256)]
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad_id = self.stoi[PAD]
        self.bos_id = self.stoi[BOS]
        self.eos_id = self.stoi[EOS]
        self._byte0 = self.stoi[_byte_token(0)]

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def words(self) -> tuple:
        return _WORDS

    def split(self, text: str) -> List[str]:
        return _SPLIT.findall(text)

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> List[int]:
        ids = [self.bos_id] if bos else []
        for w in self.split(text):
            i = self.stoi.get(w)
            if i is not None and i >= len(SPECIALS):
                ids.append(i)
            else:
                ids.extend(self._byte0 + b for b in w.encode("utf-8"))
        if eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words: List[str] = []
        pending = bytearray()
        for i in ids:
            i = int(i)
            if i >= self._byte0:
                pending.append(i - self._byte0)
                continue
            if pending:
                words.append(pending.decode("utf-8", errors="replace"))
                pending = bytearray()
            if i < len(SPECIALS):
                continue
            words.append(self.itos[i])
        if pending:
            words.append(pending.decode("utf-8", errors="replace"))
        text = " ".join(words)
        return re.sub(r" ([,.?:])", r"\1", text)

    def is_closed(self, text: str) -> bool:
        """True when every word of ``text`` is in the word vocabulary."""
        return all(w in self.stoi for w in self.split(text))

    def covers(self, ids: Sequence[int]) -> bool:
        return all(0 <= int(i) < self.vocab_size for i in ids)
