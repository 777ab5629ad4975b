"""WordPiece tokenization with whole-word boundary tracking."""

from __future__ import annotations

import logging
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable

from .errors import VocabularyError
from .numerics import stable_hash64

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"


@dataclass
class Vocab:
    tokens: list
    max_word_chars: int = 100
    fingerprint: int = 0
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        missing = [s for s in SPECIAL_TOKENS if s not in self.index]
        if missing:
            raise VocabularyError(f"vocabulary is missing special tokens: {', '.join(missing)}")
        if self.index[PAD] != 0:
            raise VocabularyError(f"{PAD} must have id 0, found {self.index[PAD]}")
        if not self.fingerprint:
            self.fingerprint = stable_hash64(self.to_text().encode("utf-8"))
        self.special_ids = frozenset(self.index[s] for s in SPECIAL_TOKENS)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str], max_word_chars: int = 100) -> "Vocab":
        return cls(list(tokens), max_word_chars=max_word_chars)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @property
    def pad_id(self):
        return self.index[PAD]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def cls_id(self):
        return self.index[CLS]

    @property
    def sep_id(self):
        return self.index[SEP]

    @property
    def mask_id(self):
        return self.index[MASK]

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def load_vocab(source, max_word_chars: int = 100) -> Vocab:
    """Read one token per line; a token's id is its position among kept lines.

    ``source`` is a path or any iterable of lines. The fingerprint hashes the
    raw text as read, so a file written by ``Vocab.save`` keeps its identity.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, encoding="utf-8", newline="") as fh:
            lines = fh.readlines()
    else:
        lines = list(source)
    tokens, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        tok = line.rstrip("\r\n").strip()
        if not tok:
            log.warning("vocab line %d is empty; ignored", lineno)
            continue
        tok = unicodedata.normalize("NFC", tok)
        if tok in seen:
            log.warning("vocab line %d duplicates %r; ignored", lineno, tok)
            continue
        seen.add(tok)
        tokens.append(tok)
    missing = [s for s in SPECIAL_TOKENS if s not in seen]
    if missing:
        raise VocabularyError(f"vocabulary is missing special tokens: {', '.join(missing)}")
    raw = "".join(lines).encode("utf-8")
    return Vocab(tokens, max_word_chars=max_word_chars, fingerprint=stable_hash64(raw))


@dataclass
class TokenizedSegment:
    token_ids: list
    word_starts: list

    def __len__(self):
        return len(self.token_ids)


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_split(text: str) -> list:
    """Whitespace split, then every punctuation code point becomes its own word."""
    words = []
    for chunk in unicodedata.normalize("NFC", text).split():
        buf = []
        for ch in chunk:
            if _is_punct(ch):
                if buf:
                    words.append("".join(buf))
                    buf = []
                words.append(ch)
            else:
                buf.append(ch)
        if buf:
            words.append("".join(buf))
    return words


def wordpiece_word(word: str, vocab: Vocab) -> list:
    """Greedy longest-match-first pieces of one word, or [UNK]."""
    if len(word) > vocab.max_word_chars:
        return [UNK]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.index:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def wordpiece_tokenize(text: str, vocab: Vocab) -> TokenizedSegment:
    ids, starts = [], []
    for word in pre_split(text):
        for i, piece in enumerate(wordpiece_word(word, vocab)):
            ids.append(vocab.index[piece])
            starts.append(i == 0)
    return TokenizedSegment(ids, starts)


def detokenize(ids, vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and out:
            out[-1] += tok[len(CONTINUATION):]
        else:
            out.append(tok)
    return " ".join(out)
