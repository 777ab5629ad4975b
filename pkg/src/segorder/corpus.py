"""Document ingestion (JSONL), corpus statistics and a synthetic corpus generator."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ConfigError, SchemaError
from .numerics import RngStream
from .tokenizer import SPECIAL_TOKENS, Vocab, wordpiece_tokenize

SEGMENT_KINDS = ("paragraph", "headline", "table", "enumeration")


@dataclass(frozen=True)
class Segment:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind not in SEGMENT_KINDS:
            raise SchemaError(f"unknown segment kind {self.kind!r}")
        if not self.text.strip():
            raise SchemaError("segment text is empty")


@dataclass
class Document:
    """Ordered segments plus optional per-segment labels.

    Labels are either one int per segment (multi-class, ``None`` marks an
    unlabeled segment) or one tuple of ints per segment (multi-label, the
    empty tuple is a valid annotation).
    """

    id: str
    segments: list
    labels: list | None = None

    def __post_init__(self):
        if not self.segments:
            raise SchemaError(f"document {self.id!r} has no segments")
        if self.labels is not None and len(self.labels) != len(self.segments):
            raise SchemaError(
                f"document {self.id!r}: {len(self.labels)} labels for {len(self.segments)} segments"
            )

    @property
    def label_kind(self) -> str | None:
        if self.labels is None:
            return None
        if any(isinstance(x, tuple) for x in self.labels):
            return "multi"
        return "single"

    def to_json(self) -> str:
        obj = {"id": self.id, "segments": [{"kind": s.kind, "text": s.text} for s in self.segments]}
        if self.labels is not None:
            obj["labels"] = [list(x) if isinstance(x, tuple) else x for x in self.labels]
        return json.dumps(obj, separators=(",", ":"))  # ASCII escapes keep one record per line


@dataclass(frozen=True)
class ParseIssue:
    line: int
    message: str


def _doc_from_obj(obj) -> Document:
    if not isinstance(obj, dict):
        raise SchemaError("line is not a JSON object")
    unknown = set(obj) - {"id", "segments", "labels"}
    if unknown:
        raise SchemaError(f"unknown keys: {sorted(unknown)}")
    doc_id = obj.get("id")
    if not isinstance(doc_id, str) or not doc_id:
        raise SchemaError("'id' must be a non-empty string")
    raw_segments = obj.get("segments")
    if not isinstance(raw_segments, list) or not raw_segments:
        raise SchemaError("'segments' must be a non-empty array")
    segments = []
    for i, seg in enumerate(raw_segments):
        if not isinstance(seg, dict) or set(seg) != {"kind", "text"}:
            raise SchemaError(f"segment {i} must have exactly 'kind' and 'text'")
        if not isinstance(seg["kind"], str) or not isinstance(seg["text"], str):
            raise SchemaError(f"segment {i}: 'kind' and 'text' must be strings")
        try:
            segments.append(Segment(seg["kind"], seg["text"]))
        except SchemaError as exc:
            raise SchemaError(f"segment {i}: {exc}") from None
    labels = None
    if "labels" in obj and obj["labels"] is not None:
        labels = _parse_labels(obj["labels"])
    return Document(doc_id, segments, labels)


def _parse_labels(raw) -> list:
    if not isinstance(raw, list):
        raise SchemaError("'labels' must be an array")
    multi = any(isinstance(x, list) for x in raw)
    out = []
    for i, x in enumerate(raw):
        if multi:
            if not isinstance(x, list) or not all(_is_label_id(v) for v in x):
                raise SchemaError(f"label {i}: expected a list of non-negative ints")
            out.append(tuple(sorted(set(x))))
        elif x is None or _is_label_id(x):
            out.append(x)
        else:
            raise SchemaError(f"label {i}: expected a non-negative int or null")
    return out


def _is_label_id(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def parse_jsonl(stream: Iterable[str], issues: list | None = None) -> Iterator[Document]:
    """Yield documents from JSONL lines in order.

    Malformed or schema-violating lines are skipped; each one appends a
    ``ParseIssue`` with its 1-based line number to ``issues`` when given.
    Blank lines are ignored.
    """
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            if issues is not None:
                issues.append(ParseIssue(lineno, f"malformed JSON: {exc.msg}"))
            continue
        try:
            doc = _doc_from_obj(obj)
        except SchemaError as exc:
            if issues is not None:
                issues.append(ParseIssue(lineno, f"schema error: {exc}"))
            continue
        yield doc


def read_jsonl(path) -> tuple:
    issues = []
    with open(path, encoding="utf-8") as fh:
        docs = list(parse_jsonl(fh, issues))
    return docs, issues


def serialize_jsonl(docs: Iterable[Document]) -> str:
    return "".join(doc.to_json() + "\n" for doc in docs)


def write_jsonl(docs: Iterable[Document], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_jsonl(docs))


# statistics ------------------------------------------------------------------


@dataclass
class CorpusStats:
    documents: int = 0
    segments: int = 0
    samples: int = 0
    tokens: int = 0
    avg_segment_tokens: float = 0.0
    avg_segments_per_sample: float = 0.0

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())

    @classmethod
    def from_text(cls, text: str) -> "CorpusStats":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        ints = {"documents", "segments", "samples", "tokens"}
        return cls(**{k: int(v) if k in ints else float(v) for k, v in kv.items() if k in cls.__dataclass_fields__})


def corpus_stats(docs: Iterable[Document], vocab: Vocab, context: int, max_segments=None) -> CorpusStats:
    """Counts after WordPiece; samples are counted by running the packer."""
    from .packing import PackingConfig, pack_document

    cfg = PackingConfig(context=context, shuffle=False, mlm_rate=0.0, max_segments=max_segments)
    st = CorpusStats()
    for doc in docs:
        st.documents += 1
        st.segments += len(doc.segments)
        st.tokens += sum(len(wordpiece_tokenize(s.text, vocab)) for s in doc.segments)
        st.samples += len(pack_document(doc, vocab, cfg))
    if st.segments:
        st.avg_segment_tokens = st.tokens / st.segments
    if st.samples:
        st.avg_segments_per_sample = st.segments / st.samples
    return st


# synthetic corpora -----------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
SUFFIXES = ("##er", "##en", "##ik", "##ol", "##ur", "##as")
PUNCT = (".", ",")


def _stems(n: int) -> list:
    out = [c1 + v + c2 for c1 in _CONSONANTS for v in _VOWELS for c2 in _CONSONANTS]
    # spread over the alphabet instead of taking one prefix block
    step = max(1, len(out) // n)
    return out[::step][:n]


@dataclass(frozen=True)
class Lexicon:
    stems: tuple
    max_positions: int
    n_links: int
    n_tags: int

    @classmethod
    def default(cls, n_stems=120, max_positions=64, n_links=128, n_tags=64) -> "Lexicon":
        return cls(tuple(_stems(n_stems)), max_positions, n_links, n_tags)

    def ordinal(self, i: int) -> str:
        return f"ord{i}"

    def link(self, i: int) -> str:
        return f"lnk{i}"

    def tag(self, i: int) -> str:
        return f"tag{i}"

    def tokens(self) -> list:
        toks = list(SPECIAL_TOKENS) + list(PUNCT) + list(self.stems) + list(SUFFIXES)
        toks += [self.ordinal(i) for i in range(self.max_positions)]
        toks += [self.link(i) for i in range(self.n_links)]
        toks += [self.tag(i) for i in range(self.n_tags)]
        return toks


def synth_vocab(lexicon: Lexicon | None = None) -> Vocab:
    """Vocabulary covering everything ``synth_corpus`` can emit."""
    return Vocab.from_tokens((lexicon or Lexicon.default()).tokens())


@dataclass
class SynthSpec:
    docs: int = 100
    segments_per_doc: tuple = (3, 8)
    tokens_per_segment: tuple = (4, 12)
    cue: str = "none"  # ordinal | chain | none
    classes: int = 1
    seed: int = 0
    multilabel: bool = False
    label_mode: str = "local"  # local | roles
    label_density: float = 0.3  # multi-label: per-class positive rate
    tag_rate: float = 0.5  # roles: probability a segment shows its role tag

    def validate(self):
        for name in ("segments_per_doc", "tokens_per_segment"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name}: invalid range ({lo}, {hi})")
        if self.docs < 0:
            raise ConfigError("docs must be >= 0")
        if self.cue not in ("ordinal", "chain", "none"):
            raise ConfigError(f"unknown cue {self.cue!r}")
        if self.classes < 1:
            raise ConfigError("classes must be >= 1")
        if self.label_mode not in ("local", "roles"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.multilabel and self.label_mode == "roles":
            raise ConfigError("label_mode 'roles' is single-label only")
        if self.tokens_per_segment[0] < self.reserved_tokens():
            raise ConfigError(
                f"tokens_per_segment minimum {self.tokens_per_segment[0]} cannot hold "
                f"{self.reserved_tokens()} cue/label tokens"
            )

    def reserved_tokens(self) -> int:
        n = {"ordinal": 2, "chain": 2, "none": 0}[self.cue]
        if self.classes > 1:
            n += self.classes if self.multilabel else 1
        return n


def synth_corpus(spec: SynthSpec, lexicon: Lexicon | None = None) -> list:
    """Generate documents whose segment order is (or is not) recoverable.

    * ``ordinal``: each segment opens and closes with ``ord<i>``, its document
      position.
    * ``chain``: segment i ends with a link word that segment i+1 opens with,
      so order follows from pairing tails with heads, not from any single
      segment.
    * ``none``: segments are exchangeable; no order signal exists.

    With ``classes > 1`` labels are recorded and ``tag<c>`` tokens inserted:
    ``local`` puts each segment's own tag(s) in it; ``roles`` draws a
    non-decreasing label sequence and shows a segment's tag only with
    probability ``tag_rate``, so untagged segments must be labeled from their
    neighbours. Segment token counts (after WordPiece) fall inside
    ``tokens_per_segment`` including cue and tag tokens.
    """
    spec.validate()
    lex = lexicon or Lexicon.default()
    if spec.cue == "ordinal" and spec.segments_per_doc[1] > lex.max_positions:
        raise ConfigError("segments_per_doc exceeds the ordinal marker inventory")
    if spec.cue == "chain" and spec.segments_per_doc[1] > lex.n_links + 1:
        raise ConfigError("segments_per_doc exceeds the link-word inventory")
    if spec.classes > lex.n_tags:
        raise ConfigError("classes exceeds the tag inventory")
    return [_synth_doc(spec, lex, i) for i in range(spec.docs)]


def _synth_doc(spec: SynthSpec, lex: Lexicon, index: int) -> Document:
    rng = RngStream(spec.seed, "synth", index)
    n = int(rng.integers(spec.segments_per_doc[0], spec.segments_per_doc[1] + 1))
    links = rng.choice(lex.n_links, size=max(n - 1, 0), replace=False) if spec.cue == "chain" else []

    labels = None
    if spec.classes > 1:
        if spec.multilabel:
            labels = [
                tuple(int(c) for c in range(spec.classes) if rng.random() < spec.label_density)
                for _ in range(n)
            ]
        elif spec.label_mode == "roles":
            labels = sorted(int(x) for x in rng.integers(0, spec.classes, size=n))
        else:
            labels = [int(x) for x in rng.integers(0, spec.classes, size=n)]

    segments = []
    for i in range(n):
        target = int(rng.integers(spec.tokens_per_segment[0], spec.tokens_per_segment[1] + 1))
        head, tail, inner = [], [], []
        if spec.cue == "ordinal":
            head.append(lex.ordinal(i))
            tail.append(lex.ordinal(i))
        elif spec.cue == "chain":
            if i > 0:
                head.append(lex.link(int(links[i - 1])))
            if i < n - 1:
                tail.append(lex.link(int(links[i])))
        if labels is not None:
            if spec.multilabel:
                inner.extend(lex.tag(c) for c in labels[i])
            elif spec.label_mode == "local" or rng.random() < spec.tag_rate:
                inner.append(lex.tag(labels[i]))
        body = _body_words(rng, lex, target - len(head) - len(tail) - len(inner))
        for w in inner:
            body.insert(int(rng.integers(0, len(body) + 1)), w)
        words = head + body + tail
        kind = "headline" if i == 0 and rng.random() < 0.5 else SEGMENT_KINDS[int(rng.integers(0, 4))]
        segments.append(Segment(kind, " ".join(words)))
    return Document(f"doc{index:06d}", segments, labels)


def _body_words(rng, lex: Lexicon, budget: int) -> list:
    """Words totalling exactly ``budget`` WordPiece tokens."""
    words = []
    while budget > 0:
        r = rng.random()
        if budget >= 2 and r < 0.25:
            stem = lex.stems[int(rng.integers(0, len(lex.stems)))]
            words.append(stem + SUFFIXES[int(rng.integers(0, len(SUFFIXES)))][2:])
            budget -= 2
        elif r < 0.32:
            words.append(PUNCT[int(rng.integers(0, len(PUNCT)))])
            budget -= 1
        else:
            words.append(lex.stems[int(rng.integers(0, len(lex.stems)))])
            budget -= 1
    return words


def synth_jsonl(spec: SynthSpec) -> str:
    buf = io.StringIO()
    for doc in synth_corpus(spec):
        buf.write(doc.to_json() + "\n")
    return buf.getvalue()
