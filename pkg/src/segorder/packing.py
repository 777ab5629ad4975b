"""Turn documents into encoder samples.

A packed sample is ``[CLS] s_1 [SEP] s_2 [SEP] ... s_K [SEP]`` where the
segments are consecutive document segments, greedily filled up to the context
size. For pre-training the segments are then shuffled (``so_targets[i]`` is
the original position of the segment now at position ``i``) and whole words
are masked.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Document
from .errors import CompatibilityError, ConfigError, CorruptionError
from .numerics import RngStream
from .tokenizer import Vocab, wordpiece_tokenize

UNMASKED = -1


@dataclass
class PackingConfig:
    context: int = 128
    mlm_rate: float = 0.15
    mask_split: tuple = (0.8, 0.1, 0.1)  # [MASK] / random token / unchanged
    min_segments: int = 3  # L_min for dynamic sampling
    shuffle: bool = True
    max_segments: int | None = None  # cap on K, e.g. the model's segment table

    def __post_init__(self):
        if self.context < 3:
            raise ConfigError("context must be >= 3 ([CLS] + token + [SEP])")
        if not 0.0 <= self.mlm_rate <= 1.0:
            raise ConfigError("mlm_rate must lie in [0, 1]")
        split = tuple(float(x) for x in self.mask_split)
        if len(split) != 3 or any(not 0.0 <= x <= 1.0 for x in split) or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError("mask_split must be three rates summing to 1")
        self.mask_split = split
        if self.min_segments < 1:
            raise ConfigError("min_segments must be >= 1")
        if self.max_segments is not None and self.max_segments < 1:
            raise ConfigError("max_segments must be >= 1")


@dataclass(eq=False)
class PackedSample:
    token_ids: np.ndarray  # int32 [T]
    word_starts: np.ndarray  # bool [T]; specials count as their own words
    sep_positions: np.ndarray  # int32 [K], ascending
    so_targets: np.ndarray  # int32 [K]
    mlm_labels: np.ndarray  # int32 [T], UNMASKED where not selected
    doc_id: str = ""
    index: int = 0  # sample ordinal within its document
    segment_offset: int = 0  # document index of the first (unshuffled) segment
    nsp_label: bool | None = None
    label_kind: str | None = None  # None | "single" | "multi"
    segment_labels: list | None = None  # aligned with current segment positions

    @property
    def segment_count(self) -> int:
        return len(self.sep_positions)

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def uid(self) -> str:
        return f"{self.doc_id}/{self.index}"

    def segment_spans(self) -> list:
        """(start, stop) token span of each segment, [SEP] excluded."""
        starts = np.concatenate([[1], self.sep_positions[:-1] + 1])
        return [(int(a), int(b)) for a, b in zip(starts, self.sep_positions)]

    def segments(self) -> list:
        return [self.token_ids[a:b].tolist() for a, b in self.segment_spans()]

    def is_masked(self) -> bool:
        return bool((self.mlm_labels != UNMASKED).any())

    def unmasked(self) -> "PackedSample":
        ids = np.where(self.mlm_labels != UNMASKED, self.mlm_labels, self.token_ids).astype(np.int32)
        return replace(self, token_ids=ids, mlm_labels=np.full_like(self.mlm_labels, UNMASKED))

    def unshuffled(self) -> "PackedSample":
        """Restore document order by placing each segment at its target."""
        order = np.argsort(self.so_targets, kind="stable")
        return _reorder(self, order, np.arange(self.segment_count, dtype=np.int32))

    def canonical(self) -> "PackedSample":
        return self.unmasked().unshuffled()

    def __eq__(self, other):
        if not isinstance(other, PackedSample):
            return NotImplemented
        arrays = ("token_ids", "word_starts", "sep_positions", "so_targets", "mlm_labels")
        if any(not np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        scalars = ("doc_id", "index", "segment_offset", "nsp_label", "label_kind", "segment_labels")
        return all(getattr(self, a) == getattr(other, a) for a in scalars)

    def validate(self, vocab: Vocab, context: int | None = None):
        ids = self.token_ids
        assert ids[0] == vocab.cls_id, "first token must be [CLS]"
        assert (ids[self.sep_positions] == vocab.sep_id).all(), "[SEP] expected at sep_positions"
        assert ids[-1] == vocab.sep_id, "last token must be [SEP]"
        assert sorted(self.so_targets.tolist()) == list(range(self.segment_count)), "targets not a permutation"
        masked = self.mlm_labels != UNMASKED
        assert not np.isin(self.mlm_labels[masked], [vocab.cls_id, vocab.sep_id]).any()
        assert not masked[0] and not masked[self.sep_positions].any(), "special position masked"
        if context is not None:
            assert len(ids) <= context, "sample longer than context"


def _reorder(sample: PackedSample, order, new_targets) -> PackedSample:
    """Rebuild a sample with segment ``order[i]`` placed at position ``i``."""
    spans = sample.segment_spans()
    ids, starts, mlm, seps = [sample.token_ids[:1]], [sample.word_starts[:1]], [sample.mlm_labels[:1]], []
    pos = 1
    for j in order:
        a, b = spans[j]
        ids.append(sample.token_ids[a : b + 1])
        starts.append(sample.word_starts[a : b + 1])
        mlm.append(sample.mlm_labels[a : b + 1])
        pos += b - a
        seps.append(pos)
        pos += 1
    labels = None
    if sample.segment_labels is not None:
        labels = [sample.segment_labels[j] for j in order]
    return replace(
        sample,
        token_ids=np.concatenate(ids).astype(np.int32),
        word_starts=np.concatenate(starts).astype(bool),
        mlm_labels=np.concatenate(mlm).astype(np.int32),
        sep_positions=np.asarray(seps, dtype=np.int32),
        so_targets=np.asarray(new_targets, dtype=np.int32),
        segment_labels=labels,
    )


# building samples ------------------------------------------------------------


def _tokenize_doc(doc: Document, vocab: Vocab) -> list:
    return [wordpiece_tokenize(s.text, vocab) for s in doc.segments]


def _doc_labels(doc: Document):
    kind = doc.label_kind
    if kind is None:
        return None, None
    if kind == "single":
        return kind, [-1 if x is None else int(x) for x in doc.labels]
    return kind, [tuple(x) for x in doc.labels]


def _fit_count(lengths, start: int, cfg: PackingConfig) -> int:
    """How many segments from ``start`` fit greedily (at least one)."""
    used, k = 1, 0
    for n in lengths[start:]:
        if cfg.max_segments is not None and k >= cfg.max_segments:
            break
        if k and used + n + 1 > cfg.context:
            break
        used += n + 1
        k += 1
    return max(k, 1)


def _assemble(doc, toks, start, count, vocab, cfg, index, labels) -> PackedSample:
    ids, starts, seps = [vocab.cls_id], [True], []
    limit = cfg.context - 2
    for seg in toks[start : start + count]:
        piece_ids, piece_starts = seg.token_ids, seg.word_starts
        if count == 1 and len(piece_ids) > limit:
            piece_ids, piece_starts = piece_ids[:limit], piece_starts[:limit]
        ids.extend(piece_ids)
        starts.extend(piece_starts)
        seps.append(len(ids))
        ids.append(vocab.sep_id)
        starts.append(True)
    kind, all_labels = labels
    k = len(seps)
    return PackedSample(
        token_ids=np.asarray(ids, dtype=np.int32),
        word_starts=np.asarray(starts, dtype=bool),
        sep_positions=np.asarray(seps, dtype=np.int32),
        so_targets=np.arange(k, dtype=np.int32),
        mlm_labels=np.full(len(ids), UNMASKED, dtype=np.int32),
        doc_id=doc.id,
        index=index,
        segment_offset=start,
        label_kind=kind,
        segment_labels=None if all_labels is None else list(all_labels[start : start + k]),
    )


def pack_document(doc: Document, vocab: Vocab, cfg: PackingConfig) -> list:
    """Greedy in-order packing; every sample is maximal w.r.t. the next segment.

    A segment longer than ``context - 2`` tokens gets a sample of its own and
    is tail-truncated.
    """
    toks = _tokenize_doc(doc, vocab)
    lengths = [len(t) for t in toks]
    labels = _doc_labels(doc)
    out, start = [], 0
    while start < len(toks):
        k = _fit_count(lengths, start, cfg)
        out.append(_assemble(doc, toks, start, k, vocab, cfg, len(out), labels))
        start += k
    return out


def dynamic_sample(doc: Document, vocab: Vocab, cfg: PackingConfig, rng) -> list:
    """Fine-tuning packing with a random number of merged segments.

    At each step K is the greedy fit count and L is uniform on the integers
    ``[min(min_segments, K), K]``.
    """
    toks = _tokenize_doc(doc, vocab)
    lengths = [len(t) for t in toks]
    labels = _doc_labels(doc)
    out, start = [], 0
    while start < len(toks):
        k = _fit_count(lengths, start, cfg)
        n = draw_merge_count(k, cfg.min_segments, rng)
        out.append(_assemble(doc, toks, start, n, vocab, cfg, len(out), labels))
        start += n
    return out


def draw_merge_count(k: int, min_segments: int, rng) -> int:
    lo = min(min_segments, k)
    return int(rng.integers(lo, k + 1))


def efficiency_gain(context: int, avg_segment_tokens: float) -> int:
    """floor(C / average segment length): segments per sample at full packing."""
    if not avg_segment_tokens > 0:
        raise ValueError("average segment length must be positive")
    return int(math.floor(context / avg_segment_tokens))


def shuffle_segments(sample: PackedSample, rng) -> PackedSample:
    if not np.array_equal(sample.so_targets, np.arange(sample.segment_count)):
        raise ValueError("shuffle_segments expects an unshuffled sample")
    perm = rng.permutation(sample.segment_count).astype(np.int32)
    return _reorder(sample, perm, perm)


def word_groups(sample: PackedSample, vocab: Vocab) -> list:
    """(start, stop) spans of whole words, special tokens excluded."""
    starts = np.flatnonzero(sample.word_starts)
    bounds = np.append(starts, len(sample.token_ids))
    specials = np.isin(sample.token_ids[starts], list(vocab.special_ids))
    return [(int(a), int(b)) for a, b, sp in zip(bounds[:-1], bounds[1:], specials) if not sp]


def apply_mlm_mask(sample: PackedSample, vocab: Vocab, cfg: PackingConfig, rng, branch_rng=None) -> PackedSample:
    """Whole-word masking.

    Each word is selected independently with probability ``mlm_rate``. One
    branch draw per selected word decides, for all of its pieces, between
    [MASK], a uniformly random non-special token (drawn per piece) and
    keeping the original. ``mlm_labels`` records the original id of every
    selected position.
    """
    branch_rng = rng if branch_rng is None else branch_rng
    groups = word_groups(sample, vocab)
    ids = sample.token_ids.copy()
    labels = sample.mlm_labels.copy()
    if not groups or cfg.mlm_rate <= 0:
        return replace(sample, token_ids=ids, mlm_labels=labels)
    selected = np.flatnonzero(rng.random(len(groups)) < cfg.mlm_rate)
    if selected.size == 0:
        return replace(sample, token_ids=ids, mlm_labels=labels)
    branch = branch_rng.random(selected.size)
    p_mask, p_rand, _ = cfg.mask_split
    regular = _regular_ids(vocab)
    for w, u in zip(selected, branch):
        a, b = groups[w]
        labels[a:b] = sample.token_ids[a:b]
        if u < p_mask:
            ids[a:b] = vocab.mask_id
        elif u < p_mask + p_rand:
            ids[a:b] = regular[branch_rng.integers(0, len(regular), size=b - a)]
    return replace(sample, token_ids=ids, mlm_labels=labels)


_regular_cache: dict = {}


def _regular_ids(vocab: Vocab) -> np.ndarray:
    key = (vocab.fingerprint, len(vocab))
    if key not in _regular_cache:
        _regular_cache[key] = np.asarray(
            [i for i in range(len(vocab)) if i not in vocab.special_ids], dtype=np.int32
        )
    return _regular_cache[key]


def make_nsp_pairs(docs, vocab: Vocab, cfg: PackingConfig, rng, force: bool | None = None) -> list:
    """Next-sentence pairs: successor (True) or a segment of another document (False), 50/50.

    Layout ``[CLS] A [SEP] B [SEP]``; targets stay the identity and are unused.
    ``force`` pins the branch (tests).
    """
    docs = list(docs)
    toks = [_tokenize_doc(d, vocab) for d in docs]
    out = []
    for di, doc in enumerate(docs):
        for i in range(len(doc.segments) - 1):
            is_next = bool(rng.random() < 0.5) if force is None else force
            if len(docs) < 2:
                is_next = True
            if is_next:
                b_seg = toks[di][i + 1]
            else:
                other = int(rng.integers(0, len(docs) - 1))
                other += other >= di
                b_seg = toks[other][int(rng.integers(0, len(toks[other])))]
            out.append(_pair_sample(doc, i, toks[di][i], b_seg, is_next, vocab, cfg))
    return out


def _pair_sample(doc, i, a, b, is_next, vocab, cfg) -> PackedSample:
    a_ids, a_st = list(a.token_ids), list(a.word_starts)
    b_ids, b_st = list(b.token_ids), list(b.word_starts)
    while len(a_ids) + len(b_ids) + 3 > cfg.context:
        if len(a_ids) >= len(b_ids):
            a_ids.pop(), a_st.pop()
        else:
            b_ids.pop(), b_st.pop()
    ids = [vocab.cls_id] + a_ids + [vocab.sep_id] + b_ids + [vocab.sep_id]
    starts = [True] + a_st + [True] + b_st + [True]
    return PackedSample(
        token_ids=np.asarray(ids, dtype=np.int32),
        word_starts=np.asarray(starts, dtype=bool),
        sep_positions=np.asarray([1 + len(a_ids), len(ids) - 1], dtype=np.int32),
        so_targets=np.arange(2, dtype=np.int32),
        mlm_labels=np.full(len(ids), UNMASKED, dtype=np.int32),
        doc_id=doc.id,
        index=i,
        segment_offset=i,
        nsp_label=is_next,
    )


# pipeline --------------------------------------------------------------------


def prepare_pretrain_sample(sample: PackedSample, vocab: Vocab, cfg: PackingConfig, seed: int, epoch: int = 0):
    """Shuffle (if enabled) then mask a canonical sample with epoch-keyed streams."""
    if cfg.shuffle and sample.nsp_label is None:
        sample = shuffle_segments(sample, RngStream(seed, "shuffle", sample.uid, epoch))
    return apply_mlm_mask(
        sample,
        vocab,
        cfg,
        RngStream(seed, "mask-select", sample.uid, epoch),
        RngStream(seed, "mask-branch", sample.uid, epoch),
    )


def build_pretrain_samples(docs, vocab: Vocab, cfg: PackingConfig, seed: int, objective: str = "mlm+so",
                           epoch: int = 0) -> list:
    """Canonical packing followed by shuffling/masking for ``epoch``.

    ``objective`` "mlm+nsp" builds sentence pairs instead of packed samples;
    "mlm-only" packs like "mlm+so" (the shuffle flag still decides order).
    """
    if objective == "mlm+nsp":
        canonical = make_nsp_corpus(docs, vocab, cfg, seed)
    else:
        canonical = [s for doc in docs for s in pack_document(doc, vocab, cfg)]
    return [prepare_pretrain_sample(s, vocab, cfg, seed, epoch) for s in canonical]


def make_nsp_corpus(docs, vocab: Vocab, cfg: PackingConfig, seed: int) -> list:
    return make_nsp_pairs(docs, vocab, cfg, RngStream(seed, "nsp", "corpus", 0))


# shards ----------------------------------------------------------------------

SHARD_MAGIC = b"SOSH"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHQIQQ")  # magic, version, vocab fingerprint, C, seed, count
_LABEL_KINDS = {None: 0, "single": 1, "multi": 2}
_LABEL_NAMES = {v: k for k, v in _LABEL_KINDS.items()}


@dataclass
class ShardHeader:
    version: int
    vocab_fingerprint: int
    context: int
    seed: int
    count: int


def _encode_sample(s: PackedSample) -> bytes:
    out = io.BytesIO()
    doc = s.doc_id.encode("utf-8")
    t, k = len(s.token_ids), len(s.sep_positions)
    out.write(struct.pack("<H", len(doc)) + doc)
    out.write(struct.pack("<IIII", s.index, s.segment_offset, t, k))
    out.write(s.token_ids.astype("<i4").tobytes())
    out.write(s.word_starts.astype("u1").tobytes())
    out.write(s.mlm_labels.astype("<i4").tobytes())
    out.write(s.sep_positions.astype("<u4").tobytes())
    out.write(s.so_targets.astype("<u4").tobytes())
    nsp = -1 if s.nsp_label is None else int(s.nsp_label)
    out.write(struct.pack("<bB", nsp, _LABEL_KINDS[s.label_kind]))
    if s.label_kind == "single":
        out.write(np.asarray(s.segment_labels, dtype="<i4").tobytes())
    elif s.label_kind == "multi":
        for labs in s.segment_labels:
            out.write(struct.pack("<H", len(labs)))
            out.write(np.asarray(labs, dtype="<i4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes, base: int):
        self.buf, self.pos, self.base = buf, 0, base

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("truncated sample record", self.base + self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, n: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * n), dtype=dt).copy()


def _decode_sample(buf: bytes, base: int) -> PackedSample:
    r = _Reader(buf, base)
    (dlen,) = r.unpack("<H")
    doc_id = r.take(dlen).decode("utf-8")
    index, offset, t, k = r.unpack("<IIII")
    ids = r.array("<i4", t).astype(np.int32)
    starts = r.array("u1", t).astype(bool)
    mlm = r.array("<i4", t).astype(np.int32)
    seps = r.array("<u4", k).astype(np.int32)
    targets = r.array("<u4", k).astype(np.int32)
    nsp, kind_code = r.unpack("<bB")
    if kind_code not in _LABEL_NAMES:
        raise CorruptionError(f"unknown label kind {kind_code}", base + r.pos - 1)
    kind = _LABEL_NAMES[kind_code]
    labels = None
    if kind == "single":
        labels = [int(x) for x in r.array("<i4", k)]
    elif kind == "multi":
        labels = []
        for _ in range(k):
            (n,) = r.unpack("<H")
            labels.append(tuple(int(x) for x in r.array("<i4", n)))
    if r.pos != len(buf):
        raise CorruptionError("trailing bytes in sample record", base + r.pos)
    return PackedSample(
        token_ids=ids,
        word_starts=starts,
        sep_positions=seps,
        so_targets=targets,
        mlm_labels=mlm,
        doc_id=doc_id,
        index=index,
        segment_offset=offset,
        nsp_label=None if nsp < 0 else bool(nsp),
        label_kind=kind,
        segment_labels=labels,
    )


def shard_bytes(samples, vocab_fingerprint: int, context: int, seed: int) -> bytes:
    out = io.BytesIO()
    samples = list(samples)
    out.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, vocab_fingerprint, context, seed, len(samples)))
    for s in samples:
        rec = _encode_sample(s)
        out.write(struct.pack("<I", len(rec)))
        out.write(rec)
    return out.getvalue()


def write_shard(samples, path, vocab_fingerprint: int, context: int, seed: int):
    with open(path, "wb") as fh:
        fh.write(shard_bytes(samples, vocab_fingerprint, context, seed))


def read_shard(path, vocab: Vocab | None = None, context: int | None = None):
    """Return (header, samples); validates version, vocab fingerprint and C."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_shard(buf, vocab, context)


def parse_shard(buf: bytes, vocab: Vocab | None = None, context: int | None = None):
    if len(buf) < _HEADER.size:
        raise CorruptionError("truncated shard header", len(buf))
    magic, version, fp, c, seed, count = _HEADER.unpack_from(buf, 0)
    if magic != SHARD_MAGIC:
        raise CorruptionError("not a shard file (bad magic)", 0)
    if version != SHARD_VERSION:
        raise CompatibilityError(f"shard format version {version}, reader supports {SHARD_VERSION}")
    if vocab is not None and fp != vocab.fingerprint:
        raise CompatibilityError(
            f"shard vocab fingerprint {fp:016x} does not match vocabulary {vocab.fingerprint:016x}"
        )
    if context is not None and c != context:
        raise CompatibilityError(f"shard context {c} does not match expected {context}")
    header = ShardHeader(version, fp, c, seed, count)
    pos, samples = _HEADER.size, []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise CorruptionError("truncated record length", pos)
        (n,) = struct.unpack_from("<I", buf, pos)
        if pos + 4 + n > len(buf):
            raise CorruptionError("truncated sample record", pos)
        samples.append(_decode_sample(buf[pos + 4 : pos + 4 + n], pos + 4))
        pos += 4 + n
    if pos != len(buf):
        raise CorruptionError("trailing bytes after last record", pos)
    return header, samples
