"""Post-norm transformer encoder, pointer ordering head and task heads.

Parameters live in one flat dict keyed by dotted names (``encoder.layer0.attn.wq``,
``pointer.wquery``, ``pointer.segpos`` ...); those names are the checkpoint
contract. Dense weights used as ``x @ W`` are stored ``[in, out]``; the
pointer projections keep the ``[q, d]`` layout and are applied transposed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import CapacityError, ConfigError, DataError, TargetError
from .numerics import (
    RngStream,
    Tensor,
    bce_with_logits,
    concat,
    dropout,
    gelu,
    index,
    layer_norm,
    log_softmax,
    masked_fill,
    nll_from_logits,
    sigmoid,
    softmax_rows,
    swapaxes,
    take_rows,
    tanh,
    transpose,
)
from .packing import UNMASKED

log = logging.getLogger(__name__)

OBJECTIVES = ("mlm+so", "mlm-only", "mlm+nsp", "none")
TASKS = ("multiclass-linear", "multiclass-gru", "multilabel-linear")
NEG = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    context: int = 128
    max_segments: int = 16
    dropout: float = 0.1
    objective: str = "mlm+so"
    task: str | None = None
    num_classes: int = 0
    label_dim: int = 32
    dtype: str = "float32"
    init_std: float | None = None  # None: 0.02 * sqrt(768 / d)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the special tokens")
        if self.d < 1 or self.layers < 0 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be positive and divisible by heads={self.heads}")
        if self.max_segments < 1 or self.context < 3:
            raise ConfigError("max_segments must be >= 1 and context >= 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.task is not None:
            if self.task not in TASKS:
                raise ConfigError(f"unknown task {self.task!r}")
            if self.num_classes < 1:
                raise ConfigError("a task head needs num_classes >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def weight_std(self) -> float:
        """Init scale; the default keeps pre-activation variance at a width-768 level."""
        return self.init_std if self.init_std is not None else 0.02 * math.sqrt(768 / self.d)

    @property
    def q(self) -> int:
        return max(1, self.d // 4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# parameters ------------------------------------------------------------------


def encoder_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d, cfg.d * cfg.ffn_mult
    shapes = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.context, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for i in range(cfg.layers):
        p = f"encoder.layer{i}."
        shapes.update({
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln1.gamma": (d,), p + "ln1.beta": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
            p + "ln2.gamma": (d,), p + "ln2.beta": (d,),
        })
    return shapes


def head_shapes(cfg: ModelConfig) -> dict:
    d, shapes = cfg.d, {}
    if cfg.objective in ("mlm+so", "mlm-only", "mlm+nsp"):
        shapes.update({
            "mlm.dense.w": (d, d), "mlm.dense.b": (d,),
            "mlm.ln.gamma": (d,), "mlm.ln.beta": (d,),
            "mlm.bias": (cfg.vocab_size,),
        })
    if cfg.objective == "mlm+so":
        shapes.update({
            "pointer.wquery": (cfg.q, d),
            "pointer.wkey": (cfg.q, d),
            "pointer.segpos": (cfg.max_segments, d),
        })
    if cfg.objective == "mlm+nsp":
        shapes.update({"nsp.w": (2, d), "nsp.b": (2,)})
    r = cfg.num_classes
    if cfg.task in ("multiclass-linear", "multilabel-linear"):
        shapes.update({"head.w": (r, d), "head.b": (r,)})
    elif cfg.task == "multiclass-gru":
        e = cfg.label_dim
        shapes.update({
            "head.label_emb": (r, e), "head.start": (e,),
            "head.w_ih": (3 * d, d + e), "head.b_ih": (3 * d,),
            "head.w_hh": (3 * d, d), "head.b_hh": (3 * d,),
            "head.out.w": (r, d), "head.out.b": (r,),
        })
    return shapes


def _init_array(name, shape, cfg, rng) -> np.ndarray:
    last = name.rsplit(".", 1)[-1]
    if last == "gamma":
        return np.ones(shape)
    if last in ("beta", "bias") or (last.startswith("b") and len(shape) == 1):
        return np.zeros(shape)
    if name.startswith("head.") and ("w_ih" in name or "w_hh" in name):
        bound = 1.0 / math.sqrt(cfg.d)
        return rng.uniform(-bound, bound, size=shape)
    return rng.normal(0.0, cfg.weight_std, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0, names=None) -> dict:
    shapes = {**encoder_shapes(cfg), **head_shapes(cfg)}
    params = {}
    for name, shape in shapes.items():
        if names is not None and name not in names:
            continue
        rng = RngStream(seed, "init", name)
        arr = _init_array(name, shape, cfg, rng).astype(cfg.dtype)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# batching --------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]
    pad_mask: np.ndarray  # [B, T], True at padding
    sep_idx: np.ndarray  # [B, Km]
    seg_mask: np.ndarray  # [B, Km], True for real segments
    so_targets: np.ndarray  # [B, Km]
    mlm_labels: np.ndarray  # [B, T]
    nsp: np.ndarray | None = None  # [B] int
    labels: np.ndarray | None = None  # single [B, Km] (-1 unlabeled); multi [B, Km, R]
    label_mask: np.ndarray | None = None  # [B, Km]
    label_kind: str | None = None

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def collate(samples, pad_id: int = 0, num_classes: int | None = None) -> Batch:
    b = len(samples)
    t = max(s.length for s in samples)
    km = max(s.segment_count for s in samples)
    ids = np.full((b, t), pad_id, dtype=np.int64)
    pad = np.ones((b, t), dtype=bool)
    mlm = np.full((b, t), UNMASKED, dtype=np.int64)
    sep = np.zeros((b, km), dtype=np.int64)
    seg = np.zeros((b, km), dtype=bool)
    tgt = np.zeros((b, km), dtype=np.int64)
    for i, s in enumerate(samples):
        n, k = s.length, s.segment_count
        ids[i, :n] = s.token_ids
        pad[i, :n] = False
        mlm[i, :n] = s.mlm_labels
        sep[i, :k] = s.sep_positions
        seg[i, :k] = True
        tgt[i, :k] = s.so_targets
    batch = Batch(ids, pad, sep, seg, tgt, mlm)
    if all(s.nsp_label is not None for s in samples):
        batch.nsp = np.asarray([int(s.nsp_label) for s in samples], dtype=np.int64)
    kinds = {s.label_kind for s in samples}
    if kinds == {"single"}:
        labels = np.full((b, km), -1, dtype=np.int64)
        for i, s in enumerate(samples):
            labels[i, : s.segment_count] = s.segment_labels
        batch.labels, batch.label_mask, batch.label_kind = labels, labels >= 0, "single"
    elif kinds == {"multi"}:
        if num_classes is None:
            raise ConfigError("multi-label collation needs num_classes")
        labels = np.zeros((b, km, num_classes))
        for i, s in enumerate(samples):
            for j, labs in enumerate(s.segment_labels):
                if labs:
                    labels[i, j, list(labs)] = 1.0
        batch.labels, batch.label_mask, batch.label_kind = labels, seg.copy(), "multi"
    return batch


# encoder ---------------------------------------------------------------------


def encode(batch: Batch, params: dict, cfg: ModelConfig, rng=None) -> Tensor:
    """Hidden states [B, T, d]; padded keys are masked out of every attention."""
    bsz, t = batch.ids.shape
    if t > cfg.context:
        raise CapacityError(f"sequence length {t} exceeds context {cfg.context}")
    d, h = cfg.d, cfg.heads
    dh = d // h
    rate = cfg.dropout if rng is not None else 0.0
    p = params
    x = take_rows(p["embeddings.token"], batch.ids) + p["embeddings.position"][:t]
    x = dropout(layer_norm(x, p["embeddings.ln.gamma"], p["embeddings.ln.beta"], cfg.ln_eps), rate, rng)
    key_bias = np.where(batch.pad_mask, NEG, 0.0).astype(cfg.dtype)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        pre = f"encoder.layer{i}."
        q = (x @ p[pre + "attn.wq"] + p[pre + "attn.bq"]).reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        k = (x @ p[pre + "attn.wk"]).reshape(bsz, t, h, dh).transpose(0, 2, 3, 1)
        v = (x @ p[pre + "attn.wv"] + p[pre + "attn.bv"]).reshape(bsz, t, h, dh).transpose(0, 2, 1, 3)
        att = dropout(softmax_rows((q @ k) * scale + key_bias), rate, rng)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        a = dropout(ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"], rate, rng)
        x = layer_norm(x + a, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.ln_eps)
        f = gelu(x @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        x = layer_norm(x + dropout(f, rate, rng), p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.ln_eps)
    return x


def gather_sep(h: Tensor, sep_positions) -> Tensor:
    """Rows of ``h`` at the [SEP] positions: [T, d] -> [K, d] or [B, T, d] -> [B, K, d]."""
    pos = np.asarray(sep_positions, dtype=np.int64)
    t = h.shape[-2]
    if pos.size and (pos.min() < 0 or pos.max() >= t):
        raise IndexError(f"[SEP] position out of range for sequence length {t}")
    if h.ndim == 2:
        return take_rows(h, pos)
    bsz, _, d = h.shape
    flat = pos + (np.arange(bsz) * t)[:, None]
    return take_rows(h.reshape(bsz * t, d), flat)


def add_segment_positions(h_sep: Tensor, table: Tensor) -> Tensor:
    """Add the first K rows of the segment position table (post-shuffle positions)."""
    k = h_sep.shape[-2]
    if k > table.shape[0]:
        raise CapacityError(f"{k} segments exceed the segment position table ({table.shape[0]})")
    return h_sep + table[:k]


@dataclass
class PointerAttention:
    A: Tensor  # [..., K, K], row-stochastic
    Q: Tensor
    Kmat: Tensor
    logits: Tensor
    valid: np.ndarray | None = None  # [..., K] real segments


def pointer_attention(h: Tensor, w_query: Tensor, w_key: Tensor, valid=None) -> PointerAttention:
    """A = softmax(Q K^T / sqrt(q)) with Q = H' W_query^T and K = H' W_key^T.

    ``valid`` masks padded segment columns when K is padded across a batch.
    """
    q = w_query.shape[0]
    qm = h @ transpose(w_query)
    km = h @ transpose(w_key)
    logits = (qm @ swapaxes(km, -1, -2)) * (1.0 / math.sqrt(q))
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        logits = masked_fill(logits, ~valid[..., None, :], NEG)
    a = softmax_rows(logits)
    if __debug__:
        rows = a.data.sum(axis=-1)
        real = rows if valid is None else rows[valid]
        assert np.all(np.abs(real - 1.0) <= 1e-5), "pointer attention rows must sum to 1"
    return PointerAttention(a, qm, km, logits, valid)


def _check_permutations(y: np.ndarray, valid: np.ndarray):
    for row, ok in zip(y, valid):
        k = int(ok.sum())
        if sorted(row[:k].tolist()) != list(range(k)):
            raise TargetError(f"ordering targets {row[:k].tolist()} are not a permutation of range({k})")


def so_loss(att: PointerAttention, y, valid=None) -> Tensor:
    """-sum_i log a[i, y_i], summed over samples when batched (fused log-softmax)."""
    logits = att.logits
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        y = y[None]
    if valid is None:
        valid = att.valid if att.valid is not None else np.ones(y.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(y.shape)
    _check_permutations(y, valid)
    logp = log_softmax(logits)
    b, i = np.nonzero(valid)
    return -index(logp, (b, i, y[b, i])).sum()


def so_predict(a) -> np.ndarray:
    """Row-wise argmax; not constrained to be a permutation."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(arr, axis=-1)


@dataclass
class HeadOutput:
    loss: Tensor
    correct: int = 0
    count: int = 0
    predictions: np.ndarray | None = None  # argmax per scored position (MLM) or per sample (NSP)

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.count if self.count else None


def mlm_forward(h: Tensor, mlm_labels, params: dict, cfg: ModelConfig, reduction: str = "mean") -> HeadOutput:
    labels = np.asarray(mlm_labels).reshape(-1)
    pos = np.flatnonzero(labels != UNMASKED)
    if pos.size == 0:
        return HeadOutput(Tensor(np.zeros((), dtype=h.dtype)))
    d = h.shape[-1]
    x = take_rows(h.reshape(-1, d), pos)
    x = gelu(x @ params["mlm.dense.w"] + params["mlm.dense.b"])
    x = layer_norm(x, params["mlm.ln.gamma"], params["mlm.ln.beta"], cfg.ln_eps)
    logits = x @ transpose(params["embeddings.token"]) + params["mlm.bias"]
    targets = labels[pos]
    loss = nll_from_logits(logits, targets, reduction)
    pred = np.argmax(logits.data, axis=-1)
    return HeadOutput(loss, int((pred == targets).sum()), int(pos.size), pred)


def nsp_forward(h: Tensor, nsp_labels, params: dict, reduction: str = "mean") -> HeadOutput:
    if nsp_labels is None or any(x is None for x in np.atleast_1d(nsp_labels)):
        raise DataError("next-sentence prediction needs a label for every sample")
    labels = np.asarray(nsp_labels, dtype=np.int64).reshape(-1)
    cls = h[:, 0, :] if h.ndim == 3 else h[0:1, :]
    logits = cls @ transpose(params["nsp.w"]) + params["nsp.b"]
    loss = nll_from_logits(logits, labels, reduction)
    pred = np.argmax(logits.data, axis=-1)
    return HeadOutput(loss, int((pred == labels).sum()), len(labels), pred)


# classification heads --------------------------------------------------------


def classifier_logits(h_sep: Tensor, params: dict) -> Tensor:
    return h_sep @ transpose(params["head.w"]) + params["head.b"]


def classify_multiclass(h_sep: Tensor, params: dict) -> Tensor:
    return softmax_rows(classifier_logits(h_sep, params))


def classify_multilabel(h_sep: Tensor, params: dict, class_weights=None) -> Tensor:
    _check_weights(class_weights, params["head.w"].shape[0])
    return sigmoid(classifier_logits(h_sep, params))


def _check_weights(weights, r: int):
    if weights is not None and len(weights) != r:
        raise ConfigError(f"class weight vector has length {len(weights)}, expected {r}")


def multiclass_loss(logits: Tensor, labels, label_mask) -> Tensor:
    """Mean cross-entropy over labeled segments."""
    b, i = np.nonzero(np.asarray(label_mask, dtype=bool))
    if b.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    rows = index(logits, (b, i))
    return nll_from_logits(rows, np.asarray(labels)[b, i], reduction="mean")


def multilabel_loss(logits: Tensor, targets, label_mask, class_weights=None) -> Tensor:
    """Class-weighted binary cross-entropy, mean over segments and classes."""
    _check_weights(class_weights, logits.shape[-1])
    b, i = np.nonzero(np.asarray(label_mask, dtype=bool))
    if b.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    rows = index(logits, (b, i))
    return bce_with_logits(rows, np.asarray(targets)[b, i], class_weights).mean()


def inverse_frequency_weights(label_sets, num_classes: int) -> np.ndarray:
    """1 / positive count per class (zero counts treated as one), rescaled to mean 1."""
    counts = np.zeros(num_classes)
    for labs in label_sets:
        for c in labs:
            counts[c] += 1
    w = 1.0 / np.maximum(counts, 1.0)
    return w / w.mean()


@dataclass
class GRUOutput:
    predictions: np.ndarray  # [B, K]
    logits: Tensor  # [B, K, R]
    loss: Tensor | None


def gru_label_head(h_sep: Tensor, labels, params: dict, mode: str = "train", label_mask=None,
                   reduction: str = "sum") -> GRUOutput:
    """Left-to-right GRU over segments fed with the previous label's embedding.

    ``mode`` "train" feeds the gold previous label (teacher forcing; an
    unlabeled gold falls back to the prediction), "infer" feeds the argmax
    prediction. Step 0 uses the learned start embedding. The loss is the
    cross-entropy over labeled steps, summed or averaged per ``reduction``.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"GRU head mode must be 'train' or 'infer', got {mode!r}")
    squeeze = h_sep.ndim == 2
    if squeeze:
        h_sep = h_sep.reshape(1, *h_sep.shape)
        labels = None if labels is None else np.asarray(labels)[None]
        label_mask = None if label_mask is None else np.asarray(label_mask)[None]
    bsz, k, d = h_sep.shape
    emb, start = params["head.label_emb"], params["head.start"]
    w_ih, w_hh = transpose(params["head.w_ih"]), transpose(params["head.w_hh"])
    b_ih, b_hh = params["head.b_ih"], params["head.b_hh"]
    w_out, b_out = transpose(params["head.out.w"]), params["head.out.b"]
    if mode == "train" and labels is None:
        raise ConfigError("teacher forcing needs labels")

    state = Tensor(np.zeros((bsz, d), dtype=h_sep.dtype))
    prev = start.reshape(1, -1) * Tensor(np.ones((bsz, 1), dtype=h_sep.dtype))
    step_logits, preds = [], np.zeros((bsz, k), dtype=np.int64)
    for i in range(k):
        x = concat([h_sep[:, i, :], prev], axis=-1)
        gi, gh = x @ w_ih + b_ih, state @ w_hh + b_hh
        r = sigmoid(gi[:, :d] + gh[:, :d])
        z = sigmoid(gi[:, d : 2 * d] + gh[:, d : 2 * d])
        n = tanh(gi[:, 2 * d :] + r * gh[:, 2 * d :])
        state = (1.0 - z) * n + z * state
        logits = state @ w_out + b_out
        step_logits.append(logits.reshape(bsz, 1, -1))
        preds[:, i] = np.argmax(logits.data, axis=-1)
        nxt = preds[:, i]
        if mode == "train":
            gold = np.asarray(labels)[:, i]
            nxt = np.where(gold >= 0, gold, nxt)
        prev = take_rows(emb, nxt)
    all_logits = concat(step_logits, axis=1)
    loss = None
    if labels is not None:
        mask = (np.asarray(labels) >= 0) if label_mask is None else np.asarray(label_mask, dtype=bool)
        b, i = np.nonzero(mask)
        if b.size == 0:
            loss = Tensor(np.zeros((), dtype=all_logits.dtype))
        else:
            loss = nll_from_logits(index(all_logits, (b, i)), np.asarray(labels)[b, i], reduction=reduction)
    if squeeze:
        preds = preds[0]
    return GRUOutput(preds, all_logits, loss)


# model wrapper ---------------------------------------------------------------


@dataclass
class PretrainOutput:
    loss: Tensor
    mlm: HeadOutput
    seq: HeadOutput | None  # SO or NSP head
    so_pred: np.ndarray | None = None
    so_valid: np.ndarray | None = None


class SegmentOrderingModel:
    """Encoder plus the heads selected by ``config.objective`` / ``config.task``."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = {**encoder_shapes(config), **head_shapes(config)}
        missing = set(expected) - set(self.params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)}")
        log.info("model with %d parameters (%s)", self.num_parameters, config.objective)

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def tensors(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        for name, p in self.params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)

    def astype(self, dtype: str) -> "SegmentOrderingModel":
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "dtype": dtype})
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return SegmentOrderingModel(cfg, params=params)

    def for_task(self, task: str, num_classes: int, seed: int = 0, dropout: float | None = None,
                 label_dim: int | None = None) -> "SegmentOrderingModel":
        """Copy of the encoder with a fresh task head and no pre-training heads."""
        cfg = ModelConfig.from_dict({
            **self.config.to_dict(),
            "objective": "none",
            "task": task,
            "num_classes": num_classes,
            "dropout": self.config.dropout if dropout is None else dropout,
            "label_dim": self.config.label_dim if label_dim is None else label_dim,
        })
        params = {k: Tensor(self.params[k].data.copy(), requires_grad=True, name=k) for k in encoder_shapes(cfg)}
        params.update(init_params(cfg, seed, names=set(head_shapes(cfg))))
        return SegmentOrderingModel(cfg, params=params)

    def encode(self, batch: Batch, rng=None) -> Tensor:
        return encode(batch, self.params, self.config, rng)

    def hidden_states(self, samples) -> list:
        """Unpadded [T, d] hidden states per sample."""
        from .numerics import no_grad

        batch = collate(samples)
        with no_grad():
            h = self.encode(batch).data
        return [h[i, : s.length] for i, s in enumerate(samples)]

    def pointer(self, h: Tensor, batch: Batch) -> PointerAttention:
        h_sep = gather_sep(h, batch.sep_idx)
        h_sep = add_segment_positions(h_sep, self.params["pointer.segpos"])
        return pointer_attention(h_sep, self.params["pointer.wquery"], self.params["pointer.wkey"], batch.seg_mask)

    def pretrain_forward(self, batch: Batch, rng=None, mlm_norm: float | None = None,
                         seq_norm: float | None = None) -> PretrainOutput:
        """Joint loss ``mlm_sum / mlm_norm + seq_sum / seq_norm``.

        The defaults normalise by this batch's masked-token and sample counts
        (mean MLM cross-entropy plus per-sample SO loss); the trainer passes
        counts over the whole accumulated batch instead.
        """
        cfg = self.config
        h = self.encode(batch, rng)
        mlm = mlm_forward(h, batch.mlm_labels, self.params, cfg, reduction="sum")
        mlm_norm = max(mlm.count, 1) if mlm_norm is None else mlm_norm
        seq_norm = batch.size if seq_norm is None else seq_norm
        loss = mlm.loss * (1.0 / mlm_norm)
        seq, pred = None, None
        if cfg.objective == "mlm+so":
            att = self.pointer(h, batch)
            seq = HeadOutput(so_loss(att, batch.so_targets, batch.seg_mask))
            pred = so_predict(att.A)
            seq.correct = int(((pred == batch.so_targets) & batch.seg_mask).sum())
            seq.count = int(batch.seg_mask.sum())
            loss = loss + seq.loss * (1.0 / seq_norm)
        elif cfg.objective == "mlm+nsp":
            seq = nsp_forward(h, batch.nsp, self.params, reduction="sum")
            loss = loss + seq.loss * (1.0 / seq_norm)
        return PretrainOutput(loss, mlm, seq, pred, batch.seg_mask)

    def task_forward(self, batch: Batch, rng=None, class_weights=None, mode: str = "train"):
        """Returns (loss or None, per-segment scores [B, K, R] as numpy)."""
        cfg = self.config
        h = self.encode(batch, rng)
        h_sep = gather_sep(h, batch.sep_idx)
        has_labels = batch.labels is not None
        if cfg.task == "multiclass-gru":
            out = gru_label_head(h_sep, batch.labels if has_labels else None, self.params,
                                 mode=mode if has_labels else "infer",
                                 label_mask=batch.label_mask, reduction="mean")
            scores = softmax_rows(out.logits).data
            return out.loss, scores, out.predictions
        logits = classifier_logits(h_sep, self.params)
        if cfg.task == "multiclass-linear":
            loss = multiclass_loss(logits, batch.labels, batch.label_mask) if has_labels else None
            return loss, softmax_rows(logits).data, np.argmax(logits.data, axis=-1)
        loss = multilabel_loss(logits, batch.labels, batch.label_mask, class_weights) if has_labels else None
        scores = sigmoid(logits).data
        return loss, scores, scores >= 0.5
