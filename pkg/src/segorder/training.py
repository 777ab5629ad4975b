"""Pre-training and fine-tuning loops, evaluation and the metrics log.

Every random choice is drawn from an ``RngStream`` keyed by the run seed and
the step or epoch it belongs to (batch order per epoch, dropout per step,
shuffling and masking per sample and epoch). A run resumed from a checkpoint
at step ``s`` therefore replays the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError, SchemaError, UndefinedMetricError
from .metrics import MetricReport, f1_scores, map_at_k, rank_classes
from .model import SegmentOrderingModel, collate, inverse_frequency_weights
from .numerics import RngStream, no_grad
from .optim import AdamWState, OptimizerConfig, adamw_step, clip_gradients, lr_at
from .packing import PackingConfig, dynamic_sample, pack_document, prepare_pretrain_sample
from .tokenizer import Vocab

log = logging.getLogger(__name__)


# metrics log -----------------------------------------------------------------


class MetricsLog:
    """Append-only JSON lines ``{"step", "split", "metric", "value"}``."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records = []

    def write(self, step: int, split: str, metric: str, value: float):
        rec = {"step": int(step), "split": split, "metric": metric, "value": float(value)}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_report(self, report: MetricReport):
        for name, value in report.scalars().items():
            self.write(report.step, report.split, name, value)


def read_metrics_log(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"metrics log line {lineno}: {exc}") from None
            if set(rec) != {"step", "split", "metric", "value"}:
                raise SchemaError(f"metrics log line {lineno}: unexpected keys {sorted(rec)}")
            if not isinstance(rec["step"], int) or not isinstance(rec["value"], (int, float)):
                raise SchemaError(f"metrics log line {lineno}: bad field types")
            if not isinstance(rec["split"], str) or not isinstance(rec["metric"], str):
                raise SchemaError(f"metrics log line {lineno}: bad field types")
            out.append(rec)
    return out


# shared helpers --------------------------------------------------------------


def _grads(model: SegmentOrderingModel) -> dict:
    return {k: p.grad for k, p in model.params.items() if p.grad is not None}


def _check_params_finite(model: SegmentOrderingModel, step: int):
    bad = [k for k, p in model.params.items() if not np.all(np.isfinite(p.data))]
    if bad:
        raise NumericError(f"non-finite parameters after step {step}: {', '.join(sorted(bad))}")


def _dropout_rng(model, seed, step, micro):
    if model.config.dropout <= 0:
        return None
    return RngStream(seed, "dropout", str(micro), step)


def _chunks(seq, size):
    return [seq[i : i + size] for i in range(0, len(seq), size)]


# pre-training ----------------------------------------------------------------


@dataclass
class PretrainResult:
    losses: list  # (step, total loss) per optimizer step
    reports: list  # MetricReport per evaluation
    optimizer: AdamWState
    step: int
    checkpoints: list = field(default_factory=list)


def pretrain_packing(cfg: PackingConfig, objective: str) -> PackingConfig:
    """Only the ordering objective sees shuffled segments."""
    return replace(cfg, shuffle=cfg.shuffle and objective == "mlm+so")


def pretrain(
    samples,
    model: SegmentOrderingModel,
    opt_cfg: OptimizerConfig,
    pack_cfg: PackingConfig,
    vocab: Vocab,
    seed: int,
    *,
    eval_samples=None,
    eval_every: int = 500,
    checkpoint_every: int | None = None,
    run_dir=None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    metrics: MetricsLog | None = None,
) -> PretrainResult:
    """Train ``model`` on packed samples for ``opt_cfg.total_steps`` updates.

    ``samples`` may be raw or already shuffled/masked; they are reduced to
    canonical form and re-shuffled and re-masked for every epoch. One update
    accumulates ``accumulation_steps`` micro-batches of ``batch_size``; the
    MLM term is normalised by the masked-token count and the ordering (or
    NSP) term by the sample count of the whole update, so the update equals
    the one a single large batch would produce.
    """
    objective = model.config.objective
    if objective == "none":
        raise ConfigError("pre-training needs a model with an objective")
    base = [s.canonical() for s in samples]
    if not base:
        raise DataError("no pre-training samples")
    if objective == "mlm+nsp" and any(s.nsp_label is None for s in base):
        raise DataError("the NSP objective needs sentence-pair samples")
    too_many = max(s.segment_count for s in base)
    if objective == "mlm+so" and too_many > model.config.max_segments:
        raise DataError(f"a sample has {too_many} segments; the model supports {model.config.max_segments}")
    cfg = pretrain_packing(pack_cfg, objective)
    run_dir = None if run_dir is None else Path(run_dir)
    if metrics is None:
        metrics = MetricsLog(None if run_dir is None else run_dir / "metrics.jsonl")

    state, step = AdamWState(), 0
    if resume is not None:
        model.load_state_dict(resume.params)
        state = resume.optimizer or AdamWState()
        step = resume.step
    per_update = opt_cfg.batch_size * opt_cfg.accumulation_steps
    updates_per_epoch = math.ceil(len(base) / per_update)
    end = opt_cfg.total_steps if stop_at is None else min(stop_at, opt_cfg.total_steps)
    result = PretrainResult([], [], state, step)
    prepared_eval = None
    if eval_samples is not None:
        prepared_eval = [prepare_pretrain_sample(s.canonical(), vocab, cfg, seed, 0) for s in eval_samples]

    order, order_epoch = None, -1
    t0 = time.perf_counter()
    while step < end:
        epoch, slot = divmod(step, updates_per_epoch)
        if epoch != order_epoch:
            order = RngStream(seed, "order", "", epoch).permutation(len(base))
            order_epoch = epoch
        idx = order[slot * per_update : (slot + 1) * per_update]
        update = [prepare_pretrain_sample(base[i], vocab, cfg, seed, epoch) for i in idx]
        mlm_norm = max(int(sum((s.mlm_labels >= 0).sum() for s in update)), 1)
        model.zero_grad()
        total, parts = 0.0, {"mlm": 0.0, "seq": 0.0}
        for micro, chunk in enumerate(_chunks(update, opt_cfg.batch_size)):
            out = model.pretrain_forward(collate(chunk, vocab.pad_id), _dropout_rng(model, seed, step, micro),
                                         mlm_norm=mlm_norm, seq_norm=len(update))
            value = out.loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}")
            out.loss.backward()
            total += value
            parts["mlm"] += out.mlm.loss.item() / mlm_norm
            if out.seq is not None:
                parts["seq"] += out.seq.loss.item() / len(update)
        grads, norm = clip_gradients(_grads(model), opt_cfg.clip, opt_cfg.clip_mode)
        lr = lr_at(step + 1, opt_cfg)
        adamw_step(model.params, grads, state, lr, opt_cfg)
        step += 1
        _check_params_finite(model, step)
        result.losses.append((step, total))
        metrics.write(step, "train", "loss", total)
        metrics.write(step, "train", "loss.mlm", parts["mlm"])
        if objective != "mlm-only":
            metrics.write(step, "train", "loss.so" if objective == "mlm+so" else "loss.nsp", parts["seq"])
        metrics.write(step, "train", "lr", lr)
        metrics.write(step, "train", "grad_norm", norm)

        last = step == end
        if prepared_eval is not None and (step % eval_every == 0 or last):
            report = evaluate_pretrain(model, prepared_eval, step=step)
            report.wall_time = time.perf_counter() - t0
            result.reports.append(report)
            metrics.write_report(report)
            log.info("step %d %s", step, report.scalars())
        if run_dir is not None and ((checkpoint_every and step % checkpoint_every == 0) or last):
            path = run_dir / f"checkpoint-{step:07d}.ckpt"
            save_checkpoint(path, Checkpoint(model.config, model.state_dict(), step, seed, state,
                                             {"objective": objective}))
            result.checkpoints.append(path)
    result.step = step
    result.optimizer = state
    return result


def resume_from(path, model: SegmentOrderingModel) -> Checkpoint:
    return load_checkpoint(path, expected=model.config)


@dataclass
class PretrainPredictions:
    so: list  # per sample predicted positions
    so_targets: list
    mlm_pred: list  # per sample predicted ids at masked positions
    mlm_targets: list
    nsp: list


def evaluate_pretrain(model: SegmentOrderingModel, samples, batch_size: int = 32, step: int = 0,
                      return_predictions: bool = False):
    """MLM accuracy over masked positions, per-segment and exact-match ordering
    accuracy (or NSP accuracy), from samples that are already shuffled/masked."""
    samples = list(samples)
    preds = PretrainPredictions([], [], [], [], [])
    mlm_hit = mlm_n = seg_hit = seg_n = exact = nsp_hit = 0
    loss_sum, loss_n = 0.0, 0
    with no_grad():
        for chunk in _chunks(samples, batch_size):
            batch = collate(chunk)
            out = model.pretrain_forward(batch)
            loss_sum += out.loss.item() * len(chunk)
            loss_n += len(chunk)
            mlm_hit += out.mlm.correct
            mlm_n += out.mlm.count
            if return_predictions:
                # masked positions are scored in row-major order, so they split by sample
                counts = [int((s.mlm_labels >= 0).sum()) for s in chunk]
                flat = out.mlm.predictions if out.mlm.predictions is not None else np.zeros(0, np.int64)
                for s, part in zip(chunk, np.split(flat, np.cumsum(counts)[:-1])):
                    preds.mlm_pred.append(part)
                    preds.mlm_targets.append(s.mlm_labels[s.mlm_labels >= 0])
            if model.config.objective == "mlm+so":
                for i, s in enumerate(chunk):
                    k = s.segment_count
                    p = out.so_pred[i, :k]
                    hit = int((p == s.so_targets).sum())
                    seg_hit += hit
                    seg_n += k
                    exact += hit == k
                    preds.so.append(p.copy())
                    preds.so_targets.append(s.so_targets.copy())
            elif model.config.objective == "mlm+nsp":
                nsp_hit += out.seq.correct
                preds.nsp.extend(int(x) for x in out.seq.predictions)
    n = len(samples)
    report = MetricReport(
        step=step,
        mlm_accuracy=mlm_hit / mlm_n if mlm_n else None,
        so_segment_accuracy=seg_hit / seg_n if seg_n else None,
        so_exact_accuracy=exact / n if seg_n else None,
        nsp_accuracy=nsp_hit / n if model.config.objective == "mlm+nsp" and n else None,
        losses={"total": loss_sum / loss_n} if loss_n else {},
    )
    return (report, preds) if return_predictions else report


# fine-tuning -----------------------------------------------------------------


@dataclass
class TaskConfig:
    task: str = "multiclass-linear"
    num_classes: int = 2
    epochs: int = 2
    batch_size: int = 4
    peak_lr: float = 5e-5
    dropout: float = 0.2
    label_dim: int = 32
    loss_weighting: bool = False
    oversampling: bool = False
    dynamic_sampling: bool = False
    min_segments: int = 3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.10
    clip: float = 1.0
    clip_mode: str = "norm"

    def __post_init__(self):
        from .model import TASKS

        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.num_classes < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("num_classes, epochs and batch_size must be positive")

    @property
    def multilabel(self) -> bool:
        return self.task == "multilabel-linear"


PRESETS = {
    "csabstruct-like": dict(dropout=0.1, batch_size=8, peak_lr=1e-4, epochs=2, task="multiclass-gru", label_dim=32),
    "pubmed-like": dict(dropout=0.2, batch_size=4, peak_lr=5e-5, epochs=2, task="multiclass-linear"),
    "nicta-like": dict(dropout=0.2, batch_size=4, peak_lr=5e-5, epochs=3, task="multiclass-linear"),
    "ifrs-like": dict(dropout=0.2, batch_size=4, peak_lr=5e-5, epochs=30, task="multilabel-linear",
                      loss_weighting=True, dynamic_sampling=True),
    "gri-like": dict(dropout=0.2, batch_size=4, peak_lr=1e-5, epochs=3, task="multilabel-linear",
                     loss_weighting=True, oversampling=True, dynamic_sampling=True),
}


def preset(name: str, **overrides) -> TaskConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return TaskConfig(**{**PRESETS[name], **overrides})


def check_labels(docs, task: TaskConfig):
    for doc in docs:
        kind = doc.label_kind
        if kind is None:
            continue
        if (kind == "multi") != task.multilabel:
            raise ConfigError(f"document {doc.id!r} has {kind}-label annotations but task is {task.task}")
        for lab in doc.labels:
            ids = () if lab is None else (lab if isinstance(lab, tuple) else (lab,))
            for c in ids:
                if not 0 <= c < task.num_classes:
                    raise DataError(f"document {doc.id!r}: label {c} outside [0, {task.num_classes})")


def has_labeled_segment(sample) -> bool:
    labels = sample.segment_labels or []
    if sample.label_kind == "multi":
        return any(len(x) for x in labels)
    return any(x >= 0 for x in labels)


def oversample(samples, rng) -> list:
    """Append random repeats of samples holding a labeled segment until they
    match the number of samples without one. Inputs are never modified."""
    samples = list(samples)
    labeled = [s for s in samples if has_labeled_segment(s)]
    deficit = (len(samples) - len(labeled)) - len(labeled)
    if not labeled or deficit <= 0:
        return samples
    extra = rng.integers(0, len(labeled), size=deficit)
    return samples + [labeled[i] for i in extra]


def finetune_samples(docs, vocab, pack_cfg: PackingConfig, task: TaskConfig, seed: int, epoch: int) -> list:
    cfg = replace(pack_cfg, shuffle=False, min_segments=task.min_segments)
    out = []
    for doc in docs:
        if task.dynamic_sampling:
            out.extend(dynamic_sample(doc, vocab, cfg, RngStream(seed, "dynamic-L", doc.id, epoch)))
        else:
            out.extend(pack_document(doc, vocab, cfg))
    if task.oversampling:
        out = oversample(out, RngStream(seed, "oversample", "", epoch))
    return out


@dataclass
class FinetuneResult:
    model: SegmentOrderingModel  # restored to the best epoch
    best_epoch: int
    best_report: MetricReport
    reports: list  # one validation report per epoch
    losses: list


def selection_score(report: MetricReport, task: TaskConfig) -> float:
    if task.multilabel:
        return report.map_at_k.get(3, float("-inf"))
    return report.f1_micro if report.f1_micro is not None else float("-inf")


def finetune(
    train_docs,
    val_docs,
    encoder: SegmentOrderingModel,
    task: TaskConfig,
    vocab: Vocab,
    pack_cfg: PackingConfig,
    seed: int,
    *,
    run_dir=None,
    metrics: MetricsLog | None = None,
) -> FinetuneResult:
    """Train a task head on top of a copy of ``encoder``'s weights.

    Segments keep document order. After each epoch the model is scored on
    ``val_docs``; the epoch with the best micro-F1 (multi-class) or MAP@3
    (multi-label) wins, the earlier one on ties.
    """
    train_docs, val_docs = list(train_docs), list(val_docs)
    check_labels(train_docs + val_docs, task)
    model = encoder.for_task(task.task, task.num_classes, seed=seed, dropout=task.dropout,
                             label_dim=task.label_dim)
    run_dir = None if run_dir is None else Path(run_dir)
    if metrics is None:
        metrics = MetricsLog(None if run_dir is None else run_dir / "metrics.jsonl")
    epochs = [finetune_samples(train_docs, vocab, pack_cfg, task, seed, e) for e in range(task.epochs)]
    total = sum(math.ceil(len(s) / task.batch_size) for s in epochs)
    if total == 0:
        raise DataError("no fine-tuning samples")
    opt_cfg = OptimizerConfig(peak_lr=task.peak_lr, weight_decay=task.weight_decay, clip=task.clip,
                              clip_mode=task.clip_mode, warmup_fraction=task.warmup_fraction,
                              total_steps=total, batch_size=task.batch_size, accumulation_steps=1)
    weights = None
    if task.loss_weighting and task.multilabel:
        label_sets = [lab for s in epochs[0] for lab in (s.segment_labels or [])]
        weights = inverse_frequency_weights(label_sets, task.num_classes).astype(model.config.dtype)
    val_samples = [s for d in val_docs for s in pack_document(d, vocab, replace(pack_cfg, shuffle=False))]

    state, step, losses, reports = AdamWState(), 0, [], []
    best = None
    for epoch, samples in enumerate(epochs):
        order = RngStream(seed, "order", "", epoch).permutation(len(samples))
        for chunk_idx in _chunks(order, task.batch_size):
            chunk = [samples[i] for i in chunk_idx]
            batch = collate(chunk, vocab.pad_id, task.num_classes)
            model.zero_grad()
            loss, _, _ = model.task_forward(batch, _dropout_rng(model, seed, step, 0), weights, mode="train")
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite fine-tuning loss at step {step}")
            if loss.requires_grad:
                loss.backward()
            grads, _ = clip_gradients(_grads(model), opt_cfg.clip, opt_cfg.clip_mode)
            lr = lr_at(step + 1, opt_cfg)
            adamw_step(model.params, grads, state, lr, opt_cfg)
            step += 1
            _check_params_finite(model, step)
            losses.append((step, value))
            metrics.write(step, "train", "loss", value)
        report = evaluate_finetune(model, val_samples, task, step=step)
        reports.append(report)
        metrics.write_report(report)
        score = selection_score(report, task)
        if best is None or score > best[0]:
            best = (score, epoch, report, model.state_dict())
    _, best_epoch, best_report, best_state = best
    model.load_state_dict(best_state)
    if run_dir is not None:
        save_checkpoint(run_dir / "best.ckpt", Checkpoint(model.config, model.state_dict(), step, seed, None,
                                                          {"task": task.task, "best_epoch": best_epoch}))
    return FinetuneResult(model, best_epoch, best_report, reports, losses)


@dataclass
class TaskPredictions:
    predictions: list  # per labeled segment: class id or tuple of ids
    labels: list
    rankings: list  # per labeled segment: class ids by descending score


def evaluate_finetune(model: SegmentOrderingModel, samples, task: TaskConfig, step: int = 0,
                      batch_size: int = 32, ks=(3, 5), return_predictions: bool = False):
    """Segment-level micro/macro F1 and MAP@k; multi-class scores only labeled segments."""
    samples = list(samples)
    raw = TaskPredictions([], [], [])
    loss_sum, loss_n = 0.0, 0
    with no_grad():
        for chunk in _chunks(samples, batch_size):
            batch = collate(chunk, num_classes=task.num_classes)
            loss, scores, decided = model.task_forward(batch, mode="infer")
            if loss is not None:
                loss_sum += loss.item() * len(chunk)
                loss_n += len(chunk)
            for i, s in enumerate(chunk):
                for j in range(s.segment_count):
                    lab = None if s.segment_labels is None else s.segment_labels[j]
                    if task.multilabel:
                        pred = tuple(int(c) for c in np.flatnonzero(decided[i, j]))
                        lab = () if lab is None else tuple(lab)
                    else:
                        if lab is None or lab < 0:
                            continue
                        pred = int(decided[i, j])
                    raw.predictions.append(pred)
                    raw.labels.append(lab)
                    raw.rankings.append(rank_classes(scores[i, j]).tolist())
    report = MetricReport(step=step, split="validation")
    if raw.labels:
        report.f1_micro, report.f1_macro = f1_scores(raw.predictions, raw.labels, task.num_classes)
        relevant = [lab if task.multilabel else (lab,) for lab in raw.labels]
        for k in ks:
            try:
                report.map_at_k[k] = map_at_k(raw.rankings, relevant, k)
            except UndefinedMetricError:
                pass
    if loss_n:
        report.losses["total"] = loss_sum / loss_n
    report.__post_init__()
    return (report, raw) if return_predictions else report
