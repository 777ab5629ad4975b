"""``segorder`` command line: synth, stats, pack, pretrain, finetune, eval, inspect.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig
from .corpus import corpus_stats, read_jsonl, synth_corpus, synth_vocab, write_jsonl
from .errors import CapacityError, ConfigError, DataError, NumericError
from .model import SegmentOrderingModel
from .numerics import Tensor
from .packing import (
    UNMASKED,
    build_pretrain_samples,
    efficiency_gain,
    pack_document,
    read_shard,
    write_shard,
)
from .tokenizer import detokenize, load_vocab
from .training import (
    MetricsLog,
    TaskConfig,
    evaluate_finetune,
    evaluate_pretrain,
    finetune,
    pretrain,
)

log = logging.getLogger("segorder")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    return cfg


def _read_docs(path):
    docs, issues = read_jsonl(path)
    for issue in issues:
        log.warning("%s:%d: %s", path, issue.line, issue.message)
    if not docs:
        raise DataError(f"{path}: no valid documents")
    return docs


def _model_from_checkpoint(ckpt) -> SegmentOrderingModel:
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in ckpt.params.items()}
    return SegmentOrderingModel(ckpt.config, params=params)


def _infer_classes(docs) -> int | None:
    top = -1
    for doc in docs:
        for lab in doc.labels or []:
            ids = () if lab is None else (lab if isinstance(lab, tuple) else (lab,))
            top = max([top, *ids])
    return top + 1 if top >= 0 else None


# commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    docs = synth_corpus(cfg.synth_spec())
    out = Path(args.out)
    write_jsonl(docs, out)
    vocab = synth_vocab()
    if args.vocab_out:
        vocab.save(args.vocab_out)
    stats = corpus_stats(docs, vocab, cfg["packing"]["context"], cfg["packing"]["max_segments"])
    out.with_name(out.name + ".stats").write_text(stats.to_text(), encoding="utf-8")
    print(f"wrote {len(docs)} documents to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    docs = _read_docs(args.corpus)
    vocab = load_vocab(args.vocab)
    stats = corpus_stats(docs, vocab, args.context, args.max_segments)
    sys.stdout.write(stats.to_text())
    if stats.avg_segment_tokens > 0:
        print(f"efficiency_gain={efficiency_gain(args.context, stats.avg_segment_tokens)}")
    return EXIT_OK


def cmd_pack(args) -> int:
    cfg = _config(args)
    if args.no_shuffle:
        cfg.set("packing.shuffle", False)
    seed = cfg.seed or 0
    pack_cfg = cfg.packing_config()
    vocab = load_vocab(args.vocab)
    docs = _read_docs(args.corpus)
    samples = build_pretrain_samples(docs, vocab, pack_cfg, seed, objective=args.objective)
    write_shard(samples, args.out, vocab.fingerprint, pack_cfg.context, seed)
    stats = corpus_stats(docs, vocab, pack_cfg.context, pack_cfg.max_segments)
    sys.stdout.write(stats.to_text())
    if stats.avg_segment_tokens > 0:
        print(f"efficiency_gain={efficiency_gain(pack_cfg.context, stats.avg_segment_tokens)}")
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _load_shards(paths, vocab, context) -> list:
    samples = []
    for path in paths:
        _, part = read_shard(path, vocab, context)
        samples.extend(part)
    return samples


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.set("paths.run_dir", str(run_dir))
    cfg.set("paths.shards", list(args.shards))
    cfg.set("paths.eval_shards", list(args.eval_shards or []))
    cfg.set("paths.vocab", args.vocab)
    cfg.echo(run_dir)
    vocab = load_vocab(args.vocab)
    pack_cfg = cfg.packing_config()
    model_cfg = cfg.model_config(len(vocab))
    if model_cfg.context < pack_cfg.context:
        raise ConfigError(f"model.context {model_cfg.context} is smaller than packing.context {pack_cfg.context}")
    train = _load_shards(args.shards, vocab, pack_cfg.context)
    evals = _load_shards(args.eval_shards, vocab, pack_cfg.context) if args.eval_shards else None
    model = SegmentOrderingModel(model_cfg, seed=args.seed)
    resume = load_checkpoint(args.resume, expected=model_cfg) if args.resume else None
    result = pretrain(
        train, model, cfg.optimizer_config(), pack_cfg, vocab, args.seed,
        eval_samples=evals,
        eval_every=cfg["train"]["eval_every"],
        checkpoint_every=cfg["train"]["checkpoint_every"],
        run_dir=run_dir,
        resume=resume,
        metrics=MetricsLog(run_dir / "metrics.jsonl"),
    )
    last = result.losses[-1][1] if result.losses else float("nan")
    print(f"finished at step {result.step}, final loss {last:.4f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    if args.preset:
        cfg.set("task.preset", args.preset)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for key in ("checkpoint", "train", "validation", "vocab"):
        cfg.set(f"paths.{key}", getattr(args, key))
    cfg.set("paths.run_dir", str(run_dir))
    cfg.echo(run_dir)
    vocab = load_vocab(args.vocab)
    train_docs, val_docs = _read_docs(args.train), _read_docs(args.validation)
    task = cfg.task_config(_infer_classes(train_docs + val_docs))
    encoder = _model_from_checkpoint(load_checkpoint(args.checkpoint))
    result = finetune(train_docs, val_docs, encoder, task, vocab, cfg.packing_config(), args.seed,
                      run_dir=run_dir, metrics=MetricsLog(run_dir / "metrics.jsonl"))
    (run_dir / "report.json").write_text(result.best_report.to_json() + "\n", encoding="utf-8")
    print(f"best epoch {result.best_epoch}: {json.dumps(result.best_report.scalars(), sort_keys=True)}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    vocab = load_vocab(args.vocab)
    ckpt = load_checkpoint(args.checkpoint)
    model = _model_from_checkpoint(ckpt)
    rows = []
    if model.config.task is not None:
        if not args.data:
            raise ConfigError("evaluating a task model needs --data (labeled JSONL)")
        docs = _read_docs(args.data)
        task = TaskConfig(task=model.config.task, num_classes=model.config.num_classes)
        pack_cfg = cfg.packing_config()
        pack_cfg.shuffle = False
        samples = [s for d in docs for s in pack_document(d, vocab, pack_cfg)]
        report, raw = evaluate_finetune(model, samples, task, step=ckpt.step, return_predictions=True)
        for p, y, r in zip(raw.predictions, raw.labels, raw.rankings):
            rows.append({"prediction": list(p) if isinstance(p, tuple) else p,
                         "label": list(y) if isinstance(y, tuple) else y, "ranking": r})
    else:
        if args.shards:
            samples = _load_shards(args.shards, vocab, None)
        elif args.data:
            samples = build_pretrain_samples(_read_docs(args.data), vocab, cfg.packing_config(),
                                             cfg.seed or 0, objective=model.config.objective)
        else:
            raise ConfigError("pass --shards or --data")
        report, raw = evaluate_pretrain(model, samples, step=ckpt.step, return_predictions=True)
        for p, y in zip(raw.so, raw.so_targets):
            rows.append({"so_prediction": p.tolist(), "so_target": y.tolist()})
    report.split = args.split
    payload = report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(payload, encoding="utf-8")
    else:
        sys.stdout.write(payload)
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_inspect(args) -> int:
    vocab = load_vocab(args.vocab)
    header, samples = read_shard(args.shard, vocab)
    if not 0 <= args.index < len(samples):
        raise DataError(f"sample index {args.index} out of range (shard holds {len(samples)})")
    s = samples[args.index]
    masked = np.flatnonzero(s.mlm_labels != UNMASKED).tolist()
    print(f"shard: version={header.version} context={header.context} seed={header.seed} samples={header.count}")
    print(f"sample {s.uid}: K={s.segment_count} tokens={s.length}")
    print(f"y={s.so_targets.tolist()}")
    print(f"masked positions ({len(masked)}): {masked}")
    if s.nsp_label is not None:
        print(f"is_next={s.nsp_label}")
    print("segments as stored:")
    for i, ids in enumerate(s.segments()):
        print(f"  [{i}] y={int(s.so_targets[i])}: {detokenize(ids, vocab)}")
    print("original order:")
    for i, ids in enumerate(s.canonical().segments()):
        print(f"  [{i}] {detokenize(ids, vocab)}")
    return EXIT_OK


# argument parsing ------------------------------------------------------------


def _add_config(p, seed_required=False):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--seed", type=int, required=seed_required, help="global seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segorder", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic JSONL corpus")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("corpus")
    p.add_argument("--vocab", required=True)
    p.add_argument("--context", type=int, default=128)
    p.add_argument("--max-segments", type=int)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pack", help="pack, shuffle and mask a corpus into a shard")
    _add_config(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--objective", default="mlm+so", choices=("mlm+so", "mlm-only", "mlm+nsp"))
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("pretrain", help="pre-train an encoder")
    _add_config(p, seed_required=True)
    p.add_argument("--shards", nargs="+", required=True)
    p.add_argument("--eval-shards", nargs="*")
    p.add_argument("--vocab", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a task head")
    _add_config(p, seed_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--validation", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--preset")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data")
    p.add_argument("--shards", nargs="*")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print one shard sample")
    p.add_argument("shard")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CapacityError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
