"""Command line entry point: ``clipart <subcommand> [--long-flags]``.

Every subcommand writes a ``<output>.manifest.json`` next to its main output.
``clipart --from-manifest FILE`` replays the recorded arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .captioner import DEFAULT_DROP_PROB, DEFAULT_VARIANTS, canonical_caption, \
    generate_variants, record_seed, write_corpus
from .dataset import (AnnotatedRecord, AttributeTaxonomy, ParentClass, SynthConfig,
                      attach_features, parse_annotations, parse_labels,
                      serialize_annotations, serialize_labels, split_holdout, synth_dataset)
from .embeddings import EmbeddingMatrix, cosine_similarity, read_emb, write_emb
from .retrieval_eval import (f2_report, knn_transfer, label_matrix, rank_first_relevant,
                             rank_true_pairs, retrieval_metrics, tune_threshold,
                             write_ranks_csv, write_report)
from .trainer import (TrainConfig, checkpoint_from_params, embed_records, embed_texts,
                      head_from_checkpoint, load_checkpoint, params_from_checkpoint,
                      save_checkpoint, train_classifier, train_contrastive, write_history)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers -----------------------------------------------------------------------


def _read_taxonomy(path: str) -> AttributeTaxonomy:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_labels(fh)


def _read_records(path: str, taxonomy: AttributeTaxonomy) -> list[AnnotatedRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_annotations(fh, taxonomy)


def _with_features(records: list[AnnotatedRecord], features: str) -> list[AnnotatedRecord]:
    m = read_emb(features)
    return attach_features(records, m.ids, m.rows.astype(np.float64))


def _excluded(values: Sequence[str] | None) -> tuple[str, ...]:
    out = []
    for v in values or ():
        for part in v.split(","):
            part = part.strip()
            if part:
                try:
                    out.append(ParentClass(part).value)
                except ValueError:
                    choices = ", ".join(p.value for p in ParentClass)
                    raise UsageError(f"--exclude: unknown category {part!r} "
                                     f"(choose from {choices})") from None
    return tuple(sorted(set(out)))


def _train_config(args, **overrides) -> TrainConfig:
    fields = dict(epochs=args.epochs, freeze_epochs=args.freeze_epochs,
                  batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                  drop_prob=args.drop_prob, n_variants=args.variants,
                  exclude_categories=_excluded(args.exclude), d_emb=args.d_emb,
                  hidden=args.hidden, vocab_buckets=args.vocab_buckets)
    fields.update(overrides)
    return TrainConfig(**fields)


def _write_json(path: str | Path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, argv: Sequence[str], config: dict, inputs: dict, outputs: list[str],
              primary: str | Path) -> None:
    # deliberately free of timestamps and host details
    _write_json(f"{primary}.manifest.json", {
        "tool": "clipart",
        "version": __version__,
        "subcommand": args.command,
        "argv": list(argv),
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    })


def _add_train_flags(p: argparse.ArgumentParser, captions: bool = True) -> None:
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=_DEFAULTS.epochs)
    p.add_argument("--batch-size", type=int, default=_DEFAULTS.batch_size)
    if captions:
        p.add_argument("--freeze-epochs", type=int, default=_DEFAULTS.freeze_epochs)
        p.add_argument("--lr", type=float, default=_DEFAULTS.lr)
        p.add_argument("--drop-prob", type=float, default=_DEFAULTS.drop_prob)
        p.add_argument("--variants", type=int, default=_DEFAULTS.n_variants)
        p.add_argument("--exclude", action="append", metavar="CATEGORY",
                       help="parent class to leave out of captions (repeatable)")
        p.add_argument("--d-emb", type=int, default=_DEFAULTS.d_emb)
        p.add_argument("--hidden", type=int, default=None,
                       help="base layer width (default: same as --d-emb)")
        p.add_argument("--vocab-buckets", type=int, default=_DEFAULTS.vocab_buckets)
    else:
        p.add_argument("--lr", type=float, default=_DEFAULTS.head_lr)


# -- subcommands ---------------------------------------------------------------------


def cmd_captions(args, argv) -> None:
    taxonomy = _read_taxonomy(args.labels)
    records = _read_records(args.annotations, taxonomy)
    exclude = _excluded(args.exclude)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for i, rec in enumerate(records):
            write_corpus(generate_variants(rec, taxonomy, args.variants, args.drop_prob,
                                           exclude, record_seed(args.seed, i)), fh)
    _manifest(args, argv, {"variants": args.variants, "drop_prob": args.drop_prob,
                           "exclude": list(exclude)},
              {"annotations": args.annotations, "labels": args.labels}, [args.out], args.out)


def cmd_synth(args, argv) -> None:
    cfg = SynthConfig(args.n_items, args.n_clusters, args.d_img, args.attrs_per_parent,
                      args.noise_std, args.seed, args.centroid_scale)
    taxonomy, records = synth_dataset(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", encoding="utf-8", newline="") as fh:
        serialize_labels(taxonomy, fh)
    with open(out / "annotations.csv", "w", encoding="utf-8", newline="") as fh:
        serialize_annotations(records, fh)
    write_emb(EmbeddingMatrix([r.item_id for r in records],
                              np.stack([r.features for r in records])), out / "features.emb")
    outputs = ["labels.csv", "annotations.csv", "features.emb", "features.emb.ids.txt"]
    if args.holdout_fraction > 0:
        train, hold = split_holdout(records, args.holdout_fraction, args.seed)
        for name, part in (("train.csv", train), ("holdout.csv", hold)):
            with open(out / name, "w", encoding="utf-8", newline="") as fh:
                serialize_annotations(part, fh)
            outputs.append(name)
    config = {"n_items": cfg.n_items, "n_clusters": cfg.n_clusters, "d_img": cfg.d_img,
              "attrs_per_parent": cfg.attrs_per_parent, "noise_std": cfg.noise_std,
              "centroid_scale": cfg.centroid_scale, "holdout_fraction": args.holdout_fraction}
    _manifest(args, argv, config, {}, [str(out / o) for o in outputs], out / "synth")


def cmd_train_contrastive(args, argv) -> None:
    config = _train_config(args)
    taxonomy = _read_taxonomy(args.labels)
    records = _with_features(_read_records(args.annotations, taxonomy), args.features)
    params, history = train_contrastive(records, taxonomy, config)
    save_checkpoint(args.out, checkpoint_from_params(params, config, config.epochs))
    history_path = args.history or f"{args.out}.history.jsonl"
    with open(history_path, "w", encoding="utf-8", newline="\n") as fh:
        write_history(history, fh)
    outputs = [args.out, history_path]
    if args.figure:
        from .plotting import plot_loss_history
        plot_loss_history(history, args.figure, config.freeze_epochs)
        outputs.append(args.figure)
    _manifest(args, argv, config.to_dict(),
              {"annotations": args.annotations, "labels": args.labels,
               "features": args.features}, outputs, args.out)


def cmd_embed(args, argv) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    params = params_from_checkpoint(ckpt)
    inputs = {"checkpoint": args.checkpoint}
    if args.side == "image":
        if not args.features:
            raise UsageError("embed --side image needs --features")
        feats = read_emb(args.features)
        inputs["features"] = args.features
        if args.annotations:
            if not args.labels:
                raise UsageError("--annotations needs --labels")
            taxonomy = _read_taxonomy(args.labels)
            records = _read_records(args.annotations, taxonomy)
            inputs.update(annotations=args.annotations, labels=args.labels)
            feats = feats.subset([r.item_id for r in records])
        if feats.dim != params.d_img:
            raise ValueError(f"features have dim {feats.dim}, checkpoint expects {params.d_img}")
        recs = [AnnotatedRecord(i, frozenset(), row) for i, row in zip(feats.ids, feats.rows)]
        ids, rows = feats.ids, embed_records(params, recs)
    else:
        if not (args.annotations and args.labels):
            raise UsageError("embed --side text needs --annotations and --labels")
        taxonomy = _read_taxonomy(args.labels)
        records = _read_records(args.annotations, taxonomy)
        inputs.update(annotations=args.annotations, labels=args.labels)
        exclude = _excluded(args.exclude)
        texts = [canonical_caption(r, taxonomy, exclude) for r in records]
        ids, rows = [r.item_id for r in records], embed_texts(params, texts)
    write_emb(EmbeddingMatrix(list(ids), rows), args.out)
    _manifest(args, argv, {"side": args.side, "exclude": list(_excluded(args.exclude))},
              inputs, [args.out, f"{args.out}.ids.txt"], args.out)


def _aligned(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> EmbeddingMatrix:
    if list(images.ids) == list(texts.ids):
        return texts
    if set(images.ids) != set(texts.ids) or len(images) != len(texts):
        raise ValueError("image and text embeddings must cover the same item ids")
    return texts.subset(images.ids)


def cmd_eval_retrieval(args, argv) -> None:
    images, texts = read_emb(args.images), read_emb(args.texts)
    texts = _aligned(images, texts)
    sim = cosine_similarity(images, texts)
    i2t = retrieval_metrics(rank_true_pairs(sim))
    t2i = retrieval_metrics(rank_true_pairs(sim.T))
    # identical caption text gives bit-identical embeddings; count any of them as a hit
    groups: dict[bytes, int] = {}
    g = np.array([groups.setdefault(row.tobytes(), len(groups)) for row in texts.rows])
    text_level = retrieval_metrics(rank_first_relevant(sim, g[:, None] == g[None, :]))
    with open(args.out, "w", encoding="utf-8") as fh:
        write_report(i2t, fh, direction="image_to_text", n_candidates=len(images),
                     text_to_image=t2i.to_dict(),
                     image_to_text_any_identical_caption=text_level.to_dict())
    outputs = [args.out]
    if args.ranks_csv:
        with open(args.ranks_csv, "w", encoding="utf-8", newline="") as fh:
            write_ranks_csv(images.ids, i2t.per_query_ranks, fh)
        outputs.append(args.ranks_csv)
    if args.figure:
        from .plotting import plot_rank_histogram
        plot_rank_histogram(i2t.per_query_ranks, args.figure)
        outputs.append(args.figure)
    _manifest(args, argv, {}, {"images": args.images, "texts": args.texts}, outputs, args.out)


def _label_sets(ids: Sequence[str], records: list[AnnotatedRecord]) -> list[frozenset[int]]:
    by_id = {r.item_id: r.attributes for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"no annotations for item {missing[0]!r}")
    return [by_id[i] for i in ids]


def cmd_eval_knn(args, argv) -> None:
    taxonomy = _read_taxonomy(args.labels)
    records = _read_records(args.annotations, taxonomy)
    train, query = read_emb(args.train), read_emb(args.query)
    preds = knn_transfer(train, _label_sets(train.ids, records), query, args.k)
    report = f2_report(preds, _label_sets(query.ids, records))
    with open(args.out, "w", encoding="utf-8") as fh:
        write_report(report, fh, k=args.k, n_train=len(train), n_query=len(query))
    _manifest(args, argv, {"k": args.k},
              {"train": args.train, "query": args.query, "annotations": args.annotations,
               "labels": args.labels}, [args.out], args.out)


def cmd_train_classifier(args, argv) -> None:
    taxonomy = _read_taxonomy(args.labels)
    records = _read_records(args.annotations, taxonomy)
    emb = read_emb(args.embeddings)
    config = TrainConfig(epochs=args.epochs, freeze_epochs=0, batch_size=args.batch_size,
                         seed=args.seed, head_lr=args.lr, d_emb=emb.dim)
    head, history = train_classifier(emb.rows, _label_sets(emb.ids, records), taxonomy, config)
    save_checkpoint(args.out, checkpoint_from_params(None, config, config.epochs, head))
    history_path = args.history or f"{args.out}.history.jsonl"
    with open(history_path, "w", encoding="utf-8", newline="\n") as fh:
        write_history(history, fh)
    _manifest(args, argv, config.to_dict(),
              {"embeddings": args.embeddings, "annotations": args.annotations,
               "labels": args.labels}, [args.out, history_path], args.out)


def cmd_eval_f2(args, argv) -> None:
    taxonomy = _read_taxonomy(args.labels)
    records = _read_records(args.annotations, taxonomy)
    emb = read_emb(args.embeddings)
    head = head_from_checkpoint(load_checkpoint(args.checkpoint))
    if head.weight.shape[0] != emb.dim:
        raise ValueError(f"embeddings have dim {emb.dim}, head expects {head.weight.shape[0]}")
    probs = head.predict_proba(emb.rows.astype(np.float64))
    truth = label_matrix(_label_sets(emb.ids, records), head.attribute_ids)
    if args.threshold is None:
        threshold, report = tune_threshold(probs, truth)
        source = "tuned"
    else:
        if not 0.0 < args.threshold < 1.0:
            raise UsageError("--threshold must be in (0, 1)")
        threshold, source = args.threshold, "fixed"
        cols = np.asarray(head.attribute_ids)
        preds = [frozenset(int(a) for a in cols[row >= threshold]) for row in probs]
        report = f2_report(preds, _label_sets(emb.ids, records), threshold)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_report(report, fh, threshold_source=source)
    outputs = [args.out]
    if args.figure:
        from .plotting import plot_threshold_sweep
        plot_threshold_sweep(probs, truth, args.figure, threshold)
        outputs.append(args.figure)
    _manifest(args, argv, {"threshold": args.threshold},
              {"checkpoint": args.checkpoint, "embeddings": args.embeddings,
               "annotations": args.annotations, "labels": args.labels}, outputs, args.out)


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clipart",
                     description="Caption, train and evaluate a desk-scale image/text dual encoder.")
    parser.add_argument("--version", action="version", version=f"clipart {__version__}")
    parser.add_argument("--from-manifest", metavar="FILE",
                        help="re-run the command recorded in a manifest")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def add(name: str, func: Callable, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS/OpenMP worker threads")
        p.add_argument("--verbose", action="store_true", help="debug logging")
        return p

    p = add("captions", cmd_captions, "write the caption-variant corpus as JSON lines")
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", type=int, default=DEFAULT_VARIANTS)
    p.add_argument("--drop-prob", type=float, default=DEFAULT_DROP_PROB)
    p.add_argument("--exclude", action="append", metavar="CATEGORY")
    p.add_argument("--seed", type=int, default=0)

    p = add("synth", cmd_synth, "generate a synthetic clustered dataset")
    d = SynthConfig()
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-items", type=int, default=d.n_items)
    p.add_argument("--n-clusters", type=int, default=d.n_clusters)
    p.add_argument("--d-img", type=int, default=d.d_img)
    p.add_argument("--attrs-per-parent", type=int, default=d.attrs_per_parent)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--centroid-scale", type=float, default=d.centroid_scale)
    p.add_argument("--holdout-fraction", type=float, default=0.25,
                   help="also write train.csv/holdout.csv (0 disables)")
    p.add_argument("--seed", type=int, default=d.seed)

    p = add("train-contrastive", cmd_train_contrastive, "contrastive pre-training")
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--features", required=True, help="image feature .emb file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="JSON-lines loss history (default <out>.history.jsonl)")
    p.add_argument("--figure", help="write the loss curve to this image file")
    _add_train_flags(p)

    p = add("embed", cmd_embed, "encode images or canonical captions with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--side", choices=("image", "text"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features")
    p.add_argument("--annotations")
    p.add_argument("--labels")
    p.add_argument("--exclude", action="append", metavar="CATEGORY")

    p = add("eval-retrieval", cmd_eval_retrieval, "image-to-text retrieval metrics")
    p.add_argument("--images", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranks-csv")
    p.add_argument("--figure", help="write a rank histogram to this image file")

    p = add("eval-knn", cmd_eval_knn, "zero-shot nearest-neighbour label transfer F2")
    p.add_argument("--train", required=True, help="training embeddings")
    p.add_argument("--query", required=True, help="query embeddings")
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("train-classifier", cmd_train_classifier, "fit a multi-label head on embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    _add_train_flags(p, captions=False)

    p = add("eval-f2", cmd_eval_f2, "per-sample F2 of a classifier head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float,
                   help="fixed threshold (default: tune over 0.05..0.95)")
    p.add_argument("--figure", help="write the threshold sweep to this image file")
    return parser


def _replay_argv(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    argv = data.get("argv")
    if not isinstance(argv, list) or not all(isinstance(a, str) for a in argv):
        raise ValueError(f"{path}: manifest has no argv list")
    return argv


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.from_manifest:
            if args.command:
                raise UsageError("--from-manifest takes no subcommand")
            try:
                return main(_replay_argv(args.from_manifest))
            except (OSError, ValueError) as exc:
                print(f"clipart: error: {exc}", file=sys.stderr)
                return EXIT_DATA
        if not args.command:
            parser.print_usage(sys.stderr)
            raise UsageError("clipart: error: a subcommand is required")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            args.func(args, argv)
    except UsageError as exc:
        print(f"clipart {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"clipart {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
