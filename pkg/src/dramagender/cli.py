"""Command-line interface.

Subcommands follow the pipeline stages: fetch, parse, prepare, tokenize,
train, evaluate, attribute, tokens, run, and report (crossdress /
attribution). ``run --config`` drives everything from one YAML file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as dataset_mod
from . import model as model_mod
from .bpe import Vocab, train_bpe
from .dracor import DEFAULT_BASE_URL, DracorClient
from .fsutil import write_json
from .tei import SegmentationRules, load_play, parse_play, save_play, segment_scenes

log = logging.getLogger(__name__)


def _add_fetch(sub):
    p = sub.add_parser("fetch", help="sync a corpus into the local cache")
    p.add_argument("--corpus", default="cal")
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--offline", action="store_true")
    p.add_argument("--tei-dir", type=Path)
    p.add_argument("--base-url", default=DEFAULT_BASE_URL)
    p.set_defaults(func=cmd_fetch)


def cmd_fetch(args) -> int:
    client = DracorClient(base_url=args.base_url, offline=args.offline,
                          tei_dir=args.tei_dir)
    if args.offline:
        plays = client.list_plays(args.corpus)
        print(f"offline corpus {args.corpus}: {len(plays)} plays in {args.tei_dir}")
        return 0
    manifest = client.sync_corpus(args.corpus, args.cache)
    print(f"synced {len(manifest.plays)} plays into {args.cache}"
          + (f" ({len(manifest.errors)} failures)" if manifest.errors else ""))
    return 1 if manifest.errors else 0


def _add_parse(sub):
    p = sub.add_parser("parse", help="parse TEI files into canonical play JSON")
    p.add_argument("--tei", required=True, type=Path, help="TEI file or directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scene-rules", type=Path)
    p.set_defaults(func=cmd_parse)


def cmd_parse(args) -> int:
    rules = (SegmentationRules.from_file(args.scene_rules) if args.scene_rules
             else SegmentationRules())
    paths = sorted(args.tei.glob("*.xml")) if args.tei.is_dir() else [args.tei]
    args.out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        play = segment_scenes(parse_play(path.read_text(encoding="utf-8"),
                                         play_name=path.stem), rules)
        save_play(play, args.out / f"{play.play_name}.json")
        print(f"parsed {play.play_name}: {len(play.cast)} cast, {len(play.acts)} acts")
    return 0


def _add_prepare(sub):
    p = sub.add_parser("prepare", help="mask, filter, split and materialize documents")
    p.add_argument("--corpus", required=True, type=Path,
                   help="directory of parsed play JSON (or TEI .xml) files")
    p.add_argument("--granularity", required=True,
                   choices=[g.value for g in dataset_mod.Granularity])
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--min-words", type=int, default=30)
    p.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "TEST", "VAL"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_prepare)


def _load_corpus(corpus_dir: Path):
    json_paths = sorted(corpus_dir.glob("*.json"))
    if json_paths:
        return [load_play(p) for p in json_paths]
    xml_paths = sorted(corpus_dir.glob("*.xml"))
    return [segment_scenes(parse_play(p.read_text(encoding="utf-8"), play_name=p.stem))
            for p in xml_paths]


def cmd_prepare(args) -> int:
    corpus = _load_corpus(args.corpus)
    if not corpus:
        print(f"no plays found in {args.corpus}", file=sys.stderr)
        return 1
    eligible = dataset_mod.eligible_characters(corpus, args.min_words)
    names = dataset_mod.build_name_mask_list(corpus)
    masked, report = dataset_mod.mask_corpus(corpus, names)
    split = dataset_mod.split_characters(sorted(eligible), seed=args.seed,
                                         ratios=tuple(args.ratios))
    docs = dataset_mod.make_documents(masked, args.granularity, eligible=eligible)
    parts = dataset_mod.partition_documents(docs, split)
    args.out.mkdir(parents=True, exist_ok=True)
    for part, part_docs in parts.items():
        dataset_mod.save_documents(part_docs, args.out / f"{args.granularity}.{part}.jsonl")
    write_json(args.out / "mask_report.json", report.to_dict())
    write_json(args.out / "split.json", {
        "seed": split.seed, "ratios": list(split.ratios),
        "sizes": split.partition_sizes(),
        "assignment": {f"{p}/{c}": part for (p, c), part in
                       sorted(split.assignment.items())}})
    write_json(args.out / "corpus_stats.json",
               dataset_mod.corpus_stats(corpus, args.min_words).to_dict())
    sizes = split.partition_sizes()
    print(f"{len(eligible)} characters -> " +
          ", ".join(f"{p}: {sizes[p]}" for p in dataset_mod.PARTITIONS))
    print(f"{len(docs)} {args.granularity} documents; "
          f"{len(report.masked_names)} name forms masked, "
          f"{len(report.single_play_tokens)} single-play types masked")
    return 0


def _add_tokenize(sub):
    p = sub.add_parser("tokenize", help="train the BPE vocabulary")
    p.add_argument("--train", required=True, type=Path, help="training JSONL")
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_tokenize)


def cmd_tokenize(args) -> int:
    docs = dataset_mod.load_documents(args.train)
    vocab = train_bpe([d.text for d in docs], args.vocab_size)
    vocab.save(args.out)
    print(f"trained vocab of {len(vocab)} tokens ({len(vocab.merges)} merges) "
          f"-> {args.out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train the classifier with early stopping")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--granularity", required=True,
                   choices=[g.value for g in dataset_mod.Granularity])
    p.add_argument("--vocab", required=True, type=Path)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=3)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=128)
    p.add_argument("--max-len", type=int, default=512)
    p.set_defaults(func=cmd_train)


def cmd_train(args) -> int:
    vocab = Vocab.load(args.vocab)
    train_docs = dataset_mod.load_documents(args.data / f"{args.granularity}.train.jsonl")
    val_docs = dataset_mod.load_documents(args.data / f"{args.granularity}.validation.jsonl")
    hyper = model_mod.Hyper(vocab_size=len(vocab), embed_dim=args.embed_dim,
                            hidden_dim=args.hidden_dim, max_len=args.max_len,
                            lr=args.lr, batch_size=args.batch_size,
                            max_epochs=args.max_epochs, patience=args.patience,
                            seed=args.seed)
    ckpt = model_mod.train(train_docs, val_docs, vocab, hyper)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model_mod.save_checkpoint(ckpt, args.out)
    print(f"best epoch {ckpt.best_epoch}, val macro-F1 {ckpt.val_macro_f1:.4f} "
          f"-> {args.out}")
    return 0


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="evaluate a checkpoint, optionally aggregated")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--granularity", required=True,
                   choices=[g.value for g in dataset_mod.Granularity])
    p.add_argument("--aggregate", default="none", choices=["none", "majority", "gmean"])
    p.add_argument("--partition", default="test",
                   choices=list(dataset_mod.PARTITIONS))
    p.add_argument("--vocab", type=Path, help="defaults to <data>/../vocab")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)


def _resolve_vocab(args) -> Vocab:
    vocab_dir = args.vocab or (args.data.parent / "vocab")
    if not (Path(vocab_dir) / "vocab.txt").exists():
        raise SystemExit(f"no vocabulary at {vocab_dir}; pass --vocab")
    return Vocab.load(vocab_dir)


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate_granularity

    vocab = _resolve_vocab(args)
    ckpt = model_mod.load_checkpoint(args.model, vocab)
    docs = dataset_mod.load_documents(args.data / f"{args.granularity}.{args.partition}.jsonl")
    evaluate_granularity(ckpt, vocab, docs, args.granularity, [args.aggregate],
                         args.out, ckpt.hyper.max_len)
    metrics = json.loads((args.out / "metrics.json").read_text(encoding="utf-8"))
    if args.aggregate not in metrics["metrics"]:
        print(f"{args.granularity} granularity has one document per character; "
              f"nothing to aggregate with {args.aggregate!r}")
        return 1
    m = metrics["metrics"][args.aggregate]["macro"]
    print(f"{args.granularity}/{args.aggregate} on {args.partition}: "
          f"P {m['precision']:.3f}  R {m['recall']:.3f}  F1 {m['f1']:.3f}")
    return 0


def _add_attribute(sub):
    p = sub.add_parser("attribute", help="integrated-gradients token attribution")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path, help="documents JSONL")
    p.add_argument("--steps", type=int, default=128)
    p.add_argument("--baseline", default="all_pad", choices=["all_pad", "zero_embedding"])
    p.add_argument("--vocab", type=Path, help="defaults to <data dir>/../vocab")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_attribute)


def cmd_attribute(args) -> int:
    from .attribution import IGConfig
    from .pipeline import attribute_documents

    vocab_dir = args.vocab or (args.data.parent.parent / "vocab")
    vocab = Vocab.load(vocab_dir)
    ckpt = model_mod.load_checkpoint(args.model, vocab)
    docs = dataset_mod.load_documents(args.data)
    cfg = IGConfig(steps=args.steps, baseline=args.baseline)
    outputs = attribute_documents(ckpt, vocab, docs, cfg, args.out, args.top,
                                  ckpt.hyper.max_len)
    print(f"attributed {len(docs)} documents -> " +
          ", ".join(str(p.name) for p in outputs))
    return 0


def _add_tokens(sub):
    p = sub.add_parser("tokens", help="print the most polarized tokens from a table")
    p.add_argument("--table", required=True, type=Path)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--out", type=Path, help="also write CSV + figure here")
    p.set_defaults(func=cmd_tokens)


def cmd_tokens(args) -> int:
    import csv as csv_mod

    from .attribution import load_attribution_table, top_polarized
    from .reporting import polarized_tokens_figure

    table = load_attribution_table(args.table)
    masculine, feminine = top_polarized(table, args.top)
    width = max(len(t) for t, _, _ in masculine + feminine) + 2
    print(f"{'most masculine':<{width + 14}}most feminine")
    for (mt, ms, mn), (ft, fs, fn) in zip(masculine, feminine):
        print(f"{mt:<{width}}{ms:+.4f} ({mn:>3})  {ft:<{width}}{fs:+.4f} ({fn:>3})")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        with open(args.out / "top_polarized.csv", "w", newline="",
                  encoding="utf-8") as handle:
            writer = csv_mod.writer(handle)
            writer.writerow(["list", "rank", "token", "mean_score", "n"])
            for name, rows in (("masculine", masculine), ("feminine", feminine)):
                for rank, (tok, mean, n) in enumerate(rows, start=1):
                    writer.writerow([name, rank, tok, f"{mean:.4f}", n])
        polarized_tokens_figure(masculine, feminine, args.out / "top_polarized.png")
    return 0


def _add_run(sub):
    p = sub.add_parser("run", help="run the whole pipeline from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.set_defaults(func=cmd_run)


def cmd_run(args) -> int:
    from .pipeline import PipelineConfig, run_pipeline

    config = PipelineConfig.from_file(args.config)
    manifest = run_pipeline(config)
    for stage, record in manifest["stages"].items():
        print(f"{record['status']:>9}  {stage}")
    print(f"manifest: {config.work_dir / 'manifest.json'}")
    return 0


def _add_report(sub):
    p = sub.add_parser("report", help="render analysis reports")
    rsub = p.add_subparsers(dest="report_command", required=True)

    c = rsub.add_parser("crossdress", help="scene-by-scene cross-dressing analysis")
    c.add_argument("--model", required=True, type=Path, help="scene-level checkpoint")
    c.add_argument("--db", required=True, type=Path, help="cross-dressing CSV database")
    c.add_argument("--data", required=True, type=Path,
                   help="directory with scene.<partition>.jsonl files")
    c.add_argument("--vocab", type=Path, help="defaults to <data>/../vocab")
    c.add_argument("--plays", type=Path, help="parsed plays dir for strict scene checks")
    c.add_argument("--out", required=True, type=Path)
    c.set_defaults(func=cmd_report_crossdress)

    a = rsub.add_parser("attribution", help="render one document's attribution as HTML")
    a.add_argument("--doc", required=True, help="document id")
    a.add_argument("--dump", required=True, type=Path, help="attributions.jsonl")
    a.add_argument("--data", required=True, type=Path, help="documents JSONL")
    a.add_argument("--out", required=True, type=Path, help="output HTML file")
    a.set_defaults(func=cmd_report_attribution)


def cmd_report_crossdress(args) -> int:
    from .reporting import (crossdress_confidence_figure, crossdress_report,
                            crossdress_scene_figure, load_crossdress_db,
                            save_crossdress_csv)

    vocab = Vocab.load(args.vocab or (args.data.parent / "vocab"))
    ckpt = model_mod.load_checkpoint(args.model, vocab)
    docs = []
    for part in dataset_mod.PARTITIONS:
        path = args.data / f"scene.{part}.jsonl"
        if path.exists():
            docs.extend(dataset_mod.load_documents(path))
    records = load_crossdress_db(args.db)
    plays = None
    if args.plays:
        plays = [load_play(p) for p in sorted(args.plays.glob("*.json"))]
    report = crossdress_report(ckpt.params, vocab, docs, records,
                               max_len=ckpt.hyper.max_len, plays=plays)
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "crossdress.json", report.to_dict())
    save_crossdress_csv(report, args.out)
    crossdress_scene_figure(report, args.out / "crossdress_scenes.png")
    crossdress_confidence_figure(report, args.out / "crossdress_confidence.png")
    print(f"cross-dresser mean confidence {report.cohort_means['crossdresser']:.3f} "
          f"vs other female {report.cohort_means['other_female']:.3f}")
    print(f"report written to {args.out}")
    return 0


def cmd_report_attribution(args) -> int:
    from .attribution import load_attribution_dump
    from .reporting import render_attribution_html

    dump = load_attribution_dump(args.dump)
    if args.doc not in dump:
        raise SystemExit(f"document {args.doc!r} not found in {args.dump}")
    docs = {d.doc_id: d for d in dataset_mod.load_documents(args.data)}
    if args.doc not in docs:
        raise SystemExit(f"document {args.doc!r} not found in {args.data}")
    html_text = render_attribution_html(docs[args.doc], dump[args.doc])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(html_text, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dramagender",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_fetch(sub)
    _add_parse(sub)
    _add_prepare(sub)
    _add_tokenize(sub)
    _add_train(sub)
    _add_evaluate(sub)
    _add_attribute(sub)
    _add_tokens(sub)
    _add_run(sub)
    _add_report(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
