"""End-to-end pipeline driven by a single config file.

Stages run in order: fetch, parse, prepare (per granularity), tokenize,
train (per granularity), evaluate (per granularity and aggregation) and
attribute. Every stage records a fingerprint of its inputs and settings in
the run manifest; re-running with an identical config and warm cache skips
the stage and reports it as cached. Stage outputs carry no timestamps, so
identical runs produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import attribution as attrib_mod
from . import dataset as dataset_mod
from . import evaluation as eval_mod
from . import model as model_mod
from . import reporting
from .bpe import Vocab, train_bpe
from .dataset import Granularity, PARTITIONS
from .dracor import DracorClient
from .fsutil import read_json, sha256_file, write_json
from .tei import SegmentationRules, load_play, parse_play, save_play, segment_scenes

log = logging.getLogger(__name__)

GRANULARITIES = tuple(g.value for g in Granularity)
AGGREGATIONS = ("none", "majority", "gmean")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    work_dir: Path
    seed: int = 42
    corpus_source: str = "api"  # "api" or "dir"
    corpus_id: str = "cal"
    tei_dir: Path | None = None
    cache_dir: Path | None = None
    api_base_url: str = "https://dracor.org/api/v1"
    granularities: tuple[str, ...] = GRANULARITIES
    min_words: int = 30
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    scene_rules: tuple[str, ...] | None = None
    vocab_size: int = 8000
    max_len: int = 512
    model: dict = field(default_factory=dict)  # Hyper overrides
    ig_steps: int = 128
    ig_baseline: str = "all_pad"
    attribution_granularity: str = "character"
    attribution_partition: str = "validation"
    top_k_tokens: int = 20
    aggregations: tuple[str, ...] = AGGREGATIONS
    eval_partition: str = "test"
    crossdress_db: Path | None = None

    @classmethod
    def from_file(cls, path: Path | str) -> "PipelineConfig":
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path}: expected a mapping")
        return cls.from_dict(raw, base=Path(path).parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "PipelineConfig":
        def need(section: dict, key: str, where: str):
            if key not in section:
                raise ConfigError(f"config missing field: {where}{key}")
            return section[key]

        def as_path(value):
            p = Path(value)
            return p if p.is_absolute() else base / p

        corpus = need(raw, "corpus", "")
        if not isinstance(corpus, dict):
            raise ConfigError("config field corpus must be a mapping")
        source = need(corpus, "source", "corpus.")
        if source not in ("api", "dir"):
            raise ConfigError(f"config field corpus.source must be 'api' or 'dir', got {source!r}")
        tokenizer = need(raw, "tokenizer", "")
        if not isinstance(tokenizer, dict):
            raise ConfigError("config field tokenizer must be a mapping")
        vocab_size = need(tokenizer, "vocab_size", "tokenizer.")
        attribution = raw.get("attribution") or {}
        split = raw.get("split") or {}
        cfg = cls(
            work_dir=as_path(need(raw, "work_dir", "")),
            seed=int(raw.get("seed", 42)),
            corpus_source=source,
            corpus_id=corpus.get("corpus_id", "cal"),
            tei_dir=as_path(corpus["tei_dir"]) if corpus.get("tei_dir") else None,
            cache_dir=as_path(corpus["cache_dir"]) if corpus.get("cache_dir") else None,
            api_base_url=corpus.get("api_base_url", "https://dracor.org/api/v1"),
            granularities=tuple(raw.get("granularities", GRANULARITIES)),
            min_words=int(raw.get("min_words", 30)),
            split_ratios=tuple(split.get("ratios", (0.8, 0.1, 0.1))),
            scene_rules=tuple(raw["scene_rules"]) if raw.get("scene_rules") else None,
            vocab_size=int(vocab_size),
            max_len=int(tokenizer.get("max_len", 512)),
            model=dict(raw.get("model") or {}),
            ig_steps=int(attribution.get("steps", 128)),
            ig_baseline=attribution.get("baseline", "all_pad"),
            attribution_granularity=attribution.get("granularity", "character"),
            attribution_partition=attribution.get("partition", "validation"),
            top_k_tokens=int(attribution.get("top_k", 20)),
            aggregations=tuple(raw.get("aggregations", AGGREGATIONS)),
            eval_partition=raw.get("eval_partition", "test"),
            crossdress_db=as_path(raw["crossdress_db"]) if raw.get("crossdress_db") else None,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.corpus_source == "dir" and self.tei_dir is None:
            raise ConfigError("config missing field: corpus.tei_dir (required for source 'dir')")
        if self.tei_dir is not None and not Path(self.tei_dir).is_dir():
            raise ConfigError(f"config field corpus.tei_dir: no such directory "
                              f"{self.tei_dir}")
        if self.corpus_source == "api" and self.cache_dir is None:
            raise ConfigError("config missing field: corpus.cache_dir (required for source 'api')")
        for g in self.granularities:
            if g not in GRANULARITIES:
                raise ConfigError(f"config field granularities: unknown granularity {g!r}")
        for a in self.aggregations:
            if a not in AGGREGATIONS:
                raise ConfigError(f"config field aggregations: unknown aggregation {a!r}")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("config field split.ratios must sum to 1.0")
        if self.eval_partition not in PARTITIONS:
            raise ConfigError(f"config field eval_partition: unknown partition "
                              f"{self.eval_partition!r}")
        if self.attribution_partition not in PARTITIONS:
            raise ConfigError(f"config field attribution.partition: unknown partition "
                              f"{self.attribution_partition!r}")


def _fingerprint(*parts) -> str:
    payload = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class _Manifest:
    def __init__(self, path: Path):
        self.path = path
        self.data = read_json(path) if path.exists() else {"stages": {}}

    def is_cached(self, stage: str, fingerprint: str, work_dir: Path) -> bool:
        rec = self.data["stages"].get(stage)
        if not rec or rec.get("fingerprint") != fingerprint:
            return False
        for rel, digest in rec.get("outputs", {}).items():
            path = work_dir / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def record(self, stage: str, fingerprint: str, outputs: list[Path], work_dir: Path,
               status: str) -> None:
        self.data["stages"][stage] = {
            "fingerprint": fingerprint,
            "status": status,
            "outputs": {str(p.relative_to(work_dir)): sha256_file(p) for p in sorted(outputs)},
        }

    def save(self, seed: int) -> None:
        self.data["seed"] = seed
        self.data["updated_at"] = datetime.now(timezone.utc).isoformat()
        write_json(self.path, self.data)


def _stage(manifest: _Manifest, name: str, fingerprint: str, work_dir: Path, run):
    """Run one stage unless its fingerprint and outputs are already current."""
    if manifest.is_cached(name, fingerprint, work_dir):
        log.info("stage %s: cached", name)
        manifest.data["stages"][name]["status"] = "cached"
        return
    log.info("stage %s: running", name)
    try:
        outputs = run()
    except Exception as exc:  # keep partial artifacts, name the stage
        raise StageError(name, exc) from exc
    manifest.record(name, fingerprint, outputs, work_dir, status="computed")


def run_pipeline(config: PipelineConfig, transport=None) -> dict:
    """Execute the full pipeline; returns the run manifest as a dict."""
    config.validate()
    work = Path(config.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(work / "manifest.json")
    rules = (SegmentationRules(patterns=config.scene_rules) if config.scene_rules
             else SegmentationRules())

    # --- fetch -----------------------------------------------------------
    if config.corpus_source == "dir":
        tei_paths = sorted(Path(config.tei_dir).glob("*.xml"), key=lambda p: p.stem)
    else:
        client = DracorClient(base_url=config.api_base_url, transport=transport)
        corpus_manifest = client.sync_corpus(config.corpus_id, config.cache_dir)
        corpus_dir = Path(config.cache_dir) / config.corpus_id
        tei_paths = sorted((corpus_dir / f"{p.play_name}.xml" for p in corpus_manifest.plays),
                           key=lambda p: p.stem)
    tei_digests = {p.stem: sha256_file(p) for p in tei_paths}
    fetch_fp = _fingerprint("fetch", config.corpus_source, config.corpus_id, tei_digests)
    _stage(manifest, "fetch", fetch_fp, work, lambda: [])

    # --- parse -----------------------------------------------------------
    plays_dir = work / "plays"
    parse_fp = _fingerprint("parse", tei_digests, rules.patterns)

    def parse_stage():
        plays_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        for path in tei_paths:
            play = segment_scenes(parse_play(path.read_text(encoding="utf-8"),
                                             play_name=path.stem), rules)
            out = plays_dir / f"{play.play_name}.json"
            save_play(play, out)
            outputs.append(out)
        return outputs

    _stage(manifest, "parse", parse_fp, work, parse_stage)
    play_paths = sorted(plays_dir.glob("*.json"))

    # --- prepare -----------------------------------------------------------
    data_dir = work / "data"
    prepare_fp = _fingerprint("prepare", parse_fp, config.seed, config.min_words,
                              config.split_ratios, sorted(config.granularities))

    def prepare_stage():
        corpus = [load_play(p) for p in play_paths]
        eligible = dataset_mod.eligible_characters(corpus, config.min_words)
        names = dataset_mod.build_name_mask_list(corpus)
        masked, mask_report = dataset_mod.mask_corpus(corpus, names)
        split = dataset_mod.split_characters(sorted(eligible), seed=config.seed,
                                             ratios=config.split_ratios)
        data_dir.mkdir(parents=True, exist_ok=True)
        outputs = []
        for granularity in config.granularities:
            docs = dataset_mod.make_documents(masked, granularity, eligible=eligible)
            parts = dataset_mod.partition_documents(docs, split)
            for part, part_docs in parts.items():
                out = data_dir / f"{granularity}.{part}.jsonl"
                dataset_mod.save_documents(part_docs, out)
                outputs.append(out)
        mask_path = data_dir / "mask_report.json"
        write_json(mask_path, mask_report.to_dict())
        split_path = data_dir / "split.json"
        write_json(split_path, {
            "seed": split.seed, "ratios": list(split.ratios),
            "sizes": split.partition_sizes(),
            "assignment": {f"{p}/{c}": part for (p, c), part in
                           sorted(split.assignment.items())}})
        stats_path = data_dir / "corpus_stats.json"
        write_json(stats_path, dataset_mod.corpus_stats(corpus, config.min_words).to_dict())
        return outputs + [mask_path, split_path, stats_path]

    _stage(manifest, "prepare", prepare_fp, work, prepare_stage)

    # --- tokenize -----------------------------------------------------------
    vocab_dir = work / "vocab"
    tokenize_source = ("character" if "character" in config.granularities
                       else config.granularities[0])
    tokenize_fp = _fingerprint("tokenize", prepare_fp, config.vocab_size, tokenize_source)

    def tokenize_stage():
        train_docs = dataset_mod.load_documents(data_dir / f"{tokenize_source}.train.jsonl")
        vocab = train_bpe([d.text for d in train_docs], config.vocab_size)
        vocab.save(vocab_dir)
        return [vocab_dir / "vocab.txt", vocab_dir / "merges.txt"]

    _stage(manifest, "tokenize", tokenize_fp, work, tokenize_stage)
    vocab = Vocab.load(vocab_dir)

    # --- train ---------------------------------------------------------------
    models_dir = work / "models"
    hyper_base = dict(vocab_size=len(vocab), max_len=config.max_len, seed=config.seed)
    hyper_base.update(config.model)
    for granularity in config.granularities:
        fp = _fingerprint("train", granularity, tokenize_fp, sorted(hyper_base.items()))

        def train_stage(granularity=granularity):
            train_docs = dataset_mod.load_documents(data_dir / f"{granularity}.train.jsonl")
            val_docs = dataset_mod.load_documents(data_dir / f"{granularity}.validation.jsonl")
            hyper = model_mod.Hyper(**hyper_base)
            ckpt = model_mod.train(train_docs, val_docs, vocab, hyper)
            models_dir.mkdir(parents=True, exist_ok=True)
            out = models_dir / f"{granularity}.ckpt"
            model_mod.save_checkpoint(ckpt, out)
            return [out]

        _stage(manifest, f"train:{granularity}", fp, work, train_stage)

    # --- evaluate ---------------------------------------------------------------
    eval_dir = work / "eval"
    for granularity in config.granularities:
        fp = _fingerprint("evaluate", granularity, tokenize_fp, sorted(hyper_base.items()),
                          config.aggregations, config.eval_partition)

        def evaluate_stage(granularity=granularity):
            ckpt = model_mod.load_checkpoint(models_dir / f"{granularity}.ckpt", vocab)
            docs = dataset_mod.load_documents(
                data_dir / f"{granularity}.{config.eval_partition}.jsonl")
            out_dir = eval_dir / granularity
            out_dir.mkdir(parents=True, exist_ok=True)
            return evaluate_granularity(ckpt, vocab, docs, granularity,
                                        config.aggregations, out_dir, config.max_len)

        _stage(manifest, f"evaluate:{granularity}", fp, work, evaluate_stage)

    # --- attribute ------------------------------------------------------------------
    attrib_dir = work / "attrib"
    ag = config.attribution_granularity
    fp = _fingerprint("attribute", ag, tokenize_fp, sorted(hyper_base.items()),
                      config.ig_steps, config.ig_baseline, config.attribution_partition,
                      config.top_k_tokens)

    def attribute_stage():
        ckpt = model_mod.load_checkpoint(models_dir / f"{ag}.ckpt", vocab)
        docs = dataset_mod.load_documents(
            data_dir / f"{ag}.{config.attribution_partition}.jsonl")
        cfg = attrib_mod.IGConfig(steps=config.ig_steps, baseline=config.ig_baseline)
        out_dir = attrib_dir / ag
        out_dir.mkdir(parents=True, exist_ok=True)
        return attribute_documents(ckpt, vocab, docs, cfg, out_dir,
                                   config.top_k_tokens, config.max_len)

    if ag in config.granularities:
        _stage(manifest, "attribute", fp, work, attribute_stage)
    else:
        log.warning("attribution granularity %r is not among the trained "
                    "granularities %s; attribute stage skipped", ag,
                    list(config.granularities))

    manifest.save(config.seed)
    return manifest.data


# --- stage helpers shared with the CLI ------------------------------------------

def evaluate_granularity(ckpt, vocab: Vocab, docs, granularity: str, aggregations,
                         out_dir: Path, max_len: int = 512) -> list[Path]:
    """Predict documents, aggregate per character, write metrics artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoded = model_mod.encode_documents(docs, vocab, max_len)
    preds = model_mod.predict(ckpt.params, [seq for seq, _ in encoded])
    outputs = []

    by_char: dict[tuple[str, str], list[int]] = {}
    for i, doc in enumerate(docs):
        by_char.setdefault((doc.play_name, doc.char_id), []).append(i)
    char_gold = {key: docs[idxs[0]].gold_gender for key, idxs in by_char.items()}
    char_words = {key: sum(docs[i].word_count for i in idxs)
                  for key, idxs in by_char.items()}

    all_metrics = {}
    for aggregation in aggregations:
        if aggregation == "none":
            pairs = [(doc.gold_gender, pred.label) for doc, pred in zip(docs, preds)]
            metrics = eval_mod.evaluate(pairs)
            decisions = [(eval_mod.single_decision(pred, char_key=(doc.play_name,
                                                                   doc.char_id)),
                          doc.gold_gender) for doc, pred in zip(docs, preds)]
            quartile_items = [(doc.word_count, doc.gold_gender, pred.label)
                              for doc, pred in zip(docs, preds)]
        else:
            if granularity == "character":
                continue  # nothing to aggregate: one document per character
            agg = (eval_mod.majority_vote if aggregation == "majority"
                   else eval_mod.geometric_mean)
            decisions = []
            for key, idxs in sorted(by_char.items()):
                decisions.append((agg([preds[i] for i in idxs], char_key=key),
                                  char_gold[key]))
            pairs = [(gold, decision.label) for decision, gold in decisions]
            metrics = eval_mod.evaluate(pairs)
            quartile_items = [(char_words[decision.char_key], gold, decision.label)
                              for decision, gold in decisions]
        all_metrics[aggregation] = metrics.to_dict()

        if len(quartile_items) >= 4:
            table = eval_mod.quartile_f1(quartile_items)
            qpath = out_dir / f"quartiles_{aggregation}.csv"
            with open(qpath, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(["quartile", "min_words", "max_words", "n", "macro_f1"])
                for q in range(4):
                    writer.writerow([q + 1, table.boundaries[q][0], table.boundaries[q][1],
                                     table.sizes[q], f"{table.f1_per_quartile[q]:.4f}"])
            outputs.append(qpath)
            fig_path = out_dir / f"quartiles_{aggregation}.png"
            reporting.quartile_figure(table, f"{granularity}/{aggregation}", fig_path)
            outputs.append(fig_path)

        top_correct, top_incorrect = eval_mod.confidence_ranking(decisions)
        rpath = out_dir / f"confidence_ranking_{aggregation}.csv"
        with open(rpath, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["bucket", "play_name", "char_id", "gold", "predicted",
                             "confidence"])
            for bucket, entries in (("correct", top_correct), ("incorrect", top_incorrect)):
                for decision, gold in entries:
                    play_name, char_id = decision.char_key or ("", "")
                    writer.writerow([bucket, play_name, char_id, gold.value,
                                     decision.label.value, f"{decision.confidence:.4f}"])
        outputs.append(rpath)

    metrics_json = out_dir / "metrics.json"
    write_json(metrics_json, {"granularity": granularity, "metrics": all_metrics,
                              "baseline": eval_mod.most_frequent_baseline(
                                  [d.gold_gender for d in docs]).to_dict()})
    outputs.append(metrics_json)

    metrics_csv = out_dir / "metrics.csv"
    with open(metrics_csv, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["aggregation", "class", "precision", "recall", "f1", "support"])
        for aggregation, m in all_metrics.items():
            for cls, vals in m["per_class"].items():
                writer.writerow([aggregation, cls, f"{vals['precision']:.4f}",
                                 f"{vals['recall']:.4f}", f"{vals['f1']:.4f}",
                                 m["support"][cls]])
            writer.writerow([aggregation, "macro", f"{m['macro']['precision']:.4f}",
                             f"{m['macro']['recall']:.4f}", f"{m['macro']['f1']:.4f}",
                             sum(m["support"].values())])
    outputs.append(metrics_csv)

    metrics_txt = out_dir / "metrics.txt"
    lines = [f"{granularity} level",
             f"{'aggregation':<12}{'class':<8}{'P':>7}{'R':>7}{'F1':>7}{'n':>6}"]
    for aggregation, m in all_metrics.items():
        for cls, vals in m["per_class"].items():
            lines.append(f"{aggregation:<12}{cls:<8}{vals['precision']:>7.2f}"
                         f"{vals['recall']:>7.2f}{vals['f1']:>7.2f}"
                         f"{m['support'][cls]:>6}")
        lines.append(f"{aggregation:<12}{'macro':<8}{m['macro']['precision']:>7.2f}"
                     f"{m['macro']['recall']:>7.2f}{m['macro']['f1']:>7.2f}"
                     f"{sum(m['support'].values()):>6}")
    metrics_txt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(metrics_txt)
    return outputs


def attribute_documents(ckpt, vocab: Vocab, docs, cfg, out_dir: Path,
                        top_k: int = 20, max_len: int = 512) -> list[Path]:
    """Attribute every document; write the dump, table and top-token lists."""
    from .bpe import TokenSeq, encode_ids

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for doc in docs:
        ids = encode_ids(doc.text, vocab, max_len)
        if not ids:
            continue
        seq = TokenSeq(ids=tuple(ids), attention_len=len(ids))
        records.append(attrib_mod.integrated_gradients(ckpt.params, seq, cfg, vocab,
                                                       doc_id=doc.doc_id))
    dump_path = out_dir / "attributions.jsonl"
    attrib_mod.save_attribution_dump(records, dump_path)
    table = attrib_mod.aggregate_token_attributions(ckpt.params, docs, cfg, vocab, max_len)
    table_path = out_dir / "token_attributions.csv"
    attrib_mod.save_attribution_table(table, table_path)
    outputs = [dump_path, table_path]
    if table.rows:
        masculine, feminine = attrib_mod.top_polarized(table, top_k)
        top_path = out_dir / "top_polarized.csv"
        with open(top_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["list", "rank", "token", "mean_score", "n"])
            for name, rows in (("masculine", masculine), ("feminine", feminine)):
                for rank, (tok, mean, n) in enumerate(rows, start=1):
                    writer.writerow([name, rank, tok, f"{mean:.4f}", n])
        fig_path = out_dir / "top_polarized.png"
        reporting.polarized_tokens_figure(masculine, feminine, fig_path)
        outputs += [top_path, fig_path]
    return outputs
