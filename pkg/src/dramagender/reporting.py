"""Report rendering: attribution HTML, cross-dressing analysis, figures.

The attribution view colours each word blue (male) or orange (female) with
opacity proportional to the strength of the cue, like a saliency heatmap.
The cross-dressing report runs the scene-level model over selected
characters scene by scene and compares their confidence against the other
female characters of the same plays. Figures are written as PNG files next
to the delimited outputs.
"""

from __future__ import annotations

import csv
import html
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .attribution import MisalignedAttributionError, TokenAttribution  # noqa: E402
from .bpe import TokenSeq, Vocab, encode_ids  # noqa: E402
from .dataset import Document  # noqa: E402
from .evaluation import AggregateDecision, geometric_mean  # noqa: E402
from .model import Params, Prediction, predict  # noqa: E402
from .tei import Gender, Play  # noqa: E402

log = logging.getLogger(__name__)

MALE_RGB = (31, 119, 180)  # blue
FEMALE_RGB = (255, 127, 14)  # orange
MALE_HEX = "#1f77b4"
FEMALE_HEX = "#ff7f0e"


# --- attribution HTML ---------------------------------------------------------

def _join_subwords(attrs: list[TokenAttribution]):
    """Group ``##`` continuation pieces with their initial piece.

    Returns (word, summed score, list of (piece, score)) triples; the sum
    preserves the signed semantics of the per-piece scores.
    """
    words = []
    for attr in attrs:
        if attr.token.startswith("##") and words:
            word, score, pieces = words[-1]
            words[-1] = (word + attr.token[2:], score + attr.score,
                         pieces + [(attr.token, attr.score)])
        else:
            words.append((attr.token, attr.score, [(attr.token, attr.score)]))
    return words


def render_attribution_html(doc: Document, attrs: list[TokenAttribution]) -> str:
    """Self-contained HTML of the document with per-word attribution colours.

    Background is blue for positive (male) and orange for negative (female)
    scores; opacity is |score| / max |score| in the document. Subword
    pieces are joined into words whose score is the sum of the piece
    scores, shown in the hover text together with the piece breakdown.
    """
    for pos, attr in enumerate(attrs):
        if attr.position != pos:
            raise MisalignedAttributionError(
                f"attribution positions are not contiguous at {pos} (got {attr.position})")
        if attr.doc_id and attr.doc_id != doc.doc_id:
            raise MisalignedAttributionError(
                f"attribution for {attr.doc_id!r} does not belong to doc {doc.doc_id!r}")
    words = _join_subwords(attrs)
    max_abs = max((abs(score) for _, score, _ in words), default=0.0)
    spans = []
    for word, score, pieces in words:
        opacity = abs(score) / max_abs if max_abs > 0 else 0.0
        rgb = MALE_RGB if score > 0 else FEMALE_RGB
        detail = ", ".join(f"{html.escape(p)} {s:+.4f}" for p, s in pieces)
        title = f"{score:+.4f}" + (f" [{detail}]" if len(pieces) > 1 else "")
        spans.append(
            f'<span class="tok" title="{title}" '
            f'style="background-color: rgba({rgb[0]},{rgb[1]},{rgb[2]},{opacity:.3f})">'
            f"{html.escape(word)}</span>")
    head = (
        "<!DOCTYPE html><html><head><meta charset=\"utf-8\">"
        f"<title>attribution {html.escape(doc.doc_id)}</title>"
        "<style>body{font-family:Georgia,serif;max-width:44em;margin:2em auto;"
        "line-height:1.8}.tok{padding:1px 2px;border-radius:3px}"
        ".meta{color:#555;font-size:.85em}</style></head><body>")
    meta = (f'<p class="meta">{html.escape(doc.play_name)} / {html.escape(doc.char_id)}'
            f" &middot; {doc.granularity.value}"
            + (f" &middot; act {doc.act}" if doc.act else "")
            + (f" scene {doc.scene}" if doc.scene else "")
            + f" &middot; gold: {doc.gold_gender.value}</p>")
    legend = ('<p class="meta">blue = male cue, orange = female cue; '
              "saturation = strength; hover for scores</p>")
    return head + meta + legend + "<p>" + " ".join(spans) + "</p></body></html>"


# --- cross-dressing report ------------------------------------------------------

@dataclass(frozen=True)
class CrossdressRecord:
    play_name: str
    char_id: str
    act: int
    scene: int  # 0 means: every scene of the act
    crossdressing: bool
    source: str  # "StageDirection" or "Database"


@dataclass
class SceneVerdict:
    act: int
    scene: int
    label: Gender
    confidence: float
    crossdressing: bool
    source: str


@dataclass
class CharacterCrossdressReport:
    play_name: str
    char_id: str
    gold: Gender
    scenes: list[SceneVerdict]
    aggregate: AggregateDecision
    agreement: float | None  # fraction of cross-dressing scenes predicted Male
    notes: list[str] = field(default_factory=list)


@dataclass
class CrossdressReport:
    characters: list[CharacterCrossdressReport]
    cohort_confidences: dict[str, list[float]]  # "crossdresser" / "other_female"
    cohort_means: dict[str, float]
    cohort_accuracy: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "characters": [
                {
                    "play_name": c.play_name,
                    "char_id": c.char_id,
                    "gold": c.gold.value,
                    "agreement": c.agreement,
                    "aggregate": {"label": c.aggregate.label.value,
                                  "confidence": c.aggregate.confidence},
                    "scenes": [{"act": s.act, "scene": s.scene, "label": s.label.value,
                                "confidence": s.confidence,
                                "crossdressing": s.crossdressing, "source": s.source}
                               for s in c.scenes],
                    "notes": c.notes,
                }
                for c in self.characters
            ],
            "cohort_means": self.cohort_means,
            "cohort_accuracy": self.cohort_accuracy,
            "cohort_confidences": self.cohort_confidences,
        }


def load_crossdress_db(path: Path | str) -> list[CrossdressRecord]:
    """CSV columns: play_name, char_id, act, scene, crossdressing, source.

    An empty scene field flags every scene of the act. Stage-direction rows
    take precedence over database rows for the same (char, act, scene).
    """
    records = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            records.append(CrossdressRecord(
                play_name=row["play_name"].strip(),
                char_id=row["char_id"].strip(),
                act=int(row["act"]),
                scene=int(row["scene"]) if row.get("scene", "").strip() else 0,
                crossdressing=row.get("crossdressing", "true").strip().lower()
                in {"1", "true", "yes"},
                source=row.get("source", "Database").strip() or "Database",
            ))
    return records


def _flags_for(records: list[CrossdressRecord], play_name: str, char_id: str):
    """(act, scene) -> (flag, source); StageDirection beats Database."""
    act_wide: dict[int, tuple[bool, str]] = {}
    exact: dict[tuple[int, int], tuple[bool, str]] = {}
    for rec in records:
        if rec.play_name != play_name or rec.char_id != char_id:
            continue
        entry = (rec.crossdressing, rec.source)
        if rec.scene == 0:
            prev = act_wide.get(rec.act)
            if prev is None or (rec.source == "StageDirection" and prev[1] != "StageDirection"):
                act_wide[rec.act] = entry
        else:
            key = (rec.act, rec.scene)
            prev = exact.get(key)
            if prev is None or (rec.source == "StageDirection" and prev[1] != "StageDirection"):
                exact[key] = entry

    def lookup(act: int, scene: int) -> tuple[bool, str]:
        if (act, scene) in exact:
            return exact[(act, scene)]
        if act in act_wide:
            return act_wide[act]
        return False, ""

    return lookup


def crossdress_report(params: Params, vocab: Vocab, scene_docs: list[Document],
                      records: list[CrossdressRecord], max_len: int = 512,
                      plays: list[Play] | None = None) -> CrossdressReport:
    """Scene-by-scene gender predictions for the characters in ``records``.

    Per character: every scene document is predicted individually, the
    character-level aggregate uses the geometric mean, and the agreement
    score is the fraction of cross-dressing scenes predicted Male. The
    comparison cohort is every other female character of the same plays
    present in ``scene_docs``. When ``plays`` is given, flagged scenes that
    do not exist in the segmented play raise an error.
    """
    targets = sorted({(r.play_name, r.char_id) for r in records})
    by_char: dict[tuple[str, str], list[Document]] = {}
    for doc in scene_docs:
        by_char.setdefault((doc.play_name, doc.char_id), []).append(doc)

    if plays is not None:
        plays_by_name = {p.play_name: p for p in plays}
        for rec in records:
            play = plays_by_name.get(rec.play_name)
            if play is None:
                raise KeyError(f"crossdress db references unknown play {rec.play_name!r}")
            if rec.scene:
                known = {(s.act, s.index) for a in play.acts for s in a.scenes}
                if (rec.act, rec.scene) not in known:
                    raise ValueError(
                        f"crossdress db: scene {rec.act}:{rec.scene} not present in "
                        f"{rec.play_name}")

    def predict_docs(docs: list[Document]) -> list[Prediction]:
        seqs = []
        for doc in docs:
            ids = encode_ids(doc.text, vocab, max_len)
            seqs.append(TokenSeq(ids=tuple(ids), attention_len=len(ids)))
        return predict(params, seqs)

    character_reports = []
    crossdresser_plays = set()
    for play_name, char_id in targets:
        docs = by_char.get((play_name, char_id))
        if not docs:
            raise KeyError(f"no scene documents for character {char_id!r} in {play_name!r}")
        crossdresser_plays.add(play_name)
        docs = sorted(docs, key=lambda d: (d.act, d.scene))
        preds = predict_docs(docs)
        lookup = _flags_for(records, play_name, char_id)
        verdicts = []
        for doc, pred in zip(docs, preds):
            flag, source = lookup(doc.act, doc.scene)
            verdicts.append(SceneVerdict(act=doc.act, scene=doc.scene, label=pred.label,
                                         confidence=pred.confidence, crossdressing=flag,
                                         source=source))
        flagged = [v for v in verdicts if v.crossdressing]
        agreement = (sum(1 for v in flagged if v.label == Gender.MALE) / len(flagged)
                     if flagged else None)
        notes = [] if flagged else ["no cross-dressing scenes with speech"]
        aggregate = geometric_mean(preds, char_key=(play_name, char_id))
        character_reports.append(CharacterCrossdressReport(
            play_name=play_name, char_id=char_id, gold=docs[0].gold_gender,
            scenes=verdicts, aggregate=aggregate, agreement=agreement, notes=notes))

    # cohort: the other female characters of the same plays
    target_set = set(targets)
    cohort_conf = {"crossdresser": [], "other_female": []}
    cohort_correct = {"crossdresser": [], "other_female": []}
    for rep in character_reports:
        cohort_conf["crossdresser"].append(rep.aggregate.confidence)
        cohort_correct["crossdresser"].append(rep.aggregate.label == rep.gold)
    for (play_name, char_id), docs in sorted(by_char.items()):
        if (play_name, char_id) in target_set or play_name not in crossdresser_plays:
            continue
        if docs[0].gold_gender != Gender.FEMALE:
            continue
        decision = geometric_mean(predict_docs(sorted(docs, key=lambda d: (d.act, d.scene))),
                                  char_key=(play_name, char_id))
        cohort_conf["other_female"].append(decision.confidence)
        cohort_correct["other_female"].append(decision.label == Gender.FEMALE)
    means = {k: float(np.mean(v)) if v else 0.0 for k, v in cohort_conf.items()}
    accuracy = {k: float(np.mean(v)) if v else 0.0 for k, v in cohort_correct.items()}
    return CrossdressReport(characters=character_reports, cohort_confidences=cohort_conf,
                            cohort_means=means, cohort_accuracy=accuracy)


def save_crossdress_csv(report: CrossdressReport, out_dir: Path | str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "crossdress_scenes.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["play_name", "char_id", "act", "scene", "crossdressing",
                         "source", "predicted", "confidence"])
        for rep in report.characters:
            for s in rep.scenes:
                writer.writerow([rep.play_name, rep.char_id, s.act, s.scene,
                                 s.crossdressing, s.source, s.label.value,
                                 f"{s.confidence:.4f}"])
    with open(out / "crossdress_cohort.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cohort", "mean_confidence", "accuracy", "n"])
        for cohort in ("crossdresser", "other_female"):
            writer.writerow([cohort, f"{report.cohort_means[cohort]:.4f}",
                             f"{report.cohort_accuracy[cohort]:.4f}",
                             len(report.cohort_confidences[cohort])])


# --- figures --------------------------------------------------------------------

def crossdress_scene_figure(report: CrossdressReport, path: Path | str) -> None:
    """One row per character: scene sequence coloured by predicted gender,
    cross-dressing scenes framed."""
    chars = report.characters
    if not chars:
        return
    fig, axes = plt.subplots(len(chars), 1, figsize=(10, 1.1 * len(chars) + 0.8),
                             squeeze=False)
    for ax_row, rep in zip(axes, chars):
        ax = ax_row[0]
        for i, s in enumerate(rep.scenes):
            colour = MALE_HEX if s.label == Gender.MALE else FEMALE_HEX
            ax.bar(i, s.confidence, width=0.8, color=colour,
                   edgecolor="black" if s.crossdressing else "none",
                   linewidth=1.6 if s.crossdressing else 0)
        ax.set_xticks(range(len(rep.scenes)))
        ax.set_xticklabels([f"{s.act}:{s.scene}" for s in rep.scenes], fontsize=7)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("conf", fontsize=7)
        ax.set_title(f"{rep.play_name} / {rep.char_id}"
                     + (f"  (agreement {rep.agreement:.2f})" if rep.agreement is not None
                        else ""), fontsize=9)
    fig.suptitle("scene-by-scene prediction (blue=male, orange=female; framed=cross-dressing)",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def crossdress_confidence_figure(report: CrossdressReport, path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i, (cohort, colour) in enumerate([("crossdresser", "#2ca02c"),
                                          ("other_female", "#7f7f7f")]):
        values = report.cohort_confidences[cohort]
        if values:
            x = np.full(len(values), i) + np.linspace(-0.12, 0.12, len(values))
            ax.scatter(x, values, color=colour, s=28, zorder=3)
            ax.hlines(report.cohort_means[cohort], i - 0.25, i + 0.25,
                      color=colour, linewidth=2,
                      label=f"{cohort} mean {report.cohort_means[cohort]:.2f}")
    ax.set_xticks([0, 1])
    ax.set_xticklabels(["cross-dressers", "other female characters"])
    ax.set_ylabel("aggregate confidence")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def polarized_tokens_figure(masculine, feminine, path: Path | str) -> None:
    """Horizontal bars of the most polarized token attributions."""
    fig, ax = plt.subplots(figsize=(7, 0.28 * (len(masculine) + len(feminine)) + 1.2))
    rows = list(reversed(feminine)) + list(reversed(masculine))
    labels = [f"{tok} (n={n})" for tok, _, n in rows]
    scores = [score for _, score, _ in rows]
    colours = [MALE_HEX if s > 0 else FEMALE_HEX for s in scores]
    ax.barh(range(len(rows)), scores, color=colours)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.axvline(0, color="black", linewidth=0.8)
    ax.set_xlabel("mean attribution (positive = male)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def quartile_figure(table, granularity: str, path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [f"Q{i + 1}\n{lo}-{hi}" for i, (lo, hi) in enumerate(table.boundaries)]
    ax.bar(range(4), table.f1_per_quartile, color="#1f77b4")
    ax.set_xticks(range(4))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("macro F1")
    ax.set_title(f"{granularity}: F1 by word-count quartile", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
