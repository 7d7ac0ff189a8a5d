"""Classification dataset construction from parsed plays.

Two lexical-overfitting guards are applied before any document is
materialized: every cast name is replaced by the ``[NAME]`` pseudo-token,
and every word type confined to a single play is replaced by ``[MASK]``.
Punctuation is detached from words beforehand so that trailing commas do
not split type counts.

Character eligibility (binary gender, at least ``min_words`` whitespace
words) and corpus statistics are computed on the parsed, pre-masking text;
document texts and their word counts are post-masking.
"""

from __future__ import annotations

import enum
import logging
import unicodedata
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fsutil import read_jsonl, write_jsonl
from .tei import Character, Gender, Play, Utterance

log = logging.getLogger(__name__)

NAME_TOKEN = "[NAME]"
MASK_TOKEN = "[MASK]"
SPECIAL_TOKENS = ("[PAD]", "[UNK]", NAME_TOKEN, MASK_TOKEN)

DEFAULT_MIN_WORDS = 30
DEFAULT_RATIOS = (0.8, 0.1, 0.1)
PARTITIONS = ("train", "test", "validation")


class Granularity(str, enum.Enum):
    UTTERANCE = "utterance"
    SCENE = "scene"
    CHARACTER = "character"


@dataclass(frozen=True)
class Document:
    doc_id: str
    play_name: str
    char_id: str
    granularity: Granularity
    act: int  # 0 for character granularity
    scene: int  # 0 unless scene granularity
    text: str  # post-masking
    gold_gender: Gender
    word_count: int


@dataclass
class SplitSpec:
    seed: int
    ratios: tuple[float, float, float]
    assignment: dict[tuple[str, str], str]  # (play_name, char_id) -> partition

    def partition_sizes(self) -> dict[str, int]:
        sizes = Counter(self.assignment.values())
        return {p: sizes.get(p, 0) for p in PARTITIONS}


@dataclass
class MaskReport:
    masked_names: set[str]
    single_play_tokens: set[str]
    replacement_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "masked_names": sorted(self.masked_names),
            "single_play_tokens": sorted(self.single_play_tokens),
            "replacement_counts": dict(sorted(self.replacement_counts.items())),
        }


@dataclass
class CorpusStats:
    characters: dict[str, int]
    mean_words: dict[str, float]
    min_words: dict[str, int]
    max_words: dict[str, int]

    def to_dict(self) -> dict:
        return {"characters": self.characters, "mean_words": self.mean_words,
                "min_words": self.min_words, "max_words": self.max_words}


# --- text normalization -----------------------------------------------------

def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def detach_punctuation(text: str) -> str:
    """Split punctuation characters off as standalone tokens."""
    out = []
    for word in text.split():
        run: list[str] = []
        for ch in word:
            if _is_punct(ch):
                if run:
                    out.append("".join(run))
                    run = []
                out.append(ch)
            else:
                run.append(ch)
        if run:
            out.append("".join(run))
    return " ".join(out)


# --- masking -----------------------------------------------------------------

def _capitalized(form: str) -> str:
    return " ".join(w[:1].upper() + w[1:].lower() for w in form.split())


def build_name_mask_list(corpus: list[Play]) -> set[str]:
    """Union of all cast display-name surface forms across the corpus.

    Case-preserving, plus the capitalized sentence-internal variant of each
    form (so an all-caps cast entry still matches its in-dialogue spelling).
    """
    names: set[str] = set()
    for play in corpus:
        for character in play.cast:
            for form in character.display_names:
                form = " ".join(form.split())
                if not form:
                    continue
                names.add(form)
                names.add(_capitalized(form))
    return names - set(SPECIAL_TOKENS)


def _play_frequency(plays: list[Play]) -> dict[str, int]:
    """Number of distinct plays each (punctuation-detached) token type occurs in."""
    freq: Counter[str] = Counter()
    for play in plays:
        types = set()
        for utt in play.utterances():
            types.update(detach_punctuation(utt.text).split())
        freq.update(types)
    return dict(freq)


def _name_matchers(names: set[str]):
    single = set()
    multi: dict[str, list[tuple[str, ...]]] = defaultdict(list)
    for form in names:
        toks = tuple(detach_punctuation(form).split())
        if len(toks) == 1:
            single.add(toks[0])
        elif toks:
            multi[toks[0]].append(toks)
    for first in multi:
        multi[first].sort(key=len, reverse=True)
    return single, dict(multi)


def _mask_tokens(tokens: list[str], single: set[str], multi, single_play: set[str],
                 counts: Counter) -> list[str]:
    out = []
    i = 0
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        matched = None
        for form in multi.get(tok, ()):
            if tuple(tokens[i:i + len(form)]) == form:
                matched = form
                break
        if matched:
            out.append(NAME_TOKEN)
            counts[" ".join(matched)] += 1
            i += len(matched)
            continue
        if tok in single:
            out.append(NAME_TOKEN)
            counts[tok] += 1
        elif tok in single_play and tok not in (NAME_TOKEN, MASK_TOKEN):
            out.append(MASK_TOKEN)
            counts[tok] += 1
        else:
            out.append(tok)
        i += 1
    return out


def _rewrite_play(play: Play, rewrite) -> Play:
    new_acts = []
    for act in play.acts:
        new_items = []
        for item in act.items:
            if isinstance(item, Utterance):
                text = rewrite(item.text)
                new_items.append(replace(item, text=text, word_count=len(text.split())))
            else:
                new_items.append(item)
        new_acts.append(replace(act, items=new_items))
    return replace(play, acts=new_acts)


def mask_corpus(corpus: list[Play], names: set[str]) -> tuple[list[Play], MaskReport]:
    """Replace cast names with ``[NAME]`` and single-play types with ``[MASK]``.

    Play frequencies are counted before name masking; name masking takes
    precedence over single-play masking. A final sweep re-counts the masked
    corpus and masks any type that ended up confined to one play (masking a
    multi-word name can orphan one of its component words), so the
    no-single-play-type invariant holds unconditionally.
    """
    names = set(names) - set(SPECIAL_TOKENS)
    freq = _play_frequency(corpus)
    single_play = {t for t, n in freq.items() if n == 1} - set(SPECIAL_TOKENS)
    single, multi = _name_matchers(names)
    counts: Counter[str] = Counter()

    def rewrite(text: str) -> str:
        tokens = detach_punctuation(text).split()
        return " ".join(_mask_tokens(tokens, single, multi, single_play, counts))

    masked = [_rewrite_play(play, rewrite) for play in corpus]

    # defensive sweep: mask types orphaned into a single play by name masking
    residual_freq = _play_frequency(masked)
    residual = {t for t, n in residual_freq.items() if n == 1} - set(SPECIAL_TOKENS)
    if residual:
        log.info("masking %d residual single-play types left by name masking", len(residual))
        single_play |= residual

        def rewrite_residual(text: str) -> str:
            toks = []
            for tok in text.split():
                if tok in residual:
                    counts[tok] += 1
                    toks.append(MASK_TOKEN)
                else:
                    toks.append(tok)
            return " ".join(toks)

        masked = [_rewrite_play(play, rewrite_residual) for play in masked]

    report = MaskReport(masked_names=names, single_play_tokens=single_play,
                        replacement_counts=dict(counts))
    return masked, report


def apply_masking(plays: list[Play], report: MaskReport) -> list[Play]:
    """Apply an existing mask table to further plays (e.g. held-out material)."""
    single, multi = _name_matchers(report.masked_names)
    counts: Counter[str] = Counter()

    def rewrite(text: str) -> str:
        tokens = detach_punctuation(text).split()
        return " ".join(_mask_tokens(tokens, single, multi, report.single_play_tokens, counts))

    return [_rewrite_play(play, rewrite) for play in plays]


# --- filtering and statistics -------------------------------------------------

def _char_word_counts(play: Play) -> dict[str, int]:
    counts: Counter[str] = Counter()
    for utt in play.utterances():
        counts[utt.speaker_id] += utt.word_count
    return dict(counts)


def filter_characters(corpus: list[Play],
                      min_words: int = DEFAULT_MIN_WORDS) -> list[tuple[Character, Play]]:
    """Characters with a binary gender speaking at least ``min_words`` words."""
    kept = []
    for play in corpus:
        counts = _char_word_counts(play)
        for character in play.cast:
            if character.gender not in (Gender.MALE, Gender.FEMALE):
                continue
            if counts.get(character.char_id, 0) >= min_words:
                kept.append((character, play))
    return kept


def eligible_characters(corpus: list[Play],
                        min_words: int = DEFAULT_MIN_WORDS) -> dict[tuple[str, str], Gender]:
    return {(play.play_name, ch.char_id): ch.gender
            for ch, play in filter_characters(corpus, min_words)}


def corpus_stats(corpus: list[Play], min_words: int = DEFAULT_MIN_WORDS) -> CorpusStats:
    """Per-gender character counts and word-count summary of eligible characters."""
    per_gender: dict[str, list[int]] = {Gender.MALE.value: [], Gender.FEMALE.value: []}
    for character, play in filter_characters(corpus, min_words):
        per_gender[character.gender.value].append(
            _char_word_counts(play).get(character.char_id, 0))
    if not any(per_gender.values()):
        log.warning("corpus statistics over an empty corpus")
    stats = CorpusStats(characters={}, mean_words={}, min_words={}, max_words={})
    for gender, counts in per_gender.items():
        stats.characters[gender] = len(counts)
        stats.mean_words[gender] = float(np.mean(counts)) if counts else 0.0
        stats.min_words[gender] = int(min(counts)) if counts else 0
        stats.max_words[gender] = int(max(counts)) if counts else 0
    return stats


# --- documents -----------------------------------------------------------------

def _doc(play: Play, char_id: str, granularity: Granularity, act: int, scene: int,
         text: str, gold: Gender, doc_id: str) -> Document:
    return Document(doc_id=doc_id, play_name=play.play_name, char_id=char_id,
                    granularity=granularity, act=act, scene=scene, text=text,
                    gold_gender=gold, word_count=len(text.split()))


def make_documents(corpus: list[Play], granularity: Granularity | str,
                   eligible: dict[tuple[str, str], Gender] | None = None,
                   min_words: int = DEFAULT_MIN_WORDS) -> list[Document]:
    """Materialize classification inputs at one granularity.

    Character level: one document per eligible character, all utterances in
    play order joined by spaces. Scene level: one document per
    (character, act, scene) in which the character speaks. Utterance level:
    one document per utterance. ``eligible`` normally comes from
    :func:`eligible_characters` over the parsed (pre-masking) corpus.
    """
    granularity = Granularity(granularity)
    if eligible is None:
        eligible = eligible_characters(corpus, min_words)
    docs: list[Document] = []
    for play in corpus:
        cast_ids = play.cast_ids()
        if granularity is Granularity.CHARACTER:
            parts: dict[str, list[str]] = defaultdict(list)
            for utt in play.utterances():
                key = (play.play_name, utt.speaker_id)
                if utt.speaker_id in cast_ids and key in eligible:
                    parts[utt.speaker_id].append(utt.text)
            for char_id, texts in parts.items():
                gold = eligible[(play.play_name, char_id)]
                docs.append(_doc(play, char_id, granularity, 0, 0, " ".join(texts),
                                 gold, f"{play.play_name}/{char_id}"))
        elif granularity is Granularity.SCENE:
            groups: dict[tuple[str, int, int], list[str]] = {}
            order: list[tuple[str, int, int]] = []
            for act in play.acts:
                for utt in act.utterances():
                    key = (play.play_name, utt.speaker_id)
                    if utt.speaker_id not in cast_ids or key not in eligible:
                        continue
                    gkey = (utt.speaker_id, act.index, utt.scene)
                    if gkey not in groups:
                        groups[gkey] = []
                        order.append(gkey)
                    groups[gkey].append(utt.text)
            for char_id, act_idx, scene_idx in order:
                gold = eligible[(play.play_name, char_id)]
                text = " ".join(groups[(char_id, act_idx, scene_idx)])
                doc_id = f"{play.play_name}/{char_id}/a{act_idx}s{scene_idx}"
                docs.append(_doc(play, char_id, granularity, act_idx, scene_idx,
                                 text, gold, doc_id))
        else:
            ordinal = 0
            for act in play.acts:
                for utt in act.utterances():
                    ordinal += 1
                    key = (play.play_name, utt.speaker_id)
                    if utt.speaker_id not in cast_ids or key not in eligible:
                        continue
                    doc_id = f"{play.play_name}/{utt.speaker_id}/a{act.index}u{ordinal}"
                    docs.append(_doc(play, utt.speaker_id, granularity, act.index, 0,
                                     utt.text, eligible[key], doc_id))
    return docs


# --- character split -------------------------------------------------------------

def split_characters(chars, seed: int,
                     ratios: tuple[float, float, float] = DEFAULT_RATIOS) -> SplitSpec:
    """Seeded uniform shuffle, then contiguous assignment train/test/validation.

    Train and test sizes are the floors of their ratios; validation takes
    the remainder. ``chars`` may be (play_name, char_id) keys or
    (Character, Play) pairs.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1.0, got {ratios}")
    keys = []
    for item in chars:
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], Character):
            keys.append((item[1].play_name, item[0].char_id))
        else:
            keys.append((str(item[0]), str(item[1])))
    keys = sorted(set(keys))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    n = len(keys)
    n_train = int(np.floor(ratios[0] * n))
    n_test = int(np.floor(ratios[1] * n))
    assignment: dict[tuple[str, str], str] = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            part = "train"
        elif rank < n_train + n_test:
            part = "test"
        else:
            part = "validation"
        assignment[keys[idx]] = part
    return SplitSpec(seed=seed, ratios=tuple(ratios), assignment=assignment)


def partition_documents(docs: list[Document], split: SplitSpec) -> dict[str, list[Document]]:
    parts: dict[str, list[Document]] = {p: [] for p in PARTITIONS}
    for doc in docs:
        part = split.assignment.get((doc.play_name, doc.char_id))
        if part is not None:
            parts[part].append(doc)
    return parts


# --- serialization ----------------------------------------------------------------

def document_to_dict(doc: Document) -> dict:
    return {"doc_id": doc.doc_id, "play_name": doc.play_name, "char_id": doc.char_id,
            "granularity": doc.granularity.value, "act": doc.act, "scene": doc.scene,
            "text": doc.text, "gold_gender": doc.gold_gender.value,
            "word_count": doc.word_count}


def document_from_dict(data: dict) -> Document:
    return Document(doc_id=data["doc_id"], play_name=data["play_name"],
                    char_id=data["char_id"], granularity=Granularity(data["granularity"]),
                    act=data["act"], scene=data["scene"], text=data["text"],
                    gold_gender=Gender(data["gold_gender"]), word_count=data["word_count"])


def save_documents(docs: list[Document], path: Path | str) -> None:
    write_jsonl(path, [document_to_dict(d) for d in docs])


def load_documents(path: Path | str) -> list[Document]:
    return [document_from_dict(d) for d in read_jsonl(path)]
