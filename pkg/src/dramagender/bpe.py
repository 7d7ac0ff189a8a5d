"""Byte-pair-encoding subword vocabulary with the ``##`` continuation convention.

Training greedily merges the most frequent adjacent piece pair (ties broken
by the lexicographically greatest pair) until the vocabulary budget is
spent or no pair occurs at least twice. Encoding is greedy longest-match
per word; the four special tokens occupy the reserved ids 0..3 and are
never split or merged.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .fsutil import sha256_text

PAD, UNK, NAME, MASK = "[PAD]", "[UNK]", "[NAME]", "[MASK]"
SPECIALS = (PAD, UNK, NAME, MASK)
PAD_ID, UNK_ID, NAME_ID, MASK_ID = 0, 1, 2, 3

VOCAB_FILE = "vocab.txt"
MERGES_FILE = "merges.txt"
VOCAB_HEADER_PREFIX = "bpe-vocab v1"


@dataclass
class Vocab:
    id_to_token: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(default_factory=dict)
    _segment_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def digest(self) -> str:
        return sha256_text(self._canonical())

    def _canonical(self) -> str:
        head = f"{VOCAB_HEADER_PREFIX} {len(self.id_to_token)}"
        body = "\n".join(self.id_to_token)
        merges = "\n".join(f"{a} {b}" for a, b in self.merges)
        return f"{head}\n{body}\n--merges--\n{merges}\n"

    def save(self, out_dir: Path | str) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = f"{VOCAB_HEADER_PREFIX} {len(self.id_to_token)}"
        (out / VOCAB_FILE).write_text(
            "\n".join([header, *self.id_to_token]) + "\n", encoding="utf-8")
        (out / MERGES_FILE).write_text(
            "".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, vocab_dir: Path | str) -> "Vocab":
        vocab_dir = Path(vocab_dir)
        lines = (vocab_dir / VOCAB_FILE).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(VOCAB_HEADER_PREFIX):
            raise ValueError(f"{vocab_dir / VOCAB_FILE}: missing or unknown header")
        tokens = lines[1:]
        declared = int(lines[0].rsplit(" ", 1)[-1])
        if len(tokens) != declared:
            raise ValueError(
                f"{vocab_dir / VOCAB_FILE}: header declares {declared} tokens, found {len(tokens)}")
        merges = []
        merges_path = vocab_dir / MERGES_FILE
        if merges_path.exists():
            for line in merges_path.read_text(encoding="utf-8").splitlines():
                if line:
                    left, right = line.split(" ", 1)
                    merges.append((left, right))
        return cls(id_to_token=tokens, merges=merges)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    attention_len: int

    def __post_init__(self):
        if self.attention_len < 1:
            raise ValueError("TokenSeq must contain at least one non-PAD token")


def _word_to_pieces(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple("##" + ch for ch in word[1:])


def _merge_sequence(pieces: tuple[str, ...], pair: tuple[str, str],
                    merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == pair[0] and pieces[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def train_bpe(texts: list[str], vocab_size: int, specials=SPECIALS) -> Vocab:
    """Learn a BPE vocabulary from whitespace-tokenized texts.

    Words are decomposed into characters (continuations prefixed ``##``);
    the most frequent adjacent pair is merged repeatedly until
    ``vocab_size`` tokens exist or no pair occurs at least twice. Words
    equal to a special token are atomic and excluded from training.
    """
    word_freq: Counter[str] = Counter()
    for text in texts:
        for word in text.split():
            if word not in specials:
                word_freq[word] += 1
    if not word_freq:
        raise ValueError("cannot train BPE on an empty corpus")

    words = {w: [_word_to_pieces(w), f] for w, f in word_freq.items()}
    base = sorted({p for pieces, _ in words.values() for p in pieces})
    if vocab_size < len(specials) + len(base):
        raise ValueError(
            f"vocab_size {vocab_size} is below the {len(specials) + len(base)} "
            f"specials + base characters")

    vocab = list(specials) + base
    seen = set(vocab)
    merges: list[tuple[str, str]] = []

    pair_counts: Counter[tuple[str, str]] = Counter()
    pair_words: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w, (pieces, freq) in words.items():
        for a, b in zip(pieces, pieces[1:]):
            pair_counts[(a, b)] += freq
            pair_words[(a, b)].add(w)

    while len(vocab) < vocab_size and pair_counts:
        pair, count = max(pair_counts.items(), key=lambda kv: (kv[1], kv[0]))
        if count < 2:
            break
        merged = pair[0] + pair[1][2:]
        merges.append(pair)
        if merged not in seen:
            vocab.append(merged)
            seen.add(merged)
        for w in list(pair_words.get(pair, ())):
            pieces, freq = words[w]
            for a, b in zip(pieces, pieces[1:]):
                pair_counts[(a, b)] -= freq
                if pair_counts[(a, b)] <= 0:
                    del pair_counts[(a, b)]
                pair_words[(a, b)].discard(w)
            new_pieces = _merge_sequence(pieces, pair, merged)
            words[w][0] = new_pieces
            for a, b in zip(new_pieces, new_pieces[1:]):
                pair_counts[(a, b)] += freq
                pair_words[(a, b)].add(w)
    return Vocab(id_to_token=vocab, merges=merges)


def _segment_word(word: str, vocab: Vocab) -> list[int]:
    cached = vocab._segment_cache.get(word)
    if cached is not None:
        return cached
    token_to_id = vocab.token_to_id
    ids: list[int] = []
    i = 0
    initial = True
    while i < len(word):
        match_id = None
        match_end = i
        for j in range(len(word), i, -1):
            cand = word[i:j] if initial else "##" + word[i:j]
            if cand in SPECIALS:  # specials never arise from segmentation
                continue
            cand_id = token_to_id.get(cand)
            if cand_id is not None:
                match_id, match_end = cand_id, j
                break
        if match_id is None:
            ids.append(UNK_ID)  # unknown character
            i += 1
        else:
            ids.append(match_id)
            i = match_end
        initial = False
    vocab._segment_cache[word] = ids
    return ids


def encode_ids(text: str, vocab: Vocab, max_len: int = 512) -> list[int]:
    """Token ids for a text, truncated to ``max_len``; no padding."""
    ids: list[int] = []
    for word in text.split():
        special_id = vocab.token_to_id.get(word)
        if special_id is not None and word in SPECIALS:
            ids.append(special_id)
        else:
            ids.extend(_segment_word(word, vocab))
        if len(ids) >= max_len:
            return ids[:max_len]
    return ids


def encode(text: str, vocab: Vocab, max_len: int = 512) -> TokenSeq:
    """Encode a text into a fixed-length id sequence padded with PAD."""
    ids = encode_ids(text, vocab, max_len)
    attention_len = len(ids)
    padded = ids + [PAD_ID] * (max_len - attention_len)
    return TokenSeq(ids=tuple(padded), attention_len=attention_len)


def decode(ids, vocab: Vocab) -> str:
    """Inverse of encode up to truncation/UNK: drop PAD, strip ``##``, join words."""
    words: list[str] = []
    for i in ids:
        if not 0 <= i < len(vocab.id_to_token):
            raise ValueError(f"token id {i} out of range for vocab of size {len(vocab)}")
        if i == PAD_ID:
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)
