"""Integrated-gradients token attribution over the classifier's embeddings.

The attributed function is the Male-minus-Female logit difference, so one
signed scale covers both classes: positive scores pull towards Male,
negative towards Female. The baseline is the all-PAD embedding sequence
(zero rows by construction). Attributions are the path integral of
gradients approximated by a Riemann sum; a completeness diagnostic reports
how far the attribution total is from F(input) - F(baseline).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bpe import PAD_ID, TokenSeq, Vocab, encode_ids
from .dataset import Document
from .fsutil import read_jsonl, write_jsonl
from .model import Params, logit_diff_and_grad

log = logging.getLogger(__name__)


class MisalignedAttributionError(ValueError):
    pass


@dataclass(frozen=True)
class TokenAttribution:
    doc_id: str
    position: int
    token: str
    score: float  # signed: + Male, - Female


@dataclass
class AttributionTable:
    rows: dict[str, tuple[float, int]]  # token -> (mean score, occurrences)


@dataclass(frozen=True)
class IGConfig:
    steps: int = 128
    baseline: str = "all_pad"  # or "zero_embedding"
    # right-endpoint Riemann sum (k/m, k=1..m); "midpoint" cuts the
    # completeness gap by orders of magnitude if ever needed
    rule: str = "right"

    def alphas(self) -> np.ndarray:
        if self.steps < 1:
            raise ValueError("IG needs at least one step")
        k = np.arange(1, self.steps + 1, dtype=np.float64)
        if self.rule == "right":
            return k / self.steps
        if self.rule == "midpoint":
            return (k - 0.5) / self.steps
        raise ValueError(f"unknown Riemann rule {self.rule!r}")


def integrated_gradients_path(f_and_grad, x: np.ndarray, x_base: np.ndarray,
                              cfg: IGConfig):
    """Generic IG over an array input.

    ``f_and_grad(x)`` returns the scalar output and its gradient at ``x``.
    Returns (per-coordinate attributions, f(x), f(x_base)).
    """
    diff = x - x_base
    acc = np.zeros_like(x)
    for alpha in cfg.alphas():
        _, grad = f_and_grad(x_base + alpha * diff)
        acc += grad
    ig = diff * (acc / cfg.steps)
    f_x, _ = f_and_grad(x)
    f_base, _ = f_and_grad(x_base)
    return ig, f_x, f_base


def _embedding_input(params: Params, seq: TokenSeq, cfg: IGConfig):
    ids = np.asarray(seq.ids[: seq.attention_len], dtype=np.int64)
    x = params.E[ids]
    if cfg.baseline == "all_pad":
        x_base = np.broadcast_to(params.E[PAD_ID], x.shape).copy()
    elif cfg.baseline == "zero_embedding":
        x_base = np.zeros_like(x)
    else:
        raise ValueError(f"unknown baseline {cfg.baseline!r}")
    return ids, x, x_base


def integrated_gradients(params: Params, seq: TokenSeq, cfg: IGConfig,
                         vocab: Vocab, doc_id: str = "") -> list[TokenAttribution]:
    """Signed per-token scores; a token's score sums its embedding-row IG."""
    ids, x, x_base = _embedding_input(params, seq, cfg)
    ig, _, _ = integrated_gradients_path(
        lambda xi: logit_diff_and_grad(params, xi), x, x_base, cfg)
    scores = ig.sum(axis=1)
    return [TokenAttribution(doc_id=doc_id, position=pos,
                             token=vocab.id_to_token[i], score=float(scores[pos]))
            for pos, i in enumerate(ids)]


def completeness_gap(params: Params, seq: TokenSeq, cfg: IGConfig) -> float:
    """|sum of attributions - (F(input) - F(baseline))|."""
    _, x, x_base = _embedding_input(params, seq, cfg)
    ig, f_x, f_base = integrated_gradients_path(
        lambda xi: logit_diff_and_grad(params, xi), x, x_base, cfg)
    return float(abs(ig.sum() - (f_x - f_base)))


def aggregate_token_attributions(params: Params, docs: list[Document], cfg: IGConfig,
                                 vocab: Vocab, max_len: int = 512) -> AttributionTable:
    """Mean signed score per token string over every occurrence in ``docs``.

    PAD never occurs (attribution covers the non-PAD prefix only); the other
    specials are kept since they may carry signal.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for doc in docs:
        ids = encode_ids(doc.text, vocab, max_len)
        if not ids:
            continue
        seq = TokenSeq(ids=tuple(ids), attention_len=len(ids))
        for attr in integrated_gradients(params, seq, cfg, vocab, doc_id=doc.doc_id):
            sums[attr.token] = sums.get(attr.token, 0.0) + attr.score
            counts[attr.token] = counts.get(attr.token, 0) + 1
    rows = {tok: (sums[tok] / counts[tok], counts[tok]) for tok in sums}
    return AttributionTable(rows=rows)


def top_polarized(table: AttributionTable, k: int = 20):
    """The k most masculine and most feminine rows as (token, mean, n) lists."""
    if not table.rows:
        raise ValueError("attribution table is empty")
    rows = [(tok, mean, n) for tok, (mean, n) in table.rows.items()]
    if k > len(rows):
        log.warning("top_polarized: k=%d exceeds table size %d; returning all", k, len(rows))
        k = len(rows)
    if all(mean == 0.0 for _, mean, _ in rows):
        log.warning("top_polarized: all scores are zero; lists are degenerate")
    masculine = sorted(rows, key=lambda r: (-r[1], r[0]))[:k]
    feminine = sorted(rows, key=lambda r: (r[1], r[0]))[:k]
    return masculine, feminine


# --- artifact io --------------------------------------------------------------

def save_attribution_dump(records: list[list[TokenAttribution]], path: Path | str) -> None:
    """JSON-lines dump, one record per document with token/score arrays."""
    rows = []
    for attrs in records:
        if not attrs:
            continue
        rows.append({"doc_id": attrs[0].doc_id,
                     "tokens": [a.token for a in attrs],
                     "scores": [a.score for a in attrs]})
    write_jsonl(path, rows)


def load_attribution_dump(path: Path | str) -> dict[str, list[TokenAttribution]]:
    out: dict[str, list[TokenAttribution]] = {}
    for row in read_jsonl(path):
        out[row["doc_id"]] = [
            TokenAttribution(doc_id=row["doc_id"], position=i, token=tok, score=score)
            for i, (tok, score) in enumerate(zip(row["tokens"], row["scores"]))]
    return out


def save_attribution_table(table: AttributionTable, path: Path | str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["token", "mean_score", "n"])
        for tok in sorted(table.rows, key=lambda t: -table.rows[t][0]):
            mean, n = table.rows[tok]
            writer.writerow([tok, f"{mean:.6f}", n])


def load_attribution_table(path: Path | str) -> AttributionTable:
    rows: dict[str, tuple[float, int]] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for record in csv.DictReader(handle):
            rows[record["token"]] = (float(record["mean_score"]), int(record["n"]))
    return AttributionTable(rows=rows)
