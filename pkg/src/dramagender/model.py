"""A small differentiable text classifier with closed-form gradients.

Architecture: embedding lookup, masked mean pooling over non-PAD positions,
one tanh hidden layer, two-class softmax. Backpropagation is derived by
hand so that gradients stay exact and auditable for attribution; training
uses Adam with bias correction and early stopping on validation macro-F1.
All arithmetic runs in double precision; checkpoints store 32-bit floats.
"""

from __future__ import annotations

import io
import json
import struct
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bpe import PAD_ID, TokenSeq, Vocab, encode_ids
from .dataset import Document
from .evaluation import evaluate
from .tei import Gender

log = logging.getLogger(__name__)

# class order fixes argmax ties to Male (the most frequent class)
CLASSES = (Gender.MALE, Gender.FEMALE)
CLASS_INDEX = {g: i for i, g in enumerate(CLASSES)}

CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1
_ARRAY_ORDER = ("E", "W1", "b1", "W2", "b2")


class CheckpointError(ValueError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Hyper:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    max_len: int = 512
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def validate(self) -> None:
        if min(self.vocab_size, self.embed_dim, self.hidden_dim, self.max_len) <= 0:
            raise ValueError("all dimensions must be positive")
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError("invalid optimizer hyperparameters")


@dataclass
class Params:
    E: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self):
        return [(name, getattr(self, name)) for name in _ARRAY_ORDER]

    def copy(self) -> "Params":
        return Params(**{name: arr.copy() for name, arr in self.arrays()})

    def zeros_like(self) -> "Params":
        return Params(**{name: np.zeros_like(arr) for name, arr in self.arrays()})


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    label: Gender
    confidence: float


@dataclass
class AdamState:
    m: Params
    v: Params


@dataclass
class Checkpoint:
    params: Params
    vocab_digest: str
    hyper: Hyper
    best_epoch: int
    val_macro_f1: float


def init_params(hyper: Hyper, seed: int | None = None) -> Params:
    """Uniform [-0.05, 0.05] weights from a seeded generator; PAD row and biases zero."""
    hyper.validate()
    rng = np.random.default_rng(hyper.seed if seed is None else seed)
    E = rng.uniform(-0.05, 0.05, size=(hyper.vocab_size, hyper.embed_dim))
    E[PAD_ID, :] = 0.0
    W1 = rng.uniform(-0.05, 0.05, size=(hyper.embed_dim, hyper.hidden_dim))
    b1 = np.zeros(hyper.hidden_dim)
    W2 = rng.uniform(-0.05, 0.05, size=(hyper.hidden_dim, 2))
    b2 = np.zeros(2)
    return Params(E=E, W1=W1, b1=b1, W2=W2, b2=b2)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _prediction_from_probs(logits: np.ndarray, probs: np.ndarray) -> Prediction:
    idx = int(np.argmax(probs))  # tie -> index 0 -> Male
    return Prediction(logits=logits, probs=probs, label=CLASSES[idx],
                      confidence=float(probs[idx]))


def _seq_prefix(seq: TokenSeq) -> np.ndarray:
    ids = np.asarray(seq.ids[: seq.attention_len], dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot run the model on an empty sequence")
    return ids


def forward_from_embeddings(params: Params, x: np.ndarray):
    """Forward pass from a (len, embed_dim) matrix of embedding rows."""
    h0 = x.mean(axis=0)
    z1 = h0 @ params.W1 + params.b1
    h1 = np.tanh(z1)
    logits = h1 @ params.W2 + params.b2
    return logits, softmax(logits), h0, h1


def logit_diff_and_grad(params: Params, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Male-minus-Female logit and its gradient w.r.t. the embedding rows."""
    logits, _, _, h1 = forward_from_embeddings(params, x)
    f = float(logits[0] - logits[1])
    dh1 = params.W2[:, 0] - params.W2[:, 1]
    dz1 = dh1 * (1.0 - h1 * h1)
    dh0 = params.W1 @ dz1
    grad = np.broadcast_to(dh0 / x.shape[0], x.shape).copy()
    return f, grad


def forward(params: Params, seq: TokenSeq) -> Prediction:
    """Mean-pool the non-PAD embeddings, apply the tanh layer and softmax."""
    ids = _seq_prefix(seq)
    logits, probs, _, _ = forward_from_embeddings(params, params.E[ids])
    return _prediction_from_probs(logits, probs)


def _pack_batch(seqs: list[np.ndarray], max_len: int | None = None):
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lens.max()) if max_len is None else max_len
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask, lens


def _forward_batch(params: Params, ids: np.ndarray, mask: np.ndarray, lens: np.ndarray):
    X = params.E[ids] * mask[:, :, None]
    h0 = X.sum(axis=1) / lens[:, None]
    z1 = h0 @ params.W1 + params.b1
    h1 = np.tanh(z1)
    logits = h1 @ params.W2 + params.b2
    return logits, h0, h1


def predict(params: Params, seqs: list[TokenSeq], batch_size: int = 256) -> list[Prediction]:
    preds: list[Prediction] = []
    prefixes = [_seq_prefix(s) for s in seqs]
    for start in range(0, len(prefixes), batch_size):
        chunk = prefixes[start: start + batch_size]
        ids, mask, lens = _pack_batch(chunk)
        logits, _, _ = _forward_batch(params, ids, mask, lens)
        probs = softmax(logits)
        for row in range(len(chunk)):
            preds.append(_prediction_from_probs(logits[row], probs[row]))
    return preds


def loss_and_grads(params: Params, batch: list[tuple[TokenSeq, Gender]]):
    """Mean cross-entropy and closed-form gradients for one batch.

    Backpropagates through softmax, the linear layers, tanh and the
    mean-pool into the embedding table; the PAD row's gradient is forced
    to zero.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    prefixes = [_seq_prefix(seq) for seq, _ in batch]
    golds = np.array([CLASS_INDEX[g] for _, g in batch], dtype=np.int64)
    ids, mask, lens = _pack_batch(prefixes)
    logits, h0, h1 = _forward_batch(params, ids, mask, lens)

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    losses = log_z - logits[np.arange(len(batch)), golds]
    loss = float(losses.mean())

    B = len(batch)
    dlogits = softmax(logits)
    dlogits[np.arange(B), golds] -= 1.0
    dlogits /= B

    grads = params.zeros_like()
    grads.W2 = h1.T @ dlogits
    grads.b2 = dlogits.sum(axis=0)
    dh1 = dlogits @ params.W2.T
    dz1 = dh1 * (1.0 - h1 * h1)
    grads.W1 = h0.T @ dz1
    grads.b1 = dz1.sum(axis=0)
    dh0 = dz1 @ params.W1.T  # (B, embed_dim)

    contrib = (dh0 / lens[:, None])[:, None, :] * mask[:, :, None]
    np.add.at(grads.E, ids.ravel(), contrib.reshape(-1, contrib.shape[-1]))
    grads.E[PAD_ID, :] = 0.0
    return loss, grads


def adam_step(params: Params, grads: Params, state: AdamState, hyper: Hyper,
              t: int) -> tuple[Params, AdamState]:
    """One Adam update with bias correction; returns fresh params and state."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, p in params.arrays():
        g = getattr(grads, name)
        m = hyper.beta1 * getattr(state.m, name) + (1 - hyper.beta1) * g
        v = hyper.beta2 * getattr(state.v, name) + (1 - hyper.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_p[name] = p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
        new_m[name] = m
        new_v[name] = v
    return Params(**new_p), AdamState(m=Params(**new_m), v=Params(**new_v))


def encode_documents(docs: list[Document], vocab: Vocab,
                     max_len: int) -> list[tuple[TokenSeq, Gender]]:
    out = []
    for doc in docs:
        ids = encode_ids(doc.text, vocab, max_len)
        if not ids:
            log.warning("document %s encodes to an empty sequence; skipped", doc.doc_id)
            continue
        out.append((TokenSeq(ids=tuple(ids), attention_len=len(ids)), doc.gold_gender))
    return out


def _val_macro_f1(params: Params, val: list[tuple[TokenSeq, Gender]]) -> float:
    preds = predict(params, [seq for seq, _ in val])
    pairs = [(gold, pred.label) for (_, gold), pred in zip(val, preds)]
    return evaluate(pairs).macro[2]


def train(train_docs: list[Document], val_docs: list[Document], vocab: Vocab,
          hyper: Hyper) -> Checkpoint:
    """Train with seeded shuffling and early stopping on validation macro-F1.

    Stops after ``patience`` consecutive epochs without improvement (so
    patience=0 trains exactly one epoch) or at ``max_epochs``; returns the
    best-epoch checkpoint.
    """
    hyper.validate()
    train_set = encode_documents(train_docs, vocab, hyper.max_len)
    val_set = encode_documents(val_docs, vocab, hyper.max_len)
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")

    rng = np.random.default_rng(hyper.seed)
    params = init_params(hyper)
    state = AdamState(m=params.zeros_like(), v=params.zeros_like())
    best_params = params.copy()
    best_f1 = -1.0
    best_epoch = 0
    bad_epochs = 0
    t = 0

    for epoch in range(1, hyper.max_epochs + 1):
        order = rng.permutation(len(train_set))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train_set[i] for i in order[start: start + hyper.batch_size]]
            loss, grads = loss_and_grads(params, batch)
            t += 1
            params, state = adam_step(params, grads, state, hyper, t)
            epoch_loss += loss
            n_batches += 1
        val_f1 = _val_macro_f1(params, val_set)
        log.info("epoch %d: train loss %.4f, val macro-F1 %.4f",
                 epoch, epoch_loss / max(n_batches, 1), val_f1)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= hyper.patience:
            break
    return Checkpoint(params=best_params, vocab_digest=vocab.digest(), hyper=hyper,
                      best_epoch=best_epoch, val_macro_f1=best_f1)


# --- checkpoint persistence ---------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Binary layout: magic, version, length-prefixed JSON header, then the
    weight arrays as little-endian float32 in the order E, W1, b1, W2, b2."""
    header = {
        "hyper": asdict(ckpt.hyper),
        "vocab_digest": ckpt.vocab_digest,
        "best_epoch": ckpt.best_epoch,
        "val_macro_f1": ckpt.val_macro_f1,
        "shapes": {name: list(arr.shape) for name, arr in ckpt.params.arrays()},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, arr in ckpt.params.arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Path | str, vocab: Vocab | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 12 or bytes(view[:4]) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", view[4:8])[0]
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    hlen = struct.unpack("<I", view[8:12])[0]
    if len(raw) < 12 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    header = json.loads(bytes(view[12: 12 + hlen]).decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for name in _ARRAY_ORDER:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(raw) < offset + nbytes:
            raise TruncatedCheckpointError(f"{path}: truncated array {name}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    if vocab is not None and vocab.digest() != header["vocab_digest"]:
        raise DigestMismatchError(
            f"{path}: checkpoint was saved with a different vocabulary")
    hyper = Hyper(**header["hyper"])
    return Checkpoint(params=Params(**arrays), vocab_digest=header["vocab_digest"],
                      hyper=hyper, best_epoch=header["best_epoch"],
                      val_macro_f1=header["val_macro_f1"])
