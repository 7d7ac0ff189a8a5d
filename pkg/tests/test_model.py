"""Classifier forward/backward, Adam, training loop and checkpoints."""

import logging
import math

import numpy as np
import pytest

from dramagender import model as mm
from dramagender.bpe import PAD_ID, SPECIALS, TokenSeq, Vocab, train_bpe
from dramagender.dataset import Document, Granularity
from dramagender.tei import Gender


def tiny_hyper(vocab_size=6, embed_dim=2, hidden_dim=2, **kw):
    return mm.Hyper(vocab_size=vocab_size, embed_dim=embed_dim,
                    hidden_dim=hidden_dim, max_len=16, **kw)


def seq(*ids):
    return TokenSeq(ids=tuple(ids), attention_len=len(ids))


def flatten_params(p):
    return np.concatenate([arr.ravel() for _, arr in p.arrays()])


def set_flat(p, flat):
    out = {}
    offset = 0
    for name, arr in p.arrays():
        out[name] = flat[offset: offset + arr.size].reshape(arr.shape).copy()
        offset += arr.size
    return mm.Params(**out)


def fd_gradients(params, batch, step=1e-5):
    """Central finite differences of the batch loss over every parameter."""
    flat = flatten_params(params)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        loss_up, _ = mm.loss_and_grads(set_flat(params, up), batch)
        loss_down, _ = mm.loss_and_grads(set_flat(params, down), batch)
        grad[i] = (loss_up - loss_down) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    # guarded relative error: below `floor` the central-difference noise
    # (~1e-11 absolute at step 1e-5) dominates any true gradient signal
    err = 0.0
    for a, n in zip(analytic, numeric):
        err = max(err, abs(a - n) / max(abs(a), abs(n), floor))
    return err


class TestInitParams:
    def test_deterministic(self):
        h = tiny_hyper(seed=9)
        a, b = mm.init_params(h), mm.init_params(h)
        for (_, x), (_, y) in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)

    def test_pad_row_zero(self):
        params = mm.init_params(tiny_hyper(seed=1))
        assert np.all(params.E[PAD_ID] == 0.0)

    def test_seeds_differ(self):
        a = mm.init_params(tiny_hyper(), seed=1)
        b = mm.init_params(tiny_hyper(), seed=2)
        assert not np.array_equal(a.W1, b.W1)


class TestForward:
    def test_zero_params_symmetric(self):
        params = mm.init_params(tiny_hyper(seed=0))
        zero = params.zeros_like()
        pred = mm.forward(zero, seq(1, 2, 3))
        assert np.allclose(pred.probs, [0.5, 0.5])
        assert pred.label == Gender.MALE  # tie resolves to Male

    def test_padding_invariance(self):
        params = mm.init_params(tiny_hyper(seed=4))
        short = mm.forward(params, seq(1, 2, 3))
        padded = mm.forward(params, TokenSeq(ids=(1, 2, 3) + (PAD_ID,) * 13,
                                             attention_len=3))
        assert np.array_equal(short.probs, padded.probs)
        assert short.label == padded.label

    def test_probs_sum_to_one(self):
        params = mm.init_params(tiny_hyper(seed=5))
        for s in [seq(1), seq(2, 3, 4, 5), seq(1, 1, 1)]:
            pred = mm.forward(params, s)
            assert abs(pred.probs.sum() - 1.0) < 1e-9
            assert np.all(pred.probs > 0)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            TokenSeq(ids=(), attention_len=0)


class TestLossAndGrads:
    def test_uniform_probs_loss_is_ln2(self):
        params = mm.init_params(tiny_hyper(seed=0)).zeros_like()
        loss, _ = mm.loss_and_grads(params, [(seq(1, 2), Gender.MALE)])
        assert abs(loss - math.log(2)) < 1e-12

    def test_duplicated_batch_invariance(self):
        params = mm.init_params(tiny_hyper(seed=3))
        batch = [(seq(1, 2), Gender.MALE), (seq(3, 4, 5), Gender.FEMALE)]
        loss1, g1 = mm.loss_and_grads(params, batch)
        loss2, g2 = mm.loss_and_grads(params, batch + batch)
        assert abs(loss1 - loss2) < 1e-12
        for (_, a), (_, b) in zip(g1.arrays(), g2.arrays()):
            assert np.allclose(a, b, atol=1e-12)

    def test_pad_gradient_zero(self):
        params = mm.init_params(tiny_hyper(seed=3))
        _, grads = mm.loss_and_grads(params, [(seq(1, 2), Gender.MALE)])
        assert np.all(grads.E[PAD_ID] == 0.0)

    def test_empty_batch_rejected(self):
        params = mm.init_params(tiny_hyper(seed=3))
        with pytest.raises(ValueError):
            mm.loss_and_grads(params, [])

    def test_gradients_match_finite_differences_toy(self):
        # ~22 parameters: vocab 3, embed 2, hidden 2
        hyper = tiny_hyper(vocab_size=3, seed=7)
        params = mm.init_params(hyper)
        batch = [(seq(1, 2), Gender.MALE), (seq(2, 1, 1), Gender.FEMALE)]
        _, analytic = mm.loss_and_grads(params, batch)
        numeric = fd_gradients(params, batch)
        assert max_rel_error(flatten_params(analytic), numeric) < 1e-4

    def test_gradients_match_finite_differences_random(self):
        rng = np.random.default_rng(12)
        for trial in range(5):
            vocab_size = int(rng.integers(3, 8))
            hyper = tiny_hyper(vocab_size=vocab_size,
                               embed_dim=int(rng.integers(2, 5)),
                               hidden_dim=int(rng.integers(2, 5)), seed=trial)
            params = mm.init_params(hyper)
            batch = [(seq(*rng.integers(1, vocab_size, size=rng.integers(1, 5))),
                      Gender.MALE if rng.random() < 0.5 else Gender.FEMALE)
                     for _ in range(3)]
            _, analytic = mm.loss_and_grads(params, batch)
            numeric = fd_gradients(params, batch)
            assert max_rel_error(flatten_params(analytic), numeric) < 1e-4


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        hyper = tiny_hyper(lr=0.05)
        params = mm.init_params(hyper, seed=0)
        grads = params.zeros_like()
        grads.W1 = np.full_like(params.W1, 2.5)  # any nonzero constant
        state = mm.AdamState(m=params.zeros_like(), v=params.zeros_like())
        updated, _ = mm.adam_step(params, grads, state, hyper, t=1)
        delta = np.abs(updated.W1 - params.W1)
        assert np.allclose(delta, hyper.lr, rtol=1e-6)

    def test_zero_gradient_keeps_params(self):
        hyper = tiny_hyper()
        params = mm.init_params(hyper, seed=0)
        state = mm.AdamState(m=params.zeros_like(), v=params.zeros_like())
        current = params
        for t in range(1, 6):
            current, state = mm.adam_step(current, params.zeros_like(), state, hyper, t)
        for (_, a), (_, b) in zip(current.arrays(), params.arrays()):
            assert np.array_equal(a, b)

    def test_two_step_trace_matches_hand_computation(self):
        # scalar parameter, g1 = +1 then g2 = -1, lr = 0.1
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        hyper = tiny_hyper(lr=lr)
        params = mm.init_params(hyper, seed=0).zeros_like()
        state = mm.AdamState(m=params.zeros_like(), v=params.zeros_like())

        def grad_with_b2(value):
            g = params.zeros_like()
            g.b2 = np.array([value, 0.0])
            return g

        p1, state = mm.adam_step(params, grad_with_b2(1.0), state, hyper, t=1)
        p2, state = mm.adam_step(p1, grad_with_b2(-1.0), state, hyper, t=2)

        # independent arithmetic oracle for the same recurrence
        m1 = (1 - b1) * 1.0
        v1 = (1 - b2) * 1.0
        x1 = 0.0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
        m2 = b1 * m1 + (1 - b1) * -1.0
        v2 = b2 * v1 + (1 - b2) * 1.0
        x2 = x1 - lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
        assert p1.b2[0] == pytest.approx(x1, abs=1e-15)
        assert p2.b2[0] == pytest.approx(x2, abs=1e-15)
        assert x2 == pytest.approx(-0.0947368416, abs=1e-9)

    def test_step_index_validated(self):
        hyper = tiny_hyper()
        params = mm.init_params(hyper, seed=0)
        state = mm.AdamState(m=params.zeros_like(), v=params.zeros_like())
        with pytest.raises(ValueError):
            mm.adam_step(params, params.zeros_like(), state, hyper, t=0)


def cue_documents(n_per_class, vocab, granularity=Granularity.UTTERANCE, offset=0):
    docs = []
    for i in range(n_per_class):
        docs.append(Document(doc_id=f"m{i+offset}", play_name="p", char_id=f"m{i+offset}",
                             granularity=granularity, act=1, scene=0,
                             text="norte sur norte", gold_gender=Gender.MALE,
                             word_count=3))
        docs.append(Document(doc_id=f"f{i+offset}", play_name="p", char_id=f"f{i+offset}",
                             granularity=granularity, act=1, scene=0,
                             text="este oeste este", gold_gender=Gender.FEMALE,
                             word_count=3))
    return docs


@pytest.fixture(scope="module")
def cue_vocab():
    return train_bpe(["norte sur este oeste"] * 2, vocab_size=64)


class TestTrain:
    def test_learns_separable_cues(self, cue_vocab):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=8, hidden_dim=8,
                         max_len=8, lr=0.05, batch_size=4, max_epochs=20,
                         patience=20, seed=0)
        ckpt = mm.train(cue_documents(12, cue_vocab), cue_documents(4, cue_vocab, offset=50),
                        cue_vocab, hyper)
        assert ckpt.val_macro_f1 >= 0.95

    def test_patience_zero_trains_one_epoch(self, cue_vocab, caplog):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=4, hidden_dim=4,
                         max_len=8, batch_size=4, max_epochs=10, patience=0, seed=0)
        with caplog.at_level(logging.INFO, logger="dramagender.model"):
            ckpt = mm.train(cue_documents(4, cue_vocab), cue_documents(2, cue_vocab, offset=50),
                            cue_vocab, hyper)
        epochs = [r for r in caplog.records if r.message.startswith("epoch")]
        assert len(epochs) == 1
        assert ckpt.best_epoch == 1

    def test_deterministic(self, cue_vocab):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=4, hidden_dim=4,
                         max_len=8, batch_size=4, max_epochs=6, patience=6, seed=11)
        a = mm.train(cue_documents(6, cue_vocab), cue_documents(2, cue_vocab, offset=50),
                     cue_vocab, hyper)
        b = mm.train(cue_documents(6, cue_vocab), cue_documents(2, cue_vocab, offset=50),
                     cue_vocab, hyper)
        assert a.best_epoch == b.best_epoch
        assert a.val_macro_f1 == b.val_macro_f1
        for (_, x), (_, y) in zip(a.params.arrays(), b.params.arrays()):
            assert np.array_equal(x, y)

    def test_first_epoch_reduces_loss(self, cue_vocab):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=8, hidden_dim=8,
                         max_len=8, lr=0.05, batch_size=4, max_epochs=1,
                         patience=1, seed=2)
        train_set = mm.encode_documents(cue_documents(12, cue_vocab), cue_vocab, 8)
        params = mm.init_params(hyper)
        initial_loss, _ = mm.loss_and_grads(params, train_set)
        state = mm.AdamState(m=params.zeros_like(), v=params.zeros_like())
        order = np.random.default_rng(hyper.seed).permutation(len(train_set))
        losses = []
        t = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train_set[i] for i in order[start: start + hyper.batch_size]]
            loss, grads = mm.loss_and_grads(params, batch)
            t += 1
            params, state = mm.adam_step(params, grads, state, hyper, t)
            losses.append(loss)
        assert np.mean(losses) < initial_loss

    def test_empty_train_set_rejected(self, cue_vocab):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=4, hidden_dim=4, max_len=8)
        with pytest.raises(ValueError):
            mm.train([], cue_documents(2, cue_vocab), cue_vocab, hyper)


class TestCheckpoint:
    def make_ckpt(self, cue_vocab):
        hyper = mm.Hyper(vocab_size=len(cue_vocab), embed_dim=4, hidden_dim=4,
                         max_len=8, batch_size=4, max_epochs=2, patience=2, seed=1)
        return mm.train(cue_documents(4, cue_vocab), cue_documents(2, cue_vocab, offset=50),
                        cue_vocab, hyper)

    def test_roundtrip(self, tmp_path, cue_vocab):
        ckpt = self.make_ckpt(cue_vocab)
        path = tmp_path / "m.ckpt"
        mm.save_checkpoint(ckpt, path)
        loaded = mm.load_checkpoint(path, cue_vocab)
        for (_, a), (_, b) in zip(loaded.params.arrays(), ckpt.params.arrays()):
            assert np.array_equal(a, b.astype(np.float32).astype(np.float64))
        assert loaded.best_epoch == ckpt.best_epoch
        assert loaded.vocab_digest == ckpt.vocab_digest
        assert loaded.hyper == ckpt.hyper

    def test_digest_mismatch(self, tmp_path, cue_vocab):
        ckpt = self.make_ckpt(cue_vocab)
        path = tmp_path / "m.ckpt"
        mm.save_checkpoint(ckpt, path)
        other = Vocab(id_to_token=list(SPECIALS) + ["x"], merges=[])
        with pytest.raises(mm.DigestMismatchError):
            mm.load_checkpoint(path, other)

    def test_truncated_file(self, tmp_path, cue_vocab):
        ckpt = self.make_ckpt(cue_vocab)
        path = tmp_path / "m.ckpt"
        mm.save_checkpoint(ckpt, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(mm.TruncatedCheckpointError):
            mm.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, cue_vocab):
        ckpt = self.make_ckpt(cue_vocab)
        path = tmp_path / "m.ckpt"
        mm.save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(mm.VersionMismatchError):
            mm.load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(mm.CheckpointError):
            mm.load_checkpoint(path)
