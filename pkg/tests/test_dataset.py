"""Masking, filtering, document materialization and splits."""

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dramagender import dataset as ds
from dramagender.tei import Gender, segment_scenes
from helpers import build_play


def texts_of(corpus):
    return [u.text for play in corpus for u in play.utterances()]


class TestDetachPunctuation:
    def test_trailing_comma(self):
        assert ds.detach_punctuation("Rosaura, espera") == "Rosaura , espera"

    def test_exclamations(self):
        assert ds.detach_punctuation("¡ay de mí!") == "¡ ay de mí !"

    def test_no_punctuation_unchanged(self):
        assert ds.detach_punctuation("sin cambios aquí") == "sin cambios aquí"


class TestNameMaskList:
    def test_single_play_union(self):
        play = build_play("p", [("r", "Rosaura", Gender.FEMALE),
                                ("s", "Segismundo", Gender.MALE)],
                          [[("sp", "r", "hola")]])
        assert ds.build_name_mask_list([play]) == {"Rosaura", "Segismundo"}

    def test_shared_name_counted_once(self):
        a = build_play("a", [("dj", "Don Juan", Gender.MALE)], [[("sp", "dj", "x")]])
        b = build_play("b", [("dj", "Don Juan", Gender.MALE)], [[("sp", "dj", "y")]])
        names = ds.build_name_mask_list([a, b])
        assert names == {"Don Juan"}

    def test_capitalized_variant_added(self):
        play = build_play("p", [("r", "ROSAURA", Gender.FEMALE)], [[("sp", "r", "x")]])
        assert ds.build_name_mask_list([play]) == {"ROSAURA", "Rosaura"}


def two_play_corpus():
    # "becoquin" occurs only in play a; "viento", "espera", "llega" and the
    # comma occur in both plays; "Rosaura"/"Federico" are cast names
    a = build_play("a", [("r", "Rosaura", Gender.FEMALE), ("f", "Federico", Gender.MALE)],
                   [[("sp", "f", "becoquin trae el viento"),
                     ("sp", "r", "Rosaura, espera"),
                     ("sp", "r", "Federico llega")]])
    b = build_play("b", [("m", "Marcela", Gender.FEMALE)],
                   [[("sp", "m", "el viento vuelve, espera y llega siempre")]])
    return [a, b]


class TestMaskCorpus:
    def test_single_play_token_masked(self):
        corpus = two_play_corpus()
        masked, report = ds.mask_corpus(corpus, ds.build_name_mask_list(corpus))
        assert "becoquin" in report.single_play_tokens
        assert "becoquin" not in " ".join(texts_of(masked))

    def test_name_masked_with_detached_punctuation(self):
        corpus = two_play_corpus()
        masked, _ = ds.mask_corpus(corpus, ds.build_name_mask_list(corpus))
        utt = masked[0].utterances()[1]
        assert utt.text == "[NAME] , espera"
        assert utt.word_count == 3

    def test_word_in_two_plays_unchanged(self):
        corpus = two_play_corpus()
        masked, report = ds.mask_corpus(corpus, ds.build_name_mask_list(corpus))
        assert "viento" not in report.single_play_tokens
        assert "viento" in " ".join(texts_of(masked))

    def test_name_precedence_over_single_play(self):
        # "Federico" is a cast name occurring in one play: must become [NAME],
        # not [MASK]
        corpus = two_play_corpus()
        masked, _ = ds.mask_corpus(corpus, ds.build_name_mask_list(corpus))
        joined = " ".join(texts_of(masked))
        assert "Federico" not in joined
        assert "[NAME] llega" in joined

    def test_multiword_name_sequence_replaced(self):
        a = build_play("a", [("dj", "Don Juan", Gender.MALE)],
                       [[("sp", "dj", "Don Juan llega al alba"),
                         ("sp", "dj", "el alba llega")]])
        b = build_play("b", [("m", "Marcela", Gender.FEMALE)],
                       [[("sp", "m", "llega el alba y Juan duerme")]])
        masked, report = ds.mask_corpus([a, b], ds.build_name_mask_list([a, b]))
        assert masked[0].utterances()[0].text.startswith("[NAME] llega")
        # masking "Don Juan" orphans standalone "Juan" into play b only: the
        # residual sweep must catch it
        joined = " ".join(texts_of(masked))
        assert "Juan" not in joined.split()
        assert "Juan" in report.single_play_tokens

    def test_recount_invariants(self, fixture_corpus):
        masked, report = ds.mask_corpus(fixture_corpus,
                                        ds.build_name_mask_list(fixture_corpus))
        freq = Counter()
        for play in masked:
            types = set()
            for utt in play.utterances():
                types.update(utt.text.split())
            freq.update(types)
        singles = {t for t, n in freq.items() if n == 1 and t not in ds.SPECIAL_TOKENS}
        assert singles == set()
        tokens = {t for play in masked for u in play.utterances() for t in u.text.split()}
        assert tokens & report.masked_names == set()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6),
                    min_size=1, max_size=8),
           st.integers(min_value=2, max_value=4))
    def test_recount_property(self, word_specs, n_plays):
        words = ["".join(w) for w in word_specs]
        plays = []
        for i in range(n_plays):
            text = " ".join(words[i % len(words):] + words[: i % len(words)][:3])
            plays.append(build_play(f"p{i}", [("c", f"Cast{i}", Gender.MALE)],
                                    [[("sp", "c", text)]]))
        masked, _ = ds.mask_corpus(plays, ds.build_name_mask_list(plays))
        freq = Counter()
        for play in masked:
            types = set()
            for utt in play.utterances():
                types.update(utt.text.split())
            freq.update(types)
        assert not {t for t, n in freq.items()
                    if n == 1 and t not in ds.SPECIAL_TOKENS}


class TestFilterCharacters:
    def test_fixture_corpus_counts(self, fixture_corpus):
        kept = ds.filter_characters(fixture_corpus)
        by_gender = Counter(ch.gender for ch, _ in kept)
        assert by_gender[Gender.MALE] == 4
        assert by_gender[Gender.FEMALE] == 3

    def test_threshold_boundary(self, fixture_corpus):
        kept_ids = {ch.char_id for ch, _ in ds.filter_characters(fixture_corpus)}
        assert "criada" in kept_ids  # exactly 30 words: kept
        assert "paje" not in kept_ids  # 29 words: "less than 30" removed

    def test_undefined_gender_excluded_despite_words(self):
        text = " ".join(f"w{i}" for i in range(500))
        play = build_play("p", [("coro", "Coro", Gender.UNDEFINED)],
                          [[("sp", "coro", text)]])
        assert ds.filter_characters([play]) == []


class TestCorpusStats:
    def test_single_character(self):
        text = " ".join(f"w{i}" for i in range(40))
        play = build_play("p", [("a", "Alba", Gender.FEMALE)], [[("sp", "a", text)]])
        stats = ds.corpus_stats([play])
        assert stats.characters == {"male": 0, "female": 1}
        assert stats.mean_words["female"] == stats.min_words["female"] == \
            stats.max_words["female"] == 40

    def test_empty_corpus_warns(self, caplog):
        import logging
        with caplog.at_level(logging.WARNING):
            stats = ds.corpus_stats([])
        assert stats.characters == {"male": 0, "female": 0}
        assert any("empty" in rec.message for rec in caplog.records)


def seven_utterance_play():
    """2 characters, 3 scenes, 7 utterances; Bruno is silent in scene 3."""
    play = build_play("fix", [("a", "Alba", Gender.FEMALE), ("b", "Bruno", Gender.MALE)], [[
        ("sp", "a", "uno dos"),
        ("sp", "b", "tres"),
        ("stage", "Vase."),
        ("sp", "a", "cuatro"),
        ("sp", "b", "cinco"),
        ("sp", "b", "seis"),
        ("stage", "Vanse."),
        ("sp", "a", "siete"),
        ("sp", "a", "ocho"),
    ]])
    return segment_scenes(play)


class TestMakeDocuments:
    def test_fixture_counts(self):
        play = seven_utterance_play()
        eligible = ds.eligible_characters([play], min_words=0)
        utt = ds.make_documents([play], "utterance", eligible=eligible)
        scene = ds.make_documents([play], "scene", eligible=eligible)
        char = ds.make_documents([play], "character", eligible=eligible)
        assert len(utt) == 7
        assert len(scene) == 5  # (char, scene) pairs with speech
        assert len(char) == 2

    def test_character_in_four_scenes(self):
        items = []
        for i in range(4):
            if i:
                items.append(("stage", "Vase."))
            items.append(("sp", "a", f"texto{i} texto{i}"))
        play = segment_scenes(build_play("p4", [("a", "Alba", Gender.FEMALE)], [items]))
        eligible = ds.eligible_characters([play], min_words=0)
        assert len(ds.make_documents([play], "scene", eligible=eligible)) == 4
        assert len(ds.make_documents([play], "character", eligible=eligible)) == 1

    def test_character_concatenation(self):
        play = build_play("pc", [("a", "Alba", Gender.FEMALE)],
                          [[("sp", "a", "a b"), ("sp", "a", "c")]])
        docs = ds.make_documents([segment_scenes(play)], "character",
                                 eligible={("pc", "a"): Gender.FEMALE})
        assert docs[0].text == "a b c"
        assert docs[0].act == 0 and docs[0].scene == 0

    def test_word_count_conservation(self, fixture_corpus):
        masked, _ = ds.mask_corpus(fixture_corpus,
                                   ds.build_name_mask_list(fixture_corpus))
        eligible = ds.eligible_characters(fixture_corpus)
        utt = ds.make_documents(masked, "utterance", eligible=eligible)
        char = ds.make_documents(masked, "character", eligible=eligible)
        assert sum(d.word_count for d in utt) == sum(d.word_count for d in char)

    def test_unresolved_speakers_excluded(self):
        play = build_play("ur", [("a", "Alba", Gender.FEMALE)],
                          [[("sp", "a", "hola"), ("sp", "ghost", "boo")]])
        docs = ds.make_documents([segment_scenes(play)], "utterance",
                                 eligible={("ur", "a"): Gender.FEMALE})
        assert [d.char_id for d in docs] == ["a"]

    def test_jsonl_roundtrip(self, tmp_path, fixture_corpus):
        eligible = ds.eligible_characters(fixture_corpus)
        docs = ds.make_documents(fixture_corpus, "scene", eligible=eligible)
        path = tmp_path / "scene.jsonl"
        ds.save_documents(docs, path)
        assert ds.load_documents(path) == docs


class TestSplitCharacters:
    def test_sizes_1515(self):
        chars = [("p", f"c{i}") for i in range(1515)]
        split = ds.split_characters(chars, seed=1)
        assert split.partition_sizes() == {"train": 1212, "test": 151, "validation": 152}

    def test_sizes_10(self):
        split = ds.split_characters([("p", f"c{i}") for i in range(10)], seed=0)
        assert split.partition_sizes() == {"train": 8, "test": 1, "validation": 1}

    def test_deterministic(self):
        chars = [("p", f"c{i}") for i in range(57)]
        assert ds.split_characters(chars, seed=5).assignment == \
            ds.split_characters(chars, seed=5).assignment

    def test_different_seeds_differ(self):
        chars = [("p", f"c{i}") for i in range(57)]
        assert ds.split_characters(chars, seed=5).assignment != \
            ds.split_characters(chars, seed=6).assignment

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            ds.split_characters([("p", "c")], seed=0, ratios=(0.5, 0.2, 0.2))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=3, max_value=400), st.integers(min_value=0, max_value=99))
    def test_partition_properties(self, n, seed):
        chars = [("p", f"c{i}") for i in range(n)]
        split = ds.split_characters(chars, seed=seed)
        assert set(split.assignment) == set(chars)  # exhaustive, disjoint by dict
        sizes = split.partition_sizes()
        assert sum(sizes.values()) == n
        assert sizes["train"] == int(0.8 * n)

    def test_documents_inherit_partition(self, fixture_corpus):
        eligible = ds.eligible_characters(fixture_corpus)
        split = ds.split_characters(sorted(eligible), seed=3)
        docs = ds.make_documents(fixture_corpus, "utterance", eligible=eligible)
        parts = ds.partition_documents(docs, split)
        for part, part_docs in parts.items():
            for doc in part_docs:
                assert split.assignment[(doc.play_name, doc.char_id)] == part
