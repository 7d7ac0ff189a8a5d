"""Synthetic drama corpus with controllable gender cues.

The generator builds parsed plays whose characters speak from three
disjoint vocabularies: male-cue tokens, female-cue tokens and shared
filler. Each utterance is informative with probability one half;
informative utterances are longer and mix cue tokens with filler, filler
utterances carry no signal at all. Long inputs therefore contain more
cues, reproducing the more-text-is-better pattern, while the filler share
makes naive majority voting noticeably worse than probability-aware
aggregation. Cast names never occur in spoken text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tei import Act, Character, Gender, Play, StageDirection, Utterance, segment_scenes


@dataclass(frozen=True)
class SyntheticSpec:
    n_characters: int = 200
    male_fraction: float = 0.665
    n_plays: int = 8
    utterances_per_char: tuple[int, int] = (8, 26)  # inclusive range
    filler_words: int = 160
    cue_words: int = 30
    cues_per_utterance: tuple[int, int] = (2, 4)
    scene_size: tuple[int, int] = (3, 5)  # utterances per speaker per scene
    # per-character informative share; uniform over this range, mean 0.5, so
    # half of all utterances are uninformative filler while individual
    # characters vary enough that counting votes is unreliable
    informative_share: tuple[float, float] = (0.25, 0.75)
    seed: int = 7


def _vocabularies(spec: SyntheticSpec):
    filler = [f"fill{i:03d}" for i in range(spec.filler_words)]
    male = [f"varon{i:02d}" for i in range(spec.cue_words)]
    female = [f"dama{i:02d}" for i in range(spec.cue_words)]
    return filler, male, female


def _utterance_text(rng, spec: SyntheticSpec, gender: Gender, informative: bool,
                    filler, male_cues, female_cues, cue_override=None) -> str:
    if informative:
        length = int(rng.integers(10, 15))
        n_cues = int(rng.integers(spec.cues_per_utterance[0],
                                  spec.cues_per_utterance[1] + 1))
        cues = cue_override if cue_override is not None else (
            male_cues if gender == Gender.MALE else female_cues)
        words = [str(rng.choice(cues)) for _ in range(n_cues)]
        words += [str(rng.choice(filler)) for _ in range(length - n_cues)]
        rng.shuffle(words)
    else:
        length = int(rng.integers(6, 10))
        words = [str(rng.choice(filler)) for _ in range(length)]
    return " ".join(words)


def _build_play(rng, spec: SyntheticSpec, play_idx: int,
                genders: list[Gender], filler, male_cues, female_cues) -> Play:
    play_name = f"synthetic-play-{play_idx:02d}"
    cast = [Character(char_id=f"p{play_idx:02d}c{i:02d}",
                      display_names=(f"Persona{play_idx:02d}{i:02d}",), gender=g)
            for i, g in enumerate(genders)]
    remaining = {}
    for character in cast:
        lo, hi = spec.utterances_per_char
        n_utts = int(rng.integers(lo, hi + 1))
        share = rng.uniform(*spec.informative_share)
        remaining[character.char_id] = [
            _utterance_text(rng, spec, character.gender, bool(rng.random() < share),
                            filler, male_cues, female_cues)
            for _ in range(n_utts)]

    # scenes are short dialogues between 2-3 characters, so every speaker
    # contributes several utterances per scene
    scenes: list[list[tuple[str, str]]] = []
    while any(remaining.values()):
        present = [c for c, texts in remaining.items() if texts]
        k = min(len(present), int(rng.integers(2, 4)))
        speakers = list(rng.choice(present, size=k, replace=False))
        turns: list[tuple[str, str]] = []
        lo, hi = spec.scene_size
        for speaker in speakers:
            take = min(len(remaining[speaker]), int(rng.integers(lo, hi + 1)))
            for _ in range(take):
                turns.append((speaker, remaining[speaker].pop()))
        rng.shuffle(turns)
        scenes.append(turns)

    n_acts = 3
    per_act = max(1, (len(scenes) + n_acts - 1) // n_acts)
    acts = []
    for act_idx in range(1, n_acts + 1):
        chunk = scenes[(act_idx - 1) * per_act: act_idx * per_act]
        items: list = []
        for scene_turns in chunk:
            if items:
                items.append(StageDirection(text="Vanse.", position=len(items)))
            for speaker, text in scene_turns:
                items.append(Utterance(speaker_id=speaker, text=text, act=act_idx))
        if items:
            acts.append(Act(index=act_idx, items=items))
    play = Play(play_name=play_name, title=f"Synthetic Play {play_idx}", cast=cast,
                acts=acts)
    return segment_scenes(play)


def generate_corpus(spec: SyntheticSpec = SyntheticSpec()) -> list[Play]:
    """Parsed, scene-segmented plays totalling ``spec.n_characters`` characters."""
    rng = np.random.default_rng(spec.seed)
    filler, male_cues, female_cues = _vocabularies(spec)
    n_male = round(spec.n_characters * spec.male_fraction)
    genders = [Gender.MALE] * n_male + [Gender.FEMALE] * (spec.n_characters - n_male)
    rng.shuffle(genders)
    per_play = spec.n_characters // spec.n_plays
    plays = []
    for play_idx in range(spec.n_plays):
        start = play_idx * per_play
        end = start + per_play if play_idx < spec.n_plays - 1 else spec.n_characters
        plays.append(_build_play(rng, spec, play_idx, genders[start:end],
                                 filler, male_cues, female_cues))
    return plays


def make_crossdress_play(spec: SyntheticSpec = SyntheticSpec(), seed: int = 99,
                         n_scenes: int = 10, flagged=(2, 3, 6, 9)):
    """One extra play whose female lead speaks male cues in the flagged scenes.

    Returns (play, crossdress scene list) where the scene list holds
    (act, scene, flagged) triples for the lead character. Scenes are evenly
    split over two acts; scene indices restart per act.
    """
    rng = np.random.default_rng(seed)
    filler, male_cues, female_cues = _vocabularies(spec)
    lead = Character(char_id="xlead", display_names=("Protagonista",), gender=Gender.FEMALE)
    partner = Character(char_id="xpartner", display_names=("Acompanante",),
                        gender=Gender.MALE)
    cast = [lead, partner]

    per_act = (n_scenes + 1) // 2
    acts = []
    scene_flags = []
    global_scene = 0
    for act_idx in (1, 2):
        items: list = []
        local_scene = 0
        while local_scene < per_act and global_scene < n_scenes:
            if items:
                items.append(StageDirection(text="Vase.", position=len(items)))
            local_scene += 1
            global_scene += 1
            is_flagged = global_scene in flagged
            cue = male_cues if is_flagged else female_cues
            for _ in range(3):
                text = _utterance_text(rng, spec, lead.gender, True, filler,
                                       male_cues, female_cues, cue_override=cue)
                items.append(Utterance(speaker_id=lead.char_id, text=text, act=act_idx))
            text = _utterance_text(rng, spec, partner.gender, True, filler,
                                   male_cues, female_cues)
            items.append(Utterance(speaker_id=partner.char_id, text=text, act=act_idx))
            scene_flags.append((act_idx, local_scene, is_flagged))
        acts.append(Act(index=act_idx, items=items))
    play = Play(play_name="synthetic-crossdress", title="Synthetic Crossdress Play",
                cast=cast, acts=acts)
    return segment_scenes(play), scene_flags
