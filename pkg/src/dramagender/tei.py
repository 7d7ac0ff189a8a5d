"""TEI-XML play parsing and scene segmentation.

Parses DraCor-flavoured TEI documents into a structured play model: a cast
with gender labels, acts containing utterances and stage directions in
document order. Plays lack formal scene divisions; :func:`segment_scenes`
infers them from stage directions that signal a character entering or
leaving the stage.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

log = logging.getLogger(__name__)

XML_ID = "{http://www.w3.org/XML/1998/namespace}id"

# Standard Golden-Age stage-direction verbs for entrances and exits.
DEFAULT_SCENE_CUE_PATTERN = (
    r"\b(?:sale|salen|éntrase|éntranse|vase|vanse|salga|salgan)\b"
)


class TeiParseError(ValueError):
    """Input is not a well-formed or usable TEI play."""


class MissingCastListError(TeiParseError):
    """The TEI document carries no cast list; the play is rejected."""


class UnknownCharacterError(KeyError):
    """A character id does not occur in the play's cast."""


class Gender(str, enum.Enum):
    MALE = "male"
    FEMALE = "female"
    UNDEFINED = "undefined"


def normalize_text(s: str) -> str:
    """NFC-normalize and collapse all whitespace runs to single spaces."""
    return " ".join(unicodedata.normalize("NFC", s).split())


@dataclass(frozen=True)
class Character:
    char_id: str
    display_names: tuple[str, ...]
    gender: Gender
    role_notes: str = ""


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    text: str
    act: int
    scene: int = 0  # 0 until segment_scenes has run
    word_count: int = -1

    def __post_init__(self):
        if self.word_count < 0:
            object.__setattr__(self, "word_count", len(self.text.split()))


@dataclass(frozen=True)
class StageDirection:
    text: str
    position: int  # ordinal within the act's item list


@dataclass(frozen=True)
class Scene:
    act: int
    index: int
    utterance_span: tuple[int, int]  # [start, end) into the act's utterance sequence
    speakers: frozenset[str]


@dataclass
class Act:
    index: int
    items: list  # Utterance | StageDirection, in document order
    scenes: list[Scene] = field(default_factory=list)

    def utterances(self) -> list[Utterance]:
        return [it for it in self.items if isinstance(it, Utterance)]

    def stage_directions(self) -> list[StageDirection]:
        return [it for it in self.items if isinstance(it, StageDirection)]


@dataclass
class Play:
    play_name: str
    title: str
    cast: list[Character]
    acts: list[Act]
    unresolved_speakers: list[str] = field(default_factory=list)

    def character(self, char_id: str) -> Character:
        for c in self.cast:
            if c.char_id == char_id:
                return c
        raise UnknownCharacterError(char_id)

    def cast_ids(self) -> set[str]:
        return {c.char_id for c in self.cast}

    def utterances(self) -> list[Utterance]:
        return [u for act in self.acts for u in act.utterances()]


@dataclass(frozen=True)
class SegmentationRules:
    """Regex patterns matched against lowercased stage-direction text."""

    patterns: tuple[str, ...] = (DEFAULT_SCENE_CUE_PATTERN,)

    def matches(self, text: str) -> bool:
        low = text.lower()
        return any(re.search(p, low) for p in self.patterns)

    @classmethod
    def from_file(cls, path: Path | str) -> "SegmentationRules":
        """Load patterns from a JSON/YAML file: a list, or {"patterns": [...]}."""
        import yaml

        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            data = data.get("patterns", [])
        if not isinstance(data, list) or not all(isinstance(p, str) for p in data):
            raise ValueError(f"scene rules file {path}: expected a list of regex strings")
        return cls(patterns=tuple(data))


def _local(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


_SKIP_IN_SPEECH = {"speaker", "stage", "note"}


def _speech_text_parts(node: ET.Element) -> list[str]:
    if _local(node.tag) in _SKIP_IN_SPEECH:
        return []
    parts = []
    if node.text:
        parts.append(node.text)
    for child in node:
        parts.extend(_speech_text_parts(child))
        if child.tail:
            parts.append(child.tail)
    return parts


def _map_gender(raw: str | None) -> Gender:
    value = (raw or "").strip().lower()
    if value in {"male", "m"}:
        return Gender.MALE
    if value in {"female", "f"}:
        return Gender.FEMALE
    return Gender.UNDEFINED


def _parse_cast(root: ET.Element, play_name: str) -> list[Character]:
    persons = []
    for elem in root.iter():
        if _local(elem.tag) == "particDesc":
            for sub in elem.iter():
                if _local(sub.tag) in {"person", "personGrp"}:
                    persons.append(sub)
            break
    if not persons:
        raise MissingCastListError(
            f"play {play_name or '<unnamed>'}: no cast list (particDesc) found"
        )
    cast = []
    for person in persons:
        char_id = person.attrib.get(XML_ID, "").strip()
        names = []
        role_notes = ""
        for sub in person:
            tag = _local(sub.tag)
            if tag in {"persName", "name"}:
                name = normalize_text("".join(sub.itertext()))
                if name:
                    names.append(name)
            elif tag == "roleDesc":
                role_notes = normalize_text("".join(sub.itertext()))
        if not char_id:
            char_id = names[0].lower().replace(" ", "-") if names else ""
        if not char_id:
            continue
        gender = _map_gender(person.attrib.get("sex") or person.attrib.get("gender"))
        cast.append(Character(char_id, tuple(names), gender, role_notes))
    if not cast:
        raise MissingCastListError(f"play {play_name or '<unnamed>'}: cast list is empty")
    return cast


def _speaker_id(sp: ET.Element) -> str:
    who = sp.attrib.get("who", "").strip()
    if who:
        return " ".join(tok.lstrip("#") for tok in who.split())
    for child in sp.iter():
        if _local(child.tag) == "speaker":
            return normalize_text("".join(child.itertext())).lower()
    return ""


def _walk_act(elem: ET.Element, act_index: int, items: list) -> None:
    for child in elem:
        tag = _local(child.tag)
        if tag == "sp":
            speaker = _speaker_id(child)
            text = normalize_text(" ".join(_speech_text_parts(child)))
            if speaker and text:
                items.append(Utterance(speaker_id=speaker, text=text, act=act_index))
            # stage directions embedded in a speech are kept as separate items;
            # their position is approximated as following the speech
            for sub in child.iter():
                if _local(sub.tag) == "stage":
                    stext = normalize_text("".join(sub.itertext()))
                    if stext:
                        items.append(StageDirection(text=stext, position=len(items)))
        elif tag == "stage":
            stext = normalize_text("".join(child.itertext()))
            if stext:
                items.append(StageDirection(text=stext, position=len(items)))
        elif tag in {"head", "speaker", "pb", "lb", "note"}:
            continue
        else:
            _walk_act(child, act_index, items)


def parse_play(tei_text: str, play_name: str = "") -> Play:
    """Parse a TEI document into a :class:`Play`.

    Cast genders are mapped from the TEI ``sex`` annotation (male -> Male,
    female -> Female, anything else or absent -> Undefined). Utterance text
    concatenates the verse/prose lines of a speech joined by single spaces.
    Speaker ids that do not resolve to a cast entry are kept on the
    utterances but recorded in ``Play.unresolved_speakers``.
    """
    try:
        root = ET.fromstring(tei_text)
    except ET.ParseError as exc:
        raise TeiParseError(f"play {play_name or '<unnamed>'}: XML parse error: {exc}") from exc

    title = ""
    for elem in root.iter():
        if _local(elem.tag) == "title":
            title = normalize_text("".join(elem.itertext()))
            if title:
                break
    cast = _parse_cast(root, play_name or title)

    act_divs = []
    for elem in root.iter():
        if _local(elem.tag) == "div" and elem.attrib.get("type") == "act":
            act_divs.append(elem)
    acts = []
    if act_divs:
        for ordinal, div in enumerate(act_divs, start=1):
            n = div.attrib.get("n", "")
            index = int(n) if n.isdigit() else ordinal
            items: list = []
            _walk_act(div, index, items)
            if items:
                acts.append(Act(index=index, items=items))
    else:
        # no act divisions: treat the whole body as a single act
        for elem in root.iter():
            if _local(elem.tag) == "body":
                items = []
                _walk_act(elem, 1, items)
                if items:
                    acts.append(Act(index=1, items=items))
                break

    if not play_name:
        play_name = title.lower().replace(" ", "-") or "untitled"

    cast_ids = {c.char_id for c in cast}
    unresolved = sorted(
        {u.speaker_id for act in acts for u in act.utterances() if u.speaker_id not in cast_ids}
    )
    if unresolved:
        log.warning("play %s: %d unresolved speaker ids: %s",
                    play_name, len(unresolved), ", ".join(unresolved[:5]))
    return Play(play_name=play_name, title=title, cast=cast, acts=acts,
                unresolved_speakers=unresolved)


def segment_scenes(play: Play, rules: SegmentationRules | None = None) -> Play:
    """Assign scene indices to every utterance.

    A new scene starts at each stage direction matching an entrance/exit
    rule; consecutive matching directions with no utterance in between
    collapse into one boundary, so scenes are never empty. Scene indices
    restart at 1 for every act. Returns a new Play; the input is untouched.
    """
    rules = rules or SegmentationRules()
    new_acts = []
    for act in play.acts:
        scene_idx = 1
        seen_utterance = False
        new_items: list = []
        assignments: list[int] = []
        for item in act.items:
            if isinstance(item, StageDirection):
                if seen_utterance and rules.matches(item.text):
                    scene_idx += 1
                    seen_utterance = False
                new_items.append(item)
            else:
                new_items.append(replace(item, scene=scene_idx))
                assignments.append(scene_idx)
                seen_utterance = True
        utts = [it for it in new_items if isinstance(it, Utterance)]
        scenes = []
        last = assignments[-1] if assignments else 0
        for s in range(1, last + 1):
            idxs = [i for i, a in enumerate(assignments) if a == s]
            speakers = frozenset(utts[i].speaker_id for i in idxs)
            scenes.append(Scene(act=act.index, index=s,
                                utterance_span=(idxs[0], idxs[-1] + 1), speakers=speakers))
        new_acts.append(Act(index=act.index, items=new_items, scenes=scenes))
    return Play(play_name=play.play_name, title=play.title, cast=list(play.cast),
                acts=new_acts, unresolved_speakers=list(play.unresolved_speakers))


def word_count(character: Character, play: Play) -> int:
    """Total whitespace-separated words across all of the character's utterances."""
    if character.char_id not in play.cast_ids():
        raise UnknownCharacterError(character.char_id)
    return sum(u.word_count for u in play.utterances() if u.speaker_id == character.char_id)


# --- canonical JSON serialization -----------------------------------------

def play_to_dict(play: Play) -> dict:
    acts = []
    for act in play.acts:
        items = []
        for item in act.items:
            if isinstance(item, Utterance):
                items.append({"type": "utterance", "speaker_id": item.speaker_id,
                              "text": item.text, "act": item.act, "scene": item.scene,
                              "word_count": item.word_count})
            else:
                items.append({"type": "stage", "text": item.text, "position": item.position})
        scenes = [{"act": s.act, "index": s.index, "utterance_span": list(s.utterance_span),
                   "speakers": sorted(s.speakers)} for s in act.scenes]
        acts.append({"index": act.index, "items": items, "scenes": scenes})
    return {
        "play_name": play.play_name,
        "title": play.title,
        "cast": [{"char_id": c.char_id, "display_names": list(c.display_names),
                  "gender": c.gender.value, "role_notes": c.role_notes} for c in play.cast],
        "acts": acts,
        "unresolved_speakers": list(play.unresolved_speakers),
    }


def play_from_dict(data: dict) -> Play:
    cast = [Character(c["char_id"], tuple(c["display_names"]), Gender(c["gender"]),
                      c.get("role_notes", "")) for c in data["cast"]]
    acts = []
    for a in data["acts"]:
        items: list = []
        for it in a["items"]:
            if it["type"] == "utterance":
                items.append(Utterance(it["speaker_id"], it["text"], it["act"],
                                       it["scene"], it["word_count"]))
            else:
                items.append(StageDirection(it["text"], it["position"]))
        scenes = [Scene(s["act"], s["index"], tuple(s["utterance_span"]),
                        frozenset(s["speakers"])) for s in a["scenes"]]
        acts.append(Act(index=a["index"], items=items, scenes=scenes))
    return Play(play_name=data["play_name"], title=data["title"], cast=cast, acts=acts,
                unresolved_speakers=list(data.get("unresolved_speakers", [])))


def save_play(play: Play, path: Path | str) -> None:
    Path(path).write_text(json.dumps(play_to_dict(play), ensure_ascii=False, indent=2,
                                     sort_keys=True), encoding="utf-8")


def load_play(path: Path | str) -> Play:
    return play_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
