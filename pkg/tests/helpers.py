"""Shared test helpers."""

from dramagender.tei import Act, Character, Gender, Play, StageDirection, Utterance


def build_play(name: str, cast: list[tuple[str, str, Gender]],
               acts: list[list]) -> Play:
    """Construct a Play directly.

    ``cast``: (char_id, display_name, gender) triples. ``acts``: per act a
    list of ("sp", char_id, text) or ("stage", text) items.
    """
    characters = [Character(char_id=cid, display_names=(dn,), gender=g)
                  for cid, dn, g in cast]
    act_objs = []
    for idx, items_spec in enumerate(acts, start=1):
        items = []
        for item in items_spec:
            if item[0] == "sp":
                items.append(Utterance(speaker_id=item[1], text=item[2], act=idx))
            else:
                items.append(StageDirection(text=item[1], position=len(items)))
        act_objs.append(Act(index=idx, items=items))
    return Play(play_name=name, title=name, cast=characters, acts=act_objs)
