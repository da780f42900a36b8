"""ASD-Text action taxonomy and a fixed bank of gendered caption templates."""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from .errors import ValidationError

HAND, MOUTH, ARMS, BODY = "HAND", "MOUTH", "ARMS", "BODY"
FEMALE, MALE = "FEMALE", "MALE"
GENDERS = (FEMALE, MALE)


@dataclass(frozen=True)
class ActionLabel:
    id: int
    body_part: str
    text: str


_CATALOG = (
    ActionLabel(1, HAND, "Hand raised in the air"),
    ActionLabel(2, HAND, "Hand touching the face"),
    ActionLabel(3, HAND, "Hand raised with object"),
    ActionLabel(4, HAND, "Hand movement (not raised)"),
    ActionLabel(5, MOUTH, "Mouth occlusion with object"),
    ActionLabel(6, MOUTH, "Mouth occlusion with hand"),
    ActionLabel(7, MOUTH, "Mouth move from speech"),
    ActionLabel(8, MOUTH, "Mouth move from expression"),
    ActionLabel(9, MOUTH, "Mouth not moving"),
    ActionLabel(10, ARMS, "Crossed arms"),
    ActionLabel(11, ARMS, "Arms behind back"),
    ActionLabel(12, BODY, "Body in relaxed position"),
    ActionLabel(13, BODY, "Body facing forward"),
    ActionLabel(14, BODY, "Wild body movement"),
)

# {subject} / {pos} are filled per gender: "a woman"/"her", "a man"/"his".
_TEMPLATES = {
    1: ("{Subject} has {pos} hand raised in the air",
        "{Subject} is raising {pos} hand up high",
        "{Subject} holds one hand raised above {pos} head"),
    2: ("{Subject} is touching {pos} face with {pos} hand",
        "{Subject} has a hand resting on {pos} face",
        "{Subject} brings a hand up to touch {pos} cheek"),
    3: ("{Subject} has {pos} hand raised holding an object",
        "{Subject} is lifting an object in {pos} raised hand",
        "{Subject} holds something up with a raised hand"),
    4: ("{Subject} is moving {pos} hands while talking",
        "{Subject} gestures with {pos} hands kept low",
        "{Subject} makes hand movements without raising them"),
    5: ("{Subject} has {pos} mouth covered by an object",
        "{Subject} is holding an object in front of {pos} mouth",
        "An object is hiding the mouth of {subject}"),
    6: ("{Subject} is covering {pos} mouth with {pos} hand",
        "{Subject} has a hand over {pos} mouth",
        "The mouth of {subject} is hidden behind a hand"),
    7: ("{Subject} is speaking with {pos} mouth moving",
        "{Subject} is talking and moving {pos} lips",
        "The mouth of {subject} moves as {pron} speaks"),
    8: ("{Subject} moves {pos} mouth in a facial expression",
        "{Subject} is making a face with {pos} mouth",
        "The mouth of {subject} moves from an expression, not speech"),
    9: ("{Subject} keeps {pos} mouth still",
        "{Subject} is silent with {pos} mouth closed",
        "The mouth of {subject} is not moving"),
    10: ("{Subject} is standing with {pos} arms crossed",
         "{Subject} has {pos} arms folded across {pos} chest",
         "{Subject} crosses {pos} arms"),
    11: ("{Subject} has {pos} arms behind {pos} back",
         "{Subject} is standing with {pos} hands behind {pos} back",
         "{Subject} keeps {pos} arms held behind the back"),
    12: ("{Subject} is standing in a relaxed position",
         "{Subject} has a relaxed body posture",
         "{Subject} looks calm with {pos} body at ease"),
    13: ("{Subject} is facing forward",
         "{Subject} has {pos} body turned towards the camera",
         "{Subject} stands facing the front"),
    14: ("{Subject} is moving {pos} body wildly",
         "{Subject} makes large and energetic body movements",
         "{Subject} is swinging {pos} body around"),
}

_GENDER_WORDS = {
    FEMALE: {"subject": "a woman", "Subject": "A woman", "pos": "her", "pron": "she"},
    MALE: {"subject": "a man", "Subject": "A man", "pos": "his", "pron": "he"},
}

# sha256 over "id|body_part|text" lines of the catalog
CATALOG_SHA256 = "65a0eae36bec77f6183f2ec19955778f992cdb787cedb7d4a3c713fe5ffcdef6"


@dataclass
class CaptionRecord:
    image_id: str
    gender: str
    actions: tuple
    captions: list


def action_catalog() -> list:
    return list(_CATALOG)


def catalog_digest(catalog=None) -> str:
    lines = "\n".join(f"{a.id}|{a.body_part}|{a.text}" for a in (catalog or _CATALOG))
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()


def _action(action) -> ActionLabel:
    if isinstance(action, ActionLabel):
        return action
    try:
        return _CATALOG[int(action) - 1]
    except (IndexError, ValueError, TypeError):
        raise ValidationError(f"unknown action {action!r}") from None


def templates_for(action, gender: str) -> list:
    """The three captions for one (action, gender) pair."""
    act = _action(action)
    if gender not in _GENDER_WORDS:
        raise ValidationError(f"gender must be one of {GENDERS}")
    words = _GENDER_WORDS[gender]
    return [t.format(**words) + "." for t in _TEMPLATES[act.id]]


def template_bank() -> dict:
    return {(a.id, g): templates_for(a, g) for a in _CATALOG for g in GENDERS}


def build_annotations(image_ids, annotations) -> list:
    """One CaptionRecord per image: the templates of every selected action for its gender.

    ``annotations[i]`` is ``(gender, actions)`` for ``image_ids[i]``.
    """
    records = []
    for image_id, (gender, actions) in zip(image_ids, annotations):
        acts = tuple(sorted({_action(a).id for a in actions}))
        if not acts:
            raise ValidationError(f"image {image_id} has no actions")
        captions = [c for a in acts for c in templates_for(a, gender)]
        records.append(CaptionRecord(str(image_id), gender, acts, captions))
    return records


def random_annotations(n_images: int, seed: int, max_actions: int = 3):
    """Seeded stand-in for manual annotation: a gender and 1..max_actions actions per image."""
    rng = random.Random(seed)
    ids = [f"img_{i:05d}" for i in range(n_images)]
    ann = [(rng.choice(GENDERS), rng.sample(range(1, 15), rng.randint(1, max_actions))) for _ in ids]
    return ids, ann


def split_90_10(records, seed: int):
    """Shuffle by seed and cut at ``floor(0.9 * N)``; records sharing an image stay together."""
    records = list(records)
    if len(records) < 10:
        raise ValidationError("need at least 10 records for a 90/10 split")
    images = sorted({r.image_id for r in records})
    random.Random(seed).shuffle(images)
    cut = (9 * len(images)) // 10
    train_ids = set(images[:cut])
    train = [r for r in records if r.image_id in train_ids]
    test = [r for r in records if r.image_id not in train_ids]
    return train, test


def to_coco(records) -> dict:
    """COCO-captions style: ``images`` and ``annotations`` lists."""
    images, annotations = [], []
    for r in records:
        images.append({"id": r.image_id, "gender": r.gender, "actions": list(r.actions)})
        for c in r.captions:
            annotations.append({"id": len(annotations), "image_id": r.image_id, "caption": c})
    return {"images": images, "annotations": annotations}
