"""Stage II: canonical lines -> two-turn conversation records.

Conversation JSON lines look like::

    {"id": ..., "image": ..., "width": W, "height": H,
     "conversations": [{"from": "human", "value": "<image>\\n..."},
                       {"from": "gpt", "value": "<box2d>...</box3d>"}]}
"""

from __future__ import annotations

import enum
import hashlib
import json
import random
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .codec import DEFAULT_POLICY, NO_OBJECT, SerializationPolicy, encode_scene
from .curation.records import CanonicalLine, InstanceRecord
from .geometry import CameraIntrinsics, quantize2d
from .negatives import NegativeStub

IMAGE_TOKEN = "<image>\n"
PRETRAIN_NEGATIVES = 10


@lru_cache(maxsize=None)
def default_templates() -> dict:
    text = resources.files("cos3d").joinpath("data/prompts.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_templates(path: Optional[str] = None) -> dict:
    if path is None:
        return default_templates()
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _rng(seed: int, key: str) -> random.Random:
    h = hashlib.sha256(f"{seed}\x1f{key}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(h[:8], "big"))


@dataclass
class Conversation:
    id: str
    image: str
    turns: list[tuple[str, str]]
    width: Optional[int] = None
    height: Optional[int] = None

    @property
    def prompt(self) -> str:
        return self.turns[0][0]

    @property
    def response(self) -> str:
        return self.turns[0][1]

    def to_dict(self) -> dict:
        msgs = []
        for i, (human, gpt) in enumerate(self.turns):
            msgs.append({"from": "human", "value": (IMAGE_TOKEN if i == 0 else "") + human})
            msgs.append({"from": "gpt", "value": gpt})
        out = {"id": self.id, "image": self.image}
        if self.width is not None:
            out["width"] = self.width
            out["height"] = self.height
        out["conversations"] = msgs
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: dict) -> "Conversation":
        msgs = obj["conversations"]
        turns = []
        for human, gpt in zip(msgs[0::2], msgs[1::2]):
            value = human["value"]
            if not turns and value.startswith(IMAGE_TOKEN):
                value = value[len(IMAGE_TOKEN):]
            turns.append((value, gpt["value"]))
        return cls(obj["id"], obj.get("image", ""), turns, obj.get("width"), obj.get("height"))


def package_detection(line: CanonicalLine, policy: SerializationPolicy = DEFAULT_POLICY,
                      templates: Optional[dict] = None, seed: int = 0) -> Conversation:
    templates = templates or default_templates()
    conv_id = f"det:{line.image_path}:{line.category}"
    prompt = _rng(seed, conv_id).choice(templates["detection"]).format(category=line.category)
    response = encode_scene(line.instances, policy, line.intrinsics)
    return Conversation(conv_id, line.image_path, [(prompt, response)],
                        line.image_width, line.image_height)


def package_negative(stub: NegativeStub, width: Optional[int] = None, height: Optional[int] = None,
                     templates: Optional[dict] = None, seed: int = 0) -> Conversation:
    """Same prompt family as positives; the answer is the sentinel."""
    templates = templates or default_templates()
    conv_id = f"neg:{stub.image_path}:{stub.category}"
    prompt = _rng(seed, conv_id).choice(templates["detection"]).format(category=stub.category)
    return Conversation(conv_id, stub.image_path, [(prompt, NO_OBJECT)], width, height)


class Horizontal(enum.Enum):
    LEFT = "left"
    CENTER = "center"
    RIGHT = "right"


class Range(enum.Enum):
    CLOSE = "close"
    MEDIUM = "medium"
    FAR = "far"


def spatial_qualifier(instance: InstanceRecord, cam: CameraIntrinsics,
                      scene_depths: Sequence[float]) -> tuple[Horizontal, Range]:
    """Image-thirds position of the 2D center, depth against scene terciles.

    Scenes with fewer than three instances fall back to: close iff depth is
    below the median, otherwise far (so a lone instance is far).
    """
    x1, _, x2, _ = instance.box2d_px
    cx = (x1 + x2) / 2.0
    if cx < cam.width / 3.0:
        horizontal = Horizontal.LEFT
    elif cx < 2.0 * cam.width / 3.0:
        horizontal = Horizontal.CENTER
    else:
        horizontal = Horizontal.RIGHT
    depths = np.asarray(scene_depths, dtype=float)
    d = instance.depth
    if len(depths) < 3:
        rng = Range.CLOSE if d < float(np.median(depths)) else Range.FAR
    else:
        lo, hi = np.quantile(depths, [1.0 / 3.0, 2.0 / 3.0])
        if d < lo:
            rng = Range.CLOSE
        elif d < hi:
            rng = Range.MEDIUM
        else:
            rng = Range.FAR
    return horizontal, rng


_HORIZONTAL_PHRASE = {
    Horizontal.LEFT: "on the left",
    Horizontal.CENTER: "in the center",
    Horizontal.RIGHT: "on the right",
}
_RANGE_PHRASE = {
    Range.CLOSE: "close to the camera",
    Range.MEDIUM: "at medium distance from the camera",
    Range.FAR: "far from the camera",
}


def describe_target(category: str, horizontal: Horizontal, rng: Range) -> str:
    return f"{category} {_HORIZONTAL_PHRASE[horizontal]}, {_RANGE_PHRASE[rng]}"


class GroundingMode(enum.Enum):
    CATEGORY_ONLY = "category"
    CATEGORY_PLUS_LOCATION = "category_location"


def package_grounding(line: CanonicalLine, target_index: int,
                      mode: GroundingMode = GroundingMode.CATEGORY_ONLY,
                      policy: SerializationPolicy = DEFAULT_POLICY, seed: int = 0,
                      templates: Optional[dict] = None,
                      scene_depths: Optional[Sequence[float]] = None) -> Conversation:
    if not 0 <= target_index < len(line.instances):
        raise IndexError(f"target index {target_index} out of range for {len(line.instances)} instances")
    templates = templates or default_templates()
    target = line.instances[target_index]
    if mode is GroundingMode.CATEGORY_ONLY:
        description = line.category
    else:
        depths = line.depths if scene_depths is None else scene_depths
        description = describe_target(line.category, *spatial_qualifier(target, line.intrinsics, depths))
    conv_id = f"grd:{line.image_path}:{line.category}:{target_index}:{mode.value}"
    prompt = _rng(seed, conv_id).choice(templates["grounding"]).format(description=description)
    response = encode_scene([target], policy, line.intrinsics)
    return Conversation(conv_id, line.image_path, [(prompt, response)],
                        line.image_width, line.image_height)


def build_annotation_job(line: CanonicalLine, target_index: int,
                         templates: Optional[dict] = None) -> dict:
    """Job record for the external referring-expression annotator (not called here)."""
    if not 0 <= target_index < len(line.instances):
        raise IndexError(f"target index {target_index} out of range for {len(line.instances)} instances")
    templates = templates or default_templates()
    target = line.instances[target_index]
    return {
        "image": line.image_path,
        "bbox_px": [float(v) for v in target.box2d_px],
        "category": line.category,
        "instructions": templates["annotation_instructions"].format(category=line.category),
    }


def format_2d_boxes(boxes: Sequence[Sequence[int]]) -> str:
    return ", ".join("[" + ", ".join(str(int(v)) for v in b) + "]" for b in boxes)


def package_2d_pretraining(image_path: str, annotations: Sequence[tuple[str, Sequence[float]]],
                           cam: CameraIntrinsics, vocabulary: Sequence[str], seed: int = 0,
                           num_negatives: int = PRETRAIN_NEGATIVES,
                           templates: Optional[dict] = None) -> Conversation:
    """Multi-turn 2D dialogue: one turn per present category plus sampled absent ones.

    Boxes within a turn are ordered left to right; if the vocabulary has
    fewer absent categories than ``num_negatives``, all of them are used.
    """
    templates = templates or default_templates()
    by_cat: dict[str, list[tuple[int, int, int, int]]] = {}
    for cat, px in annotations:
        by_cat.setdefault(cat, []).append(quantize2d(px, cam))
    conv_id = f"p2d:{image_path}"
    absent = sorted(set(vocabulary) - set(by_cat))
    negs = _rng(seed, conv_id).sample(absent, min(num_negatives, len(absent)))
    turns = []
    for cat in sorted(by_cat):
        boxes = sorted(by_cat[cat], key=lambda b: (b[0], b[1]))
        turns.append((templates["pretrain_2d"].format(c=cat), format_2d_boxes(boxes)))
    for cat in negs:
        turns.append((templates["pretrain_2d"].format(c=cat), templates["pretrain_2d_none"]))
    return Conversation(conv_id, image_path, turns, cam.width, cam.height)
