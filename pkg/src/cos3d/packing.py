"""Token budgeting: dynamic tiling per image and online packing into fixed windows."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Optional, Sequence

CONTEXT_BUDGET = 16384
TILE_SIZE = 448
MIN_TILES = 1
MAX_TILES = 12
PER_TILE_TOKENS = 256
FRAME_MARKERS = 2  # image start/end tokens around the visual block

_WORD_OR_PUNCT = re.compile(r"\w+|[^\w\s]")

TextEstimator = Callable[[str], int]


def approx_text_tokens(text: str) -> int:
    """Whitespace/punctuation approximation; plug in a real tokenizer for exact counts."""
    return len(_WORD_OR_PUNCT.findall(text))


@dataclass(frozen=True)
class Tiling:
    cols: int
    rows: int
    thumbnail: bool

    @property
    def tiles(self) -> int:
        return self.cols * self.rows

    @property
    def images(self) -> int:
        return self.tiles + int(self.thumbnail)


def select_tiling(width: int, height: int, tile_size: int = TILE_SIZE,
                  min_tiles: int = MIN_TILES, max_tiles: int = MAX_TILES) -> Tiling:
    """Grid whose aspect ratio is closest to the image's.

    Among grids tied on aspect, a larger grid is taken only when the image
    covers more than half of its pixel area (no blowing small images up
    into many tiles); remaining ties go to more columns.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    if not 1 <= min_tiles <= max_tiles:
        raise ValueError("need 1 <= min_tiles <= max_tiles")
    aspect = Fraction(int(width), int(height))
    grids = [(c, r) for c in range(1, max_tiles + 1) for r in range(1, max_tiles // c + 1)
             if c * r >= min_tiles]
    best_diff = min(abs(Fraction(c, r) - aspect) for c, r in grids)
    tied = [(c, r) for c, r in grids if abs(Fraction(c, r) - aspect) == best_diff]
    smallest = min(c * r for c, r in tied)
    area = int(width) * int(height)
    eligible = [(c, r) for c, r in tied
                if c * r == smallest or 2 * area > tile_size * tile_size * c * r]
    c, r = max(eligible, key=lambda g: (g[0] * g[1], g[0]))
    return Tiling(c, r, c * r > 1)


def conversation_text(conv) -> str:
    """Concatenated turn text of a ``Conversation`` or its dict form."""
    if isinstance(conv, dict):
        return "\n".join(m["value"] for m in conv["conversations"])
    return "\n".join(h + "\n" + g for h, g in conv.turns)


def token_count(conv, tiling: Optional[Tiling] = None, per_tile_tokens: int = PER_TILE_TOKENS,
                estimator: TextEstimator = approx_text_tokens) -> int:
    text = estimator(conversation_text(conv))
    if tiling is None:
        return text
    return per_tile_tokens * tiling.images + FRAME_MARKERS + text


@dataclass
class PackedSample:
    pack_id: int
    members: list[str] = field(default_factory=list)
    boundaries: list[tuple[int, int]] = field(default_factory=list)
    total_tokens: int = 0
    oversized: bool = False

    def to_json(self) -> str:
        obj = {
            "pack_id": self.pack_id,
            "members": [{"id": m, "token_start": s, "token_end": e}
                        for m, (s, e) in zip(self.members, self.boundaries)],
            "total_tokens": self.total_tokens,
        }
        if self.oversized:
            obj["oversized"] = True
        return json.dumps(obj)

    @classmethod
    def from_dict(cls, obj: dict) -> "PackedSample":
        members = obj["members"]
        return cls(obj["pack_id"], [m["id"] for m in members],
                   [(m["token_start"], m["token_end"]) for m in members],
                   obj["total_tokens"], bool(obj.get("oversized", False)))


def pack_stream(items: Iterable[tuple[str, int]], budget: int = CONTEXT_BUDGET,
                diagnostics: Optional[list] = None) -> Iterator[PackedSample]:
    """Greedy first-fit over ``(id, token_length)`` in arrival order.

    An item longer than ``budget`` is flushed alone with ``oversized`` set and
    a diagnostic string appended; it is never truncated.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    pack_id = 0
    cur = PackedSample(pack_id)
    for item_id, n in items:
        if n < 0:
            raise ValueError(f"negative token length for {item_id!r}")
        if n > budget:
            if cur.members:
                yield cur
                pack_id += 1
            if diagnostics is not None:
                diagnostics.append(f"{item_id}: {n} tokens exceed budget {budget}; emitted unpacked")
            yield PackedSample(pack_id, [item_id], [(0, n)], n, oversized=True)
            pack_id += 1
            cur = PackedSample(pack_id)
            continue
        if cur.total_tokens + n > budget:
            yield cur
            pack_id += 1
            cur = PackedSample(pack_id)
        cur.members.append(item_id)
        cur.boundaries.append((cur.total_tokens, cur.total_tokens + n))
        cur.total_tokens += n
    if cur.members:
        yield cur


def check_pack(pack: PackedSample, budget: int = CONTEXT_BUDGET) -> list[str]:
    problems = []
    pos = 0
    for s, e in pack.boundaries:
        if s != pos or e < s:
            problems.append(f"pack {pack.pack_id}: gap or overlap at {s}")
        pos = e
    if pos != pack.total_tokens:
        problems.append(f"pack {pack.pack_id}: boundaries end at {pos}, total {pack.total_tokens}")
    if pack.total_tokens > budget and not pack.oversized:
        problems.append(f"pack {pack.pack_id}: {pack.total_tokens} > {budget}")
    return problems


def pack_lengths(lengths: Sequence[int], budget: int = CONTEXT_BUDGET) -> list[list[int]]:
    """Index groups for a plain list of lengths."""
    return [[int(m) for m in p.members]
            for p in pack_stream(((str(i), n) for i, n in enumerate(lengths)), budget)]
