"""No-match supervision: absent-category queries answered with the sentinel.

Per image, up to ``max_per_image`` absent categories are drawn; a share of the
draws comes from proximity-ranked neighbors of the present categories (hard
negatives), the rest uniformly.  A corpus-level cap keeps negatives at most
``max_fraction`` of all examples.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .codec import NO_OBJECT


@dataclass(frozen=True)
class NegativeSpec:
    max_fraction: float = 0.10
    max_per_image: int = 2
    hard_negative_share: float = 0.5
    proximity: Mapping[str, Sequence[str]] = field(default_factory=dict)
    seed: int = 0


@dataclass(frozen=True)
class NegativeStub:
    image_path: str
    category: str
    hard: bool
    response: str = NO_OBJECT

    def to_json(self) -> str:
        return json.dumps({"image_path": self.image_path, "category_name": self.category,
                           "hard": self.hard, "response": self.response})

    @classmethod
    def from_dict(cls, obj: dict) -> "NegativeStub":
        return cls(obj["image_path"], obj["category_name"], bool(obj.get("hard", False)),
                   obj.get("response", NO_OBJECT))


def _digest(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


def image_rng(seed: int, image_path: str) -> random.Random:
    """Per-image generator: independent of processing order."""
    return random.Random(_digest(seed, image_path))


def load_proximity_table(path) -> dict[str, list[str]]:
    """Read ``category<TAB>neighbor1,neighbor2,...`` lines ('#' starts a comment)."""
    table: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cat, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected a tab after the category")
            table[cat.strip()] = [n.strip() for n in rest.split(",") if n.strip()]
    return table


def sample_image_negatives(image_path: str, present: Iterable[str], vocabulary: Sequence[str],
                           spec: NegativeSpec) -> list[NegativeStub]:
    present = set(present)
    candidates = sorted(set(vocabulary) - present)
    n = min(spec.max_per_image, len(candidates))
    if n == 0:
        return []
    rng = image_rng(spec.seed, image_path)
    n_hard = min(n, math.floor(n * spec.hard_negative_share + 0.5))
    hard_pool: list[str] = []
    for cat in sorted(present):
        for nb in spec.proximity.get(cat, ()):
            if nb in candidates and nb not in hard_pool:
                hard_pool.append(nb)
    hard = rng.sample(hard_pool, min(n_hard, len(hard_pool)))
    rest = [c for c in candidates if c not in hard]
    easy = rng.sample(rest, n - len(hard))
    return ([NegativeStub(image_path, c, True) for c in hard]
            + [NegativeStub(image_path, c, False) for c in easy])


def negative_cap(num_positives: int, max_fraction: float) -> int:
    """Largest n with n <= max_fraction * (num_positives + n)."""
    if max_fraction >= 1.0:
        raise ValueError("max_fraction must be < 1")
    n = math.floor(max_fraction * num_positives / (1.0 - max_fraction) + 1e-9)
    while n > 0 and n > max_fraction * (num_positives + n) + 1e-12:
        n -= 1
    return max(0, n)


def sample_negatives(images: Mapping[str, Iterable[str]], vocabulary: Sequence[str],
                     spec: NegativeSpec, num_positives: Optional[int] = None) -> list[NegativeStub]:
    """Sample negatives for ``{image_path: present categories}``.

    ``num_positives`` defaults to the number of (image, category) pairs.  When
    the per-image draws exceed the corpus cap, the stubs with the smallest
    seeded hash survive, which keeps the result independent of input order.
    """
    present = {img: set(cats) for img, cats in images.items()}
    if num_positives is None:
        num_positives = sum(len(c) for c in present.values())
    stubs: list[NegativeStub] = []
    for img in sorted(present):
        stubs += sample_image_negatives(img, present[img], vocabulary, spec)
    cap = negative_cap(num_positives, spec.max_fraction)
    if len(stubs) > cap:
        keep = set(sorted(range(len(stubs)),
                          key=lambda i: _digest(spec.seed, "cap", stubs[i].image_path,
                                                stubs[i].category))[:cap])
        stubs = [s for i, s in enumerate(stubs) if i in keep]
    return stubs


def audit_negatives(stubs: Sequence[NegativeStub], images: Mapping[str, Iterable[str]],
                    num_positives: int, spec: NegativeSpec) -> list[str]:
    """Problems with a negative set; empty when every cap and exclusion holds."""
    problems = []
    per_image: dict[str, int] = {}
    for s in stubs:
        per_image[s.image_path] = per_image.get(s.image_path, 0) + 1
        if s.category in set(images.get(s.image_path, ())):
            problems.append(f"{s.image_path}: negative {s.category!r} is present")
    for img, k in per_image.items():
        if k > spec.max_per_image:
            problems.append(f"{img}: {k} negatives > {spec.max_per_image}")
    total = num_positives + len(stubs)
    if total and len(stubs) > spec.max_fraction * total + 1e-12:
        problems.append(f"{len(stubs)} negatives exceed {spec.max_fraction:.0%} of {total}")
    return problems
