"""Zero-shot split tooling: stratified half-splitting of classes by shape
group and dataset tagging.

Group assignments are an input (JSON object mapping group name to class-name
list); the semantic clustering that produces them is out of scope here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagery import DatasetIndex


@dataclass
class ClassGrouping:
    groups: dict  # group name -> list of class names

    def __post_init__(self):
        seen = set()
        for name, classes in self.groups.items():
            if not classes:
                raise ValueError(f"group {name!r} is empty")
            dup = seen & set(classes)
            if dup:
                raise ValueError(f"classes {sorted(dup)} appear in multiple groups")
            seen |= set(classes)

    @classmethod
    def from_json(cls, path) -> "ClassGrouping":
        return cls(groups=json.loads(Path(path).read_text()))

    @property
    def all_classes(self) -> list:
        out = []
        for classes in self.groups.values():
            out.extend(classes)
        return sorted(out)


@dataclass
class ZeroShotSplit:
    seen: list
    unseen: list
    seed: int

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen overlap")

    def to_json(self) -> str:
        return json.dumps(
            {"seen": sorted(self.seen), "unseen": sorted(self.unseen), "seed": self.seed},
            indent=2,
            sort_keys=True,
        )


def stratified_split(grouping: ClassGrouping, seed: int) -> ZeroShotSplit:
    """Per group, draw floor(n/2) classes uniformly without replacement into
    seen; odd remainders go to unseen. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    seen, unseen = [], []
    for name in sorted(grouping.groups):
        classes = sorted(grouping.groups[name])
        if len(classes) < 2:
            raise ValueError(f"group {name!r} needs at least 2 classes to split")
        order = rng.permutation(len(classes))
        half = len(classes) // 2
        seen.extend(classes[i] for i in order[:half])
        unseen.extend(classes[i] for i in order[half:])
    return ZeroShotSplit(seen=sorted(seen), unseen=sorted(unseen), seed=seed)


def tag_dataset(index: DatasetIndex, split: ZeroShotSplit) -> dict:
    """Tag every frame train-eligible (all object classes seen) or test-only
    (at least one unseen object). Updates index.split_tags in place and
    returns the tag counts."""
    seen = set(split.seen)
    unseen = set(split.unseen)
    counts = {"train-eligible": 0, "test-only": 0}
    for fid in index.frame_ids:
        entry = index.entries[fid]
        if entry.class_path is None:
            raise ValueError(f"frame {fid!r} has no class file; cannot tag")
        classes = set(json.loads(entry.class_path.read_text()).values())
        unknown = classes - seen - unseen
        if unknown:
            raise ValueError(f"frame {fid!r}: classes {sorted(unknown)} not in the split")
        tag = "test-only" if classes & unseen else "train-eligible"
        index.split_tags[fid] = tag
        counts[tag] += 1
    index.meta["zero_shot_split"] = {"seen": sorted(seen), "unseen": sorted(unseen), "seed": split.seed}
    return counts
