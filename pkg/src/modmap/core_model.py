"""Domain types, manifest I/O, and modality-subset bitmask algebra.

A modality subset is an int bitmask: bit ``i`` corresponds to the modality at
index ``i`` of the manifest's modality list. The canonical enumeration order
of subsets is ascending mask value, which fixes feature-vector layout across
runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError

MAX_MODALITIES = 16

SPLIT_NAMES = ("train", "val", "test", "ood")


@dataclass(frozen=True)
class ModalityId:
    index: int
    name: str


@dataclass(frozen=True)
class Instance:
    id: str
    question: str
    options: tuple[str, ...]
    gold_index: int
    tags: tuple[str, ...] = ()


@dataclass
class DatasetManifest:
    modalities: list[ModalityId]
    label_space_size: int
    instances: list[Instance]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def full_mask(self) -> int:
        return (1 << self.n_modalities) - 1

    def instance_map(self) -> dict[str, Instance]:
        return {inst.id: inst for inst in self.instances}

    def modality_by_name(self, name: str) -> ModalityId:
        for m in self.modalities:
            if m.name == name:
                return m
        raise ValidationError(f"unknown modality name: {name!r}")

    def mask_from_names(self, names) -> int:
        mask = 0
        for name in names:
            mask |= 1 << self.modality_by_name(name).index
        return mask

    def names_from_mask(self, mask: int) -> list[str]:
        if not 0 <= mask <= self.full_mask:
            raise ValidationError(f"mask {mask} out of range for {self.n_modalities} modalities")
        return [m.name for m in self.modalities if mask & (1 << m.index)]

    def validate(self):
        M = len(self.modalities)
        if not 1 <= M <= MAX_MODALITIES:
            raise ValidationError(f"modality count {M} outside [1, {MAX_MODALITIES}]")
        names = [m.name for m in self.modalities]
        if len(set(names)) != M:
            raise ValidationError(f"duplicate modality names: {names}")
        for i, m in enumerate(self.modalities):
            if m.index != i:
                raise ValidationError(f"modality {m.name!r} has index {m.index}, expected {i}")
        L = self.label_space_size
        if L < 2:
            raise ValidationError(f"label_space_size must be >= 2, got {L}")
        seen = set()
        for inst in self.instances:
            if inst.id in seen:
                raise ValidationError(f"duplicate instance id: {inst.id!r}")
            seen.add(inst.id)
            if len(inst.options) != L:
                raise ValidationError(
                    f"instance {inst.id!r} has {len(inst.options)} options, expected {L}")
            if not 0 <= inst.gold_index < L:
                raise ValidationError(
                    f"instance {inst.id!r} gold_index {inst.gold_index} outside [0, {L})")
        for split, ids in self.splits.items():
            for iid in ids:
                if iid not in seen:
                    raise ValidationError(f"split {split!r} references unknown id {iid!r}")


@dataclass
class SeedSample:
    """The annotated subset, with its train/val/test/ood partition."""
    instance_ids: list[str]
    partition: dict[str, str]

    def __post_init__(self):
        ids = set(self.instance_ids)
        if set(self.partition) != ids:
            raise ValidationError("seed partition must cover exactly the seed instance ids")
        bad = {p for p in self.partition.values() if p not in SPLIT_NAMES}
        if bad:
            raise ValidationError(f"unknown partition names: {sorted(bad)}")

    def ids_in(self, part: str) -> list[str]:
        return [i for i in self.instance_ids if self.partition[i] == part]


def enumerate_subsets(n_modalities: int) -> list[int]:
    """All 2^M modality-subset masks in ascending (canonical) order."""
    if not 1 <= n_modalities <= MAX_MODALITIES:
        raise ValueError(f"modality count {n_modalities} outside [1, {MAX_MODALITIES}]")
    return list(range(1 << n_modalities))


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def parse_manifest(path) -> DatasetManifest:
    """Read a dataset JSONL file (header line + one instance per line)."""
    path = Path(path)
    header = None
    instances = []
    splits: dict[str, list[str]] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno)
            if header is None:
                if "modalities" not in obj or "label_space_size" not in obj:
                    raise ParseError("first line must be the header object "
                                     "{'modalities': [...], 'label_space_size': L}",
                                     path=str(path), line=lineno)
                header = obj
                continue
            try:
                inst = Instance(
                    id=obj["id"],
                    question=obj["question"],
                    options=tuple(obj["options"]),
                    gold_index=obj["gold_index"],
                    tags=tuple(obj.get("tags", [])),
                )
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", path=str(path), line=lineno)
            instances.append(inst)
            splits.setdefault(obj.get("split", "val"), []).append(inst.id)
    if header is None:
        # empty file: a valid zero-instance manifest needs a degenerate header
        return DatasetManifest(modalities=[ModalityId(0, "m0")],
                               label_space_size=2, instances=[], splits={})
    modalities = [ModalityId(i, name) for i, name in enumerate(header["modalities"])]
    return DatasetManifest(
        modalities=modalities,
        label_space_size=header["label_space_size"],
        instances=instances,
        splits=splits,
    )


def serialize_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    split_of = {}
    for split, ids in manifest.splits.items():
        for iid in ids:
            split_of[iid] = split
    with path.open("w") as fh:
        header = {"modalities": [m.name for m in manifest.modalities],
                  "label_space_size": manifest.label_space_size}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in manifest.instances:
            obj = {"id": inst.id, "question": inst.question,
                   "options": list(inst.options), "gold_index": inst.gold_index,
                   "tags": list(inst.tags), "split": split_of.get(inst.id, "val")}
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
