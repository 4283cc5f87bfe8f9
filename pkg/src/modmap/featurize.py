"""Probability ingestion and classifier feature assembly.

An external model, applied to each masked view of an instance, yields one
softmax vector per modality subset. Feature vectors concatenate these vectors
over all 2^M subsets in canonical mask order, after moving the gold label's
probability to the front of each block.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_model import DatasetManifest, Instance, enumerate_subsets
from .errors import MissingInputError, ParseError, ValidationError

SUM_TOLERANCE = 1e-4

VARIANTS = ("full", "single_probability", "no_gold_sort")

# epoch key used for records carrying no epoch tag (final-model outputs)
FINAL_EPOCH = None


@dataclass(frozen=True)
class ProbabilityRecord:
    instance_id: str
    mask: int
    probs: tuple[float, ...]
    model_id: str = "main"
    epoch: int | None = None


@dataclass(frozen=True)
class FeatureLayout:
    variant: str
    n_modalities: int
    label_space_size: int

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown feature variant {self.variant!r}")

    @property
    def length(self) -> int:
        if self.variant == "single_probability":
            return self.label_space_size
        return (1 << self.n_modalities) * self.label_space_size

    def required_masks(self) -> list[int]:
        full = (1 << self.n_modalities) - 1
        if self.variant == "single_probability":
            return [full]
        return enumerate_subsets(self.n_modalities)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "n_modalities": self.n_modalities,
                "label_space_size": self.label_space_size}

    @classmethod
    def from_dict(cls, obj) -> "FeatureLayout":
        return cls(variant=obj["variant"], n_modalities=obj["n_modalities"],
                   label_space_size=obj["label_space_size"])


class ProbabilityStore:
    """Immutable-after-ingest index of softmax records.

    Keyed by (instance_id, model_id, epoch, mask). Vectors are validated and
    renormalized to sum exactly 1 at ingestion.
    """

    def __init__(self, label_space_size: int):
        self.label_space_size = label_space_size
        self._data: dict[tuple[str, str, int | None, int], np.ndarray] = {}
        self._reads: list[tuple[str, str]] = []  # (instance_id, model_id) audit log

    def __len__(self):
        return len(self._data)

    def add(self, record: ProbabilityRecord) -> None:
        probs = np.asarray(record.probs, dtype=np.float64)
        if probs.shape != (self.label_space_size,):
            raise ValidationError(
                f"{record.instance_id}: expected {self.label_space_size} probabilities, "
                f"got {probs.shape}")
        if np.any(probs < 0):
            raise ValidationError(f"{record.instance_id}: negative probability")
        total = probs.sum()
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ValidationError(
                f"{record.instance_id}: probabilities sum to {total:.6f}, "
                f"outside 1 +/- {SUM_TOLERANCE}")
        key = (record.instance_id, record.model_id, record.epoch, record.mask)
        if key in self._data:
            raise ValidationError(f"duplicate probability record for {key}")
        self._data[key] = probs / total

    def get(self, instance_id: str, mask: int, model_id: str = "main",
            epoch: int | None = FINAL_EPOCH) -> np.ndarray | None:
        rec = self._data.get((instance_id, model_id, epoch, mask))
        if rec is not None:
            self._reads.append((instance_id, model_id))
        return rec

    def epochs(self, instance_id: str, mask: int, model_id: str = "main") -> list[int]:
        return sorted(e for (iid, mid, e, m) in self._data
                      if iid == instance_id and mid == model_id and m == mask
                      and e is not None)

    def instance_ids(self, model_id: str = "main") -> list[str]:
        return sorted({iid for (iid, mid, _, _) in self._data if mid == model_id})

    def read_log(self) -> list[tuple[str, str]]:
        return list(self._reads)


def ingest_probabilities(path, manifest: DatasetManifest,
                         default_model_id: str = "main") -> ProbabilityStore:
    """Load a probs.jsonl file into an indexed store."""
    store = ProbabilityStore(manifest.label_space_size)
    path = Path(path)
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = ProbabilityRecord(
                    instance_id=obj["instance_id"],
                    mask=manifest.mask_from_names(obj["subset"]),
                    probs=tuple(obj["probs"]),
                    model_id=obj.get("model_id", default_model_id),
                    epoch=obj.get("epoch"),
                )
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno)
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", path=str(path), line=lineno)
            try:
                store.add(rec)
            except ValidationError as exc:
                raise ParseError(str(exc), path=str(path), line=lineno)
    return store


def gold_first_sort(probs, gold_index: int) -> np.ndarray:
    """Move the gold label's probability to position 0, keeping the rest in order."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= gold_index < probs.shape[0]:
        raise ValueError(f"gold_index {gold_index} outside [0, {probs.shape[0]})")
    return np.concatenate(([probs[gold_index]],
                           np.delete(probs, gold_index)))


def assemble_features(instance: Instance, store: ProbabilityStore,
                      layout: FeatureLayout, model_id: str = "main",
                      epoch: int | None = FINAL_EPOCH) -> np.ndarray:
    """Build one instance's feature vector from its per-subset softmax records."""
    blocks = []
    missing = []
    for mask in layout.required_masks():
        probs = store.get(instance.id, mask, model_id=model_id, epoch=epoch)
        if probs is None:
            missing.append(mask)
            continue
        if layout.variant == "no_gold_sort":
            blocks.append(probs)
        else:
            blocks.append(gold_first_sort(probs, instance.gold_index))
    if missing:
        raise MissingInputError(
            f"instance {instance.id!r}: no probability record for masks {missing} "
            f"(model_id={model_id!r}, epoch={epoch})", missing=missing)
    return np.concatenate(blocks)


def build_feature_matrix(manifest: DatasetManifest, store: ProbabilityStore,
                         instance_ids, layout: FeatureLayout,
                         model_id: str = "main",
                         epoch: int | None = FINAL_EPOCH) -> np.ndarray:
    inst_map = manifest.instance_map()
    rows = []
    for iid in instance_ids:
        inst = inst_map.get(iid)
        if inst is None:
            raise ValidationError(f"unknown instance id {iid!r}")
        rows.append(assemble_features(inst, store, layout, model_id=model_id, epoch=epoch))
    if not rows:
        return np.empty((0, layout.length))
    return np.vstack(rows)
