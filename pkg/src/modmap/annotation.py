"""Worker annotation ingestion, quality filtering, and seed-label aggregation.

Raw per-worker records for masked single-modality views are filtered (seen-
before omission, extreme yes/no claimers, low-agreement workers) and then
aggregated per (instance, modality) by strict majority of correct answers.
Ties and empty vote sets are labeled insolvable; the latter are additionally
flagged ``insufficient_data``.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .core_model import DatasetManifest, ModalityId, SeedSample
from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class AnnotationRecord:
    instance_id: str
    modality: ModalityId
    worker_id: str
    answer_index: int
    claims_answerable: bool
    seen_before: bool


@dataclass(frozen=True)
class QualityPolicy:
    # claim_yes_rate outside [1 - claim_extreme, claim_extreme] marks a
    # worker as an extreme claimer, once they have min_responses records.
    claim_extreme: float = 0.95
    min_responses: int = 20
    min_agreement: float = 0.5

    def __post_init__(self):
        for name in ("claim_extreme", "min_agreement"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class WorkerStats:
    worker_id: str
    n_responses: int
    agreement_rate: float
    claim_yes_rate: float
    seen_before_rate: float
    consistency_rate: float
    excluded: bool = False
    exclusion_reason: str = ""


@dataclass
class SolvabilityLabel:
    instance_id: str
    modality: ModalityId
    solvable: bool
    provenance: str  # "gold-seed" or "silver-classifier"
    n_correct: int = 0
    n_counted: int = 0
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_correct > self.n_counted:
            raise ValidationError(
                f"{self.instance_id}: n_correct {self.n_correct} > n_counted {self.n_counted}")


@dataclass
class FilterResult:
    kept: list[AnnotationRecord]
    dropped: list[AnnotationRecord]
    stats: list[WorkerStats]


@dataclass
class ClaimReliability:
    fraction: float
    n_pairs: int
    low_support: bool = False


def check_modality_exclusivity(records) -> None:
    """No worker may annotate the same instance under two modalities."""
    seen: dict[tuple[str, str], int] = {}
    for rec in records:
        key = (rec.worker_id, rec.instance_id)
        prev = seen.get(key)
        if prev is None:
            seen[key] = rec.modality.index
        elif prev != rec.modality.index:
            raise ValidationError(
                f"worker {rec.worker_id!r} annotated instance {rec.instance_id!r} "
                f"under two modalities")


def _majority_answer(counts: dict[int, int], exclude: int | None = None) -> int | None:
    """Most frequent answer index, optionally removing one vote. None on tie."""
    adjusted = dict(counts)
    if exclude is not None:
        adjusted[exclude] -= 1
        if adjusted[exclude] == 0:
            del adjusted[exclude]
    if not adjusted:
        return None
    best = max(adjusted.values())
    winners = [a for a, c in adjusted.items() if c == best]
    return winners[0] if len(winners) == 1 else None


def filter_records(records, policy: QualityPolicy,
                   manifest: DatasetManifest) -> FilterResult:
    """Apply the quality filters and return (kept, dropped, worker stats)."""
    inst_map = manifest.instance_map()
    for rec in records:
        inst = inst_map.get(rec.instance_id)
        if inst is None:
            raise ValidationError(f"record references unknown instance {rec.instance_id!r}")
        if not 0 <= rec.answer_index < manifest.label_space_size:
            raise ValidationError(
                f"record for {rec.instance_id!r} has answer_index {rec.answer_index} "
                f"outside [0, {manifest.label_space_size})")
    seen_keys = set()
    for rec in records:
        key = (rec.instance_id, rec.modality.index, rec.worker_id)
        if key in seen_keys:
            raise ValidationError(f"duplicate record {key}")
        seen_keys.add(key)
    check_modality_exclusivity(records)

    by_worker: dict[str, list[AnnotationRecord]] = defaultdict(list)
    for rec in records:
        by_worker[rec.worker_id].append(rec)

    # answer tallies per item over non-seen-before records, for agreement
    item_counts: dict[tuple[str, int], dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for rec in records:
        if not rec.seen_before:
            item_counts[(rec.instance_id, rec.modality.index)][rec.answer_index] += 1

    stats = []
    bad_workers = set()
    for worker_id in sorted(by_worker):
        recs = by_worker[worker_id]
        n = len(recs)
        claim_yes = sum(r.claims_answerable for r in recs) / n
        seen_rate = sum(r.seen_before for r in recs) / n
        consistent = sum(
            r.claims_answerable == (r.answer_index == inst_map[r.instance_id].gold_index)
            for r in recs) / n
        agree_hits = 0
        agree_total = 0
        for r in recs:
            if r.seen_before:
                continue
            maj = _majority_answer(item_counts[(r.instance_id, r.modality.index)],
                                   exclude=r.answer_index)
            if maj is not None:
                agree_total += 1
                agree_hits += int(r.answer_index == maj)
        agreement = agree_hits / agree_total if agree_total else 1.0

        reason = ""
        if n >= policy.min_responses and (
                claim_yes >= policy.claim_extreme or claim_yes <= 1.0 - policy.claim_extreme):
            reason = "extreme_claims"
        elif agree_total and agreement < policy.min_agreement:
            reason = "low_agreement"
        if reason:
            bad_workers.add(worker_id)
        stats.append(WorkerStats(
            worker_id=worker_id, n_responses=n, agreement_rate=agreement,
            claim_yes_rate=claim_yes, seen_before_rate=seen_rate,
            consistency_rate=consistent, excluded=bool(reason),
            exclusion_reason=reason))

    kept, dropped = [], []
    for rec in records:
        if rec.seen_before or rec.worker_id in bad_workers:
            dropped.append(rec)
        else:
            kept.append(rec)
    return FilterResult(kept=kept, dropped=dropped, stats=stats)


def aggregate_seed(kept_records, manifest: DatasetManifest, seed: SeedSample,
                   quorum: int = 5) -> list[SolvabilityLabel]:
    """Majority-vote solvability per (seed instance, modality).

    Strict majority of counted records answering the gold option => solvable.
    Even ties are insolvable. quorum is the campaign target and only drives
    an under_quorum flag.
    """
    if quorum < 1:
        raise ValueError(f"quorum must be >= 1, got {quorum}")
    inst_map = manifest.instance_map()
    seed_ids = set(seed.instance_ids)
    votes: dict[tuple[str, int], list[AnnotationRecord]] = defaultdict(list)
    for rec in kept_records:
        if rec.instance_id in seed_ids:
            votes[(rec.instance_id, rec.modality.index)].append(rec)

    labels = []
    for iid in seed.instance_ids:
        gold = inst_map[iid].gold_index
        for modality in manifest.modalities:
            recs = votes.get((iid, modality.index), [])
            n_counted = len(recs)
            n_correct = sum(r.answer_index == gold for r in recs)
            flags = []
            if n_counted == 0:
                flags.append("insufficient_data")
            elif n_counted < quorum:
                flags.append("under_quorum")
            labels.append(SolvabilityLabel(
                instance_id=iid, modality=modality,
                solvable=2 * n_correct > n_counted,
                provenance="gold-seed",
                n_correct=n_correct, n_counted=n_counted,
                flags=tuple(flags)))
    return labels


def claim_reliability_report(kept_records, labels) -> ClaimReliability:
    """Fraction of majority-claimed-unanswerable pairs that are in fact solvable."""
    label_map = {(l.instance_id, l.modality.index): l for l in labels}
    claims: dict[tuple[str, int], list[bool]] = defaultdict(list)
    for rec in kept_records:
        key = (rec.instance_id, rec.modality.index)
        if key in label_map:
            claims[key].append(rec.claims_answerable)
    n_pairs = 0
    n_solvable = 0
    for key, cs in claims.items():
        if sum(cs) * 2 < len(cs):  # strict majority claims unanswerable
            n_pairs += 1
            n_solvable += int(label_map[key].solvable)
    if n_pairs == 0:
        return ClaimReliability(fraction=0.0, n_pairs=0, low_support=True)
    return ClaimReliability(fraction=n_solvable / n_pairs, n_pairs=n_pairs)


def read_annotations(path, manifest: DatasetManifest) -> list[AnnotationRecord]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = AnnotationRecord(
                    instance_id=obj["instance_id"],
                    modality=manifest.modality_by_name(obj["modality"]),
                    worker_id=obj["worker_id"],
                    answer_index=obj["answer_index"],
                    claims_answerable=obj["claims_answerable"],
                    seen_before=obj["seen_before"],
                )
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno)
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", path=str(path), line=lineno)
            records.append(rec)
    return records


def write_annotations(records, path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "instance_id": rec.instance_id, "modality": rec.modality.name,
                "worker_id": rec.worker_id, "answer_index": rec.answer_index,
                "claims_answerable": rec.claims_answerable,
                "seen_before": rec.seen_before}, sort_keys=True) + "\n")


def write_labels(labels, path) -> None:
    with Path(path).open("w") as fh:
        for lab in labels:
            fh.write(json.dumps({
                "instance_id": lab.instance_id, "modality": lab.modality.name,
                "solvable": lab.solvable, "provenance": lab.provenance,
                "n_correct": lab.n_correct, "n_counted": lab.n_counted,
                "flags": list(lab.flags)}, sort_keys=True) + "\n")


def read_labels(path, manifest: DatasetManifest) -> list[SolvabilityLabel]:
    path = Path(path)
    labels = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                labels.append(SolvabilityLabel(
                    instance_id=obj["instance_id"],
                    modality=manifest.modality_by_name(obj["modality"]),
                    solvable=obj["solvable"],
                    provenance=obj["provenance"],
                    n_correct=obj.get("n_correct", 0),
                    n_counted=obj.get("n_counted", 0),
                    flags=tuple(obj.get("flags", ()))))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno)
            except KeyError as exc:
                raise ParseError(f"missing field {exc}", path=str(path), line=lineno)
    return labels
