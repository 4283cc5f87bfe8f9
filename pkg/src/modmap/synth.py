"""Synthetic dataset/campaign generator with known ground truth.

Builds a manifest, per-subset softmax records, per-epoch records for
cartography, and a simulated annotation campaign, all driven by a per-instance
"solving set" drawn from a configurable prior over modality subsets. The
generated files exercise the exact formats the rest of the pipeline consumes,
and the known solving sets serve as the recovery oracle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import AnnotationRecord, write_annotations
from .core_model import (DatasetManifest, Instance, ModalityId, SeedSample,
                         enumerate_subsets, serialize_manifest)
from .errors import ValidationError

DEFAULT_MODALITY_NAMES = ("image", "text", "audio", "m3", "m4", "m5", "m6", "m7")

# epoch-drift amplitude: instances whose subsets disagree (some solving, some
# not) drift hardest, so their gold probability is the most epoch-variable
DRIFT_CONFLICT = 1.0
DRIFT_PLAIN = 0.25


def default_region_distribution(n_modalities: int) -> dict[int, float]:
    masks = enumerate_subsets(n_modalities)
    if n_modalities == 3:
        return {0: 0.10, 1: 0.12, 2: 0.12, 3: 0.13, 4: 0.12, 5: 0.13,
                6: 0.13, 7: 0.15}
    p = 1.0 / len(masks)
    return {m: p for m in masks}


@dataclass
class SynthSpec:
    n_modalities: int = 3
    label_space_size: int = 5
    n_instances: int = 2000
    n_annotated: int = 500
    region_distribution: dict[int, float] | None = None
    p_high: float = 0.9
    noise_sigma: float = 0.5
    n_epochs: int = 3
    annotator_error: float = 0.1
    claim_error: float = 0.1
    seen_before_rate: float = 0.05
    quorum: int = 5
    workers_per_modality: int = 10
    seed: int = 0
    who_tag_fraction: float = 0.2

    def __post_init__(self):
        if self.region_distribution is None:
            self.region_distribution = default_region_distribution(self.n_modalities)
        total = sum(self.region_distribution.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"region_distribution sums to {total}, expected 1")
        full = (1 << self.n_modalities) - 1
        if any(not 0 <= m <= full for m in self.region_distribution):
            raise ValidationError("region_distribution has masks outside [0, 2^M)")
        if not 1.0 / self.label_space_size < self.p_high < 1.0:
            raise ValidationError(
                f"p_high must be in (1/L, 1), got {self.p_high}")
        if self.n_annotated > self.n_instances:
            raise ValidationError("n_annotated exceeds n_instances")

    @classmethod
    def from_dict(cls, obj) -> "SynthSpec":
        obj = dict(obj)
        if "region_distribution" in obj and obj["region_distribution"] is not None:
            obj["region_distribution"] = {int(k): float(v)
                                          for k, v in obj["region_distribution"].items()}
        return cls(**obj)


@dataclass
class GroundTruth:
    solving_sets: dict[str, int]

    def ids(self) -> list[str]:
        return sorted(self.solving_sets)


@dataclass
class RecoveryScore:
    per_modality: dict[str, float]
    exact_set: float
    n: int


def _instance_id(i: int) -> str:
    return f"inst{i:05d}"


def _final_vector(solving: bool, gold: int, spec: SynthSpec,
                  rng: np.random.Generator) -> np.ndarray:
    L = spec.label_space_size
    center = np.full(L, (1.0 - spec.p_high) / (L - 1) if solving else 1.0 / L)
    center[gold] = spec.p_high if solving else 1.0 / L
    if spec.noise_sigma == 0.0:
        return center
    z = np.log(center) + rng.normal(0.0, spec.noise_sigma, L)
    z -= z.max()
    v = np.exp(z)
    return v / v.sum()


def _epoch_vector(final: np.ndarray, epoch: int, spec: SynthSpec,
                  conflict: bool) -> np.ndarray:
    L = final.shape[0]
    beta = DRIFT_CONFLICT if conflict else DRIFT_PLAIN
    alpha = beta * (1.0 - epoch / spec.n_epochs)
    return (1.0 - alpha) * final + alpha * np.full(L, 1.0 / L)


def build_dataset(spec: SynthSpec) -> tuple[DatasetManifest, GroundTruth, SeedSample]:
    """Draw instances, solving sets, and the annotated-seed partition."""
    rng = np.random.default_rng(spec.seed)
    modalities = [ModalityId(i, DEFAULT_MODALITY_NAMES[i])
                  for i in range(spec.n_modalities)]
    L = spec.label_space_size
    region_masks = sorted(spec.region_distribution)
    region_probs = np.array([spec.region_distribution[m] for m in region_masks])

    instances = []
    solving_sets = {}
    for i in range(spec.n_instances):
        iid = _instance_id(i)
        gold = int(rng.integers(0, L))
        mask = region_masks[int(rng.choice(len(region_masks), p=region_probs))]
        tags = []
        if rng.random() < spec.who_tag_fraction:
            tags.append("who-question")
        instances.append(Instance(
            id=iid, question=f"synthetic question {i}",
            options=tuple(f"option {j}" for j in range(L)),
            gold_index=gold, tags=tuple(tags)))
        solving_sets[iid] = mask

    manifest = DatasetManifest(
        modalities=modalities, label_space_size=L, instances=instances,
        splits={"val": [inst.id for inst in instances]})

    seed_ids = [_instance_id(int(i)) for i in
                rng.choice(spec.n_instances, size=spec.n_annotated, replace=False)]
    # 75/15/10 train/val/test split of the seed, matching the campaign layout
    n_train = round(0.75 * spec.n_annotated)
    n_val = round(0.15 * spec.n_annotated)
    partition = {}
    for j, iid in enumerate(seed_ids):
        if j < n_train:
            partition[iid] = "train"
        elif j < n_train + n_val:
            partition[iid] = "val"
        else:
            partition[iid] = "test"
    return manifest, GroundTruth(solving_sets), SeedSample(seed_ids, partition)


def probability_rows(spec: SynthSpec, manifest: DatasetManifest,
                     truth: GroundTruth, model_id: str = "main",
                     instance_ids=None, rng_salt: int = 1,
                     with_epochs: bool = True) -> list[dict]:
    """Softmax record rows (dicts) for every subset, plus per-epoch full-mask rows."""
    rng = np.random.default_rng([spec.seed, rng_salt])
    subsets = enumerate_subsets(spec.n_modalities)
    full = manifest.full_mask
    inst_map = manifest.instance_map()
    ids = list(instance_ids) if instance_ids is not None else [i.id for i in manifest.instances]
    rows = []
    for iid in ids:
        inst = inst_map[iid]
        solving_set = truth.solving_sets[iid]
        conflict = solving_set not in (0, full)
        for mask in subsets:
            final = _final_vector(bool(mask & solving_set), inst.gold_index, spec, rng)
            row = {"instance_id": iid,
                   "subset": manifest.names_from_mask(mask),
                   "probs": [float(p) for p in final]}
            if model_id != "main":
                row["model_id"] = model_id
            rows.append(row)
            if with_epochs and mask == full:
                for epoch in range(1, spec.n_epochs + 1):
                    v = _epoch_vector(final, epoch, spec, conflict)
                    erow = dict(row)
                    erow["probs"] = [float(p) for p in v]
                    erow["epoch"] = epoch
                    rows.append(erow)
    return rows


def annotation_records(spec: SynthSpec, manifest: DatasetManifest,
                       truth: GroundTruth, seed_sample: SeedSample) -> list[AnnotationRecord]:
    """Simulated worker responses for each (seed instance, modality)."""
    rng = np.random.default_rng([spec.seed, 2])
    L = spec.label_space_size
    inst_map = manifest.instance_map()
    records = []
    for iid in seed_sample.instance_ids:
        inst = inst_map[iid]
        solving_set = truth.solving_sets[iid]
        for modality in manifest.modalities:
            solvable = bool(solving_set & (1 << modality.index))
            workers = rng.choice(spec.workers_per_modality,
                                 size=min(spec.quorum, spec.workers_per_modality),
                                 replace=False)
            for wj in workers:
                if solvable and rng.random() >= spec.annotator_error:
                    answer = inst.gold_index
                else:
                    answer = int(rng.integers(0, L))
                claims = solvable
                if rng.random() < spec.claim_error:
                    claims = not claims
                records.append(AnnotationRecord(
                    instance_id=iid, modality=modality,
                    worker_id=f"w_{modality.name}_{int(wj)}",
                    answer_index=answer, claims_answerable=claims,
                    seen_before=bool(rng.random() < spec.seen_before_rate)))
    return records


def assign_folds(spec: SynthSpec, manifest: DatasetManifest,
                 instance_ids=None) -> dict[str, str]:
    """Deterministic random A/B fold assignment for cross-fold annotation."""
    rng = np.random.default_rng([spec.seed, 3])
    ids = list(instance_ids) if instance_ids is not None else [i.id for i in manifest.instances]
    draws = rng.random(len(ids))
    return {iid: ("A" if d < 0.5 else "B") for iid, d in zip(ids, draws)}


def fold_probability_rows(spec: SynthSpec, manifest: DatasetManifest,
                          truth: GroundTruth, fold_of: dict[str, str],
                          swap: bool = False) -> list[dict]:
    """Cross-fold records: fold-A instances get model fold_B rows and vice versa.

    swap=True deliberately mislabels the model_ids (each instance gets its own
    fold's model), for exercising the leakage guard.
    """
    rows = []
    for fold, model_id, salt in (("A", "fold_B", 4), ("B", "fold_A", 5)):
        ids = sorted(i for i, f in fold_of.items() if f == fold)
        if swap:
            model_id = "fold_A" if fold == "A" else "fold_B"
        rows.extend(probability_rows(spec, manifest, truth, model_id=model_id,
                                     instance_ids=ids, rng_salt=salt,
                                     with_epochs=False))
    return rows


def write_probability_rows(rows, path) -> None:
    with Path(path).open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_truth(truth: GroundTruth, manifest: DatasetManifest, path) -> None:
    with Path(path).open("w") as fh:
        for iid in truth.ids():
            fh.write(json.dumps({
                "instance_id": iid,
                "solving_set": manifest.names_from_mask(truth.solving_sets[iid]),
            }, sort_keys=True) + "\n")


def read_truth(path, manifest: DatasetManifest) -> GroundTruth:
    solving_sets = {}
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            solving_sets[obj["instance_id"]] = manifest.mask_from_names(obj["solving_set"])
    return GroundTruth(solving_sets)


def write_seed_sample(seed_sample: SeedSample, path) -> None:
    with Path(path).open("w") as fh:
        json.dump({"partition": seed_sample.partition}, fh, sort_keys=True)
        fh.write("\n")


def read_seed_sample(path) -> SeedSample:
    with Path(path).open() as fh:
        obj = json.load(fh)
    partition = obj["partition"]
    return SeedSample(instance_ids=sorted(partition), partition=partition)


def generate(spec: SynthSpec, outdir) -> dict[str, Path]:
    """Write dataset.jsonl, probs.jsonl, annotations.jsonl, truth.jsonl, seed.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest, truth, seed_sample = build_dataset(spec)
    paths = {
        "dataset": outdir / "dataset.jsonl",
        "probs": outdir / "probs.jsonl",
        "annotations": outdir / "annotations.jsonl",
        "truth": outdir / "truth.jsonl",
        "seed": outdir / "seed.json",
    }
    serialize_manifest(manifest, paths["dataset"])
    write_probability_rows(probability_rows(spec, manifest, truth), paths["probs"])
    write_annotations(annotation_records(spec, manifest, truth, seed_sample),
                      paths["annotations"])
    write_truth(truth, manifest, paths["truth"])
    write_seed_sample(seed_sample, paths["seed"])
    return paths


def score_recovery(mmap, truth: GroundTruth, manifest: DatasetManifest) -> RecoveryScore:
    """Per-modality bit accuracy and exact solving-set match rate."""
    ids = sorted(mmap.masks)
    missing = [i for i in ids if i not in truth.solving_sets]
    if missing:
        raise ValidationError(f"instances absent from ground truth: {missing[:5]}")
    if not ids:
        raise ValidationError("empty modality map")
    per_modality = {}
    for modality in manifest.modalities:
        bit = 1 << modality.index
        hits = sum(int(bool(mmap.masks[i] & bit) == bool(truth.solving_sets[i] & bit))
                   for i in ids)
        per_modality[modality.name] = hits / len(ids)
    exact = sum(int(mmap.masks[i] == truth.solving_sets[i]) for i in ids) / len(ids)
    return RecoveryScore(per_modality=per_modality, exact_set=exact, n=len(ids))


def generate_claim_campaign(n_pairs: int, planted_rate: float, seed: int,
                            label_space_size: int = 5, quorum: int = 5):
    """Campaign of uniformly over-pessimistic workers with a planted rate of
    truly-solvable pairs, for calibrating claim_reliability_report.

    Every pair's worker majority claims unanswerable; a planted_rate fraction
    is nonetheless answered correctly by the (accurate) workers.
    """
    rng = np.random.default_rng(seed)
    L = label_space_size
    modalities = [ModalityId(0, "image")]
    instances = []
    records = []
    solvable_flags = []
    for i in range(n_pairs):
        iid = _instance_id(i)
        gold = int(rng.integers(0, L))
        instances.append(Instance(id=iid, question=f"q{i}",
                                  options=tuple(f"o{j}" for j in range(L)),
                                  gold_index=gold))
        solvable = bool(rng.random() < planted_rate)
        solvable_flags.append(solvable)
        for w in range(quorum):
            if solvable:
                answer = gold
            else:
                # wrong answers spread over the distractors: no chance majority
                answer = int((gold + 1 + (w % (L - 1))) % L)
            records.append(AnnotationRecord(
                instance_id=iid, modality=modalities[0],
                worker_id=f"w{w}", answer_index=answer,
                claims_answerable=False, seen_before=False))
    manifest = DatasetManifest(modalities=modalities, label_space_size=L,
                               instances=instances,
                               splits={"val": [i.id for i in instances]})
    seed_sample = SeedSample(instance_ids=[i.id for i in instances],
                             partition={i.id: "train" for i in instances})
    planted = sum(solvable_flags) / n_pairs
    return manifest, records, seed_sample, planted
