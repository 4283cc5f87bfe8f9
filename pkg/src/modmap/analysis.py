"""Dataset and model analyses over solvability maps and probability stores.

Covers silver annotation, the per-modality answerability histogram, exact
Venn region counts, masked-input split accuracy tables, training-dynamics
cartography, sensitivity ranking, and leakage-safe cross-fold annotation of
training data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_model import DatasetManifest, popcount
from .errors import ConfigError, LeakageError, MissingInputError, ValidationError
from .featurize import FeatureLayout, ProbabilityStore, build_feature_matrix
from .forest import ForestHyperparams, RandomForestModel, fit_forest, predict

REPORT_SCHEMA_VERSION = 1


@dataclass
class ModalityMap:
    """Per-instance solvable-modality bitmask plus label provenance."""
    masks: dict[str, int]
    provenance: str  # "gold-seed" or "silver-classifier"
    n_modalities: int

    def __post_init__(self):
        full = (1 << self.n_modalities) - 1
        for iid, mask in self.masks.items():
            if not 0 <= mask <= full:
                raise ValidationError(f"instance {iid!r}: mask {mask} exceeds {full}")

    def ids(self) -> list[str]:
        return sorted(self.masks)


@dataclass
class Histogram:
    fractions: dict[str, float]
    none_fraction: float
    counts: dict[str, int]
    none_count: int
    total: int


@dataclass
class VennSummary:
    region_counts: dict[int, int]
    total: int
    fraction_multi: float  # solvable by >= 2 modalities
    fraction_all: float    # solvable by every modality


@dataclass
class CartographyRecord:
    instance_id: str
    gold_probs_by_epoch: list[float]
    mean: float
    variance: float  # population variance


@dataclass
class SplitAccuracyTable:
    row_names: list[str]
    column_names: list[str]
    cells: dict[tuple[str, str], float | None]
    counts: dict[tuple[str, str], int]
    warnings: list[str] = field(default_factory=list)


def labels_to_map(labels, manifest: DatasetManifest) -> ModalityMap:
    """Fold per-(instance, modality) SolvabilityLabels into a ModalityMap."""
    masks: dict[str, int] = {}
    provenance = None
    for lab in labels:
        if provenance is None:
            provenance = lab.provenance
        masks.setdefault(lab.instance_id, 0)
        if lab.solvable:
            masks[lab.instance_id] |= 1 << lab.modality.index
    return ModalityMap(masks=masks, provenance=provenance or "gold-seed",
                       n_modalities=manifest.n_modalities)


def silver_annotate(models: dict[str, RandomForestModel],
                    manifest: DatasetManifest, store: ProbabilityStore,
                    instance_ids, model_id: str = "main") -> ModalityMap:
    """Apply one classifier per modality; bit i is set iff model i says solvable."""
    names = [m.name for m in manifest.modalities]
    missing = [n for n in names if n not in models]
    if missing:
        raise ConfigError(f"no trained model for modalities: {missing}")
    layouts = {models[n].layout for n in names}
    if len(layouts) != 1:
        raise ConfigError("modality models disagree on feature layout")
    layout = layouts.pop()
    ids = list(instance_ids)
    X = build_feature_matrix(manifest, store, ids, layout, model_id=model_id)
    masks = dict.fromkeys(ids, 0)
    for modality in manifest.modalities:
        labels, _ = predict(models[modality.name], X)
        for iid, solvable in zip(ids, labels):
            if solvable:
                masks[iid] |= 1 << modality.index
    return ModalityMap(masks=masks, provenance="silver-classifier",
                       n_modalities=manifest.n_modalities)


def answerability_histogram(mmap: ModalityMap, manifest: DatasetManifest) -> Histogram:
    if not mmap.masks:
        raise ValueError("cannot compute a histogram over an empty map")
    total = len(mmap.masks)
    counts = {}
    for modality in manifest.modalities:
        bit = 1 << modality.index
        counts[modality.name] = sum(1 for m in mmap.masks.values() if m & bit)
    none_count = sum(1 for m in mmap.masks.values() if m == 0)
    return Histogram(
        fractions={name: c / total for name, c in counts.items()},
        none_fraction=none_count / total,
        counts=counts, none_count=none_count, total=total)


def venn_regions(mmap: ModalityMap, manifest: DatasetManifest) -> VennSummary:
    """Exact count of instances per solvable-set region (2^M disjoint regions)."""
    n_regions = 1 << manifest.n_modalities
    region_counts = dict.fromkeys(range(n_regions), 0)
    for mask in mmap.masks.values():
        region_counts[mask] += 1
    total = len(mmap.masks)
    multi = sum(c for m, c in region_counts.items() if popcount(m) >= 2)
    all_m = region_counts[n_regions - 1]
    return VennSummary(
        region_counts=region_counts, total=total,
        fraction_multi=multi / total if total else 0.0,
        fraction_all=all_m / total if total else 0.0)


def build_row_filters(manifest: DatasetManifest, mmap: ModalityMap,
                      instance_ids=None, tags=()) -> dict[str, list[str]]:
    """Named instance subsets for the split-accuracy table.

    all; answerable_all (solvable-set = full mask); only_<m> (exactly one
    modality); only_non_<m> (nonzero set avoiding m); tag:<t> rows.
    """
    ids = list(instance_ids) if instance_ids is not None else mmap.ids()
    full = (1 << manifest.n_modalities) - 1
    rows = {"all": ids}
    rows["answerable_all"] = [i for i in ids if mmap.masks.get(i) == full]
    for modality in manifest.modalities:
        bit = 1 << modality.index
        rows[f"only_{modality.name}"] = [i for i in ids if mmap.masks.get(i) == bit]
        rows[f"only_non_{modality.name}"] = [
            i for i in ids
            if mmap.masks.get(i, 0) != 0 and not mmap.masks.get(i, 0) & bit]
    if tags:
        tag_of = {inst.id: set(inst.tags) for inst in manifest.instances}
        for tag in tags:
            rows[f"tag:{tag}"] = [i for i in ids if tag in tag_of.get(i, ())]
    return rows


def split_accuracy(manifest: DatasetManifest, store: ProbabilityStore,
                   row_filters: dict[str, list[str]],
                   columns: dict[str, int], model_id: str = "main") -> SplitAccuracyTable:
    """Accuracy of argmax(probs under each input subset) per instance subset.

    Argmax ties resolve to the lowest label index (deterministic; flagged in
    the table warnings).
    """
    inst_map = manifest.instance_map()
    cells = {}
    counts = {}
    warnings = []
    tie_seen = False
    for row_name, ids in row_filters.items():
        for col_name, mask in columns.items():
            if not ids:
                cells[(row_name, col_name)] = None
                counts[(row_name, col_name)] = 0
                warnings.append(f"row {row_name!r} is empty; cell absent")
                continue
            correct = 0
            for iid in ids:
                probs = store.get(iid, mask, model_id=model_id)
                if probs is None:
                    raise MissingInputError(
                        f"no probability record for instance {iid!r} under input "
                        f"subset {col_name!r} (mask {mask})")
                top = int(np.argmax(probs))
                if np.sum(probs == probs[top]) > 1:
                    tie_seen = True
                correct += int(top == inst_map[iid].gold_index)
            cells[(row_name, col_name)] = correct / len(ids)
            counts[(row_name, col_name)] = len(ids)
    if tie_seen:
        warnings.append("argmax ties encountered; resolved to lowest label index")
    # deduplicate empty-row warnings, preserving order
    warnings = list(dict.fromkeys(warnings))
    return SplitAccuracyTable(row_names=list(row_filters), column_names=list(columns),
                              cells=cells, counts=counts, warnings=warnings)


def cartography(store: ProbabilityStore, manifest: DatasetManifest,
                instance_ids, model_id: str = "main",
                mask: int | None = None) -> tuple[list[CartographyRecord], list[str], list[str]]:
    """Mean/population-variance of gold-label probability across epochs.

    Returns (records, ambiguous_ids, excluded_ids). The ambiguous set is the
    top ceil(N/2) instances by variance, ties broken by ascending id.
    """
    if mask is None:
        mask = manifest.full_mask
    inst_map = manifest.instance_map()
    records = []
    excluded = []
    for iid in instance_ids:
        epochs = store.epochs(iid, mask, model_id=model_id)
        if len(epochs) < 2:
            excluded.append(iid)
            continue
        gold = inst_map[iid].gold_index
        probs = [float(store.get(iid, mask, model_id=model_id, epoch=e)[gold])
                 for e in epochs]
        arr = np.asarray(probs)
        records.append(CartographyRecord(
            instance_id=iid, gold_probs_by_epoch=probs,
            mean=float(arr.mean()), variance=float(arr.var())))
    n = len(records)
    k = math.ceil(n / 2)
    ranked = sorted(records, key=lambda r: (-r.variance, r.instance_id))
    ambiguous = [r.instance_id for r in ranked[:k]]
    return records, ambiguous, excluded


def cartography_crosstab(ambiguous_ids, all_ids, mmap: ModalityMap,
                         manifest: DatasetManifest) -> dict[str, dict[str, float]]:
    """Per-modality answerability fractions within the ambiguous set vs. all."""
    def fractions(ids):
        sub = ModalityMap(masks={i: mmap.masks[i] for i in ids if i in mmap.masks},
                          provenance=mmap.provenance,
                          n_modalities=mmap.n_modalities)
        if not sub.masks:
            return {m.name: 0.0 for m in manifest.modalities}
        return answerability_histogram(sub, manifest).fractions
    return {"all": fractions(all_ids), "ambiguous": fractions(ambiguous_ids)}


def sensitivity_ranking(store: ProbabilityStore, manifest: DatasetManifest,
                        modality_name: str, k: int, instance_ids=None,
                        model_id: str = "main") -> tuple[list[tuple[str, float]], bool]:
    """Top-k instances by gold-probability drop when one modality is masked.

    drop = p_gold(all modalities) - p_gold(all but this modality).
    Returns (ranking, truncated) where truncated means fewer than k available.
    """
    modality = manifest.modality_by_name(modality_name)
    full = manifest.full_mask
    without = full & ~(1 << modality.index)
    inst_map = manifest.instance_map()
    ids = list(instance_ids) if instance_ids is not None else store.instance_ids(model_id)
    drops = []
    for iid in ids:
        p_full = store.get(iid, full, model_id=model_id)
        p_masked = store.get(iid, without, model_id=model_id)
        if p_full is None or p_masked is None:
            raise MissingInputError(
                f"instance {iid!r}: need probability records for masks "
                f"{full} and {without}")
        gold = inst_map[iid].gold_index
        drops.append((iid, float(p_full[gold] - p_masked[gold])))
    drops.sort(key=lambda t: (-t[1], t[0]))
    truncated = k > len(drops)
    return drops[:k], truncated


def cross_fold_annotate(manifest: DatasetManifest, fold_of: dict[str, str],
                        store: ProbabilityStore, seed_labels,
                        layout: FeatureLayout, hyper: ForestHyperparams,
                        seed: int) -> ModalityMap:
    """Annotate training instances with models never trained on their fold.

    fold_of maps each train instance to "A" or "B"; the store must hold
    records under model_ids "fold_A" and "fold_B". Instances in fold X are
    featurized from the opposite fold's model, and the classifiers applied to
    them are trained on seed instances outside fold X.
    """
    folds = set(fold_of.values())
    if folds - {"A", "B"}:
        raise ValidationError(f"unknown fold names: {sorted(folds - {'A', 'B'})}")
    opposite_model = {"A": "fold_B", "B": "fold_A"}
    own_model = {"A": "fold_A", "B": "fold_B"}

    # leakage guard: every instance needs records from the opposite model
    for iid, fold in fold_of.items():
        for mask in layout.required_masks():
            if store.get(iid, mask, model_id=opposite_model[fold]) is None:
                if store.get(iid, mask, model_id=own_model[fold]) is not None:
                    raise LeakageError(
                        f"instance {iid!r} (fold {fold}) only has probabilities from "
                        f"its own fold's model {own_model[fold]!r}")
                raise MissingInputError(
                    f"instance {iid!r}: no record for mask {mask} under model "
                    f"{opposite_model[fold]!r}")

    label_by = {}
    for lab in seed_labels:
        label_by.setdefault(lab.instance_id, {})[lab.modality.index] = lab.solvable

    masks: dict[str, int] = {}
    for fold in ("A", "B"):
        fold_ids = sorted(i for i, f in fold_of.items() if f == fold)
        if not fold_ids:
            continue
        model_id = opposite_model[fold]
        model_training_fold = "B" if fold == "A" else "A"
        # train on seed instances this fold's feature model never saw: anything
        # outside the fold the model itself was fit on
        train_ids = sorted(i for i in label_by
                           if fold_of.get(i) != model_training_fold and
                           all(store.get(i, m, model_id=model_id) is not None
                               for m in layout.required_masks()))
        if not train_ids:
            raise ValidationError(
                f"no leak-free seed instances available to train classifiers for "
                f"fold {fold}")
        X_train = build_feature_matrix(manifest, store, train_ids, layout,
                                       model_id=model_id)
        X_apply = build_feature_matrix(manifest, store, fold_ids, layout,
                                       model_id=model_id)
        for modality in manifest.modalities:
            y_train = np.array([label_by[i][modality.index] for i in train_ids])
            model = fit_forest(X_train, y_train, hyper, seed, layout,
                               modality_name=modality.name)
            labels, _ = predict(model, X_apply)
            for iid, solvable in zip(fold_ids, labels):
                masks.setdefault(iid, 0)
                if solvable:
                    masks[iid] |= 1 << modality.index

    # audit: no probability read may have come from an instance's own fold model
    for iid, model_id in store.read_log():
        fold = fold_of.get(iid)
        if fold is not None and model_id == own_model[fold]:
            raise LeakageError(
                f"audit: instance {iid!r} was read from its own fold's model")
    return ModalityMap(masks=masks, provenance="silver-classifier",
                       n_modalities=manifest.n_modalities)


def write_venn_csv(venn: VennSummary, manifest: DatasetManifest, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["region", "mask", "count", "fraction"])
        for mask in sorted(venn.region_counts):
            names = "+".join(manifest.names_from_mask(mask)) or "none"
            frac = venn.region_counts[mask] / venn.total if venn.total else 0.0
            writer.writerow([names, mask, venn.region_counts[mask], repr(frac)])


def write_plotdata_csv(hist: Histogram, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bar", "count", "fraction"])
        for name, count in hist.counts.items():
            writer.writerow([name, count, repr(hist.fractions[name])])
        writer.writerow(["none", hist.none_count, repr(hist.none_fraction)])
