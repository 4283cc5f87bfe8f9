"""Subcommand CLI orchestrating the pipeline stages.

Stages read/write files under a fixed output layout (labels/, features/,
models/, reports/) and are idempotent: rerunning with unchanged inputs and
seed reproduces byte-identical artifacts. Exit codes: 0 success, 2 missing
input, 3 validation failure, 4 internal error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, analysis, annotation, featurize, forest, runio, synth
from .core_model import parse_manifest
from .errors import ConfigError, MissingInputError, ModmapError, ValidationError
from .synth import SynthSpec, read_seed_sample

DEFAULT_CONFIG = {
    "paths": {
        "manifest": None,
        "probs": None,
        "annotations": None,
        "seed_sample": None,
        "folds": None,
        "fold_probs": None,
        "out": "out",
    },
    "quality": {"claim_extreme": 0.95, "min_responses": 20, "min_agreement": 0.5},
    "quorum": 5,
    "variant": "full",
    "seed": 0,
    "grid": {"n_trees": list(forest.DEFAULT_GRID_N_TREES),
             "max_depth": list(forest.DEFAULT_GRID_MAX_DEPTH)},
    "folds_hyper": {"n_trees": 100, "max_depth": None},
    "analysis": {"split": "val", "tags": [], "sensitivity_k": 50},
}


# --- config handling -------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def _set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def _parse_dotted_overrides(extras: list[str]) -> dict:
    """Turn ['--a.b', '3', '--c.d=x'] into nested dict overrides."""
    cfg: dict = {}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        tok = tok[2:]
        if "=" in tok:
            key, raw = tok.split("=", 1)
            i += 1
        else:
            key = tok
            if i + 1 >= len(extras):
                raise ConfigError(f"flag --{key} needs a value")
            raw = extras[i + 1]
            i += 2
        _set_dotted(cfg, key, yaml.safe_load(raw))
    return cfg


def parse_grid_string(text: str) -> dict:
    """'n_trees=50,100;max_depth=4,none' -> grid dict."""
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, values = part.partition("=")
        key = key.strip()
        if key not in ("n_trees", "max_depth"):
            raise ConfigError(f"unknown grid axis {key!r}")
        parsed = []
        for v in values.split(","):
            v = v.strip().lower()
            parsed.append(None if v in ("none", "null", "inf") else int(v))
        grid[key] = parsed
    if not grid:
        raise ConfigError(f"could not parse grid string {text!r}")
    return grid


def load_config(args, extras) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise MissingInputError(f"config file not found: {path}")
        with path.open() as fh:
            file_cfg = yaml.safe_load(fh) or {}
        cfg = _deep_merge(cfg, file_cfg)
    cfg = _deep_merge(cfg, _parse_dotted_overrides(extras))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "variant", None):
        cfg["variant"] = args.variant
    if getattr(args, "out", None):
        cfg["paths"]["out"] = args.out
    if getattr(args, "grid", None):
        cfg["grid"] = parse_grid_string(args.grid)
    if getattr(args, "folds", None):
        cfg["paths"]["folds"] = args.folds
    return cfg


def _grid_points(grid_cfg: dict) -> list[forest.ForestHyperparams]:
    return [forest.ForestHyperparams(n_trees=t, max_depth=d)
            for t in grid_cfg["n_trees"] for d in grid_cfg["max_depth"]]


def _path(cfg, name) -> Path:
    value = cfg["paths"].get(name)
    if not value:
        raise MissingInputError(f"config paths.{name} is not set")
    return Path(value)


def _outdir(cfg) -> Path:
    return Path(cfg["paths"]["out"])


def _update_run_manifest(cfg, stage: str, inputs: dict[str, str],
                         outputs: dict[str, Path]) -> None:
    out = _outdir(cfg)
    path = out / "run_manifest.json"
    manifest = {}
    if path.is_file():
        with path.open() as fh:
            manifest = json.load(fh)
    manifest[stage] = {
        "tool_version": __version__,
        "schema_version": runio.SCHEMA_VERSION,
        "seed": cfg["seed"],
        "inputs": inputs,
        "outputs": {name: runio.sha256_file(p) for name, p in sorted(outputs.items())},
    }
    with runio.atomic_write(path) as tmp:
        with Path(tmp).open("w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")


# --- stages ----------------------------------------------------------------

def cmd_simulate(args, extras) -> None:
    spec_path = Path(args.specfile)
    if not spec_path.is_file():
        raise MissingInputError(f"synth spec file not found: {spec_path}")
    with spec_path.open() as fh:
        obj = yaml.safe_load(fh) or {}
    if args.seed is not None:
        obj["seed"] = args.seed
    spec = SynthSpec.from_dict(obj)
    outdir = Path(args.out)
    paths = synth.generate(spec, outdir)
    if args.folds:
        manifest, truth, _ = synth.build_dataset(spec)
        fold_of = synth.assign_folds(spec, manifest)
        with runio.atomic_write(outdir / "folds.json") as tmp:
            with Path(tmp).open("w") as fh:
                json.dump({"fold_of": fold_of}, fh, sort_keys=True)
                fh.write("\n")
        rows = synth.fold_probability_rows(spec, manifest, truth, fold_of)
        synth.write_probability_rows(rows, outdir / "fold_probs.jsonl")
        paths["folds"] = outdir / "folds.json"
        paths["fold_probs"] = outdir / "fold_probs.jsonl"
    for name, p in sorted(paths.items()):
        print(f"simulate: wrote {name}: {p}")


def cmd_aggregate(cfg) -> None:
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "annotations": _path(cfg, "annotations"),
        "seed_sample": _path(cfg, "seed_sample"),
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    records = annotation.read_annotations(_path(cfg, "annotations"), manifest)
    seed_sample = read_seed_sample(_path(cfg, "seed_sample"))
    policy = annotation.QualityPolicy(**cfg["quality"])
    result = annotation.filter_records(records, policy, manifest)
    labels = annotation.aggregate_seed(result.kept, manifest, seed_sample,
                                       quorum=cfg["quorum"])
    claim = annotation.claim_reliability_report(result.kept, labels)

    out = _outdir(cfg) / "labels"
    gold_path = out / "gold.jsonl"
    with runio.atomic_write(gold_path) as tmp:
        annotation.write_labels(labels, tmp)
    stats_path = out / "worker_stats.csv"
    with runio.atomic_write(stats_path) as tmp:
        with Path(tmp).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["worker_id", "n_responses", "agreement_rate",
                             "claim_yes_rate", "seen_before_rate",
                             "consistency_rate", "excluded", "exclusion_reason"])
            for s in result.stats:
                writer.writerow([s.worker_id, s.n_responses, repr(s.agreement_rate),
                                 repr(s.claim_yes_rate), repr(s.seen_before_rate),
                                 repr(s.consistency_rate), int(s.excluded),
                                 s.exclusion_reason])
    meta = runio.artifact_meta(cfg["seed"], inputs, extra={
        "n_records": len(records), "n_kept": len(result.kept),
        "n_dropped": len(result.dropped),
        "claim_reliability": {"fraction": claim.fraction, "n_pairs": claim.n_pairs,
                              "low_support": claim.low_support}})
    runio.write_meta(gold_path, meta)
    _update_run_manifest(cfg, "aggregate", inputs,
                         {"gold": gold_path, "worker_stats": stats_path})
    print(f"aggregate: {len(labels)} labels from {len(result.kept)} kept records "
          f"({len(result.dropped)} dropped)")


def _analyzed_ids(cfg, manifest) -> list[str]:
    split = cfg["analysis"]["split"]
    ids = manifest.splits.get(split)
    if ids is None:
        raise ConfigError(f"manifest has no split named {split!r}")
    return ids


def cmd_featurize(cfg) -> None:
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "probs": _path(cfg, "probs"),
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    store = featurize.ingest_probabilities(_path(cfg, "probs"), manifest)
    layout = featurize.FeatureLayout(
        variant=cfg["variant"], n_modalities=manifest.n_modalities,
        label_space_size=manifest.label_space_size)
    ids = _analyzed_ids(cfg, manifest)
    X = featurize.build_feature_matrix(manifest, store, ids, layout)

    out = _outdir(cfg) / "features"
    feats_path = out / "features.npy"
    with runio.atomic_write(feats_path) as tmp:
        # write through a file object: np.save would append .npy to the tmp name
        with Path(tmp).open("wb") as fh:
            np.save(fh, X, allow_pickle=False)
    ids_path = out / "ids.json"
    with runio.atomic_write(ids_path) as tmp:
        Path(tmp).write_text(json.dumps(ids) + "\n")
    layout_path = out / "layout.json"
    with runio.atomic_write(layout_path) as tmp:
        Path(tmp).write_text(json.dumps(layout.to_dict(), sort_keys=True) + "\n")
    runio.write_meta(feats_path, runio.artifact_meta(cfg["seed"], inputs, extra={
        "n_instances": len(ids), "feature_width": int(X.shape[1])}))
    _update_run_manifest(cfg, "featurize", inputs,
                         {"features": feats_path, "ids": ids_path, "layout": layout_path})
    print(f"featurize: {X.shape[0]} x {X.shape[1]} feature matrix ({cfg['variant']})")


def _load_features(cfg):
    out = _outdir(cfg) / "features"
    runio.require_inputs({"features": out / "features.npy", "ids": out / "ids.json",
                          "layout": out / "layout.json"})
    X = np.load(out / "features.npy")
    ids = json.loads((out / "ids.json").read_text())
    layout = featurize.FeatureLayout.from_dict(
        json.loads((out / "layout.json").read_text()))
    return X, ids, layout


def cmd_train(cfg, modality: str | None = None) -> None:
    gold_path = _outdir(cfg) / "labels" / "gold.jsonl"
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "gold_labels": gold_path,
        "seed_sample": _path(cfg, "seed_sample"),
        "features": _outdir(cfg) / "features" / "features.npy",
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    X, ids, layout = _load_features(cfg)
    row_of = {iid: i for i, iid in enumerate(ids)}
    labels = annotation.read_labels(gold_path, manifest)
    seed_sample = read_seed_sample(_path(cfg, "seed_sample"))
    label_by = {}
    for lab in labels:
        label_by[(lab.instance_id, lab.modality.index)] = lab.solvable

    grid = _grid_points(cfg["grid"])
    modalities = [manifest.modality_by_name(modality)] if modality else manifest.modalities
    out = _outdir(cfg) / "models"
    outputs = {}
    leaderboard_rows = []
    summary = {}
    for mod in modalities:
        def xy(part):
            part_ids = [i for i in seed_sample.ids_in(part) if i in row_of]
            y = np.array([label_by[(i, mod.index)] for i in part_ids])
            return X[[row_of[i] for i in part_ids]], y, part_ids

        X_tr, y_tr, tr_ids = xy("train")
        X_va, y_va, va_ids = xy("val")
        X_te, y_te, te_ids = xy("test")
        model, board = forest.grid_search(X_tr, y_tr, tr_ids, X_va, y_va, va_ids,
                                          grid, cfg["seed"], layout,
                                          modality_name=mod.name)
        model_path = out / f"{mod.name}.json"
        with runio.atomic_write(model_path) as tmp:
            forest.save_model(model, tmp)
        outputs[mod.name] = model_path
        for point in board:
            leaderboard_rows.append([mod.name, point.index, point.hyper.n_trees,
                                     point.hyper.max_depth if point.hyper.max_depth
                                     is not None else "none",
                                     repr(point.val_accuracy)])
        val_eval = forest.evaluate(model, X_va, y_va)
        entry = {"val_accuracy": val_eval.accuracy,
                 "val_majority": val_eval.majority_baseline,
                 "n_trees": model.hyper.n_trees,
                 "max_depth": model.hyper.max_depth}
        if len(te_ids):
            test_eval = forest.evaluate(model, X_te, y_te)
            entry.update(test_accuracy=test_eval.accuracy,
                         test_majority=test_eval.majority_baseline)
        summary[mod.name] = entry
        print(f"train[{mod.name}]: val acc {val_eval.accuracy:.3f} "
              f"(majority {val_eval.majority_baseline:.3f}), "
              f"best n_trees={model.hyper.n_trees} max_depth={model.hyper.max_depth}")

    board_path = out / "leaderboard.csv"
    with runio.atomic_write(board_path) as tmp:
        with Path(tmp).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["modality", "grid_index", "n_trees", "max_depth",
                             "val_accuracy"])
            writer.writerows(leaderboard_rows)
    outputs["leaderboard"] = board_path
    summary_path = out / "eval_summary.json"
    with runio.atomic_write(summary_path) as tmp:
        Path(tmp).write_text(json.dumps(
            runio.artifact_meta(cfg["seed"], inputs, extra={"models": summary}),
            sort_keys=True, indent=2) + "\n")
    outputs["eval_summary"] = summary_path
    _update_run_manifest(cfg, "train", inputs, outputs)


def cmd_predict(cfg) -> None:
    if cfg["paths"].get("folds"):
        _predict_cross_fold(cfg)
        return
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "features": _outdir(cfg) / "features" / "features.npy",
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    model_paths = {m.name: _outdir(cfg) / "models" / f"{m.name}.json"
                   for m in manifest.modalities}
    inputs.update(runio.require_inputs(model_paths))
    models = {name: forest.load_model(p) for name, p in model_paths.items()}
    X, ids, layout = _load_features(cfg)

    labels = []
    for mod in manifest.modalities:
        pred, _ = forest.predict(models[mod.name], X)
        for iid, solvable in zip(ids, pred):
            labels.append(annotation.SolvabilityLabel(
                instance_id=iid, modality=mod, solvable=bool(solvable),
                provenance="silver-classifier"))
    silver_path = _outdir(cfg) / "labels" / "silver.jsonl"
    with runio.atomic_write(silver_path) as tmp:
        annotation.write_labels(labels, tmp)
    runio.write_meta(silver_path, runio.artifact_meta(cfg["seed"], inputs, extra={
        "n_instances": len(ids)}))
    _update_run_manifest(cfg, "predict", inputs, {"silver": silver_path})
    print(f"predict: silver labels for {len(ids)} instances x "
          f"{manifest.n_modalities} modalities")


def _predict_cross_fold(cfg) -> None:
    gold_path = _outdir(cfg) / "labels" / "gold.jsonl"
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "folds": _path(cfg, "folds"),
        "fold_probs": _path(cfg, "fold_probs"),
        "gold_labels": gold_path,
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    fold_of = json.loads(_path(cfg, "folds").read_text())["fold_of"]
    store = featurize.ingest_probabilities(_path(cfg, "fold_probs"), manifest)
    seed_labels = annotation.read_labels(gold_path, manifest)
    layout = featurize.FeatureLayout(
        variant=cfg["variant"], n_modalities=manifest.n_modalities,
        label_space_size=manifest.label_space_size)
    hyper = forest.ForestHyperparams(**cfg["folds_hyper"])
    mmap = analysis.cross_fold_annotate(manifest, fold_of, store, seed_labels,
                                        layout, hyper, cfg["seed"])
    labels = []
    for iid in sorted(mmap.masks):
        for mod in manifest.modalities:
            labels.append(annotation.SolvabilityLabel(
                instance_id=iid, modality=mod,
                solvable=bool(mmap.masks[iid] & (1 << mod.index)),
                provenance="silver-classifier"))
    silver_path = _outdir(cfg) / "labels" / "silver.jsonl"
    with runio.atomic_write(silver_path) as tmp:
        annotation.write_labels(labels, tmp)
    runio.write_meta(silver_path, runio.artifact_meta(cfg["seed"], inputs, extra={
        "cross_fold": True, "n_instances": len(mmap.masks)}))
    _update_run_manifest(cfg, "predict", inputs, {"silver": silver_path})
    print(f"predict: cross-fold silver labels for {len(mmap.masks)} instances")


def cmd_analyze(cfg) -> None:
    silver_path = _outdir(cfg) / "labels" / "silver.jsonl"
    inputs = runio.require_inputs({
        "manifest": _path(cfg, "manifest"),
        "probs": _path(cfg, "probs"),
        "silver_labels": silver_path,
    })
    manifest = parse_manifest(_path(cfg, "manifest"))
    store = featurize.ingest_probabilities(_path(cfg, "probs"), manifest)
    labels = annotation.read_labels(silver_path, manifest)
    mmap = analysis.labels_to_map(labels, manifest)
    ids = [i for i in _analyzed_ids(cfg, manifest) if i in mmap.masks]

    hist = analysis.answerability_histogram(mmap, manifest)
    venn = analysis.venn_regions(mmap, manifest)
    rows = analysis.build_row_filters(manifest, mmap, ids,
                                      tags=cfg["analysis"]["tags"])
    columns = {"base": manifest.full_mask}
    for mod in manifest.modalities:
        columns[mod.name] = 1 << mod.index
    for mod in manifest.modalities:
        non_mask = manifest.full_mask & ~(1 << mod.index)
        if non_mask and non_mask not in columns.values():
            columns[f"non_{mod.name}"] = non_mask
    table = analysis.split_accuracy(manifest, store, rows, columns)

    report = {
        "schema_version": runio.SCHEMA_VERSION,
        "tool_version": __version__,
        "seed": cfg["seed"],
        "provenance": mmap.provenance,
        "histogram": {"fractions": hist.fractions, "none": hist.none_fraction,
                      "counts": hist.counts, "none_count": hist.none_count,
                      "total": hist.total},
        "venn": {"region_counts": {str(m): c for m, c in venn.region_counts.items()},
                 "total": venn.total, "fraction_multi": venn.fraction_multi,
                 "fraction_all": venn.fraction_all},
        "split_accuracy": [
            {"row": r, "column": c,
             "accuracy": table.cells[(r, c)], "n": table.counts[(r, c)]}
            for r in table.row_names for c in table.column_names],
        "warnings": table.warnings,
    }

    carto_records, ambiguous, excluded = analysis.cartography(store, manifest, ids)
    if carto_records:
        crosstab = analysis.cartography_crosstab(ambiguous, ids, mmap, manifest)
        report["cartography"] = {
            "n_instances": len(carto_records),
            "ambiguous_size": len(ambiguous),
            "n_excluded": len(excluded),
            "all_fractions": crosstab["all"],
            "ambiguous_fractions": crosstab["ambiguous"],
            "variance_kind": "population",
        }

    k = cfg["analysis"]["sensitivity_k"]
    sensitivity = {}
    for mod in manifest.modalities:
        ranking, truncated = analysis.sensitivity_ranking(store, manifest, mod.name,
                                                          k, instance_ids=ids)
        sensitivity[mod.name] = {
            "top": [{"instance_id": iid, "drop": drop} for iid, drop in ranking],
            "truncated": truncated}
    report["sensitivity"] = sensitivity

    out = _outdir(cfg) / "reports"
    report_path = out / "report.json"
    with runio.atomic_write(report_path) as tmp:
        Path(tmp).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    venn_path = out / "venn.csv"
    with runio.atomic_write(venn_path) as tmp:
        analysis.write_venn_csv(venn, manifest, tmp)
    plot_path = out / "plotdata.csv"
    with runio.atomic_write(plot_path) as tmp:
        analysis.write_plotdata_csv(hist, tmp)
    runio.write_meta(report_path, runio.artifact_meta(cfg["seed"], inputs))
    _update_run_manifest(cfg, "analyze", inputs,
                         {"report": report_path, "venn": venn_path,
                          "plotdata": plot_path})
    print(f"analyze: report over {hist.total} instances "
          f"({mmap.provenance}); none fraction {hist.none_fraction:.3f}")


def cmd_pipeline(cfg) -> None:
    cmd_aggregate(cfg)
    cmd_featurize(cfg)
    cmd_train(cfg)
    cmd_predict(cfg)
    cmd_analyze(cfg)


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modmap",
        description="Map multimodal dataset instances to the modality subsets "
                    "sufficient to solve them.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset + campaign")
    sim.add_argument("specfile", help="YAML/JSON synth spec")
    sim.add_argument("--out", required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--folds", action="store_true",
                     help="also emit fold assignment and cross-fold probabilities")

    for name in ("aggregate", "featurize", "train", "predict", "analyze", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant",
                       choices=("full", "single_probability", "no_gold_sort"))
        p.add_argument("--grid", help="e.g. 'n_trees=50,100;max_depth=4,none'")
        p.add_argument("--out")
        p.add_argument("--folds", help="folds.json for cross-fold prediction")
        if name == "train":
            p.add_argument("--modality", help="train only this modality")
    return parser


def run(argv=None) -> None:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    if args.command == "simulate":
        if extras:
            raise ConfigError(f"unexpected arguments: {extras}")
        cmd_simulate(args, extras)
        return
    cfg = load_config(args, extras)
    if args.command == "aggregate":
        cmd_aggregate(cfg)
    elif args.command == "featurize":
        cmd_featurize(cfg)
    elif args.command == "train":
        cmd_train(cfg, modality=getattr(args, "modality", None))
    elif args.command == "predict":
        cmd_predict(cfg)
    elif args.command == "analyze":
        cmd_analyze(cfg)
    elif args.command == "pipeline":
        cmd_pipeline(cfg)


def main(argv=None) -> int:
    try:
        run(argv)
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ModmapError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
