"""Experiment phases behind the CLI verbs.

Each phase is a deterministic function of (config, inputs, seeds) and
communicates with later phases only through files under the output
directory; rerunning a phase with the same config reproduces its
outputs byte for byte.
"""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from . import applicability as app
from . import cactus
from .config import ExperimentConfig
from .data import (DatasetManifest, SubsetLabel, build_splits,
                   generate_synthetic, load_dataset, load_idx,
                   synthetic_manifest)
from .errors import ConfigError
from .nn import (Network, accuracy, checkpoint_load, checkpoint_save, forward,
                 train_classifier)
from .predictor import (build_predictor, evaluate_predictor, load_predictor,
                        predict_applicability, save_predictor, train_predictor)
from .seeding import derive_seed

BASE_CKPT = "base.ckpt"
BASE_METRICS = "base_metrics.csv"
RECORDS_CSV = "records.csv"
TABLE_CSV = "applicability.csv"
CURVES_CSV = "subset_curves.csv"
MEASURE_META = "measure_meta.json"
PREDICTOR_SUMMARY = "predictor_summary.json"
PREDICTOR_EVAL = "predictor_eval.csv"
GROWTH_LOG = "growth_log.jsonl"
TREE_DIR = "tree"
HISTOGRAM_CSV = "verdict_histogram.csv"
REPORT_DIR = "report"


def _fmt(v) -> str:
    return repr(float(v))


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------

def resolve_sources(cfg: ExperimentConfig, manifest: DatasetManifest):
    """class_id -> image stack for every manifest class."""
    if cfg.dataset.type == "synthetic":
        ds = generate_synthetic(cfg.dataset.classes_per_family,
                                cfg.dataset.per_class,
                                cfg.dataset.image_side, cfg.dataset.seed)
        return ds.images
    sources = {}
    for group in cfg.dataset.groups:
        images = load_idx(cfg.path(group["images"]))
        labels = load_idx(cfg.path(group["labels"]))
        offset = int(group.get("id_offset", 0))
        for cid in np.unique(labels):
            sources[int(cid) + offset] = images[labels == cid]
    return sources


def load_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    if not cfg.manifest_path.is_file():
        raise ConfigError(f"manifest not found: {cfg.manifest_path}")
    return DatasetManifest.load(cfg.manifest_path)


def prepare(cfg: ExperimentConfig) -> Path:
    """Write the manifest for a synthetic experiment (the one phase that
    creates rather than consumes the manifest)."""
    if cfg.dataset.type != "synthetic":
        raise ConfigError("prepare only generates synthetic manifests; "
                          "point `manifest` at an existing file instead")
    ds = generate_synthetic(cfg.dataset.classes_per_family,
                            cfg.dataset.per_class,
                            cfg.dataset.image_side, cfg.dataset.seed)
    manifest = synthetic_manifest(
        ds, cfg.dataset.num_known, cfg.dataset.num_objective_unknown,
        cfg.dataset.num_nonobjective_unknown, cfg.k, cfg.train_fraction,
        seed=cfg.dataset.seed)
    cfg.manifest_path.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(cfg.manifest_path)
    return cfg.manifest_path


def _splits(cfg: ExperimentConfig, manifest: DatasetManifest):
    return build_splits(manifest, resolve_sources(cfg, manifest))


def _known_training_set(manifest, splits):
    known = manifest.known_ids
    images = np.concatenate([splits.train_images(c) for c in known])
    labels = np.concatenate([
        np.full(splits.train_images(c).shape[0], i, dtype=np.int64)
        for i, c in enumerate(known)])
    test = np.concatenate([splits.test_images(c) for c in known])
    test_labels = np.concatenate([
        np.full(splits.test_images(c).shape[0], i, dtype=np.int64)
        for i, c in enumerate(known)])
    return images, labels, test, test_labels


# ---------------------------------------------------------------------
# train-base
# ---------------------------------------------------------------------

def run_train_base(cfg: ExperimentConfig) -> dict:
    manifest = load_manifest(cfg)
    if not manifest.known_ids:
        raise ConfigError("manifest has no objective-known classes")
    splits = _splits(cfg, manifest)
    images, labels, test, test_labels = _known_training_set(manifest, splits)

    net = Network.build(cfg.layers, cfg.input_shape,
                        seed=derive_seed(cfg.master_seed, 0xBA5E))
    budget = cfg.train.base.with_seed(derive_seed(cfg.master_seed, 0xBA5E, 1))
    net, history = train_classifier(net, images, labels, budget)
    test_acc = accuracy(net, test, test_labels)

    out = cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    checkpoint_save(net, out / BASE_CKPT)
    with open(out / BASE_METRICS, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "accuracy"])
        for row in history:
            w.writerow([row["epoch"], _fmt(row["loss"]), _fmt(row["accuracy"])])
    return {"test_accuracy": test_acc, "epochs": len(history),
            "checkpoint": str(out / BASE_CKPT)}


# ---------------------------------------------------------------------
# measure
# ---------------------------------------------------------------------

def _manifest_sha256(cfg) -> str:
    return hashlib.sha256(cfg.manifest_path.read_bytes()).hexdigest()


def run_measure(cfg: ExperimentConfig) -> dict:
    manifest = load_manifest(cfg)
    out = cfg.out_path
    base_path = out / BASE_CKPT
    if not base_path.is_file():
        raise ConfigError(f"base checkpoint missing: {base_path} "
                          "(run train-base first)")
    net = checkpoint_load(base_path)
    splits = _splits(cfg, manifest)

    records_path = out / RECORDS_CSV
    completed_records = []
    if records_path.is_file():
        completed_records = app.read_records_csv(records_path)
    completed = {(r.x, r.un_j, r.layer_index) for r in completed_records}

    journal_new = not records_path.is_file()
    first = [journal_new]

    def journal(record):
        app.append_record_csv(records_path, record, write_header=first[0])
        first[0] = False

    result = app.layer_sweep(
        net, manifest.measured_ids, manifest.probe_set, splits,
        cfg.train.pair, cfg.taps, master_seed=cfg.master_seed,
        classes={c.class_id: c for c in manifest.classes},
        workers=cfg.workers, completed=completed, on_record=journal)

    all_records = sorted(set(completed_records) | set(result.records),
                         key=lambda r: (r.x, r.layer_index, r.un_j))
    table = app.build_table(all_records,
                            {c.class_id: c for c in manifest.classes},
                            sorted(manifest.probe_set), manifest.k,
                            failures=result.failures)
    # canonical rewrite: byte-identical regardless of completion order
    app.write_records_csv(records_path, all_records)
    app.write_table_csv(out / TABLE_CSV, table)
    curves = app.subset_average(table)
    app.write_curves_csv(out / CURVES_CSV, curves)
    _write_json(out / MEASURE_META, {
        "manifest_sha256": _manifest_sha256(cfg),
        "master_seed": cfg.master_seed,
        "taps": list(cfg.taps),
        "k": manifest.k,
        "pair_budget": {"learning_rate": cfg.train.pair.learning_rate,
                        "epochs": cfg.train.pair.epochs,
                        "batch_size": cfg.train.pair.batch_size},
        "jobs": len(all_records),
        "failures": [{"x": f.x, "un_j": f.un_j, "layer": f.layer_index,
                      "error": f.error} for f in result.failures],
    })
    return {"records": len(all_records), "failures": len(result.failures),
            "entries": len(table.entries)}


def load_table(cfg: ExperimentConfig):
    manifest = load_manifest(cfg)
    records = app.read_records_csv(cfg.out_path / RECORDS_CSV)
    return app.build_table(records, {c.class_id: c for c in manifest.classes},
                           sorted(manifest.probe_set), manifest.k), manifest


# ---------------------------------------------------------------------
# train-predictors
# ---------------------------------------------------------------------

def _tap_activations(net, images, taps):
    trace = forward(net, images)
    return {tap: trace[tap] for tap in taps}


def _auto_heldout(manifest, table, taps) -> list:
    """One held-out class per subset: the most representative member.

    Representative means the class whose applicability row is closest
    (L2 over the tapped layers) to its subset's mean curve; ties break
    to the lower class id.  Atypical classes stay in the training pool,
    where their unusual activations broaden predictor coverage.
    """
    picks = []
    for subset in SubsetLabel:
        ids = [cid for cid in manifest.measured_ids
               if manifest.entry(cid).subset is subset
               and all((cid, t) in table.entries for t in taps)]
        if not ids:
            continue
        mean = {t: sum(table.app(c, t) for c in ids) / len(ids) for t in taps}
        picks.append(min(ids, key=lambda c: (
            sum((table.app(c, t) - mean[t]) ** 2 for t in taps), c)))
    return picks


def predictor_ckpt_name(tap: int) -> str:
    return f"predictor_tap{tap:02d}.ckpt"


def run_train_predictors(cfg: ExperimentConfig) -> dict:
    out = cfg.out_path
    if not (out / RECORDS_CSV).is_file():
        raise ConfigError("applicability records missing: run measure first")
    if not (out / BASE_CKPT).is_file():
        raise ConfigError("base checkpoint missing: run train-base first")
    table, manifest = load_table(cfg)
    net = checkpoint_load(out / BASE_CKPT)
    splits = _splits(cfg, manifest)

    heldout = list(cfg.heldout_classes) or _auto_heldout(manifest, table, cfg.taps)
    bad = [c for c in heldout if c not in manifest.measured_ids]
    if bad:
        raise ConfigError(f"held-out classes {bad} are not measured classes")
    train_ids = [c for c in manifest.measured_ids if c not in heldout]

    train_acts = {cid: _tap_activations(net, splits.train_images(cid), cfg.taps)
                  for cid in manifest.measured_ids}
    test_acts = {cid: _tap_activations(net, splits.test_images(cid), cfg.taps)
                 for cid in heldout}

    summary = []
    eval_rows = []
    for tap in cfg.taps:
        tap_shape = tuple(net.shapes[tap])
        if len(tap_shape) == 1:
            tap_shape = (1, 1, tap_shape[0])
        spec = build_predictor(tap_shape)
        samples, held_samples = [], []
        for cid in train_ids:
            target = table.app(cid, tap)
            acts = train_acts[cid][tap]
            samples.extend((acts[i], target) for i in range(acts.shape[0]))
        for cid in heldout:
            target = table.app(cid, tap)
            acts = train_acts[cid][tap]
            held_samples.extend((acts[i], target) for i in range(acts.shape[0]))
        budget = cfg.train.predictor.with_seed(
            derive_seed(cfg.master_seed, 0x93ED, tap))
        model, report = train_predictor(spec, samples, budget,
                                        heldout=held_samples,
                                        layer_index=tap,
                                        train_class_ids=train_ids)
        save_predictor(model, out / predictor_ckpt_name(tap))
        summary.append({"layer": tap,
                        "train_mse": report.final_train_mse,
                        "heldout_mse": report.heldout_mse})
        held_eval = {cid: (test_acts[cid][tap], table.app(cid, tap))
                     for cid in heldout}
        ev = evaluate_predictor(model, held_eval)
        for row in ev.rows:
            eval_rows.append({
                "class": row.class_id,
                "subset": manifest.entry(row.class_id).subset.value,
                "layer": tap,
                "actual_app": row.actual_app,
                "mean_predicted": row.mean_predicted,
                "abs_err": row.abs_err,
            })

    _write_json(out / PREDICTOR_SUMMARY,
                {"layers": summary, "heldout_classes": sorted(heldout)})
    with open(out / PREDICTOR_EVAL, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "subset", "layer", "actual_app",
                    "mean_predicted", "abs_err"])
        for row in sorted(eval_rows, key=lambda r: (r["class"], r["layer"])):
            w.writerow([row["class"], row["subset"], row["layer"],
                        _fmt(row["actual_app"]), _fmt(row["mean_predicted"]),
                        _fmt(row["abs_err"])])
    return {"layers": summary, "heldout": sorted(heldout)}


# ---------------------------------------------------------------------
# cactus-run
# ---------------------------------------------------------------------

def _thresholds(cfg, table, manifest) -> cactus.Thresholds:
    if cfg.threshold_overrides:
        o = cfg.threshold_overrides
        return cactus.compute_thresholds(o["q"], o["y1"], o["y2"])
    labels = {cid: manifest.entry(cid).subset for cid in manifest.measured_ids}
    q, y1, y2 = cactus.baseline_from_tables(
        table, labels, cfg.threshold_reference_tap, cfg.threshold_final_tap)
    return cactus.compute_thresholds(q, y1, y2)


def build_cactus_tree(cfg: ExperimentConfig, mock=False):
    out = cfg.out_path
    net = checkpoint_load(out / BASE_CKPT)
    table, manifest = load_table(cfg)
    thresholds = _thresholds(cfg, table, manifest)
    predictors = {}
    for tap in cfg.taps:
        if mock:
            predictors[tap] = _MockSentinel()
        else:
            ckpt = out / predictor_ckpt_name(tap)
            if not ckpt.is_file():
                raise ConfigError(f"predictor checkpoint missing: {ckpt}")
            model = load_predictor(ckpt)
            predictors[tap] = _PredictorFn(model)
    return cactus.build_tree(net, cfg.taps, predictors, thresholds,
                             labels=manifest.known_ids,
                             decision_depth=cfg.decision_depth), manifest


class _PredictorFn:
    def __init__(self, model):
        self.model = model

    def __call__(self, activation):
        return predict_applicability(self.model, activation)


class _MockSentinel:
    def __call__(self, activation):
        raise ConfigError("mock stream items must carry a mock_app value")


def read_stream(cfg: ExperimentConfig, manifest, stream_path):
    """Decode a stream file into ((image, mock_app), subset_tag) items.

    Formats: {"type": "mock", "apps": [...]} replays scripted
    applicability values; {"type": "manifest", "classes": [...],
    "per_class": n} draws test images of manifest classes;
    {"type": "dataset", "path": ...} walks a binary dataset cache.
    """
    stream_path = Path(stream_path)
    if not stream_path.is_file():
        raise ConfigError(f"stream file not found: {stream_path}")
    with open(stream_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("type")
    side = cfg.input_shape
    if kind == "mock":
        blank = np.zeros(side, dtype=np.float32)
        return [((blank, float(a)), "mock") for a in doc["apps"]]
    if kind == "manifest":
        splits = _splits(cfg, manifest)
        items = []
        per = int(doc.get("per_class", 1))
        for cid in doc["classes"]:
            entry = manifest.entry(cid)
            images = splits.test_images(cid)[:per]
            items.extend(((img, None), entry.subset.value) for img in images)
        return items
    if kind == "dataset":
        ds = load_dataset(cfg.path(doc["path"]))
        return [((img, None), ds.family(cid))
                for cid in sorted(ds.images) for img in ds.images[cid]]
    raise ConfigError(f"unknown stream type {kind!r}")


def run_cactus(cfg: ExperimentConfig, stream_path) -> dict:
    out = cfg.out_path
    if not (out / RECORDS_CSV).is_file():
        raise ConfigError("applicability records missing: run measure first")
    stream_path = Path(stream_path)
    if not stream_path.is_file():
        raise ConfigError(f"stream file not found: {stream_path}")
    mock = json.loads(stream_path.read_text(encoding="utf-8")).get("type") == "mock"
    tree, manifest = build_cactus_tree(cfg, mock=mock)
    items = read_stream(cfg, manifest, stream_path)

    gcfg = cactus.GrowthConfig(
        max_branches_per_node=int(cfg.growth["max_branches_per_node"]),
        consolidation_window=int(cfg.growth["consolidation_window"]),
        seed=derive_seed(cfg.master_seed, 0x6120))
    log = cactus.grow(tree, [item for item, _ in items], gcfg)

    cactus.save_growth_log(log, out / GROWTH_LOG)
    cactus.save_tree(tree, out / TREE_DIR)
    counts = {}
    for (item, subset), decision in zip(items, log.decisions):
        key = (subset, decision.verdict.value)
        counts[key] = counts.get(key, 0) + 1
    with open(out / HISTOGRAM_CSV, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "verdict", "count"])
        for (subset, verdict), count in sorted(counts.items()):
            w.writerow([subset, verdict, count])
    branches = [d.branch_created for d in log.decisions
                if d.branch_created is not None]
    return {"inputs": len(log.decisions), "branches_created": branches,
            "verdicts": {v.value: c for v, c in log.verdict_counts().items()}}


# ---------------------------------------------------------------------
# report
# ---------------------------------------------------------------------

def run_report(cfg: ExperimentConfig) -> dict:
    out = cfg.out_path
    missing = [name for name in (CURVES_CSV, PREDICTOR_EVAL, GROWTH_LOG)
               if not (out / name).is_file()]
    if missing:
        raise ConfigError(f"report inputs missing: {missing}")
    report = out / REPORT_DIR
    report.mkdir(parents=True, exist_ok=True)

    # subset curves: schema subset,layer,mean_app
    (report / "curves.csv").write_bytes((out / CURVES_CSV).read_bytes())

    # predictor fidelity: one row per held-out class, taken at the
    # reference tap (the full per-layer sweep stays in predictor_eval.csv)
    with open(out / PREDICTOR_EVAL, encoding="utf-8", newline="") as fh:
        eval_rows = [r for r in csv.DictReader(fh)
                     if int(r["layer"]) == cfg.threshold_reference_tap]
    with open(report / "predictor_fidelity.csv", "w", encoding="utf-8",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "subset", "actual_app", "mean_predicted",
                    "abs_err"])
        for r in sorted(eval_rows, key=lambda r: int(r["class"])):
            w.writerow([r["class"], r["subset"], r["actual_app"],
                        r["mean_predicted"], r["abs_err"]])

    log = cactus.load_growth_log(out / GROWTH_LOG)
    counts = {v.value: c for v, c in sorted(
        log.verdict_counts().items(), key=lambda kv: kv[0].value)}
    _write_json(report / "growth_summary.json", {
        "inputs": len(log.decisions),
        "verdicts": counts,
        "branches_created": [d.branch_created for d in log.decisions
                             if d.branch_created is not None],
        "unrouted": sum(1 for d in log.decisions if d.unrouted),
    })
    return {"report_dir": str(report)}
