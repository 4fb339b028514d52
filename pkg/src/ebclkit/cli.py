"""Command-line entry point.

Every stage reads a single JSON config (defaults from ``ebclkit config
print-defaults``), writes its artifacts into a directory under the workdir
and stamps that directory with the config hash and seed. Stage directories
are built in a temporary location and renamed into place, so an interrupted
run never leaves unstamped output behind.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .analysis import elbow_curve, km_curve, kmeans, stratification_report, survival_svg
from .encoder import EncoderConfig
from .errors import ConfigurationError, EbclError
from .evaluation import (
    DEFAULT_L2_GRID,
    KnnSweep,
    binary_metrics,
    build_embedding_table,
    knn_eval,
    linear_probe,
)
from .events import (
    DetectorConfig,
    LeakageRule,
    SplitSpec,
    WindowParams,
    build_pairs,
    ingest,
    read_outcomes,
)
from .featurize import TabularBaseline, Vocabulary, top_features
from .objectives import OBJECTIVES
from .pipeline import SPLITS, load_encoded, prepare_cohort, save_encoded
from .synthetic import GeneratorConfig, write_cohort
from .training import (
    PretrainData,
    RunConfig,
    SearchSpec,
    extract_backbone,
    finetune,
    hyperparameter_search,
    model_config,
    pretrain,
    pretrain_epochs,
    random_backbone,
    restore_pretrained,
    save_checkpoint,
)

log = logging.getLogger("ebclkit")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EXISTS, EXIT_LOCKED = 0, 1, 2, 3, 4
BASELINE_METHODS = ("random", "tabular")


class StageExists(EbclError):
    pass


# ---------------------------------------------------------------------------
# configuration


def default_config() -> dict:
    run = RunConfig()
    search = SearchSpec()
    sweep = KnnSweep()
    return {
        "paths": {"data": None, "outcomes": None, "workdir": None},
        "seed": 0,
        "generator": GeneratorConfig().to_dict(),
        "detector": asdict(DetectorConfig()),
        "window": asdict(WindowParams()),
        "split": {"fractions": list(SplitSpec().fractions)},
        "vocabulary": {"min_count": None},
        "leakage": {"tasks": dict(LeakageRule().tasks), "min_gap_days": LeakageRule().min_gap_days},
        "encoder": EncoderConfig().to_dict(),
        "pretrain": {
            "objective": "ebcl",
            "learning_rate": run.learning_rate,
            "dropout": run.dropout,
            "batch_size": 64,
            "max_epochs": 300,
            "early_stop_tolerance": None,
            "weight_decay": 0.0,
            "ocp_max_len": run.ocp_max_len,
            "strats_window_days": run.strats_window_days,
            "duett_mask_rate": run.duett_mask_rate,
            "duett_bins": run.duett_bins,
        },
        "search": {
            "enabled": False,
            "n_trials": search.n_trials,
            "lr_range": list(search.lr_range),
            "dropout_range": list(search.dropout_range),
            "grace_period": search.grace_period,
            "reduction_factor": search.reduction_factor,
        },
        "methods": ["random", "ebcl"],
        "tasks": ["mortality", "long_stay"],
        "finetune": {
            "learning_rate": 1e-3,
            "dropout": 0.1,
            "batch_size": 128,
            "max_epochs": 100,
            "early_stop_tolerance": None,
            "seeds": [0, 1, 2, 3, 4],
        },
        "probe": {"l2_grid": list(DEFAULT_L2_GRID), "n_bootstrap": 1000},
        "knn": {
            "weights": list(sweep.weights),
            "models": list(sweep.models),
            "metrics": list(sweep.metrics),
            "ks": list(sweep.ks),
            "n_bootstrap": 1000,
        },
        "cluster": {"task": "mortality", "K_grid": list(range(2, 13)), "n_init": 10, "K": None},
    }


# sections whose value is a free-form mapping rather than a fixed field set
_OPEN_MAPPINGS = {("leakage", "tasks")}


def merge_config(base: dict, override: dict, path: tuple = ()) -> tuple:
    """Overlay ``override`` on ``base``; returns ``(merged, errors)`` with an
    error for every unknown field."""
    out = copy.deepcopy(base)
    errors = []
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            errors.append(f"{where}: unknown field")
            continue
        if isinstance(base[key], dict) and path + (key,) not in _OPEN_MAPPINGS:
            if not isinstance(value, dict):
                errors.append(f"{where}: expected an object")
                continue
            out[key], sub = merge_config(base[key], value, path + (key,))
            errors += sub
        else:
            out[key] = copy.deepcopy(value)
    return out, errors


def _positive(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _count(x):
    return isinstance(x, int) and not isinstance(x, bool) and x >= 1


def _nonneg_int(x):
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def _dropout(x):
    return isinstance(x, (int, float)) and 0.0 <= x <= 0.6


# dotted field -> (predicate, message); checked before the section constructors
_FIELD_RULES = {
    "generator.n_patients": (_count, "must be an integer >= 1"),
    "generator.obs_rate": (_positive, "must be > 0"),
    "window.tau": (_count, "must be an integer >= 1"),
    "window.min_len": (_nonneg_int, "must be an integer >= 0"),
    "window.censor_pre": (_nonneg_int, "must be an integer >= 0"),
    "window.censor_post": (_nonneg_int, "must be an integer >= 0"),
    "encoder.d_token": (_count, "must be an integer >= 1"),
    "encoder.d_embed": (_count, "must be an integer >= 1"),
    "encoder.max_len": (_count, "must be an integer >= 1"),
    "pretrain.learning_rate": (_positive, "must be > 0"),
    "pretrain.dropout": (_dropout, "must lie in [0, 0.6]"),
    "pretrain.batch_size": (_count, "must be an integer >= 1"),
    "pretrain.max_epochs": (_count, "must be an integer >= 1"),
    "finetune.learning_rate": (_positive, "must be > 0"),
    "finetune.dropout": (_dropout, "must lie in [0, 0.6]"),
    "finetune.batch_size": (_count, "must be an integer >= 1"),
    "finetune.max_epochs": (_count, "must be an integer >= 1"),
    "search.n_trials": (_count, "must be an integer >= 1"),
    "probe.n_bootstrap": (_count, "must be an integer >= 1"),
    "knn.n_bootstrap": (_count, "must be an integer >= 1"),
}


def validate_config(cfg: dict) -> list:
    """Field-level validation messages (empty when the config is usable)."""
    errors = []
    bad_sections = set()
    for dotted, (ok, msg) in _FIELD_RULES.items():
        section, key = dotted.split(".")
        value = cfg[section][key]
        if not ok(value):
            errors.append(f"{dotted}: {msg} (got {value!r})")
            bad_sections.add(section)

    def check(section, fn):
        if section in bad_sections:
            return
        try:
            fn()
        except (ConfigurationError, TypeError, ValueError) as exc:
            errors.append(f"{section}: {exc}")

    check("generator", lambda: GeneratorConfig.from_dict(cfg["generator"]))
    check("detector", lambda: DetectorConfig(**cfg["detector"]))
    check("window", lambda: _window(cfg))
    check("split", lambda: SplitSpec(tuple(cfg["split"]["fractions"]), cfg["seed"]))
    check("leakage", lambda: [LeakageRule(cfg["leakage"]["tasks"]).inputs(t) for t in cfg["leakage"]["tasks"]])
    check("encoder", lambda: EncoderConfig.from_dict(cfg["encoder"]))
    check("pretrain", lambda: _pretrain_run(cfg))
    check("finetune", lambda: _finetune_run(cfg, "mortality", 0))
    check("search", lambda: _search_spec(cfg))
    for key in ("data", "outcomes"):
        p = cfg["paths"][key]
        if p is not None and not Path(p).exists():
            errors.append(f"paths.{key}: {p} does not exist")
    if not isinstance(cfg["seed"], int):
        errors.append("seed: expected an integer")
    if cfg["pretrain"]["objective"] not in OBJECTIVES:
        errors.append(f"pretrain.objective: must be one of {OBJECTIVES}")
    for m in cfg["methods"]:
        if m not in OBJECTIVES + BASELINE_METHODS:
            errors.append(f"methods: {m!r} is not one of {OBJECTIVES + BASELINE_METHODS}")
    for t in cfg["tasks"]:
        if t not in cfg["leakage"]["tasks"]:
            errors.append(f"tasks: {t!r} has no leakage rule")
    if not cfg["finetune"]["seeds"]:
        errors.append("finetune.seeds: needs at least one seed")
    if not cfg["probe"]["l2_grid"]:
        errors.append("probe.l2_grid: empty")
    if not all(cfg["knn"][k] for k in ("weights", "models", "metrics", "ks")):
        errors.append("knn: empty sweep")
    if len(cfg["cluster"]["K_grid"]) < 3:
        errors.append("cluster.K_grid: needs at least 3 values")
    return errors


def config_hash(cfg: dict) -> str:
    # the workdir location does not change any artifact
    doc = copy.deepcopy(cfg)
    doc["paths"].pop("workdir", None)
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _window(cfg) -> WindowParams:
    return WindowParams(**cfg["window"])


def _pretrain_run(cfg, **over) -> RunConfig:
    p = dict(cfg["pretrain"])
    name = p.pop("objective")
    return RunConfig(name=name, seed=cfg["seed"], **{**p, **over})


def _finetune_run(cfg, task, seed) -> RunConfig:
    params = {k: v for k, v in cfg["finetune"].items() if k != "seeds"}
    return RunConfig(name=task, seed=seed, **params)


def _search_spec(cfg) -> SearchSpec:
    s = cfg["search"]
    return SearchSpec(s["n_trials"], tuple(s["lr_range"]), tuple(s["dropout_range"]), s["grace_period"],
                      s["reduction_factor"], cfg["pretrain"]["max_epochs"], cfg["seed"])


def load_config(path, seed=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError("config root must be a JSON object")
        cfg, errors = merge_config(cfg, user)
    else:
        errors = []
    if seed is not None:
        cfg["seed"] = seed
    errors += validate_config(cfg)
    if errors:
        raise ConfigurationError("; ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# workdir and stamping


class Workspace:
    def __init__(self, root: Path, cfg: dict, force: bool):
        self.root = root
        self.cfg = cfg
        self.force = force
        self.hash = config_hash(cfg)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def stamp(self, stage: str) -> dict:
        return {"stage": stage, "config_hash": self.hash, "seed": self.cfg["seed"], "version": __version__}

    def require(self, *parts) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise ConfigurationError(f"missing input {p}; run the upstream stage first")
        stamp = p / "stamp.json" if p.is_dir() else p.parent / "stamp.json"
        if stamp.exists():
            found = json.loads(stamp.read_text())["config_hash"]
            if found != self.hash:
                log.warning("%s was produced under config %s (current %s)", p, found, self.hash)
        return p

    @contextmanager
    def stage(self, *parts, name: str):
        """Build a stage directory atomically; refuses to replace an existing
        one unless ``force`` is set."""
        final = self.path(*parts)
        if final.exists() and not self.force:
            raise StageExists(f"{final} exists; pass --force to overwrite")
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=final.parent, prefix=f".{final.name}.", suffix=".tmp"))
        try:
            yield tmp
            write_json(tmp / "stamp.json", self.stamp(name))
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp)


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


# ---------------------------------------------------------------------------
# shared loaders


def _data_paths(ws: Workspace) -> tuple:
    paths = ws.cfg["paths"]
    events = Path(paths["data"]) if paths["data"] else ws.require("cohort", "events.jsonl")
    outcomes = Path(paths["outcomes"]) if paths["outcomes"] else ws.path("cohort", "outcomes.jsonl")
    return events, (outcomes if outcomes.exists() else None)


def _load_dataset(ws: Workspace):
    events, outcomes = _data_paths(ws)
    dataset = ingest(events)
    return dataset, (read_outcomes(outcomes) if outcomes else None)


def _load_prepared(ws: Workspace) -> tuple:
    root = ws.require("preprocess")
    vocab = Vocabulary.from_json(json.loads((root / "vocabulary.json").read_text()))
    encoded = {s: load_encoded(root / f"{s}.npz") for s in SPLITS}
    splits = json.loads((root / "splits.json").read_text())
    return vocab, encoded, splits


def _leakage(cfg) -> LeakageRule:
    return LeakageRule(cfg["leakage"]["tasks"], cfg["leakage"]["min_gap_days"])


def _backbone(ws: Workspace, method: str, vocab: Vocabulary, seed: int):
    if method == "random":
        return random_backbone(vocab, EncoderConfig.from_dict(ws.cfg["encoder"]), seed)
    model, _ = restore_pretrained(ws.require("pretrain", method, "checkpoint.zip"))
    return extract_backbone(model)


def _methods(ws: Workspace, arg) -> list:
    return [arg] if arg else list(ws.cfg["methods"])


# ---------------------------------------------------------------------------
# stages


def cmd_generate(ws: Workspace, args) -> None:
    gen = GeneratorConfig.from_dict({**ws.cfg["generator"], "seed": ws.cfg["seed"]})
    with ws.stage("cohort", name="generate") as out:
        paths = write_cohort(gen, out)
        write_json(out / "generator.json", gen.to_dict())
    log.info("cohort written: %s", {k: p.name for k, p in paths.items()})


def cmd_preprocess(ws: Workspace, args) -> None:
    cfg = ws.cfg
    dataset, outcomes = _load_dataset(ws)
    cohort = prepare_cohort(
        dataset, outcomes,
        detector=DetectorConfig(**cfg["detector"]),
        window=_window(cfg),
        split=SplitSpec(tuple(cfg["split"]["fractions"]), cfg["seed"]),
        min_count=cfg["vocabulary"]["min_count"],
        rule=_leakage(cfg),
    )
    with ws.stage("preprocess", name="preprocess") as out:
        (out / "vocabulary.json").write_text(cohort.vocab.dumps(), encoding="utf-8")
        write_json(out / "splits.json", {s: cohort.splits[s].patient_ids for s in SPLITS})
        summary = {}
        for s in SPLITS:
            save_encoded(cohort.encoded[s], out / f"{s}.npz")
            enc = cohort.encoded[s]
            summary[s] = {
                "patients": len(cohort.splits[s]),
                "pairs": len(cohort.pairs[s]),
                "encoded_pairs": len(enc),
                "labels": {t: {"n": int(np.sum(~np.isnan(v))), "positive": int(np.nansum(v))}
                           for t, v in enc.labels.items()},
            }
        write_json(out / "summary.json", summary)
    log.info("preprocess: %s", {s: v["encoded_pairs"] for s, v in summary.items()})


def _pretrain_data(ws: Workspace, vocab, encoded, splits) -> PretrainData:
    run = _pretrain_run(ws.cfg)
    trajs = {}
    if run.name in ("ocp", "strats"):
        dataset, _ = _load_dataset(ws)
        vocab.bind(dataset.feature_names, dataset.category_names)
        trajs = {s: list(dataset.subset(splits[s])) for s in ("train", "val")}
    return PretrainData(vocab, encoded["train"], encoded["val"], trajs.get("train", []), trajs.get("val", []))


def cmd_pretrain(ws: Workspace, args) -> None:
    cfg = ws.cfg
    vocab, encoded, splits = _load_prepared(ws)
    data = _pretrain_data(ws, vocab, encoded, splits)
    enc_cfg = EncoderConfig.from_dict(cfg["encoder"])
    run = _pretrain_run(cfg)
    with ws.stage("pretrain", run.name, name="pretrain") as out:
        if cfg["search"]["enabled"]:
            def runner(trial_id, lr, dropout):
                trial = _pretrain_run(cfg, learning_rate=lr, dropout=dropout)
                return (rec["val_loss"] for rec in pretrain_epochs(trial, data, enc_cfg))

            search = hyperparameter_search(_search_spec(cfg), runner)
            (out / "trials.csv").write_text(search.table_csv(), encoding="utf-8")
            write_json(out / "search.json", {"best": search.best, "rung_populations": search.rung_populations})
            run = _pretrain_run(cfg, learning_rate=search.best["learning_rate"], dropout=search.best["dropout"])
        result = pretrain(run, data, enc_cfg)
        trace = [{k: v for k, v in rec.items() if k != "model"} for rec in result.trace]
        write_json(out / "trace.json", {"best_epoch": result.best_epoch, "best_val_loss": result.best_val,
                                        "run": run.to_dict(), "epochs": trace})
        save_checkpoint(out / "checkpoint.zip", result.model, model_config(run.name, enc_cfg, result.model), vocab,
                        {**ws.stamp("pretrain"), "best_epoch": result.best_epoch, "best_val_loss": result.best_val})
    log.info("pretrain %s: best epoch %d, val loss %.4f", run.name, result.best_epoch, result.best_val)


def _tabular_items(ws: Workspace, task: str) -> dict:
    """Per split: ``(trajectory, cutoff)`` items and labels, cutoff at the
    last observation the task may consume."""
    cfg = ws.cfg
    _, _, splits = _load_prepared(ws)
    dataset, outcomes = _load_dataset(ws)
    rule = _leakage(cfg)
    feats = top_features(dataset.subset(splits["train"]))
    out = {}
    for s in SPLITS:
        part = dataset.subset(splits[s])
        pairs = [p for p in build_pairs(part, DetectorConfig(**cfg["detector"]), _window(cfg), outcomes, rule)
                 if task in p.labels]
        pre_only = rule.inputs(task) == "pre"
        items = [(part[p.event.patient_id], p.pre.times[-1] if pre_only else max(p.pre.times[-1], p.post.times[-1]))
                 for p in pairs]
        out[s] = (items, np.array([p.labels[task] for p in pairs], float))
    return feats, out


def _finetune_tabular(ws: Workspace, task: str, out: Path) -> None:
    from sklearn.ensemble import HistGradientBoostingClassifier

    feats, data = _tabular_items(ws, task)
    for seed in ws.cfg["finetune"]["seeds"]:
        model = TabularBaseline(feats, HistGradientBoostingClassifier(random_state=seed))
        model.fit(*data["train"])
        scores = model.predict_proba(data["test"][0])
        auroc, auprc = binary_metrics(scores, data["test"][1])
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir()
        write_json(seed_dir / "metrics.json", {"task": task, "method": "tabular", "seed": seed,
                                               "test": {"auroc": auroc, "auprc": auprc}})


def cmd_finetune(ws: Workspace, args) -> None:
    cfg = ws.cfg
    tasks = [args.task] if args.task else cfg["tasks"]
    vocab, encoded, _ = _load_prepared(ws)
    rule = _leakage(cfg)
    for method in _methods(ws, args.method):
        for task in tasks:
            with ws.stage("finetune", method, task, name="finetune") as out:
                if method == "tabular":
                    _finetune_tabular(ws, task, out)
                    continue
                mode = rule.inputs(task)
                for seed in cfg["finetune"]["seeds"]:
                    backbone = _backbone(ws, method, vocab, seed)
                    res = finetune(_finetune_run(cfg, task, seed), task, encoded["train"], encoded["val"],
                                   encoded["test"], backbone, mode)
                    seed_dir = out / f"seed_{seed}"
                    seed_dir.mkdir()
                    write_json(seed_dir / "metrics.json", {
                        "task": task, "method": method, "seed": seed, "mode": mode,
                        "best_epoch": res.best_epoch, "val_auroc": res.best_val, "test": res.test_metrics,
                        "trace": [{k: v for k, v in r.items() if k != "model"} for r in res.trace],
                    })
                    with open(seed_dir / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
                        w = csv.writer(fh)
                        w.writerow(["score", "label"])
                        w.writerows(zip(res.test_scores.tolist(), res.test_labels.tolist()))
                    log.info("finetune %s/%s seed %d: test %s", method, task, seed, res.test_metrics)


def _embedding_table(ws: Workspace, method: str, vocab, encoded):
    if method == "tabular":
        raise ConfigurationError("the tabular baseline has no embeddings")
    backbone = _backbone(ws, method, vocab, ws.cfg["seed"])
    embed = backbone.embed_numpy if hasattr(backbone, "embed_numpy") else _numpy_embed(backbone)
    return build_embedding_table(embed, encoded, {"method": method, **ws.stamp("embed")})


def _numpy_embed(model):
    import torch

    def embed(batch):
        model.eval()
        with torch.no_grad():
            return np.concatenate([model.embed(batch[i:i + 256]).numpy() for i in range(0, len(batch), 256)])
    return embed


def _probe_like(ws: Workspace, args, stage: str, evaluate) -> None:
    vocab, encoded, _ = _load_prepared(ws)
    rule = _leakage(ws.cfg)
    tasks = [args.task] if args.task else ws.cfg["tasks"]
    for method in _methods(ws, args.method):
        if method == "tabular":
            continue
        table = _embedding_table(ws, method, vocab, encoded)
        with ws.stage(stage, method, name=stage) as out:
            if stage == "probe":
                table.write(out / "embeddings")
            for task in tasks:
                report = evaluate(table, task, rule.inputs(task))
                (out / f"{task}.json").write_text(report.dumps() + "\n", encoding="utf-8")
                log.info("%s %s/%s: AUROC %.4f", stage, method, task, report.metrics["auroc"]["point"])


def cmd_probe(ws: Workspace, args) -> None:
    p = ws.cfg["probe"]
    _probe_like(ws, args, "probe", lambda table, task, mode: linear_probe(
        table, task, p["l2_grid"], mode, p["n_bootstrap"], ws.cfg["seed"]))


def cmd_knn(ws: Workspace, args) -> None:
    k = ws.cfg["knn"]
    sweep = KnnSweep(tuple(k["weights"]), tuple(k["models"]), tuple(k["metrics"]), tuple(k["ks"]))
    _probe_like(ws, args, "knn", lambda table, task, mode: knn_eval(
        table, task, sweep, "both" if mode == "both" else mode, k["n_bootstrap"], ws.cfg["seed"]))


def cmd_cluster(ws: Workspace, args) -> None:
    cfg = ws.cfg
    c = cfg["cluster"]
    vocab, encoded, _ = _load_prepared(ws)
    _, outcomes = _load_dataset(ws)
    lookup = {(o.patient_id, o.task, o.event_time): o for o in outcomes or ()}
    for method in _methods(ws, args.method):
        if method == "tabular":
            continue
        table = _embedding_table(ws, method, vocab, encoded)
        X = table.features("both")
        inertias, knee = elbow_curve(X, c["K_grid"], cfg["seed"], c["n_init"])
        K = c["K"] or knee
        assignment = kmeans(X, K, cfg["seed"], c["n_init"])
        found = [lookup.get((p, c["task"], float(t))) for p, t in zip(table.patient_ids, table.event_times)]
        tto = np.array([o.time - o.event_time if o else np.nan for o in found])
        observed = np.array([bool(o and o.value) for o in found])
        have = ~np.isnan(tto)
        outcome = table.labels.get(c["task"], np.full(len(table), np.nan))
        report = stratification_report(assignment, outcome, np.where(have, tto, 0.0), observed & have, X)
        report.update({"method": method, "task": c["task"], "K_grid": list(c["K_grid"]), "inertias": inertias,
                       "elbow_K": knee, **ws.stamp("cluster")})
        with ws.stage("cluster", method, name="cluster") as out:
            write_json(out / "report.json", report)
            curves = {f"cluster {k}": km_curve(tto[(assignment.labels == k) & have],
                                               observed[(assignment.labels == k) & have])
                      for k in range(K)}
            (out / "survival.svg").write_text(survival_svg(curves), encoding="utf-8")
        log.info("cluster %s: K=%d, delta prevalence %s", method, K, report["delta_prevalence"])


def collect_finetune(root: Path) -> dict:
    """``{task: {method: [test metrics per seed]}}`` from finetune output."""
    found: dict = {}
    for path in sorted(root.glob("*/*/seed_*/metrics.json")):
        doc = json.loads(path.read_text())
        found.setdefault(doc["task"], {}).setdefault(doc["method"], []).append(doc)
    return found


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "n": int(v.size)}


def report_table(found: dict, metric: str = "auroc") -> str:
    """Markdown table: one row per method, one column per task, mean ± std."""
    tasks = sorted(found)
    methods = sorted({m for t in tasks for m in found[t]})
    lines = ["| method | " + " | ".join(tasks) + " |", "|---" * (len(tasks) + 1) + "|"]
    for m in methods:
        cells = []
        for t in tasks:
            runs = found[t].get(m)
            if runs:
                s = summarize([r["test"][metric] for r in runs])
                cells.append(f"{s['mean']:.3f} ± {s['std']:.3f}")
            else:
                cells.append("n/a")
        lines.append(f"| {m} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def cmd_report(ws: Workspace, args) -> None:
    found = collect_finetune(ws.require("finetune"))
    doc = {"finetune": {t: {m: {metric: summarize([r["test"][metric] for r in runs]) for metric in ("auroc", "auprc")}
                            | {"seeds": [r["seed"] for r in runs]}
                            for m, runs in by_method.items()}
                        for t, by_method in found.items()},
           "std_source": "finetune seeds"}
    for stage in ("probe", "knn"):
        entries = {}
        for path in sorted(ws.path(stage).glob("*/*.json")) if ws.path(stage).exists() else []:
            if path.name == "stamp.json":
                continue
            rep = json.loads(path.read_text())
            entries.setdefault(rep["task"], {})[path.parent.name] = rep["metrics"]
        if entries:
            doc[stage] = entries
    with ws.stage("report", name="report") as out:
        write_json(out / "report.json", doc)
        text = ["## Finetuning, test AUROC (mean ± std over seeds)", "", report_table(found, "auroc"), "",
                "## Finetuning, test AUPRC (mean ± std over seeds)", "", report_table(found, "auprc"), ""]
        (out / "report.md").write_text("\n".join(text), encoding="utf-8")
    print("\n".join(text))


# ---------------------------------------------------------------------------
# argument parsing


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "knn": cmd_knn,
    "cluster": cmd_cluster,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (see 'config print-defaults')")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--force", action="store_true", help="overwrite existing stage output")
    common.add_argument("--workdir", type=Path, help="artifact directory (default: $EBCLKIT_WORKDIR, then ./work)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ebclkit", description="Event-based contrastive pretraining toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} stage")
        if name in ("finetune", "probe", "knn", "cluster"):
            p.add_argument("--method", help="one method instead of the configured list")
        if name in ("finetune", "probe", "knn"):
            p.add_argument("--task", help="one task instead of the configured list")
    cfg = sub.add_parser("config", help="inspect configuration")
    cfg_sub = cfg.add_subparsers(dest="action", required=True)
    cfg_sub.add_parser("print-defaults", help="print the full default config")
    for action in ("validate", "hash"):
        cfg_sub.add_parser(action, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "config" and args.action == "print-defaults":
        print(json.dumps(default_config(), indent=1, sort_keys=True))
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigurationError as exc:
        for msg in str(exc).split("; "):
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "config":
        print("ok" if args.action == "validate" else config_hash(cfg))
        return EXIT_OK

    root = args.workdir or cfg["paths"]["workdir"] or os.environ.get("EBCLKIT_WORKDIR") or "work"
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ws = Workspace(root, cfg, args.force)
    lock = FileLock(str(root / ".ebclkit.lock"))
    try:
        with lock.acquire(timeout=0):
            (root / f"config.{ws.hash}.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
            COMMANDS[args.command](ws, args)
    except Timeout:
        print(f"error: {root} is locked by another ebclkit process", file=sys.stderr)
        return EXIT_LOCKED
    except StageExists as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXISTS
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EbclError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
