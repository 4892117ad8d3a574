"""Experiment configs, seeded end-to-end pipelines and the ablation ladder."""

import csv
import dataclasses
import hashlib
import json
import os
import time
import typing
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .cleanse import (
    CleaningConfig,
    confidence_histogram,
    iterative_clean,
    score_training_set,
    write_histogram,
    write_history,
)
from .decouple import (
    RebalanceConfig,
    apply_tau,
    build_balanced_subset,
    finetune_on_subset,
    grid_search_tau,
    retrain_classifier,
    write_tau_curve,
)
from .ensemble import (
    ensemble_records,
    eval_report,
    read_records,
    records_from_probs,
    write_records,
    write_report,
)
from .exceptions import ConfigError, RecordMismatchError
from .imageops import AugmentConfig, TtaConfig, tta_predict_proba
from .nnkernel import predict_proba, save_params
from .optim import OptimConfig
from .parallel import blas_single_thread
from .sampling import SamplerKind
from .synthbench import DatasetSpec, gen_dataset, rerender
from .training import ModelConfig, TrainSettings, train_model

STAGES = (
    "train", "clean", "retrain_classifier", "subset_finetune",
    "highres_finetune", "tau_norm", "tta_eval", "eval",
)
# stages that reshape the classifier or backbone after representation learning
_REBALANCING = ("retrain_classifier", "subset_finetune", "highres_finetune")


@dataclass
class TrainOptions:
    """Loss extras and the budget of the high-resolution finetune stage.

    ``highres_lr_scale`` multiplies ``optim.base_lr_per_256`` for the
    finetune, which runs without warmup.
    """

    label_smoothing: float = 0.0
    mixup_alpha: float = 0.0
    highres_resolution: int = 36
    highres_epochs: int = 5
    highres_lr_scale: float = 0.1

    def validate(self):
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.mixup_alpha < 0:
            raise ConfigError("mixup_alpha must be >= 0")
        if self.highres_resolution < 8 or self.highres_epochs < 0 or self.highres_lr_scale <= 0:
            raise ConfigError("invalid high-resolution finetune settings")
        return self


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerKind = field(default_factory=SamplerKind)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    cleaning: CleaningConfig = field(default_factory=CleaningConfig)
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    ensemble_k: int = 10
    stages: list = field(default_factory=lambda: ["train", "eval"])
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self):
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            if dataclasses.is_dataclass(sub):
                sub.validate()
        if self.ensemble_k < 1:
            raise ConfigError("ensemble_k must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        validate_stages(self.stages)
        return self

    def to_dict(self):
        return _to_jsonable(dataclasses.asdict(self))

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def validate_stages(stages):
    """Reject unknown names and orderings that make no sense.

    The first stage must be ``train``; ``clean`` may not follow any
    rebalancing stage; ``tau_norm`` must come after every rebalancing
    stage; only ``eval`` may repeat.
    """
    if not stages:
        raise ConfigError("stage list must not be empty")
    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}")
    if stages[0] != "train":
        raise ConfigError(f"stage {stages[0]!r} before 'train'")
    seen = set()
    for i, s in enumerate(stages):
        if s != "eval" and s in seen:
            raise ConfigError(f"stage {s!r} appears twice")
        seen.add(s)
        for earlier in stages[:i]:
            if s == "train" or (s == "clean" and earlier in _REBALANCING + ("tau_norm",)):
                raise ConfigError(f"stage {s!r} after {earlier!r}")
            if s in _REBALANCING and earlier == "tau_norm":
                raise ConfigError(f"stage {s!r} after 'tau_norm'")
    return list(stages)


# ---------------------------------------------------------------------------
# config loading


def _build(cls, obj, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        typ = hints[key]
        if dataclasses.is_dataclass(typ):
            value = _build(typ, value, f"{where}.{key}")
        elif typ is tuple:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key} must be a list")
            value = tuple(value)
        elif typ is bool and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be true or false")
        elif typ in (int, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            if not (value is None and names[key].default is None):
                raise ConfigError(f"{where}.{key} must be a number")
        elif typ is int and isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{where}.{key} must be an integer")
            value = int(value)
        elif typ is str and not isinstance(value, str):
            raise ConfigError(f"{where}.{key} must be a string")
        elif typ is list and not isinstance(value, list):
            raise ConfigError(f"{where}.{key} must be a list")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(obj):
    """Strict construction: unknown keys and mistyped values are errors."""
    return _build(ExperimentConfig, obj, "config").validate()


def load_config(path):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(obj)


def standard_config(**overrides):
    """The desk-scale benchmark recipe used throughout the tests."""
    cfg = ExperimentConfig(
        model=ModelConfig(channels=(16, 32)),
        optim=OptimConfig(base_lr_per_256=0.4),
        augment=AugmentConfig(zoom_range=(0.8, 1.0)),
        rebalance=RebalanceConfig(feature_views=4),
    )
    return dataclasses.replace(cfg, **overrides).validate()


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class _State:
    params: object = None
    indices: np.ndarray = None
    labels: np.ndarray = None
    resolution: int = 24
    use_tta: bool = False
    train_images: np.ndarray = None
    val_images: np.ndarray = None


class _Pipeline:
    def __init__(self, cfg, write=True):
        self.cfg = cfg
        self.write = write
        self.rng = np.random.default_rng([cfg.seed, 0x5EED])
        self.train, self.val = gen_dataset(cfg.dataset)
        self.settings = TrainSettings(
            model=cfg.model, optim=cfg.optim, sampler=cfg.sampler, augment=cfg.augment,
            label_smoothing=cfg.train.label_smoothing, mixup_alpha=cfg.train.mixup_alpha,
        )
        self.state = _State(
            indices=np.arange(len(self.train)),
            labels=self.train.labels.astype(np.int64),
            resolution=cfg.dataset.base_resolution,
            train_images=self.train.images,
            val_images=self.val.images,
        )
        self.history = None

    # each stage returns a dict of extra manifest fields
    def stage_train(self, out):
        s = self.state
        s.params = train_model(s.train_images, s.labels, self.train.num_classes,
                               self.settings, self.rng)
        return {}

    def stage_clean(self, out):
        s = self.state
        records = score_training_set(s.params, s.train_images, self.cfg.ensemble_k)
        hist = confidence_histogram(records, s.labels)
        masks = []
        view, history, s.params = iterative_clean(
            self.train, self.settings, self.cfg.cleaning, self.rng, params=s.params,
            val=self.val, callback=lambda r, m: masks.append(m),
        )
        s.indices, s.labels = view.indices, view.labels
        self.history = history
        arts = {}
        if self.write:
            write_histogram(hist, os.path.join(out, "confidence_histogram.csv"))
            write_history(history, out, masks)
            arts = {"histogram": "confidence_histogram.csv",
                    "history": "cleaning_history.json",
                    "drop_masks": [f"drop_mask_round{r}.u8" for r in range(len(masks))]}
        return {"kept": int(len(view)), "artifacts": arts}

    def stage_retrain_classifier(self, out):
        s, rb = self.state, self.cfg.rebalance
        s.params = retrain_classifier(
            s.params, s.train_images[s.indices], s.labels, self.cfg.optim, self.rng,
            epochs=rb.finetune_epochs, mode=rb.retrain_mode,
            label_smoothing=self.cfg.train.label_smoothing,
            views=rb.feature_views, augment=self.cfg.augment,
        )
        return {}

    def stage_subset_finetune(self, out):
        s, rb = self.state, self.cfg.rebalance
        x = s.train_images[s.indices]
        probs = predict_proba(s.params, x)
        subset = build_balanced_subset(s.labels, probs, rb.subset_per_class, rb.subset_rule)
        s.params = finetune_on_subset(s.params, x, s.labels, subset, self.settings, self.rng,
                                      epochs=rb.finetune_epochs, scope=rb.finetune_scope)
        return {"subset_size": len(subset)}

    def stage_highres_finetune(self, out):
        s, t = self.state, self.cfg.train
        s.resolution = t.highres_resolution
        s.train_images = rerender(self.train, s.resolution).images
        s.val_images = rerender(self.val, s.resolution).images
        optim = dataclasses.replace(
            self.cfg.optim, total_epochs=t.highres_epochs, warmup_epochs=0, decay_epochs=[],
            base_lr_per_256=self.cfg.optim.base_lr_per_256 * t.highres_lr_scale,
        )
        s.params = train_model(s.train_images[s.indices], s.labels, self.train.num_classes,
                               self.settings, self.rng, params=s.params, optim=optim)
        return {"resolution": s.resolution}

    def stage_tau_norm(self, out):
        s = self.state
        tau, rows = grid_search_tau(s.params, s.val_images, self.val.labels,
                                    self.cfg.rebalance.tau_grid)
        s.params = apply_tau(s.params, tau)
        arts = {}
        if self.write:
            write_tau_curve(rows, os.path.join(out, "tau_curve.csv"))
            arts = {"tau_curve": "tau_curve.csv"}
        return {"tau": tau, "tau_curve": [list(r) for r in rows], "artifacts": arts}

    def stage_tta_eval(self, out):
        self.state.use_tta = True
        return {}

    def stage_eval(self, out):
        return {}

    def tta_config(self):
        return dataclasses.replace(self.cfg.tta, train_res=self.state.resolution)

    def predict_val(self):
        s = self.state
        if s.use_tta:
            return tta_predict_proba(s.params, s.val_images, self.tta_config())
        return predict_proba(s.params, s.val_images)


def _stage_dir(i, name):
    return f"stage{i:02d}_{name}"


def run_experiment(cfg, write=True, log=None, return_params=False):
    """Run ``cfg.stages`` in order, evaluating on validation after each.

    Returns the manifest dict. With ``write`` the manifest, per-stage
    reports, prediction records and the final checkpoint go to
    ``cfg.out_dir``; wall-clock timings go to a ``timings.json`` sidecar so
    the manifest itself is reproducible bit for bit. ``return_params``
    additionally returns the final :class:`ModelParams`.
    """
    cfg.validate()
    log = log or (lambda msg: None)
    pipe = _Pipeline(cfg, write)
    root = cfg.out_dir
    manifest = {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "stages": [],
    }
    timings = []
    with blas_single_thread():
        for i, name in enumerate(cfg.stages):
            sub = _stage_dir(i, name)
            out = os.path.join(root, sub)
            if write:
                os.makedirs(out, exist_ok=True)
            t0 = time.perf_counter()
            extra = getattr(pipe, "stage_" + name)(out)
            probs = pipe.predict_val()
            report = eval_report(probs, pipe.val.labels, pipe.train.class_counts)
            timings.append({"stage": name, "seconds": time.perf_counter() - t0})
            arts = extra.pop("artifacts", {})
            if write:
                write_report(report, pipe.train.class_counts, os.path.join(out, "report.json"),
                             os.path.join(out, "per_class.csv"))
                write_records(records_from_probs(probs, cfg.ensemble_k),
                              os.path.join(out, "predictions.jsonl"))
                arts = {"report": "report.json", "per_class": "per_class.csv",
                        "predictions": "predictions.jsonl", **arts}
                arts = {k: _prefix(sub, v) for k, v in arts.items()}
            entry = {"stage": name, "report": report.to_dict(), "artifacts": arts, **extra}
            manifest["stages"].append(entry)
            log(f"[{i}] {name}: top1={report.top1_accuracy:.4f} "
                f"mcer={report.mean_class_error_rate:.4f}")
    if pipe.history is not None:
        manifest["cleaning_history"] = {
            "rounds": [dataclasses.asdict(r) for r in pipe.history.rounds],
            "kept": len(pipe.history.surviving),
        }
    if write:
        save_params(pipe.state.params, os.path.join(root, "model"),
                    extra={"config_hash": manifest["config_hash"]})
        manifest["artifacts"] = {
            "model": "model",
            "predictions": _prefix(_stage_dir(len(cfg.stages) - 1, cfg.stages[-1]),
                                   "predictions.jsonl"),
        }
        write_json(manifest, os.path.join(root, "manifest.json"))
        write_json(timings, os.path.join(root, "timings.json"))
    if return_params:
        return manifest, pipe.state.params
    return manifest


def _prefix(sub, value):
    if isinstance(value, list):
        return [f"{sub}/{v}" for v in value]
    return f"{sub}/{value}"


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def final_report(manifest):
    return manifest["stages"][-1]["report"]


# ---------------------------------------------------------------------------
# ensembles and the ladder


def ensemble_runs(manifests, val_labels, class_counts, num_classes=None):
    """Average the saved validation records of several runs and evaluate.

    ``manifests`` are manifest dicts or paths to ``manifest.json`` files.
    """
    if len(manifests) < 2:
        raise ConfigError("ensembling needs at least two runs")
    record_sets = []
    for m in manifests:
        if isinstance(m, (str, os.PathLike)):
            root = os.path.dirname(os.fspath(m))
            with open(m) as fh:
                m = json.load(fh)
        else:
            root = m["config"]["out_dir"]
        record_sets.append(read_records(os.path.join(root, m["artifacts"]["predictions"])))
    ids = [r.sample_id for r in record_sets[0]]
    for rs in record_sets[1:]:
        if [r.sample_id for r in rs] != ids:
            raise RecordMismatchError("record files cover different sample ids")
    num_classes = num_classes or len(class_counts)
    probs = ensemble_records(record_sets, num_classes)
    return eval_report(probs, val_labels, class_counts)


LADDER_ROWS = (
    ("baseline", ["train", "eval"], 1),
    ("+data_cleaning", ["train", "clean"], 1),
    ("+iterative_cleaning", ["train", "clean"], None),
    ("+retrain_classifier", ["train", "clean", "retrain_classifier"], None),
    ("+tau_norm", ["train", "clean", "retrain_classifier", "tau_norm"], None),
    ("+tta", ["train", "clean", "retrain_classifier", "tau_norm", "tta_eval"], None),
    ("+highres_finetune", ["train", "clean", "highres_finetune", "retrain_classifier",
                           "tau_norm", "tta_eval"], None),
)


def run_ladder(cfg, log=None, ensemble_size=3):
    """Cumulative ablation: each row adds one component to the previous.

    Rows share work through prefix reuse: a pipeline is a fold over its
    stages, so the report after stage ``k`` of a longer run equals the
    final report of the run truncated at ``k``. Row ``+data_cleaning`` uses
    a single cleaning round, ``+iterative_cleaning`` the configured count.
    The last row averages the full pipeline over seeds ``seed .. seed+2``.
    Writes ``ladder.csv`` (stage, top1, delta) under ``cfg.out_dir``.
    """
    cfg.validate()
    log = log or (lambda msg: None)
    root = cfg.out_dir

    def sub(name, stages, seed=cfg.seed, one_round=False):
        cleaning = dataclasses.replace(cfg.cleaning, rounds=1) if one_round else cfg.cleaning
        return cfg.replace(stages=stages, seed=seed, cleaning=cleaning,
                           out_dir=os.path.join(root, name))

    single = run_experiment(sub("single_round", LADDER_ROWS[1][1], one_round=True), log=log)
    chain = run_experiment(sub("chain", LADDER_ROWS[5][1]), log=log)
    full = [run_experiment(sub(f"full_seed{cfg.seed + j}", LADDER_ROWS[6][1],
                               seed=cfg.seed + j), log=log)
            for j in range(ensemble_size)]

    def top1(manifest, k):
        return manifest["stages"][k]["report"]["top1_accuracy"]

    rows = [
        ("baseline", top1(chain, 0)),
        ("+data_cleaning", top1(single, 1)),
        ("+iterative_cleaning", top1(chain, 1)),
        ("+retrain_classifier", top1(chain, 2)),
        ("+tau_norm", top1(chain, 3)),
        ("+tta", top1(chain, 4)),
        ("+highres_finetune", top1(full[0], 5)),
    ]
    train, val = gen_dataset(cfg.dataset)
    ens = ensemble_runs(full, val.labels, train.class_counts)
    rows.append((f"+{ensemble_size}_model_ensemble", ens.top1_accuracy))

    table = []
    prev = None
    for name, acc in rows:
        table.append((name, acc, 0.0 if prev is None else acc - prev))
        prev = acc
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "ladder.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "top1", "delta"])
        for name, acc, delta in table:
            w.writerow([name, repr(acc), repr(delta)])
    for name, acc, delta in table:
        log(f"{name:24s} top1={acc:.4f} delta={delta:+.4f}")
    return table
