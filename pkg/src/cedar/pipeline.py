"""File-based orchestration of the three stages.

A run owns one work directory.  Every stage writes its artifacts under
``<work_dir>/<stage>/`` together with a ``manifest.json`` recording the hash of
the configuration it ran with, the hashes of the upstream files it read, the
hashes of what it wrote, and library versions.  Before a stage runs, each
upstream manifest is checked: a missing manifest is a ``DependencyError``, and
artifacts or configuration that no longer match are a ``StalenessError``.
Manifests carry no timestamps, so reruns with one seed reproduce them exactly.
"""

from __future__ import annotations

import copy
import logging
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout

from cedar import __version__
from cedar.classifier import (CandidateMention, ClassifierModel, LabeledMention, SelfLabelConfig,
                              classify_many, clean_training_set, select_pseudo_labels,
                              train_classifier)
from cedar.corpus import (Sentence, attach_candidates, clean_corpus, mention_counts_by_type, read_corpus,
                          roleset_counts, split_corpus, write_corpus)
from cedar.encoder import build_backend, load_checkpoint, save_checkpoint
from cedar.evaluation import (PredictionRecord, categorize_errors, category_counts, classification_errors,
                              evaluate, frequency_quartile_analysis, gold_from_sentences, per_stage_report,
                              score_hit_at_k, write_error_csv)
from cedar.fixture import FixtureSpec, generate_fixture
from cedar.io import dumps_json, read_json, read_jsonl, sha256_bytes, sha256_file, write_json, write_jsonl
from cedar.ontology import FilterRules, Ontology, filter_ontology, load_ontology
from cedar.ranker import RankerExample, RankerModel, TypeIndex, build_type_index, rank_types_batch, train_ranker
from cedar.training import TrainConfig, classifier_defaults, ranker_defaults, ti_defaults
from cedar.trigger import TriggerExample, TriggerModel, predict_triggers, train_trigger_model

logger = logging.getLogger(__name__)

STAGES = ("build-data", "train-ti", "train-rank", "build-index", "train-cls-base", "self-label",
          "train-cls-final", "predict", "evaluate", "error-analysis")

DEPENDENCIES = {
    "build-data": (),
    "train-ti": ("build-data",),
    "train-rank": ("build-data",),
    "build-index": ("build-data", "train-rank"),
    "train-cls-base": ("build-data", "build-index"),
    "self-label": ("build-data", "train-cls-base"),
    "train-cls-final": ("build-data", "train-cls-base", "self-label"),
    "predict": ("build-data", "train-ti", "build-index", "train-cls-final"),
    "evaluate": ("build-data", "build-index", "train-cls-final", "predict"),
    "error-analysis": ("build-data", "predict"),
}

# configuration sections each stage's result depends on
SECTIONS = {
    "build-data": ("seed", "data"),
    "train-ti": ("seed", "backend", "trigger.train", "trigger.max_span_len"),
    "train-rank": ("seed", "backend", "ranker.train", "ranker.tau", "ranker.n_negatives",
                   "ranker.conv_width", "ranker.conv_stride", "ranker.max_rows"),
    "build-index": (),
    "train-cls-base": ("seed", "backend", "classifier", "ranker.topk"),
    "self-label": ("self_label",),
    "train-cls-final": ("seed", "backend", "classifier"),
    "predict": ("trigger.threshold", "trigger.max_span_len", "ranker.topk", "evaluate.split"),
    "evaluate": ("evaluate.ks", "ranker.topk"),
    "error-analysis": ("evaluate.prioritize_hierarchy",),
}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "paths": {"ontology": None, "corpus": None, "filter_rules": None, "work_dir": "run"},
    "backend": {"kind": "reference", "h": 64, "seed": 0},
    "data": {"split": [0.90, 0.05, 0.05], "min_tokens": 3},
    "trigger": {"threshold": 0.5, "max_span_len": 10, "train": ti_defaults().to_dict()},
    "ranker": {"topk": 10, "tau": 1.0, "n_negatives": 5, "conv_width": 4, "conv_stride": 2, "max_rows": 32,
               "train": ranker_defaults().to_dict()},
    "classifier": {"n_negatives": 5, "train": classifier_defaults().to_dict()},
    "self_label": {"confidence_margin_threshold": 0.9, "rounds": 1},
    "evaluate": {"split": "dev", "ks": [1, 2, 5, 10, 20, 50], "prioritize_hierarchy": False},
}
# backend options are free-form (each kind takes its own keys)
_OPEN_SECTIONS = {("backend",)}


class PipelineError(Exception):
    """Base class; ``to_dict`` is what the CLI prints on stderr."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), "stage": self.stage}


class ConfigError(PipelineError):
    pass


class DependencyError(PipelineError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} needs {missing!r} to run first", stage)
        self.missing = missing

    def to_dict(self) -> dict:
        return {**super().to_dict(), "missing_stage": self.missing}


class StalenessError(PipelineError):
    pass


class LockError(PipelineError):
    pass


# -- configuration -------------------------------------------------------------------------------

def _merge(base: dict, update: dict, where: tuple[str, ...] = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if where not in _OPEN_SECTIONS and key not in base:
            raise ConfigError(f"unknown configuration key {'.'.join(where + (key,))!r}")
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], value, where + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {p!r} is not a section")
    node[parts[-1]] = value


def _get_dotted(doc: dict, dotted: str) -> Any:
    node = doc
    for p in dotted.split("."):
        node = node[p]
    return node


def parse_override(text: str) -> tuple[str, Any]:
    """``"ranker.topk=20"`` -> ``("ranker.topk", 20)``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


@dataclass
class PipelineConfig:
    """Resolved run configuration.

    Relative paths are taken relative to ``base_dir`` (the config file's folder,
    or the working directory when no file is given).
    """

    doc: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, doc: dict | None = None, base_dir: str | Path | None = None,
                  overrides: Iterable[str | tuple[str, Any]] = ()) -> "PipelineConfig":
        user = copy.deepcopy(doc or {})
        for o in overrides:
            key, value = parse_override(o) if isinstance(o, str) else o
            _set_dotted(user, key, value)
        merged = _merge(DEFAULTS, user)
        cfg = cls(merged, Path(base_dir) if base_dir is not None else Path.cwd())
        cfg._check()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: Iterable[str | tuple[str, Any]] = ()) -> "PipelineConfig":
        if path is None:
            return cls.from_dict({}, None, overrides)
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: configuration must be a mapping")
        return cls.from_dict(doc, path.parent, overrides)

    def _check(self) -> None:
        for section in ("trigger", "ranker", "classifier"):
            try:
                TrainConfig.from_dict(self.doc[section]["train"])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{section}.train: {e}") from e
        try:
            self.self_label_config()
        except ValueError as e:
            raise ConfigError(f"self_label: {e}") from e
        if self.doc["evaluate"]["split"] not in ("dev", "test"):
            raise ConfigError("evaluate.split must be 'dev' or 'test'")
        if int(self.doc["ranker"]["topk"]) < 1:
            raise ConfigError("ranker.topk must be positive")
        if not 0.0 < float(self.doc["trigger"]["threshold"]) < 1.0:
            raise ConfigError("trigger.threshold must lie in (0, 1)")

    def __getitem__(self, key: str) -> Any:
        return _get_dotted(self.doc, key)

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def path(self, key: str) -> Path | None:
        value = self.doc["paths"][key]
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def work_dir(self) -> Path:
        return self.path("work_dir")

    def train_config(self, section: str) -> TrainConfig:
        d = dict(self.doc[section]["train"])
        d.setdefault("seed", self.seed)
        return TrainConfig.from_dict(d)

    def self_label_config(self) -> SelfLabelConfig:
        return SelfLabelConfig(float(self.doc["self_label"]["confidence_margin_threshold"]),
                               int(self.doc["self_label"]["rounds"]))

    def stage_config(self, stage: str) -> dict:
        return {key: _get_dotted(self.doc, key) for key in SECTIONS[stage]}

    def stage_hash(self, stage: str) -> str:
        return sha256_bytes(dumps_json(self.stage_config(stage)).encode("utf-8"))


# -- manifests -----------------------------------------------------------------------------------

def versions() -> dict:
    return {"cedar": __version__, "numpy": np.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def stage_dir(work: Path, stage: str) -> Path:
    return work / stage


def manifest_path(work: Path, stage: str) -> Path:
    return stage_dir(work, stage) / "manifest.json"


def read_manifest(work: Path, stage: str) -> dict | None:
    p = manifest_path(work, stage)
    return read_json(p) if p.exists() else None


def _external_inputs(cfg: PipelineConfig) -> dict[str, str | None]:
    out = {}
    for key in ("ontology", "corpus", "filter_rules"):
        p = cfg.path(key)
        if p is None:
            out[key] = None
            continue
        if not p.exists():
            raise ConfigError(f"paths.{key} does not exist: {p}")
        out[key] = sha256_file(p)
    return out


def check_upstream(cfg: PipelineConfig, stage: str) -> dict[str, str]:
    """Validate every direct upstream stage and return the hashes of their outputs."""
    work = cfg.work_dir
    inputs: dict[str, str] = {}
    for dep in DEPENDENCIES[stage]:
        man = read_manifest(work, dep)
        if man is None:
            raise DependencyError(stage, dep)
        for rel, digest in man["outputs"].items():
            p = work / rel
            if not p.exists() or sha256_file(p) != digest:
                raise StalenessError(f"{rel} changed since {dep!r} wrote it; rerun {dep!r}", stage)
        if man["config_hash"] != cfg.stage_hash(dep):
            raise StalenessError(f"configuration for {dep!r} changed since it ran; rerun {dep!r}", stage)
        for rel, digest in man["inputs"].items():
            p = work / rel
            if not p.exists() or sha256_file(p) != digest:
                raise StalenessError(f"{dep!r} is older than its input {rel}; rerun {dep!r}", stage)
        if dep == "build-data" and man.get("external_inputs") != _external_inputs(cfg):
            raise StalenessError("source ontology/corpus changed since 'build-data' ran", stage)
        inputs.update(man["outputs"])
    return inputs


def write_manifest(cfg: PipelineConfig, stage: str, inputs: dict[str, str], outputs: Sequence[Path],
                   metrics: dict | None = None, external: dict | None = None) -> dict:
    work = cfg.work_dir
    man = {
        "stage": stage,
        "config": cfg.stage_config(stage),
        "config_hash": cfg.stage_hash(stage),
        "inputs": dict(sorted(inputs.items())),
        "outputs": {p.relative_to(work).as_posix(): sha256_file(p) for p in sorted(outputs)},
        "metrics": metrics or {},
        "versions": versions(),
    }
    if external is not None:
        man["external_inputs"] = external
    write_json(manifest_path(work, stage), man)
    return man


@dataclass
class StageResult:
    stage: str
    outputs: list[str]
    metrics: dict

    def to_dict(self) -> dict:
        return asdict(self)


# -- model construction --------------------------------------------------------------------------

def make_trigger_model(cfg: PipelineConfig, max_span_len: int | None = None) -> TriggerModel:
    return TriggerModel(build_backend(cfg["backend"]), int(max_span_len or cfg["trigger.max_span_len"]))


def make_ranker_model(cfg: PipelineConfig) -> RankerModel:
    r = cfg["ranker"]
    return RankerModel(build_backend(cfg["backend"]), int(r["conv_width"]), int(r["conv_stride"]),
                       int(r["max_rows"]))


def make_classifier_model(cfg: PipelineConfig) -> ClassifierModel:
    return ClassifierModel(build_backend(cfg["backend"]), cfg.train_config("classifier").max_length)


def _save_model(model: torch.nn.Module, path: Path, extra: dict | None = None) -> None:
    save_checkpoint(model, path, {**model.config()["backend"], "model": model.config(), **(extra or {})})


def _load_model(model: torch.nn.Module, path: Path) -> torch.nn.Module:
    state, _ = load_checkpoint(path)
    model.load_state_dict(state)
    model.eval()
    return model


def run_paths(work: Path) -> dict[str, Path]:
    return {
        "ontology": work / "build-data" / "ontology.jsonl",
        "train": work / "build-data" / "train.jsonl",
        "dev": work / "build-data" / "dev.jsonl",
        "test": work / "build-data" / "test.jsonl",
        "data_report": work / "build-data" / "report.json",
        "ti": work / "train-ti" / "model.pt",
        "rank": work / "train-rank" / "model.pt",
        "index": work / "build-index" / "types.npy",
        "cls_base": work / "train-cls-base" / "model.pt",
        "candidates": work / "train-cls-base" / "candidates.jsonl",
        "pseudo": work / "self-label" / "pseudo_labels.jsonl",
        "cls_final": work / "train-cls-final" / "model.pt",
        "predictions": work / "predict" / "predictions.jsonl",
        "report": work / "evaluate" / "report.json",
        "errors": work / "error-analysis" / "errors.csv",
        "error_summary": work / "error-analysis" / "summary.json",
    }


def _sidecar(p: Path) -> Path:
    return p.with_suffix(".json")


# -- stages --------------------------------------------------------------------------------------

def _build_data(cfg: PipelineConfig, inputs: dict) -> tuple[list[Path], dict, dict]:
    external = _external_inputs(cfg)
    if cfg.path("ontology") is None or cfg.path("corpus") is None:
        raise ConfigError("paths.ontology and paths.corpus are required for build-data", "build-data")
    ont = load_ontology(cfg.path("ontology"))
    sentences = clean_corpus(read_corpus(cfg.path("corpus")), int(cfg["data.min_tokens"]))
    rules_path = cfg.path("filter_rules")
    if rules_path is not None:
        rules = FilterRules.load(rules_path)
        ont = filter_ontology(ont, rules, roleset_counts(sentences))
    sentences, report = attach_candidates(sentences, ont)
    split = split_corpus(sentences, tuple(cfg["data.split"]), seed=cfg.seed)
    p = run_paths(cfg.work_dir)
    ont.save(p["ontology"])
    write_corpus(p["train"], split.train, include_gold=False)
    write_corpus(p["dev"], split.dev)
    write_corpus(p["test"], split.test)
    metrics = {
        "types": len(ont.types), "rolesets": len(ont.mappings),
        "sentences": {name: len(part) for name, part in split.items()},
        "mentions": {name: sum(len(s.mentions) for s in part) for name, part in split.items()},
        "dropped_unmapped": report.dropped_unmapped, "dropped_unknown_gold": report.dropped_unknown_gold,
        "adjudicated": report.adjudicated,
    }
    write_json(p["data_report"], metrics)
    return [p["ontology"], p["train"], p["dev"], p["test"], p["data_report"]], metrics, external


def _train_ti(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    train = read_corpus(p["train"])
    examples = [TriggerExample(s.tokens, [m.span for m in s.mentions]) for s in train]
    model, curve = train_trigger_model(make_trigger_model(cfg), examples, cfg.train_config("trigger"))
    _save_model(model, p["ti"])
    return [p["ti"], _sidecar(p["ti"])], {"loss_curve": curve}, None


def _train_rank(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    ont = load_ontology(p["ontology"])
    examples = [RankerExample(s.tokens, m.candidate_type_ids)
                for s in read_corpus(p["train"]) for m in s.mentions]
    model, result = train_ranker(make_ranker_model(cfg), examples, ont, cfg.train_config("ranker"),
                                 tau=float(cfg["ranker.tau"]), n_negatives=int(cfg["ranker.n_negatives"]))
    _save_model(model, p["rank"])
    return [p["rank"], _sidecar(p["rank"])], {"loss_curve": result.curve,
                                               "skipped_negatives": result.skipped_negatives}, None


def load_ranker(cfg: PipelineConfig) -> tuple[RankerModel, TypeIndex]:
    p = run_paths(cfg.work_dir)
    model = _load_model(make_ranker_model(cfg), p["rank"])
    return model, TypeIndex.load(p["index"])


def load_trigger(cfg: PipelineConfig) -> TriggerModel:
    return _load_model(make_trigger_model(cfg), run_paths(cfg.work_dir)["ti"])


def load_classifier(cfg: PipelineConfig, stage: str = "train-cls-final") -> ClassifierModel:
    p = run_paths(cfg.work_dir)
    return _load_model(make_classifier_model(cfg), p["cls_final"] if stage == "train-cls-final" else p["cls_base"])


def _build_index(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    model = _load_model(make_ranker_model(cfg), p["rank"])
    index = build_type_index(model, load_ontology(p["ontology"]),
                             max_length=cfg.train_config("ranker").max_length)
    index.save(p["index"])
    return [p["index"], _sidecar(p["index"])], {"types": len(index.type_ids), "m": index.m}, None


def _candidate_record(c: CandidateMention, sent_id: str) -> dict:
    return {"mention_id": c.mention_id, "sent_id": sent_id, "start": c.span[0], "end": c.span[1],
            "candidate_type_ids": list(c.candidate_type_ids), "negative_pool": list(c.negative_pool),
            "roleset_id": c.roleset_id}


def _read_candidates(cfg: PipelineConfig) -> list[CandidateMention]:
    p = run_paths(cfg.work_dir)
    tokens = {s.sent_id: s.tokens for s in read_corpus(p["train"])}
    return [CandidateMention(r["mention_id"], tokens[r["sent_id"]], (r["start"], r["end"]),
                             tuple(r["candidate_type_ids"]), tuple(r["negative_pool"]), r["roleset_id"])
            for r in read_jsonl(p["candidates"])]


def _train_cls_base(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    ont = load_ontology(p["ontology"])
    ranker, index = load_ranker(cfg)
    train = [s for s in read_corpus(p["train"]) if s.mentions]
    topk = int(cfg["ranker.topk"])
    rankings = rank_types_batch(ranker, index, [s.tokens for s in train], topk=topk,
                                max_length=cfg.train_config("ranker").max_length)
    candidates, records = [], []
    for s, ranking in zip(train, rankings):
        pool = tuple(t for t, _ in ranking)
        for m in s.mentions:
            c = CandidateMention(m.mention_id, s.tokens, m.span, m.candidate_type_ids, pool, m.roleset_id)
            candidates.append(c)
            records.append(_candidate_record(c, s.sent_id))
    write_jsonl(p["candidates"], records)
    clean = [c for c in candidates if len(c.candidate_type_ids) == 1]
    if not clean:
        raise PipelineError("no clean (single-candidate) training mentions for the base classifier",
                            "train-cls-base")
    model, curve = train_classifier(make_classifier_model(cfg), clean_training_set(clean), ont,
                                    cfg.train_config("classifier"), int(cfg["classifier.n_negatives"]))
    _save_model(model, p["cls_base"])
    return ([p["candidates"], p["cls_base"], _sidecar(p["cls_base"])],
            {"loss_curve": curve, "clean_mentions": len(clean), "noisy_mentions": len(candidates) - len(clean)},
            None)


def pseudo_labeled(labels) -> list[LabeledMention]:
    return [LabeledMention(x.mention.mention_id, x.mention.tokens, x.mention.span, x.label,
                           x.mention.negative_pool)
            for x in labels if x.selected]


def _self_label(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    ont = load_ontology(p["ontology"])
    candidates = _read_candidates(cfg)
    clean = clean_training_set([c for c in candidates if len(c.candidate_type_ids) == 1])
    noisy = [c for c in candidates if len(c.candidate_type_ids) > 1]
    sl = cfg.self_label_config()
    model = _load_model(make_classifier_model(cfg), p["cls_base"])
    history, labels = [], []
    for round_no in range(sl.rounds):
        labels = select_pseudo_labels(model, ont, noisy, sl.confidence_margin_threshold)
        selected = pseudo_labeled(labels)
        history.append(len(selected))
        if round_no + 1 < sl.rounds:
            model, _ = train_classifier(make_classifier_model(cfg), clean + selected, ont,
                                        cfg.train_config("classifier"), int(cfg["classifier.n_negatives"]))
    if noisy and not history[-1]:
        logger.warning("self-labeling selected no mentions; the final classifier sees clean data only")
    write_jsonl(p["pseudo"], [x.audit_record() for x in labels])
    return [p["pseudo"]], {"noisy_mentions": len(noisy), "selected_per_round": history}, None


def _train_cls_final(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    ont = load_ontology(p["ontology"])
    candidates = _read_candidates(cfg)
    by_id = {c.mention_id: c for c in candidates}
    clean = clean_training_set([c for c in candidates if len(c.candidate_type_ids) == 1])
    selected = []
    for rec in read_jsonl(p["pseudo"]):
        if rec["selected"]:
            c = by_id[rec["mention_id"]]
            selected.append(LabeledMention(c.mention_id, c.tokens, c.span, rec["pseudo_label"], c.negative_pool))
    model, curve = train_classifier(make_classifier_model(cfg), clean + selected, ont,
                                    cfg.train_config("classifier"), int(cfg["classifier.n_negatives"]))
    _save_model(model, p["cls_final"])
    return ([p["cls_final"], _sidecar(p["cls_final"])],
            {"loss_curve": curve, "training_mentions": len(clean) + len(selected)}, None)


@dataclass
class SentencePrediction:
    sent_id: str
    events: list[PredictionRecord]

    def to_record(self) -> dict:
        return {"sent_id": self.sent_id, "events": [e.to_record() for e in self.events]}

    @classmethod
    def from_record(cls, rec: dict) -> "SentencePrediction":
        return cls(rec["sent_id"], [PredictionRecord.from_record(rec["sent_id"], e) for e in rec["events"]])


@dataclass
class Predictor:
    """The three trained stages wired together for raw-sentence prediction.

    ``trigger`` may be ``None`` when only ranking and classification of given spans are needed.
    """

    ontology: Ontology
    trigger: TriggerModel | None
    ranker: RankerModel
    index: TypeIndex
    classifier: ClassifierModel
    threshold: float = 0.5
    topk: int = 10
    ti_max_length: int | None = 128
    rank_max_length: int | None = 128

    @classmethod
    def from_run(cls, cfg: PipelineConfig, classifier_stage: str = "train-cls-final",
                 with_trigger: bool = True) -> "Predictor":
        ranker, index = load_ranker(cfg)
        trigger = load_trigger(cfg) if with_trigger else None
        return cls(load_ontology(run_paths(cfg.work_dir)["ontology"]), trigger, ranker, index,
                   load_classifier(cfg, classifier_stage), float(cfg["trigger.threshold"]),
                   int(cfg["ranker.topk"]), cfg.train_config("trigger").max_length,
                   cfg.train_config("ranker").max_length)

    def rank(self, batch: Sequence[Sequence[str]], topk: int | None = None) -> list[list[tuple[str, float]]]:
        if not batch:
            return []
        return rank_types_batch(self.ranker, self.index, batch, topk, self.rank_max_length)

    def classify(self, items: Sequence[tuple[Sequence[str], tuple[int, int], Sequence[tuple[str, float]]]]):
        """Classifier re-ordering of each item's ranked candidates, best first."""
        if not items:
            return []
        out = []
        for (_, _, ranking), (_, scores) in zip(items, classify_many(self.classifier, self.ontology, items)):
            rank_score = dict(ranking)
            ordered = sorted(scores, key=lambda s: (-s.p_yes, -rank_score[s.type_id], s.type_id))
            out.append([(s.type_id, s.p_yes) for s in ordered])
        return out

    def predict(self, sentences: Sequence[tuple[str, Sequence[str]]]) -> list[SentencePrediction]:
        """Decode triggers, rank once per sentence that has any, classify each trigger against that ranking."""
        if self.trigger is None:
            raise ValueError("predictor has no trigger model")
        token_lists = [list(toks) for _, toks in sentences]
        triggers = predict_triggers(self.trigger, token_lists, self.threshold, self.ti_max_length)
        active = [k for k, spans in enumerate(triggers) if spans]
        rankings = dict(zip(active, self.rank([token_lists[k] for k in active], self.topk)))
        items, owners = [], []
        for k in active:
            for sc in triggers[k]:
                items.append((token_lists[k], sc.span, rankings[k]))
                owners.append(k)
        ordered = self.classify(items)
        events: list[list[PredictionRecord]] = [[] for _ in sentences]
        for k, item, order in zip(owners, items, ordered):
            events[k].append(PredictionRecord(sentences[k][0], item[1], tuple(order), order[0][0],
                                              ranker_types=tuple(item[2])))
        return [SentencePrediction(sid, ev) for (sid, _), ev in zip(sentences, events)]


def predict_end_to_end(cfg: PipelineConfig, sentences: Sequence[tuple[str, Sequence[str]]]) -> list[SentencePrediction]:
    for dep in ("train-ti", "build-index", "train-cls-final"):
        if read_manifest(cfg.work_dir, dep) is None:
            raise DependencyError("predict", dep)
    return Predictor.from_run(cfg).predict(sentences)


def _eval_split(cfg: PipelineConfig) -> list[Sentence]:
    return read_corpus(run_paths(cfg.work_dir)[cfg["evaluate.split"]])


def _predict(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    sentences = _eval_split(cfg)
    preds = Predictor.from_run(cfg).predict([(s.sent_id, s.tokens) for s in sentences])
    write_jsonl(p["predictions"], [sp.to_record() for sp in preds])
    return [p["predictions"]], {"sentences": len(preds), "events": sum(len(sp.events) for sp in preds)}, None


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    return [e for rec in read_jsonl(path) for e in SentencePrediction.from_record(rec).events]


def gold_span_report(predictor: Predictor, sentences: Sequence[Sentence], mention_filter=None) -> dict:
    """Per-stage Hit@K with gold spans given to the ranker and classifier directly."""
    sentences = [s for s in sentences if s.mentions]
    full = predictor.rank([s.tokens for s in sentences], topk=None)
    ranked, gold, items, ids = {}, {}, [], []
    for s, ranking in zip(sentences, full):
        for m in s.mentions:
            if mention_filter is not None and not mention_filter(m):
                continue
            ranked[m.mention_id] = [t for t, _ in ranking]
            gold[m.mention_id] = m.gold_type_id
            items.append((s.tokens, m.span, ranking[: predictor.topk]))
            ids.append(m.mention_id)
    classified = {mid: [t for t, _ in order] for mid, order in zip(ids, predictor.classify(items))}
    return per_stage_report(ranked, classified, gold, cover_k=predictor.topk).to_dict()


def _evaluate(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    sentences = _eval_split(cfg)
    gold = gold_from_sentences(sentences)
    preds = read_predictions(p["predictions"])
    ks = [int(k) for k in cfg["evaluate.ks"]]
    ont = load_ontology(p["ontology"])
    freq = mention_counts_by_type(read_corpus(p["train"]))
    predictor = Predictor.from_run(cfg, with_trigger=False)
    clean_gold = [g for g in gold if g.is_clean]
    noisy_gold = [g for g in gold if not g.is_clean]
    report = {
        "split": cfg["evaluate.split"],
        "end_to_end": evaluate(preds, gold, ks).to_dict(),
        "hit_at_clean": {str(k): v for k, v in score_hit_at_k(preds, clean_gold, ks).items()},
        "hit_at_noisy": {str(k): v for k, v in score_hit_at_k(preds, noisy_gold, ks).items()},
        "per_stage": {
            "all": gold_span_report(predictor, sentences),
            "clean": gold_span_report(predictor, sentences, lambda m: m.is_clean),
            "noisy": gold_span_report(predictor, sentences, lambda m: not m.is_clean),
        },
        "frequency_quartiles": frequency_quartile_analysis(preds, gold, freq, ont.types).to_dict(),
        "support": {"clean": len(clean_gold), "noisy": len(noisy_gold)},
    }
    write_json(p["report"], report)
    e2e = report["end_to_end"]
    return [p["report"]], {"ti_f1": e2e["ti_f1"], "tc_f1": e2e["tc_f1"]}, None


def _error_analysis(cfg: PipelineConfig, inputs: dict):
    p = run_paths(cfg.work_dir)
    ont = load_ontology(p["ontology"])
    gold = gold_from_sentences(_eval_split(cfg))
    errors = classification_errors(read_predictions(p["predictions"]), gold)
    categorized = categorize_errors(errors, ont, bool(cfg["evaluate.prioritize_hierarchy"]))
    write_error_csv(p["errors"], categorized)
    counts = category_counts(categorized)
    write_json(p["error_summary"], counts)
    return [p["errors"], p["error_summary"]], counts, None


_RUNNERS: dict[str, Callable] = {
    "build-data": _build_data,
    "train-ti": _train_ti,
    "train-rank": _train_rank,
    "build-index": _build_index,
    "train-cls-base": _train_cls_base,
    "self-label": _self_label,
    "train-cls-final": _train_cls_final,
    "predict": _predict,
    "evaluate": _evaluate,
    "error-analysis": _error_analysis,
}


def lock_run(work: Path) -> FileLock:
    work.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(work / ".lock"), timeout=0)
    try:
        lock.acquire()
    except Timeout as e:
        raise LockError(f"run directory {work} is in use by another process") from e
    return lock


def _run_unlocked(cfg: PipelineConfig, stage: str) -> StageResult:
    if stage not in _RUNNERS:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    inputs = check_upstream(cfg, stage)
    logger.info("running stage %s", stage)
    torch.manual_seed(cfg.seed)
    outputs, metrics, external = _RUNNERS[stage](cfg, inputs)
    man = write_manifest(cfg, stage, inputs, outputs, metrics, external)
    return StageResult(stage, list(man["outputs"]), metrics)


def run_stage(cfg: PipelineConfig, stage: str) -> StageResult:
    lock = lock_run(cfg.work_dir)
    try:
        return _run_unlocked(cfg, stage)
    finally:
        lock.release()


def run_all(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> list[StageResult]:
    lock = lock_run(cfg.work_dir)
    try:
        return [_run_unlocked(cfg, s) for s in stages]
    finally:
        lock.release()


def write_fixture(out_dir: str | Path, spec: FixtureSpec | None = None, seed: int = 0) -> dict[str, Path]:
    spec = spec or FixtureSpec()
    paths = generate_fixture(spec, seed).write(out_dir)
    paths["spec"] = Path(out_dir) / "fixture.json"
    write_json(paths["spec"], {"seed": seed, **spec.to_dict()})
    return paths


def with_overrides(cfg: PipelineConfig, **values: Any) -> PipelineConfig:
    """Copy of ``cfg`` with dotted-key overrides (``None`` values are ignored)."""
    doc = copy.deepcopy(cfg.doc)
    for key, value in values.items():
        if value is not None:
            _set_dotted(doc, key.replace("__", "."), value)
    out = replace(cfg, doc=_merge(DEFAULTS, doc))
    out._check()
    return out
