"""Experiment configuration, a deterministic run, and on-disk artifacts.

A config is a JSON object; :data:`SCHEMA` fixes its shape. The config file
plus the seed fully determine a run: data generation, initialization and
minibatch order are all derived from ``seed``.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import jsonschema

from . import evalmetrics as em
from . import synthbench as sb
from .flowdist import FlowConfig
from .locloss import BASE_NAMES, LOSS_NAMES, GflConfig
from .noisegen import KINDS, NoiseModel

TEST_SEED_OFFSET = 10_000

_pos_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["tag"],
    "properties": {
        "tag": {"type": "string", "pattern": r"^[A-Za-z0-9_.-]+$"},
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": ["string", "null"]},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_train": _pos_int,
                "n_test": _pos_int,
                "scale_mix": {"type": "array", "items": {"type": "number", "minimum": 0},
                              "minItems": 4, "maxItems": 4},
                "feature_noise": {"type": "number", "minimum": 0},
                "feature_dim": {"type": "integer", "minimum": 5},
                "anchor_jitter": {"type": "number", "minimum": 0, "maximum": 0.5},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(KINDS)},
                "scale": {"type": "number", "minimum": 0},
                "nu": {"type": "number", "exclusiveMinimum": 2},
                "skew": {"type": "number", "minimum": 0, "maximum": 1},
                "offset": {"type": "number", "minimum": 0},
                "weight": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "loss": {"enum": list(LOSS_NAMES)},
                "lam": {"type": "number", "minimum": 0},
                "base": {"enum": list(BASE_NAMES)},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "epochs": _pos_int,
                "batch": _pos_int,
                "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "flow": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"const": 4},
                "num_coupling_layers": _pos_int,
                "subnet_layers": _pos_int,
                "subnet_width": _pos_int,
                "scale_bound": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "head": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"hidden": {"type": "array", "items": _pos_int, "minItems": 1}},
        },
        "gfl": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n": _pos_int, "alpha": {"type": "number", "exclusiveMinimum": 0}},
        },
    },
}


class ConfigError(ValueError):
    """Invalid config; ``path`` is the dotted location of the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 20_000
    n_test: int = 4_000
    scale_mix: tuple = (0.25, 0.25, 0.25, 0.25)
    feature_noise: float = 0.3
    feature_dim: int = 16
    anchor_jitter: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    tag: str = "run"
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    train: dict = field(default_factory=dict)  # TrainConfig fields except seed
    flow: FlowConfig = field(default_factory=FlowConfig)
    hidden: tuple = (64, 64)
    gfl: GflConfig = field(default_factory=GflConfig)

    @property
    def train_config(self):
        return sb.TrainConfig(seed=self.seed, **self.train)

    def to_dict(self):
        """Fully resolved JSON-ready dict (every default made explicit)."""
        tc = self.train_config.to_dict()
        tc.pop("seed")
        return {
            "tag": self.tag,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": {**asdict(self.dataset), "scale_mix": list(self.dataset.scale_mix)},
            "noise": self.noise.to_dict(),
            "train": tc,
            "flow": asdict(self.flow),
            "head": {"hidden": list(self.hidden)},
            "gfl": asdict(self.gfl),
        }

    @classmethod
    def from_dict(cls, d):
        validate(d)
        sections = [
            ("dataset", lambda s: DatasetSpec(**{**s, "scale_mix": tuple(s.get("scale_mix", DatasetSpec.scale_mix))})),
            ("noise", lambda s: NoiseModel(**s)),
            ("train", _resolved_train),
            ("flow", lambda s: FlowConfig(**s)),
            ("gfl", lambda s: GflConfig(**s)),
        ]
        built = {}
        for name, make in sections:
            try:
                built[name] = make(d.get(name, {}))
            except (TypeError, ValueError) as exc:
                raise ConfigError(name, str(exc)) from None
        mix = built["dataset"].scale_mix
        if abs(math.fsum(mix) - 1.0) > 1e-9:
            raise ConfigError("dataset.scale_mix", f"proportions must sum to 1, got {math.fsum(mix)}")
        return cls(tag=d["tag"], seed=d.get("seed", 0), out_dir=d.get("out_dir"),
                   hidden=tuple(d.get("head", {}).get("hidden", (64, 64))), **built)

    def digest(self):
        """Content hash of everything that affects results (not ``out_dir``)."""
        d = self.to_dict()
        d.pop("out_dir")
        return em.config_digest(d)

    def with_overrides(self, **kw):
        """Copy with ``seed``, ``tag``, ``noise_scale``, ``lambda``, ``loss`` or
        ``coupling_layers`` replaced (the sweep axes)."""
        cfg = self
        for key, value in kw.items():
            if key in ("seed", "tag", "out_dir"):
                cfg = replace(cfg, **{key: value})
            elif key == "noise_scale":
                cfg = replace(cfg, noise=replace(cfg.noise, scale=float(value)))
            elif key == "lambda":
                cfg = replace(cfg, train={**cfg.train, "lam": float(value)})
            elif key == "loss":
                cfg = replace(cfg, train={**cfg.train, "loss": str(value)})
            elif key == "coupling_layers":
                cfg = replace(cfg, flow=replace(cfg.flow, num_coupling_layers=int(value)))
            else:
                raise KeyError(f"unknown override {key!r}")
        return ExperimentConfig.from_dict(cfg.to_dict())


def _resolved_train(section):
    d = sb.TrainConfig(**section).to_dict()
    d.pop("seed")
    return d


def validate(d):
    """Raise :class:`ConfigError` naming the first offending field."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(d), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = ".".join(filter(None, [path, extra[0] if extra else ""]))
        raise ConfigError(path, err.message)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(d)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# -- running -------------------------------------------------------------------

def build_data(cfg):
    ds = cfg.dataset
    common = dict(scale_mix=ds.scale_mix, feature_noise=ds.feature_noise,
                  feature_dim=ds.feature_dim, anchor_jitter=ds.anchor_jitter)
    train = sb.generate_dataset(ds.n_train, noise=cfg.noise, seed=cfg.seed, **common)
    test = sb.generate_dataset(ds.n_test, seed=cfg.seed + TEST_SEED_OFFSET, **common)
    return train, test


def run_experiment(cfg):
    """Generate, train and evaluate. Returns ``(record, TrainResult)``.

    Raises :class:`tolf.synthbench.TrainingDiverged` on divergence.
    """
    start = time.perf_counter()
    train_data, test_data = build_data(cfg)
    tc = cfg.train_config
    head, flow = sb.make_models(tc, cfg.dataset.feature_dim, cfg.hidden, cfg.flow, cfg.gfl)
    result = sb.train(head, flow, train_data, tc)
    record = em.evaluate(result.head, result.flow, test_data, cfg.digest(), result.trace)
    record.extra.update({"tag": cfg.tag, "seed": cfg.seed, "loss": tc.loss,
                         "gfl_clamped": int(result.gfl_clamped)})
    record.wall_time = time.perf_counter() - start
    return record, result


# -- artifacts -----------------------------------------------------------------

def run_dir_name(cfg):
    return f"{cfg.tag}-{cfg.digest()[:12]}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def summary_rows(record):
    rows = [("loc_ap", "all", record.loc_ap), ("mean_iou", "all", record.mean_iou)]
    for t, acc in record.accuracy.items():
        rows.append((f"acc@{t}", "all", acc))
    for name in sb.SCALE_BINS:
        if name in record.bin_loc_ap:
            rows.append(("loc_ap", name, record.bin_loc_ap[name]))
    for group in (("very_tiny", "tiny"), ("small", "medium")):
        v = em.grouped_ap(record, group)
        if v is not None:
            rows.append(("loc_ap", "+".join(group), v))
    return [(m, s, repr(float(v))) for m, s, v in rows]


def write_run(run_dir, cfg, record, result):
    """Write config, record (JSON + JSON lines), CSV summaries and checkpoints."""
    os.makedirs(os.path.join(run_dir, "checkpoint"), exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(cfg.to_dict()))
    with open(os.path.join(run_dir, "record.json"), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(record.to_dict()))
    with open(os.path.join(run_dir, "records.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
    write_csv(os.path.join(run_dir, "summary.csv"), ["metric", "subset", "value"], summary_rows(record))
    write_csv(os.path.join(run_dir, "trace.csv"), ["epoch", "loss"],
              [(i, repr(float(v))) for i, v in enumerate(result.trace)])
    result.head.save(os.path.join(run_dir, "checkpoint", "head"))
    result.flow.save(os.path.join(run_dir, "checkpoint", "flow"))
