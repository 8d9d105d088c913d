"""Run configuration: JSON file + ``key=value`` overrides -> validated objects.

Every component seed comes from the single top-level ``seed`` through
:func:`beliefmeta.meta.derive_seed` with a fixed stream name
(``train-data``, ``eval-data``, ``init``, ``sampler``, ``eval-tasks``).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from .belief import ScheduleConfig
from .episodes import OOD_KINDS, Dataset, load_csv, make_synthetic
from .errors import ConfigError, DatasetParseError
from .meta import MetaConfig, derive_seed
from .model import Architecture

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "synthetic",
        "num_classes": 10,
        "dim": 8,
        "samples_per_class": 100,
        "radius": 3.0,
        "noise": 1.0,
        "path": None,
        "eval_path": None,
    },
    "arch": {"hidden_dims": [32, 32], "activation": "relu"},
    "meta": {
        "n_way": 5,
        "k_shot": 1,
        "q_query": 2,
        "inner_steps": 5,
        "inner_lr": 0.01,
        "outer_lr": 0.001,
        "tasks_per_iter": 2,
        "candidate_pool": 16,
        "warmup": 0,
        "epochs": 1,
        "iters_per_epoch": 100,
        "mode": "NTS",
        "second_order": True,
        "learned_inner_rates": False,
        "optimizer": "adam",
        "label_budget": None,
        "schedule": {
            "lambda_start": 0.99,
            "lambda_end": 0.5,
            "lambda_horizon": 50,
            "eta_cap": 0.0,
            "eta_ramp_divisor": 10,
        },
    },
    "eval": {
        "num_tasks": 200,
        "thresholds": [0.1, 0.2, 0.5, 1.0],
        "ood": None,
    },
}

_OOD_DEFAULT = {"kind": "feature-shift", "magnitudes": [1.0, 2.0, 5.0], "seed": 0}


@dataclass
class RunConfig:
    raw: dict
    arch_hidden: tuple[int, ...]
    meta: MetaConfig
    output_dir: Path
    seed: int

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    def architecture(self, input_dim: int) -> Architecture:
        return Architecture(input_dim, self.meta.n_way, self.arch_hidden, self.raw["arch"]["activation"])


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown key")
        if key == "ood":
            out[key] = None if value is None else {**_OOD_DEFAULT, **value}
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, value = parse_override(text)
        node = cfg
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(".".join(keys[:i + 1]), "unknown key")
            if node[k] is None and k == "ood":
                node[k] = dict(_OOD_DEFAULT)
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(".".join(keys), "unknown key")
        node[keys[-1]] = value
    return cfg


def load_config(path: str | Path | None, overrides: Sequence[str] = (), output_dir: str | None = None) -> RunConfig:
    user: dict = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config", "top level must be an object")
        base_dir = path.resolve().parent
    raw = apply_overrides(_merge(DEFAULTS, user), overrides)
    if output_dir is not None:
        raw["output_dir"] = output_dir
    for key in ("path", "eval_path"):
        p = raw["dataset"].get(key)
        if p:
            raw["dataset"][key] = str((base_dir / p).resolve()) if not Path(p).is_absolute() else p
    return validate(raw)


def _int(raw: dict, key: str, where: str, minimum: int = 0) -> int:
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{where}.{key}", f"must be an integer >= {minimum}")
    return v


def _num(raw: dict, key: str, where: str) -> float:
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}", "must be a number")
    return float(v)


def validate(raw: dict) -> RunConfig:
    seed = _int(raw, "seed", "config")
    ds = raw["dataset"]
    if ds["kind"] == "synthetic":
        _int(ds, "num_classes", "dataset", 2)
        _int(ds, "dim", "dataset", 2)
        _int(ds, "samples_per_class", "dataset", 1)
        _num(ds, "radius", "dataset")
        if _num(ds, "noise", "dataset") < 0:
            raise ConfigError("dataset.noise", "must be nonnegative")
    elif ds["kind"] == "csv":
        if not ds.get("path"):
            raise ConfigError("dataset.path", "required when dataset.kind is csv")
        for key in ("path", "eval_path"):
            if ds.get(key) and not Path(ds[key]).is_file():
                raise ConfigError(f"dataset.{key}", f"file not found: {ds[key]}")
    else:
        raise ConfigError("dataset.kind", "must be 'synthetic' or 'csv'")

    hidden = raw["arch"]["hidden_dims"]
    if not isinstance(hidden, list) or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden):
        raise ConfigError("arch.hidden_dims", "must be a list of positive integers")
    if raw["arch"]["activation"] != "relu":
        raise ConfigError("arch.activation", "only 'relu' is supported")

    m = dict(raw["meta"])
    sched_raw = m.pop("schedule")
    for key in ("inner_lr", "outer_lr"):
        _num(m, key, "meta")
    for key in ("second_order", "learned_inner_rates"):
        if not isinstance(m[key], bool):
            raise ConfigError(f"meta.{key}", "must be true or false")
    for key in sched_raw:
        _num(sched_raw, key, "meta.schedule")
    try:
        schedule = ScheduleConfig(**{k: float(v) for k, v in sched_raw.items()})
    except ValueError as exc:
        raise ConfigError("meta.schedule", str(exc)) from None
    meta = MetaConfig(**m, schedule=schedule, seed=seed)
    meta.validate()

    ev = raw["eval"]
    _int(ev, "num_tasks", "eval", 1)
    thr = ev["thresholds"]
    if not isinstance(thr, list) or not thr or any(isinstance(t, bool) or not isinstance(t, (int, float)) for t in thr):
        raise ConfigError("eval.thresholds", "must be a non-empty list of numbers")
    ood = ev["ood"]
    if ood is not None:
        if ood.get("kind") not in OOD_KINDS:
            raise ConfigError("eval.ood.kind", f"must be one of {', '.join(OOD_KINDS)}")
        mags = ood.get("magnitudes")
        if not isinstance(mags, list) or not mags or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 for v in mags
        ):
            raise ConfigError("eval.ood.magnitudes", "must be a non-empty list of nonnegative numbers")
        extra = set(ood) - set(_OOD_DEFAULT)
        if extra:
            raise ConfigError(f"eval.ood.{sorted(extra)[0]}", "unknown key")
    if not raw.get("output_dir"):
        raise ConfigError("output_dir", "must be a non-empty path")
    return RunConfig(raw, tuple(hidden), meta, Path(raw["output_dir"]), seed)


def queries_per_task(meta: MetaConfig) -> int:
    return meta.candidate_pool // meta.tasks_per_iter if meta.mode == "ML" else 1


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Training and held-out datasets; synthetic ones are two independent draws."""
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        args = (ds["num_classes"], ds["dim"], ds["samples_per_class"], ds["radius"], ds["noise"])
        train = make_synthetic(*args, seed=derive_seed(cfg.seed, "train-data"))
        held = make_synthetic(*args, seed=derive_seed(cfg.seed, "eval-data"))
    else:
        try:
            train = load_csv(ds["path"])
            held = load_csv(ds["eval_path"]) if ds.get("eval_path") else train
        except DatasetParseError as exc:
            raise ConfigError("dataset.path", str(exc)) from None
    check_dataset(train, cfg.meta, queries_per_task(cfg.meta), "dataset.path")
    check_dataset(held, cfg.meta, 1, "dataset.eval_path")
    if train.dim != held.dim:
        raise ConfigError("dataset.eval_path", "feature width differs from the training data")
    return train, held


def check_dataset(data: Dataset, meta: MetaConfig, per_task: int, key: str) -> None:
    if data.num_classes < meta.n_way:
        raise ConfigError("meta.n_way", f"dataset has only {data.num_classes} classes")
    need = meta.k_shot + meta.q_query * per_task
    short = [c for c in data.classes if len(data.class_index[c]) < need]
    if short:
        raise ConfigError(key, f"class {short[0]!r} has fewer than {need} rows (k_shot + q_query * query sets)")
