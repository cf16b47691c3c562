"""Experiment configuration: JSON schema, defaults, invariants and seed streams."""

from __future__ import annotations

import copy
import json
import math
import zlib
from pathlib import Path
from dataclasses import asdict, dataclass
from typing import Optional

import jsonschema
import numpy as np

from .data import RHO_PRESETS, SyntheticTaskSpec
from .errors import ConfigError
from .knapsack import GRAD_SCALINGS, NORMALIZE_ORDERS, KnapsackConfig

SPECIALIZATION_MODES = ("singles-and-pairs", "singles")

_train_block = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "hidden_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["adam", "sgd"]},
        "learning_rate": {"type": "number", "minimum": 0},
        "train_size": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset"],
    "properties": {
        "dataset": {
            "type": "object",
            "required": ["source"],
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "idx"]},
                "synthetic": {"type": "object"},
                "train_images": {"type": "string"},
                "train_labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
                "classes": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2},
                "valid_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_train": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "c": {"type": "integer", "minimum": 2},
        "d": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "specialization": {"enum": list(SPECIALIZATION_MODES)},
        "rho": {"type": ["number", "string"]},
        "agent": _train_block,
        "selector": _train_block,
        "knapsack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer"},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "m": {"type": "integer", "minimum": 1},
                "grad_scaling": {"enum": list(GRAD_SCALINGS)},
                "normalize": {"enum": list(NORMALIZE_ORDERS)},
            },
        },
        "k_values": {"type": "array", "items": {"type": "integer"}},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
}

AGENT_DEFAULTS = {
    "hidden_sizes": [128, 64],
    # short training on small skewed sets keeps agents specialised
    "epochs": 2,
    "batch_size": 64,
    "optimizer": "adam",
    "learning_rate": 1e-3,
    "train_size": 300,
}
SELECTOR_DEFAULTS = {
    "hidden_sizes": [128, 64],
    "epochs": 30,
    "batch_size": 64,
    "optimizer": "adam",
    "learning_rate": 1e-3,
    "patience": 10,
}
KNAPSACK_DEFAULTS = {"epsilon": 1.0, "m": 100, "grad_scaling": "berthet", "normalize": "before"}


@dataclass
class TrainSettings:
    hidden_sizes: tuple = (128, 64)
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    train_size: Optional[int] = None
    patience: Optional[int] = None


@dataclass
class DatasetSettings:
    source: str
    synthetic: Optional[SyntheticTaskSpec] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes: Optional[list] = None
    valid_fraction: float = 0.1
    max_train: Optional[int] = None


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment bit for bit."""

    dataset: DatasetSettings
    c: int
    d: Optional[int]
    n: int
    specialization: str
    rho: float
    agent: TrainSettings
    selector: TrainSettings
    k: int
    epsilon: float
    m: int
    grad_scaling: str
    normalize: str
    k_values: list
    seed: int
    output_dir: str

    def knapsack(self, k=None, noise_seed=0) -> KnapsackConfig:
        return KnapsackConfig(
            k=self.k if k is None else k,
            epsilon=self.epsilon,
            m=self.m,
            grad_scaling=self.grad_scaling,
            noise_seed=noise_seed,
            normalize=self.normalize,
        )

    def to_dict(self) -> dict:
        ds = {k: v for k, v in asdict(self.dataset).items() if v is not None}
        if self.dataset.synthetic is not None:
            ds["synthetic"] = self.dataset.synthetic.to_dict()
        return {
            "dataset": ds,
            "c": self.c,
            "d": self.d,
            "n": self.n,
            "specialization": self.specialization,
            "rho": self.rho,
            "agent": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.agent).items() if v is not None},
            "selector": {
                k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.selector).items() if v is not None
            },
            "knapsack": {
                "k": self.k,
                "epsilon": self.epsilon,
                "m": self.m,
                "grad_scaling": self.grad_scaling,
                "normalize": self.normalize,
            },
            "k_values": list(self.k_values),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }


def ensemble_size(c, mode):
    return c + math.comb(c, 2) if mode == "singles-and-pairs" else c


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Schema-check ``raw``, fill defaults and enforce cross-field invariants."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            raise ConfigError(f"missing required field '{missing}'", _pointer(path + [missing]))
        raise ConfigError(err.message, _pointer(path))

    raw = copy.deepcopy(raw)
    ds_raw = raw["dataset"]
    source = ds_raw["source"]
    synthetic = None
    if source == "synthetic":
        try:
            synthetic = SyntheticTaskSpec.from_dict(ds_raw.get("synthetic", {}))
        except TypeError as exc:
            raise ConfigError(str(exc), "/dataset/synthetic") from exc
        except ValueError as exc:
            raise ConfigError(str(exc), "/dataset/synthetic") from exc
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in ds_raw:
                raise ConfigError(f"missing required field '{key}' for idx datasets", f"/dataset/{key}")
    dataset = DatasetSettings(
        source=source,
        synthetic=synthetic,
        **{k: v for k, v in ds_raw.items() if k not in ("source", "synthetic")},
    )

    if synthetic is not None:
        c_default, d_default = synthetic.c, synthetic.d
    else:
        c_default = len(dataset.classes) if dataset.classes else None
        d_default = None
    c = raw.get("c", c_default)
    if c is None:
        raise ConfigError("missing required field 'c' (or dataset.classes)", "/c")
    if c_default is not None and c != c_default:
        raise ConfigError(f"c={c} disagrees with the dataset's {c_default} classes", "/c")
    d = raw.get("d", d_default)
    if d_default is not None and d != d_default:
        raise ConfigError(f"d={d} disagrees with the dataset's input width {d_default}", "/d")

    mode = raw.get("specialization", "singles-and-pairs")
    expected_n = ensemble_size(c, mode)
    n = raw.get("n", expected_n)
    if n != expected_n:
        raise ConfigError(
            f"n={n} violates n = c + C(c,2) = {expected_n} for specialization '{mode}'"
            if mode == "singles-and-pairs"
            else f"n={n} violates n = c = {expected_n} for specialization '{mode}'",
            "/n",
        )

    rho = raw.get("rho", RHO_PRESETS["mnist"])
    if isinstance(rho, str):
        if rho not in RHO_PRESETS:
            raise ConfigError(f"unknown rho preset {rho!r}; known: {sorted(RHO_PRESETS)}", "/rho")
        rho = RHO_PRESETS[rho]
    if not 0 < rho < 1:
        raise ConfigError(f"rho={rho} violates 0 < rho < 1", "/rho")

    agent = TrainSettings(**{**AGENT_DEFAULTS, **raw.get("agent", {})})
    selector = TrainSettings(**{**SELECTOR_DEFAULTS, **raw.get("selector", {})})
    agent.hidden_sizes = tuple(agent.hidden_sizes)
    selector.hidden_sizes = tuple(selector.hidden_sizes)

    ks = {**KNAPSACK_DEFAULTS, **raw.get("knapsack", {})}
    k = ks.get("k", min(c, n))
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} violates 1 <= k <= n (n={n})", "/knapsack/k")
    k_values = raw.get("k_values", list(range(1, n + 1)))
    for i, kv in enumerate(k_values):
        if not 1 <= kv <= n:
            raise ConfigError(f"k={kv} violates 1 <= k <= n (n={n})", f"/k_values/{i}")
    if len(set(k_values)) != len(k_values):
        raise ConfigError("k_values must not repeat", "/k_values")

    return ExperimentConfig(
        dataset=dataset,
        c=c,
        d=d,
        n=n,
        specialization=mode,
        rho=float(rho),
        agent=agent,
        selector=selector,
        k=k,
        epsilon=float(ks["epsilon"]),
        m=ks["m"],
        grad_scaling=ks["grad_scaling"],
        normalize=ks["normalize"],
        k_values=list(k_values),
        seed=raw.get("seed", 0),
        output_dir=raw.get("output_dir", "runs/default"),
    )


def validate_config(path) -> ExperimentConfig:
    """Read a JSON config file and return the normalised configuration."""
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", "/") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", "/")
    config = config_from_dict(raw)
    # relative data and output paths are relative to the config file
    base = Path(path).resolve().parent
    ds = config.dataset
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        value = getattr(ds, key)
        if value is not None and not Path(value).is_absolute():
            setattr(ds, key, str(base / value))
    if not Path(config.output_dir).is_absolute():
        config.output_dir = str(base / config.output_dir)
    return config


def derive_seed(root, name, *index) -> int:
    """A 63-bit seed for the named substream (``agents``, ``selector``, ``noise``, ``rs-baseline``...)."""
    entropy = [int(root), zlib.crc32(name.encode())] + [int(i) for i in index]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def substream(root, name, *index) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name, *index))
