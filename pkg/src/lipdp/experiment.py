"""Experiment configuration, orchestration and result emission.

Configs are INI files with sections ``[data]``, ``[model]``, ``[train]`` and
``[run]``. Every run writes the fully resolved config next to its results.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accountant import RdpLedger, to_epsilon_delta
from .data import DatasetHandle, load_csv, load_idx, stratified_split, synthetic_tabular
from .dp_optim import DIAGNOSTIC_FIELDS, TrainConfig, TrainingAborted, TrainResult, train
from .layers import (
    Activation,
    Conv2D,
    CosineSimilarity,
    Dense,
    GroupNorm,
    ModelSpec,
    MulticlassHinge,
    SoftmaxCE,
)
from .tensor import make_rng

RESULT_FIELDS = ("variant", "seed", "epsilon", "delta", "accuracy", "runtime_s", "final_weight_norms")


@dataclass
class DataConfig:
    format: str = "synthetic"  # csv | idx | synthetic
    path: str = ""
    label_column: str = "label"
    numeric: str = ""  # comma separated column names
    categorical: str = ""
    labels_path: str = ""  # idx only
    n: int = 2000  # synthetic only
    p: int = 10
    data_seed: int = 0


@dataclass
class ModelConfig:
    # comma separated tokens: dense:OUT[:bias], relu, tanh, sigmoid,
    # groupnorm:GROUPS:ALPHA, conv:C_OUT:FH:FW:C_IN:H:W
    layers: str = "dense:16,relu,dense:2"
    loss: str = "ce"  # ce | hinge | cosine
    temperature: float = 1.0
    margin: float = 1.0
    min_output_norm: float = 1.0


@dataclass
class RunConfig:
    variant: str = "lip"
    seed: int = 0
    delta: float = 0.0  # 0 means 1/n
    output: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("data", "model", "train", "run")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in self.SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(section, f.name)) for f in dataclasses.fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        unknown = set(cp.sections()) - set(cls.SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for name in cls.SECTIONS:
            if cp.has_section(name):
                for key, value in cp[name].items():
                    cfg.set(name, key, value)
        cfg.train.__post_init__()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())

    def set(self, section: str, key: str, value: str) -> None:
        """Set one field from its string form, converting to the field's type."""
        obj = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if key not in types:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        setattr(obj, key, _parse(value, types[key]))


def _fmt(v) -> str:
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(value: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    value = value.strip()
    if "None" in typ and value.lower() in ("none", ""):
        return None
    if typ.startswith("int"):
        return int(value)
    if typ.startswith("float"):
        return float(value)
    if typ.startswith("bool"):
        return value.lower() in ("1", "true", "yes", "on")
    return value


def build_model(mc: ModelConfig, input_dim: int, classes: int) -> ModelSpec:
    layers = []
    dim = input_dim
    for token in [t.strip() for t in mc.layers.split(",") if t.strip()]:
        parts = token.split(":")
        kind = parts[0].lower()
        if kind == "dense":
            out = int(parts[1])
            layers.append(Dense(dim, out, with_bias=len(parts) > 2 and parts[2] == "bias"))
            dim = out
        elif kind in ("relu", "tanh", "sigmoid"):
            layers.append(Activation(kind))
        elif kind == "groupnorm":
            layers.append(GroupNorm.contiguous(dim, int(parts[1]), float(parts[2])))
        elif kind == "conv":
            c_out, fh, fw, c_in, h, w = (int(v) for v in parts[1:7])
            layer = Conv2D(c_in, c_out, h, w, fh, fw)
            layers.append(layer)
            dim = layer.output_size()
        else:
            raise ValueError(f"unknown layer token {token!r}")
    if dim != classes:
        raise ValueError(f"model output size {dim} does not match {classes} classes")
    if mc.loss == "ce":
        loss = SoftmaxCE(mc.temperature)
    elif mc.loss == "hinge":
        loss = MulticlassHinge(mc.margin)
    elif mc.loss == "cosine":
        loss = CosineSimilarity(mc.min_output_norm)
    else:
        raise ValueError(f"unknown loss {mc.loss!r}")
    return ModelSpec(tuple(layers), loss, input_dim)


def load_dataset(dc: DataConfig, X1: float) -> DatasetHandle:
    if dc.format == "csv":
        schema = {c.strip(): "numeric" for c in dc.numeric.split(",") if c.strip()}
        schema.update({c.strip(): "categorical" for c in dc.categorical.split(",") if c.strip()})
        return load_csv(dc.path, dc.label_column, schema, X1)
    if dc.format == "idx":
        return load_idx(dc.path, dc.labels_path, X1)
    if dc.format == "synthetic":
        return synthetic_tabular(dc.n, dc.p, make_rng(dc.data_seed), X1)
    raise ValueError(f"unknown data format {dc.format!r}")


def evaluate(model: ModelSpec, params, dataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class index)."""
    x, y = dataset.as_tuple() if isinstance(dataset, DatasetHandle) else dataset
    pred = np.argmax(model.predict(params, x), axis=1)
    return float(np.mean(pred == np.asarray(y)))


@dataclass
class ExperimentOutcome:
    row: dict
    result: TrainResult
    model: ModelSpec
    config: ExperimentConfig


def run_experiment(cfg: ExperimentConfig, dataset: DatasetHandle | None = None,
                   write: bool = True) -> ExperimentOutcome:
    """Split, train, evaluate and account one configuration.

    Writes ``results.csv``, ``ledger.json``, ``diagnostics.csv`` and
    ``config.ini`` into ``cfg.run.output`` when it is set and ``write`` is true.
    """
    ds = dataset or load_dataset(cfg.data, cfg.train.input_bound)
    rng = make_rng(cfg.run.seed)
    train_idx, test_idx = stratified_split(ds.labels, rng)
    train_ds, test_ds = ds.subset(train_idx), ds.subset(test_idx)
    model = build_model(cfg.model, ds.features.shape[1], ds.classes)
    delta = cfg.run.delta or 1.0 / len(train_ds)

    start = time.perf_counter()
    try:
        result = train(model, train_ds.as_tuple(), cfg.train, cfg.run.variant, rng)
    except TrainingAborted as exc:
        raise TrainingAborted(exc.iteration, f"{exc.detail}\nconfig:\n{cfg.to_ini()}") from exc
    runtime = time.perf_counter() - start

    spend = to_epsilon_delta(result.ledger, delta)
    norms = [
        model.weight_norm(k, p, cfg.train.norm, cfg.train.power_tol, cfg.train.power_max_iter)
        for k, p in enumerate(result.params)
        if model.layers[k].has_params
    ]
    row = {
        "variant": cfg.run.variant,
        "seed": cfg.run.seed,
        "epsilon": spend.epsilon,
        "delta": delta,
        "accuracy": evaluate(model, result.params, test_ds),
        "runtime_s": runtime,
        "final_weight_norms": ";".join(repr(float(v)) for v in norms),
    }
    if write and cfg.run.output:
        write_outputs(Path(cfg.run.output), cfg, row, result, delta)
    return ExperimentOutcome(row, result, model, cfg)


def write_outputs(out: Path, cfg: ExperimentConfig, row: dict, result: TrainResult, delta: float):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    with (out / "results.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: _csv_value(v) for k, v in row.items()})
    (out / "ledger.json").write_text(result.ledger.to_json(delta) + "\n")
    with (out / "diagnostics.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in result.diagnostics:
            w.writerow({k: _csv_value(v) for k, v in r.items()})


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def read_ledger(path):
    """Ledger and raw record from a ``ledger.json`` written by :func:`run_experiment`."""
    rec = json.loads(Path(path).read_text())
    return RdpLedger.from_record(rec), rec
