"""Benchmark harness: sweeps, validation-based tuning, RMSE reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from benk.baselines import (
    BANDWIDTH_GRID,
    RIDGE_GRID,
    CoxLearner,
    GaussianBeranLearner,
    pooled_dataset,
    s_learner_cate,
    t_learner_cate,
    x_learner_cate,
)
from benk.datagen import GenConfig, LabeledTrial, generate_trial
from benk.errors import AllValidationCensored
from benk.trainer import TrainConfig, predict_cate_batch, train

log = logging.getLogger(__name__)

MODELS = ("BENK", "T-NW", "S-NW", "X-NW", "T-Cox", "S-Cox", "X-Cox")
SWEEP_AXES = {"controls": "c", "epsilon": "epsilon", "q": "q", "p": "p"}
CSV_COLUMNS = ("model", "sweep_axis", "sweep_value", "repetition", "rmse", "hyperparams", "seconds")
PRESETS = ("fig_size", "fig_noise", "fig_q", "fig_p", "table2")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GenConfig
    sweep_axis: str
    sweep_values: tuple
    models: tuple[str, ...]
    repetitions: int = 1
    train_config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
        if not self.sweep_values:
            raise ValueError("sweep must list at least one value")
        if not self.models:
            raise ValueError("model list must be nonempty")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ValueError(f"unknown models {unknown}; choose from {MODELS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        sweep = data.get("sweep") or {}
        if len(sweep) != 1:
            raise ValueError("sweep must have exactly one axis, e.g. {\"controls\": [100, 200]}")
        (axis, values), = sweep.items()
        return cls(
            generator=GenConfig(**data.get("generator", {})),
            sweep_axis=axis,
            sweep_values=tuple(values),
            models=tuple(data.get("models", ())),
            repetitions=int(data.get("repetitions", 1)),
            train_config=TrainConfig.from_dict(data.get("train_config", {})),
            seed=int(data.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "sweep": {self.sweep_axis: list(self.sweep_values)},
            "models": list(self.models),
            "repetitions": self.repetitions,
            "train_config": self.train_config.to_dict(),
            "seed": self.seed,
        }


def read_config_dict(name_or_path: str) -> dict:
    """JSON from a file, or from a shipped preset when given a bare preset name."""
    path = Path(name_or_path)
    if name_or_path in PRESETS and not path.exists():
        return json.loads(resources.files("benk").joinpath("presets", f"{name_or_path}.json").read_text())
    return json.loads(path.read_text())


def load_config(name_or_path: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_config_dict(name_or_path))


def cell_seed(seed: int, axis: str, value, repetition: int) -> int:
    key = zlib.crc32(f"{axis}={value!r}".encode())
    return int(np.random.SeedSequence([seed, key, repetition]).generate_state(1, np.uint32)[0])


def rmse(predicted, truth) -> float:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if not np.all(np.isfinite(predicted)):
        raise FloatingPointError("non-finite predictions")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


# --- tuning ----------------------------------------------------------------

def _uncensored_validation(trial: LabeledTrial):
    val = trial.validation_controls
    if not val.event.any():
        raise AllValidationCensored("validation controls are all censored")
    return val.x[val.event], val.time[val.event]


def _meta_and_base(model_id: str):
    meta, base = model_id.split("-")
    return meta, ("cox" if base == "Cox" else "nw")


def validation_score(model_id: str, value: float, trial: LabeledTrial) -> float:
    """Squared error of predicted control expected lifetime on uncensored validation controls."""
    xv, tv = _uncensored_validation(trial)
    meta, base = _meta_and_base(model_id)
    learner = CoxLearner(value) if base == "cox" else GaussianBeranLearner(value)
    if meta == "S":
        learner.fit(pooled_dataset(trial.controls, trial.treatments))
        pred = learner.integrate(np.column_stack([xv, np.zeros(len(xv))]), np.unique(trial.controls.time))
    else:
        pred = learner.fit(trial.controls).integrate(xv)
    return float(np.mean((pred - tv) ** 2))


def tune_hyperparameters(model_id: str, trial: LabeledTrial, grid=None) -> dict:
    """Grid search on validation controls.

    Ties go to the smaller bandwidth or the larger ridge coefficient.  BENK
    has no grid here: its epoch is selected on the same validation set during
    training.
    """
    _uncensored_validation(trial)
    if model_id == "BENK":
        return {}
    _, base = _meta_and_base(model_id)
    if base == "cox":
        name, candidates = "ridge", sorted(grid or RIDGE_GRID, reverse=True)
    else:
        name, candidates = "bandwidth", sorted(grid or BANDWIDTH_GRID)
    best_value, best_score = None, math.inf
    for value in candidates:
        try:
            score = validation_score(model_id, value, trial)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            log.debug("grid point %s=%s failed: %s", name, value, exc)
            continue
        if np.isfinite(score) and score < best_score:
            best_value, best_score = value, score
    if best_value is None:
        raise RuntimeError(f"no usable {name} for {model_id}")
    return {name: best_value, "validation_mse": best_score}


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    rmse: float
    hyperparams: dict
    predictions: np.ndarray = field(repr=False, default=None)


def predict_model(model_id: str, trial: LabeledTrial, train_config: TrainConfig, hyperparams: dict) -> tuple[np.ndarray, dict]:
    z = trial.test_x
    c, t = trial.controls, trial.treatments
    if model_id == "BENK":
        model = train(c, train_config, trial.validation_controls)
        extra = {"best_epoch": model.best_epoch, "n": train_config.subset_size(len(c)), "N": train_config.N}
        return predict_cate_batch(model, c, t, z), extra
    meta, base = _meta_and_base(model_id)
    learner = CoxLearner(hyperparams["ridge"]) if base == "cox" else GaussianBeranLearner(hyperparams["bandwidth"])
    if meta == "T":
        return t_learner_cate(learner, c, t, z), {}
    if meta == "S":
        return s_learner_cate(learner, c, t, z), {}
    pred, fit = x_learner_cate(learner, c, t, z, return_fit=True)
    return pred, {"tau0_bandwidth": fit.tau0_bandwidth, "tau1_bandwidth": fit.tau1_bandwidth, "alpha": fit.alpha}


def evaluate_model(model_id: str, trial: LabeledTrial, train_config: TrainConfig | None = None) -> EvalResult:
    """Tune on validation controls, fit on the trial, and score CATE RMSE on its test points."""
    if model_id not in MODELS:
        raise ValueError(f"unknown model {model_id!r}")
    train_config = train_config or TrainConfig()
    hyper = tune_hyperparameters(model_id, trial)
    pred, extra = predict_model(model_id, trial, train_config, hyper)
    hyper.update(extra)
    return EvalResult(rmse(pred, trial.test_cate), hyper, pred)


# --- experiments ---------------------------------------------------------------

@dataclass
class Cell:
    model: str
    sweep_axis: str
    sweep_value: float
    repetition: int
    rmse: float
    hyperparams: dict
    seconds: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class RmseReport:
    config: dict
    cells: list[Cell]

    @property
    def failed(self) -> bool:
        return any(not c.ok for c in self.cells)

    def aggregates(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for cell in self.cells:
            groups.setdefault((cell.model, cell.sweep_value), [])
            if cell.ok:
                groups[(cell.model, cell.sweep_value)].append(cell.rmse)
        out = []
        for (model, value), values in groups.items():
            arr = np.array(values)
            out.append({
                "model": model,
                "sweep_value": value,
                "mean": float(arr.mean()) if arr.size else None,
                "std": float(arr.std(ddof=1)) if arr.size > 1 else (0.0 if arr.size else None),
                "count": int(arr.size),
            })
        return out

    def mean(self, model: str, value=None) -> float:
        vals = [c.rmse for c in self.cells if c.model == model and c.ok and (value is None or c.sweep_value == value)]
        return float(np.mean(vals))


def _sweep_generator(config: ExperimentConfig, value, repetition: int) -> GenConfig:
    field_name = SWEEP_AXES[config.sweep_axis]
    if field_name == "c":
        value = int(value)
    return replace(config.generator, **{field_name: value, "seed": cell_seed(config.seed, config.sweep_axis, value, repetition)})


def _run_unit(config: ExperimentConfig, value, repetition: int, timing: bool) -> list[Cell]:
    gen = _sweep_generator(config, value, repetition)
    trial = generate_trial(gen)
    train_config = replace(config.train_config, seed=gen.seed)
    cells = []
    for model_id in config.models:
        start = time.perf_counter()
        try:
            result = evaluate_model(model_id, trial, train_config)
            cell = Cell(model_id, config.sweep_axis, value, repetition, result.rmse, result.hyperparams)
        except Exception as exc:  # recorded per cell, the sweep continues
            log.warning("%s failed at %s=%s rep %d: %s", model_id, config.sweep_axis, value, repetition, exc)
            cell = Cell(model_id, config.sweep_axis, value, repetition, math.nan, {}, error=f"{type(exc).__name__}: {exc}")
        if timing:
            cell.seconds = time.perf_counter() - start
        cells.append(cell)
    return cells


def run_experiment(config: ExperimentConfig, threads: int = 1, timing: bool = False) -> RmseReport:
    """Every (sweep value, repetition) gets its own trial; every model is scored on it."""
    units = [(v, r) for v in config.sweep_values for r in range(config.repetitions)]
    cells: list[Cell] = []
    if threads > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_unit, config, v, r, timing) for v, r in units]
            for fut in futures:
                cells.extend(fut.result())
    else:
        for v, r in units:
            log.info("running %s=%s repetition %d", config.sweep_axis, v, r)
            cells.extend(_run_unit(config, v, r, timing))
    model_rank = {m: i for i, m in enumerate(MODELS)}
    value_rank = {v: i for i, v in enumerate(config.sweep_values)}
    cells.sort(key=lambda c: (model_rank[c.model], value_rank[c.sweep_value], c.repetition))
    return RmseReport(config.to_dict(), cells)


# --- report I/O ----------------------------------------------------------------

def _num(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _hyper_json(cell: Cell) -> str:
    data = dict(cell.hyperparams)
    if cell.error:
        data["error"] = cell.error
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def report_csv(report: RmseReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in report.cells:
        w.writerow([c.model, c.sweep_axis, _num(c.sweep_value), c.repetition, _num(c.rmse), _hyper_json(c), _num(c.seconds)])
    return buf.getvalue()


def report_json(report: RmseReport) -> str:
    def clean(v):
        return None if isinstance(v, float) and not math.isfinite(v) else v

    cells = [{
        "model": c.model, "sweep_axis": c.sweep_axis, "sweep_value": c.sweep_value,
        "repetition": c.repetition, "rmse": clean(c.rmse), "hyperparams": c.hyperparams,
        "seconds": c.seconds, "error": c.error,
    } for c in report.cells]
    return json.dumps({"config": report.config, "cells": cells, "aggregates": report.aggregates()},
                      indent=2, sort_keys=True) + "\n"


def emit_report(report: RmseReport, fmt: str, path=None) -> str:
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        text = report_json(report)
    else:
        raise ValueError("format must be csv or json")
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for r in rows:
        out.append({
            "model": r["model"],
            "sweep_axis": r["sweep_axis"],
            "sweep_value": float(r["sweep_value"]),
            "repetition": int(r["repetition"]),
            "rmse": float(r["rmse"]),
            "hyperparams": json.loads(r["hyperparams"]),
            "seconds": float(r["seconds"]) if r["seconds"] else None,
        })
    return out
