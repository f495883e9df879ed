"""Synthetic control/treatment benchmarks with known treatment effects.

Features are deterministic maps of a latent parameter ``t``; event times of
controls and treatments are Cox-style decreasing functions of the same ``t``,
so the true effect at ``z(t)`` is ``h(t) - f(t)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from benk.survival import SurvivalDataset

TIME_FLOOR = 1e-6
N_TEST_POINTS = 1000


class GeneratorKind(str, Enum):
    spiral = "spiral"
    logarithmic = "logarithmic"
    power = "power"


DOMAINS = {
    GeneratorKind.spiral: (0.0, 10.0),
    GeneratorKind.logarithmic: (0.5, 5.0),
    GeneratorKind.power: (0.0, 10.0),
}


@dataclass(frozen=True)
class GenConfig:
    kind: GeneratorKind = GeneratorKind.spiral
    d: int = 10
    c: int = 100
    q: float = 0.2
    p: float = 0.25
    epsilon: float = 0.05
    seed: int = 0
    log_coeffs: tuple[float, ...] | None = None
    n_test: int = N_TEST_POINTS

    def __post_init__(self):
        object.__setattr__(self, "kind", GeneratorKind(self.kind))
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if self.c < 1:
            raise ValueError("c must be at least 1")
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("p must lie in [0, 1)")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.log_coeffs is not None:
            coeffs = tuple(float(a) for a in self.log_coeffs)
            if len(coeffs) != self.d:
                raise ValueError("log_coeffs must have length d")
            if any(not 1.0 <= abs(a) <= 4.0 for a in coeffs):
                raise ValueError("log coefficients must lie in [-4,-1] U [1,4]")
            object.__setattr__(self, "log_coeffs", coeffs)

    @property
    def s(self) -> int:
        return int(round(self.q * self.c))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kind"] = self.kind.value
        out["log_coeffs"] = list(self.log_coeffs) if self.log_coeffs is not None else None
        return out


def draw_log_coeffs(d: int, rng: np.random.Generator) -> np.ndarray:
    magnitude = rng.uniform(1.0, 4.0, size=d)
    sign = np.where(rng.random(d) < 0.5, -1.0, 1.0)
    return sign * magnitude


def power_noise_columns(d: int) -> np.ndarray:
    """Coordinates (0-based) whose power map is nearly linear in t."""
    ratio = np.arange(1, d + 1) / math.sqrt(d)
    return np.flatnonzero((ratio > 0.8) & (ratio < 1.6))


def generate_features(kind, d: int, t, coeffs=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Feature vectors for latent values ``t`` (scalar -> ``(d,)``, array -> ``(m, d)``)."""
    kind = GeneratorKind(kind)
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = DOMAINS[kind]
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError(f"t outside the {kind.value} domain [{lo}, {hi}]")
    if kind is GeneratorKind.spiral:
        freq = np.arange(1, d // 2 + d % 2 + 1)
        angle = t[:, None] * freq[None, :]
        pairs = np.stack([t[:, None] * np.sin(angle), t[:, None] * np.cos(angle)], axis=-1)
        x = pairs.reshape(t.size, -1)[:, :d]
    elif kind is GeneratorKind.logarithmic:
        if coeffs is None:
            raise ValueError("logarithmic features need coefficients")
        coeffs = np.asarray(coeffs, dtype=float)
        x = np.log(t)[:, None] * coeffs[None, :]
    else:
        powers = np.arange(1, d + 1) / math.sqrt(d)
        x = t[:, None] ** powers[None, :]
        cols = power_noise_columns(d)
        if cols.size:
            if rng is None:
                raise ValueError("power features need an rng for the noise coordinates")
            x[:, cols] = rng.standard_normal((t.size, cols.size))
    return x[0] if scalar else x


def control_time(t):
    return -np.log(0.02) / (0.1 * np.exp(0.5 * np.asarray(t, dtype=float)))


def treatment_time(t):
    return -np.log(0.3) / (0.1 * np.exp(0.15 * np.asarray(t, dtype=float)))


def generate_event_times(t):
    """Noiseless (control, treatment) event times at latent ``t``."""
    return control_time(t), treatment_time(t)


def true_cate(t):
    return treatment_time(t) - control_time(t)


def mean_time(fn, kind, points: int = 100_000) -> float:
    """Average of ``fn`` over the uniform latent domain by midpoint quadrature."""
    lo, hi = DOMAINS[GeneratorKind(kind)]
    grid = lo + (np.arange(points) + 0.5) * (hi - lo) / points
    return float(np.mean(fn(grid)))


def apply_noise(time, epsilon: float, mean: float, rng: np.random.Generator):
    """Additive Gaussian noise with ``3 * sigma = epsilon * mean``, floored above zero."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    time = np.asarray(time, dtype=float)
    if epsilon == 0:
        return time.copy()
    sigma = epsilon * mean / 3.0
    return np.maximum(time + rng.normal(0.0, sigma, size=time.shape), TIME_FLOOR)


def apply_censoring(p: float, rng: np.random.Generator, size=None):
    """Event indicators: True (observed) with probability ``1 - p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    return rng.random(size) >= p


@dataclass(frozen=True, eq=False)
class LabeledTrial:
    controls: SurvivalDataset
    treatments: SurvivalDataset
    validation_controls: SurvivalDataset
    test_x: np.ndarray
    test_cate: np.ndarray
    test_latent: np.ndarray
    config: GenConfig
    control_latent: np.ndarray = field(repr=False, default=None)
    treatment_latent: np.ndarray = field(repr=False, default=None)

    @property
    def test_points(self) -> list[tuple[np.ndarray, float]]:
        return list(zip(self.test_x, self.test_cate.tolist()))


def generate_trial(config: GenConfig) -> LabeledTrial:
    """Controls, treatments, validation controls and noiseless test points.

    Independent child streams of ``config.seed`` drive each random component
    so one component's draws never shift another's.
    """
    streams = np.random.SeedSequence(config.seed).spawn(6)
    rng_latent, rng_noise, rng_cens, rng_power, rng_coef, rng_test = (np.random.default_rng(s) for s in streams)
    kind = config.kind
    lo, hi = DOMAINS[kind]
    coeffs = None
    if kind is GeneratorKind.logarithmic:
        coeffs = np.asarray(config.log_coeffs) if config.log_coeffs is not None else draw_log_coeffs(config.d, rng_coef)

    c, s, v = config.c, config.s, int(round(0.5 * config.c))
    mean_f = mean_time(control_time, kind)
    mean_h = mean_time(treatment_time, kind)

    def group(m, fn, mean):
        t = rng_latent.uniform(lo, hi, size=m)
        x = generate_features(kind, config.d, t, coeffs, rng_power)
        times = apply_noise(fn(t), config.epsilon, mean, rng_noise)
        events = apply_censoring(config.p, rng_cens, size=m)
        return t, x, times, events

    t0, x0, f, delta = group(c, control_time, mean_f)
    t1, x1, h, gamma = group(s, treatment_time, mean_h)
    tv, xv, fv, dv = group(v, control_time, mean_f)

    t_test = rng_test.uniform(lo, hi, size=config.n_test)
    x_test = generate_features(kind, config.d, t_test, coeffs, rng_test)

    return LabeledTrial(
        controls=SurvivalDataset(x0, f, delta, np.zeros(c, dtype=np.int8)),
        treatments=SurvivalDataset(x1, h, gamma, np.ones(s, dtype=np.int8)),
        validation_controls=SurvivalDataset(xv, fv, dv, np.zeros(v, dtype=np.int8)),
        test_x=x_test,
        test_cate=true_cate(t_test),
        test_latent=t_test,
        config=config,
        control_latent=t0,
        treatment_latent=t1,
    )


# --- CSV exchange --------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(dataset: SurvivalDataset, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(dataset.d)] + ["time", "event", "group"])
        for x, t, e, g in zip(dataset.x, dataset.time, dataset.event, dataset.group):
            w.writerow([_fmt(v) for v in x] + [_fmt(t), int(e), int(g)])


def read_dataset_csv(path) -> SurvivalDataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x"))
    expected = [f"x{j + 1}" for j in range(d)] + ["time", "event", "group"]
    if header != expected:
        raise ValueError(f"unexpected dataset header {header}")
    arr = np.array([[float(v) for v in r] for r in body], dtype=float)
    return SurvivalDataset(arr[:, :d], arr[:, d], arr[:, d + 1] == 1, arr[:, d + 2].astype(np.int8))


def write_test_points_csv(trial: LabeledTrial, path) -> None:
    d = trial.test_x.shape[1]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(d)] + ["true_cate", "latent_t"])
        for x, tau, t in zip(trial.test_x, trial.test_cate, trial.test_latent):
            w.writerow([_fmt(v) for v in x] + [_fmt(tau), _fmt(t)])


def read_test_points_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[-2:] != ["true_cate", "latent_t"]:
        raise ValueError(f"unexpected test-point header {header}")
    arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return arr[:, :-2], arr[:, -2], arr[:, -1]
