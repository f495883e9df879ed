"""Product-limit survival estimation and the quantities built on it.

Everything here is a pure function of immutable inputs.  Survival functions
are right-continuous step functions equal to 1 on ``[0, t_1)``; the last step
time is the integration horizon (no extrapolation past the largest observed
time).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from benk.errors import NoAdmissiblePairs

# Below this the Beran denominator is treated as exhausted and S stops moving.
DENOMINATOR_FLOOR = 1e-12


class Group(IntEnum):
    control = 0
    treatment = 1


@dataclass(frozen=True)
class SurvivalRecord:
    features: np.ndarray
    time: float
    event: bool
    group: Group = Group.control


@dataclass(frozen=True, eq=False)
class SurvivalDataset:
    """Columnar set of right-censored observations.

    ``x`` has shape ``(n, d)``; ``time`` and ``event`` have shape ``(n,)``.
    ``group`` is 0 for controls and 1 for treatments.
    """

    x: np.ndarray
    time: np.ndarray
    event: np.ndarray
    group: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event, dtype=bool).reshape(-1)
        if x.shape[0] == 0:
            raise ValueError("dataset must be nonempty")
        if x.shape[1] < 1:
            raise ValueError("feature dimension must be at least 1")
        if time.shape[0] != x.shape[0] or event.shape[0] != x.shape[0]:
            raise ValueError("x, time and event must have the same length")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if not np.all(time > 0):
            raise ValueError("times must be strictly positive")
        group = self.group
        if group is None:
            group = np.zeros(x.shape[0], dtype=np.int8)
        else:
            group = np.asarray(group, dtype=np.int8).reshape(-1)
            if group.shape[0] != x.shape[0]:
                raise ValueError("group must align with records")
        for arr in (x, time, event, group):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "group", group)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> SurvivalRecord:
        return SurvivalRecord(self.x[i], float(self.time[i]), bool(self.event[i]), Group(int(self.group[i])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, indices) -> "SurvivalDataset":
        indices = np.asarray(indices)
        return SurvivalDataset(self.x[indices], self.time[indices], self.event[indices], self.group[indices])

    def with_group(self, group: int) -> "SurvivalDataset":
        return SurvivalDataset(self.x, self.time, self.event, np.full(len(self), group, dtype=np.int8))

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord]) -> "SurvivalDataset":
        records = list(records)
        if not records:
            raise ValueError("dataset must be nonempty")
        dims = {np.size(r.features) for r in records}
        if len(dims) != 1:
            raise ValueError("all records must share the feature dimension")
        return cls(
            np.array([np.asarray(r.features, dtype=float).reshape(-1) for r in records]),
            np.array([r.time for r in records], dtype=float),
            np.array([r.event for r in records], dtype=bool),
            np.array([int(r.group) for r in records], dtype=np.int8),
        )

    @staticmethod
    def concat(*parts: "SurvivalDataset") -> "SurvivalDataset":
        return SurvivalDataset(
            np.vstack([p.x for p in parts]),
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.event for p in parts]),
            np.concatenate([p.group for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class StepSurvivalFunction:
    """S(t) = 1 on [0, times[0]), values[j] on [times[j], times[j+1])."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if times.shape != values.shape:
            raise ValueError("times and values must have the same length")
        if times.size == 0:
            raise ValueError("a step function needs at least one step time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if times[0] <= 0:
            raise ValueError("times must be positive")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("values must lie in [0, 1]")
        if np.any(np.diff(values) > 0):
            raise ValueError("values must be nonincreasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate(([1.0], self.values))
        return padded[idx]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def sort_risk_order(dataset_or_time, event=None) -> np.ndarray:
    """Ascending time, events before censorings at ties, then original index."""
    if isinstance(dataset_or_time, SurvivalDataset):
        time, event = dataset_or_time.time, dataset_or_time.event
    else:
        time = np.asarray(dataset_or_time, dtype=float)
        event = np.asarray(event, dtype=bool)
    index = np.arange(time.shape[-1])
    return np.lexsort((index, ~event, time))


def _collapse_ties(sorted_time: np.ndarray, running: np.ndarray) -> StepSurvivalFunction:
    # keep the value reached after the last record at each distinct time
    last = np.r_[sorted_time[1:] != sorted_time[:-1], True]
    return StepSurvivalFunction(sorted_time[last], running[last])


def kaplan_meier(dataset: SurvivalDataset) -> StepSurvivalFunction:
    """Marginal product-limit estimate with steps at every distinct observed time."""
    times, inverse = np.unique(dataset.time, return_inverse=True)
    deaths = np.bincount(inverse, weights=dataset.event.astype(float), minlength=times.size)
    counts = np.bincount(inverse, minlength=times.size)
    at_risk = counts[::-1].cumsum()[::-1]
    values = np.cumprod(1.0 - deaths / at_risk)
    return StepSurvivalFunction(times, np.clip(values, 0.0, 1.0))


def validate_weights(weights, n: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.shape[0] != n:
        raise ValueError(f"expected {n} weights, got {weights.shape[0]}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and nonnegative")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must sum to 1")
    return weights


def beran_sf(refs: SurvivalDataset, weights) -> StepSurvivalFunction:
    """Kernel-weighted product-limit estimator.

    Records are processed in risk order; only uncensored records contribute a
    factor ``1 - W_i / (1 - sum_{j<i} W_j)`` but every record's weight enters
    the denominators.  The denominator is evaluated as the remaining weight
    mass ``sum_{j>=i} W_j``, which is the same quantity for normalized weights
    and does not cancel catastrophically near the end of the ordering.
    """
    w = validate_weights(weights, len(refs))
    order = sort_risk_order(refs)
    w_s = w[order]
    t_s = refs.time[order]
    e_s = refs.event[order]
    remaining = np.cumsum(w_s[::-1])[::-1]
    active = e_s & (remaining >= DENOMINATOR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(active, 1.0 - w_s / remaining, 1.0)
    factor = np.clip(factor, 0.0, 1.0)
    return _collapse_ties(t_s, np.cumprod(factor))


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def integrate_on_grid(sf: StepSurvivalFunction, grid: Sequence[float]) -> float:
    """Sum over grid intervals of (g_j - g_{j-1}) times S on [g_{j-1}, g_j), g_0 = 0."""
    grid = np.asarray(grid, dtype=float)
    left = np.concatenate(([0.0], grid[:-1]))
    return float(np.sum((grid - left) * sf(left)))


def expected_lifetime(sf: StepSurvivalFunction) -> float:
    left_values = np.concatenate(([1.0], sf.values[:-1]))
    widths = np.diff(np.concatenate(([0.0], sf.times)))
    return float(np.sum(widths * left_values))


def cate_from_sfs(sf_control: StepSurvivalFunction, sf_treatment: StepSurvivalFunction) -> float:
    """Difference in expected lifetimes, treatment minus control."""
    return expected_lifetime(sf_treatment) - expected_lifetime(sf_control)


def concordance_index(predicted, dataset: SurvivalDataset, *, risk: bool = False) -> float:
    """Harrell's C-index.

    By default ``predicted`` is a lifetime (larger means later failure); pass
    ``risk=True`` for risk scores.  A pair is admissible when the earlier time
    is an observed event and the times differ.  Tied predictions count 1/2.
    """
    pred = np.asarray(predicted, dtype=float).reshape(-1)
    if pred.shape[0] != len(dataset):
        raise ValueError("predictions must align with the dataset")
    if risk:
        pred = -pred
    time, event = dataset.time, dataset.event
    earlier = (time[:, None] < time[None, :]) & event[:, None]
    n_pairs = np.count_nonzero(earlier)
    if n_pairs == 0:
        raise NoAdmissiblePairs("no admissible pairs")
    concordant = np.count_nonzero(earlier & (pred[:, None] < pred[None, :]))
    tied = np.count_nonzero(earlier & (pred[:, None] == pred[None, :]))
    return (concordant + 0.5 * tied) / n_pairs


def batch_beran(weights: np.ndarray, refs: SurvivalDataset) -> tuple[np.ndarray, np.ndarray]:
    """Beran estimates for many weight rows over one reference set.

    Returns the distinct reference times and an ``(B, k)`` array of survival
    values at those times; each row equals ``beran_sf(refs, weights[b])``.
    """
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    order = sort_risk_order(refs)
    w_s = weights[:, order]
    t_s = refs.time[order]
    e_s = refs.event[order]
    remaining = np.cumsum(w_s[:, ::-1], axis=1)[:, ::-1]
    active = e_s[None, :] & (remaining >= DENOMINATOR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(active, 1.0 - w_s / remaining, 1.0)
    running = np.cumprod(np.clip(factor, 0.0, 1.0), axis=1)
    last = np.r_[t_s[1:] != t_s[:-1], True]
    return t_s[last], running[:, last]


def batch_integrate(times: np.ndarray, values: np.ndarray, grid=None) -> np.ndarray:
    """Row-wise :func:`integrate_on_grid`; ``grid=None`` integrates over ``times`` itself."""
    values = np.atleast_2d(values)
    grid = times if grid is None else np.asarray(grid, dtype=float)
    left = np.concatenate(([0.0], grid[:-1]))
    idx = np.searchsorted(times, left, side="right")
    padded = np.concatenate([np.ones((values.shape[0], 1)), values], axis=1)
    return padded[:, idx] @ (grid - left)
