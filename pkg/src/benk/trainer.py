"""Training the neural kernel on controls and predicting treatment effects with it."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from benk.errors import AllAnchorsCensored, InsufficientControls, NonFiniteLoss
from benk.kernel import (
    GradientAccumulator,
    KernelNetConfig,
    KernelNetParams,
    batch_backward,
    batch_forward,
    dumps_params,
    loads_params,
    pair_scores,
    risk_orders,
    softmax_weights,
)
from benk.survival import StepSurvivalFunction, SurvivalDataset, beran_sf, cate_from_sfs

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of kernel training.

    ``n`` is the reference subset size; ``None`` means ``round(0.2 * c)``.
    ``standardize`` z-scores features with control statistics before they
    reach the network.
    """

    N: int = 10
    n: int | None = None
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden_layers: tuple[int, ...] = (100, 100)
    activation: str = "relu"
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.n is not None and self.n < 1:
            raise ValueError("n must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    def subset_size(self, c: int) -> int:
        return self.n if self.n is not None else max(1, int(round(0.2 * c)))

    def kernel_config(self, d: int) -> KernelNetConfig:
        return KernelNetConfig.for_features(
            d, hidden_layers=self.hidden_layers, activation=self.activation, init_seed=self.seed
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden_layers"] = list(self.hidden_layers)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "hidden_layers" in data:
            data["hidden_layers"] = tuple(data["hidden_layers"])
        return cls(**data)


@dataclass(frozen=True)
class TrainingExample:
    anchor_index: int
    subset_indices: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class ExampleSet:
    """``c * N`` training examples stored as index arrays."""

    anchors: np.ndarray   # (M,)
    subsets: np.ndarray   # (M, n)

    def __len__(self):
        return self.anchors.shape[0]

    def __getitem__(self, i) -> TrainingExample:
        return TrainingExample(int(self.anchors[i]), tuple(int(k) for k in self.subsets[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def select(self, mask) -> "ExampleSet":
        return ExampleSet(self.anchors[mask], self.subsets[mask])


def build_training_examples(controls: SurvivalDataset, config: TrainConfig, rng: np.random.Generator) -> ExampleSet:
    """For every control and each of ``N`` replications, a size-``n`` subset of the other controls."""
    c = len(controls)
    n = config.subset_size(c)
    if c <= n:
        raise InsufficientControls(f"need more than n={n} controls, got {c}")
    anchors = np.repeat(np.arange(c), config.N)
    keys = rng.random((anchors.size, c - 1))
    picks = np.argpartition(keys, n - 1, axis=1)[:, :n] if n < c - 1 else np.tile(np.arange(c - 1), (anchors.size, 1))
    picks = np.sort(picks, axis=1)
    # map positions among the c-1 non-anchor records back to control indices
    subsets = picks + (picks >= anchors[:, None])
    return ExampleSet(anchors, subsets)


def _batch_arrays(controls: SurvivalDataset, examples: ExampleSet, idx):
    subsets = examples.subsets[idx]
    anchors = examples.anchors[idx]
    return (
        controls.x[anchors],
        controls.x[subsets],
        controls.time[subsets],
        controls.event[subsets],
        controls.time[anchors],
    )


def _uncensored(examples: ExampleSet, controls: SurvivalDataset) -> ExampleSet:
    kept = examples.select(controls.event[examples.anchors])
    if len(kept) == 0:
        raise AllAnchorsCensored("no uncensored anchor among the training examples")
    return kept


def benk_loss(params: KernelNetParams, examples: ExampleSet, controls: SurvivalDataset, activation: str = "relu") -> float:
    """Mean squared error between each uncensored anchor's expected lifetime and its time."""
    kept = _uncensored(examples, controls)
    total = 0.0
    for start in range(0, len(kept), 1024):
        idx = np.arange(start, min(start + 1024, len(kept)))
        xa, xr, tr, er, target = _batch_arrays(controls, kept, idx)
        cache = batch_forward(params, activation, xa, xr, tr, er)
        total += float(np.sum((cache.expected - target) ** 2))
    return total / len(kept)


def benk_loss_and_grad(params: KernelNetParams, examples: ExampleSet, controls: SurvivalDataset, activation: str = "relu"):
    kept = _uncensored(examples, controls)
    grad = GradientAccumulator.zeros_like(params)
    total = 0.0
    m = len(kept)
    for start in range(0, m, 1024):
        idx = np.arange(start, min(start + 1024, m))
        xa, xr, tr, er, target = _batch_arrays(controls, kept, idx)
        cache = batch_forward(params, activation, xa, xr, tr, er)
        resid = cache.expected - target
        total += float(np.sum(resid ** 2))
        grad.add(batch_backward(cache, 2.0 * resid / m))
    return total / m, grad


class Adam:
    def __init__(self, params: KernelNetParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: KernelNetParams, grad: KernelNetParams):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(params.arrays(), grad.arrays(), self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: KernelNetParams, lr=1e-3):
        self.lr = lr

    def step(self, params: KernelNetParams, grad: KernelNetParams):
        for a, g in zip(params.arrays(), grad.arrays()):
            a -= self.lr * g


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, enabled: bool = True) -> "Scaler":
        if not enabled:
            return cls(np.zeros(x.shape[1]), np.ones(x.shape[1]))
        scale = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(scale > 0, scale, 1.0))

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def dataset(self, ds: SurvivalDataset) -> SurvivalDataset:
        return SurvivalDataset(self(ds.x), ds.time, ds.event, ds.group)


@dataclass(eq=False)
class TrainedBenk:
    params: KernelNetParams
    config: TrainConfig
    scaler: Scaler
    d: int
    loss_trace: list[float] = field(default_factory=list)
    validation_trace: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def activation(self) -> str:
        return self.config.activation

    def save(self, path) -> None:
        header = {
            "d": self.d,
            "train_config": self.config.to_dict(),
            "seed": self.config.seed,
            "scaler_mean": [float(v).hex() for v in self.scaler.mean],
            "scaler_scale": [float(v).hex() for v in self.scaler.scale],
            "loss_trace": self.loss_trace,
            "validation_trace": self.validation_trace,
            "best_epoch": self.best_epoch,
        }
        Path(path).write_text(dumps_params(self.params, header))

    @classmethod
    def load(cls, path) -> "TrainedBenk":
        params, head = loads_params(Path(path).read_text())
        scaler = Scaler(
            np.array([float.fromhex(v) for v in head["scaler_mean"]]),
            np.array([float.fromhex(v) for v in head["scaler_scale"]]),
        )
        return cls(
            params, TrainConfig.from_dict(head["train_config"]), scaler, head["d"],
            head.get("loss_trace", []), head.get("validation_trace", []), head.get("best_epoch"),
        )


def reference_expected_lifetimes(params, activation, z: np.ndarray, refs: SurvivalDataset, chunk: int = 64) -> np.ndarray:
    """Expected lifetime of the learned-kernel Beran SF at each row of ``z`` over one reference set."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = len(refs)
    order = risk_orders(refs.time, refs.event)
    out = np.empty(z.shape[0])
    for start in range(0, z.shape[0], chunk):
        zb = z[start:start + chunk]
        b = zb.shape[0]
        cache = batch_forward(
            params, activation, zb,
            np.broadcast_to(refs.x, (b, n, refs.d)),
            np.broadcast_to(refs.time, (b, n)),
            np.broadcast_to(refs.event, (b, n)),
            np.broadcast_to(order, (b, n)),
        )
        out[start:start + b] = cache.expected
    return out


def validation_loss(params, activation, refs: SurvivalDataset, validation: SurvivalDataset) -> float:
    mask = validation.event
    if not mask.any():
        return float("nan")
    pred = reference_expected_lifetimes(params, activation, validation.x[mask], refs)
    return float(np.mean((pred - validation.time[mask]) ** 2))


def train(controls: SurvivalDataset, config: TrainConfig, validation: SurvivalDataset | None = None) -> TrainedBenk:
    """Minibatch training of the kernel on ``c * N`` control examples.

    With ``validation`` controls, the parameters with the lowest validation
    loss (expected lifetime against observed time, uncensored records,
    all training controls as references) are returned.
    """
    scaler = Scaler.fit(controls.x, config.standardize)
    scaled = scaler.dataset(controls)
    scaled_val = scaler.dataset(validation) if validation is not None else None
    kernel_config = config.kernel_config(controls.d)
    params = KernelNetParams.initialize(kernel_config)
    model = TrainedBenk(params, config, scaler, controls.d)
    if config.epochs == 0:
        return model

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    examples = _uncensored(build_training_examples(scaled, config, rng), scaled)
    orders = risk_orders(scaled.time[examples.subsets], scaled.event[examples.subsets])
    optimizer = Adam(params, config.learning_rate) if config.optimizer == "adam" else SGD(params, config.learning_rate)

    best = (np.inf, None, None)
    m = len(examples)
    for epoch in range(config.epochs):
        perm = rng.permutation(m)
        epoch_loss = 0.0
        for start in range(0, m, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xa, xr, tr, er, target = _batch_arrays(scaled, examples, idx)
            cache = batch_forward(params, config.activation, xa, xr, tr, er, orders[idx])
            resid = cache.expected - target
            batch_loss = float(np.mean(resid ** 2))
            if not np.isfinite(batch_loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch starting {start}")
            epoch_loss += batch_loss * idx.size
            optimizer.step(params, batch_backward(cache, 2.0 * resid / idx.size))
        model.loss_trace.append(epoch_loss / m)
        if scaled_val is not None:
            vl = validation_loss(params, config.activation, scaled, scaled_val)
            model.validation_trace.append(vl)
            if vl < best[0]:
                best = (vl, epoch, params.copy())
        log.debug("epoch %d loss %.6g", epoch, model.loss_trace[-1])

    if best[2] is not None:
        model.params = best[2]
        model.best_epoch = best[1]
    return model


def _sf_at(model: TrainedBenk, z, refs: SurvivalDataset) -> StepSurvivalFunction:
    zs = model.scaler(np.asarray(z, dtype=float).reshape(1, -1))
    rs = model.scaler(refs.x)
    scores = pair_scores(model.params, zs, rs[None, :, :], model.activation)[0]
    return beran_sf(refs, softmax_weights(scores))


def predict_sfs(model: TrainedBenk, controls: SurvivalDataset, treatments: SurvivalDataset, z):
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != model.d or controls.d != model.d or treatments.d != model.d:
        raise ValueError("dimension mismatch between z, datasets and model")
    return _sf_at(model, z, controls), _sf_at(model, z, treatments)


def predict_cate(model: TrainedBenk, controls: SurvivalDataset, treatments: SurvivalDataset, z) -> float:
    """Treatment-minus-control expected lifetime at ``z`` using the trained kernel on both groups."""
    return cate_from_sfs(*predict_sfs(model, controls, treatments, z))


def predict_cate_batch(model: TrainedBenk, controls: SurvivalDataset, treatments: SurvivalDataset, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != model.d or controls.d != model.d or treatments.d != model.d:
        raise ValueError("dimension mismatch between z, datasets and model")
    zs = model.scaler(z)
    e0 = reference_expected_lifetimes(model.params, model.activation, zs, model.scaler.dataset(controls))
    e1 = reference_expected_lifetimes(model.params, model.activation, zs, model.scaler.dataset(treatments))
    return e1 - e0
