"""Trainable kernel: a shared feed-forward scorer over (anchor, reference) pairs.

The network maps the concatenation ``[anchor, reference]`` to a raw score;
the kernel value is ``exp(score)`` so the Nadaraya-Watson weights are a
softmax over the references.  The weights feed the Beran estimator and the
expected lifetime, and :func:`batch_backward` returns the exact gradient of
that expected lifetime with respect to every network parameter.

The product over Beran factors is differentiated in log space.  With the
remaining mass ``D_i = sum_{j>=i} W_j`` (risk order), each factor is
``D_{i+1} / D_i``, so ``log S`` is a telescoping sum of ``log D`` terms and
the backward pass only needs prefix/suffix sums.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from benk.errors import StaleCache
from benk.survival import (
    DENOMINATOR_FLOOR,
    StepSurvivalFunction,
    SurvivalDataset,
    beran_sf,
)

LOG_FLOOR = 1e-12

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class KernelNetConfig:
    input_dim: int
    hidden_layers: tuple[int, ...] = (100, 100)
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 2 or self.input_dim % 2:
            raise ValueError("input_dim must be 2*d with d >= 1")
        if not self.hidden_layers:
            raise ValueError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def for_features(cls, d: int, **kwargs) -> "KernelNetConfig":
        return cls(input_dim=2 * d, **kwargs)

    @property
    def d(self) -> int:
        return self.input_dim // 2

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, 1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "activation": self.activation,
            "init_seed": self.init_seed,
        }


@dataclass(eq=False)
class KernelNetParams:
    """Per-layer weights ``(fan_in, fan_out)`` and biases ``(fan_out,)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def initialize(cls, config: KernelNetConfig) -> "KernelNetParams":
        rng = np.random.default_rng(config.init_seed)
        sizes = config.layer_sizes
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros_like(cls, other: "KernelNetParams"):
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return type(self)([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vector: np.ndarray):
        vector = np.asarray(vector, dtype=float)
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vector[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return type(self)(arrays[0::2], arrays[1::2])

    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class GradientAccumulator(KernelNetParams):
    """Parameter-shaped gradient buffer; ``add`` accumulates in place."""

    def add(self, other: KernelNetParams, scale: float = 1.0) -> "GradientAccumulator":
        for mine, theirs in zip(self.arrays(), other.arrays()):
            mine += scale * theirs
        return self


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - a * a


def _pair_inputs(anchors: np.ndarray, refs_x: np.ndarray) -> np.ndarray:
    b, n, d = refs_x.shape
    left = np.broadcast_to(anchors[:, None, :], (b, n, d))
    return np.concatenate([left, refs_x], axis=-1).reshape(b * n, 2 * d)


def _mlp_forward(params: KernelNetParams, inputs: np.ndarray, activation: str):
    pre, post = [], [inputs]
    h = inputs
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if k == last:
            return z[:, 0], pre, post
        h = _activate(z, activation)
        pre.append(z)
        post.append(h)


def _mlp_backward(params: KernelNetParams, pre, post, grad_out: np.ndarray, activation: str):
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    delta = grad_out[:, None]
    for k in range(len(params.weights) - 1, -1, -1):
        grads_w[k] = post[k].T @ delta
        grads_b[k] = delta.sum(axis=0)
        if k == 0:
            break
        delta = (delta @ params.weights[k].T) * _activate_grad(pre[k - 1], post[k], activation)
    return GradientAccumulator(grads_w, grads_b)


def pair_scores(params: KernelNetParams, anchors: np.ndarray, refs_x: np.ndarray, activation: str) -> np.ndarray:
    """Raw scores for a batch: anchors ``(B, d)``, refs ``(B, n, d)`` -> ``(B, n)``."""
    b, n, _ = refs_x.shape
    scores, _, _ = _mlp_forward(params, _pair_inputs(anchors, refs_x), activation)
    return scores.reshape(b, n)


def kernel_scores(params: KernelNetParams, anchor, refs, activation: str = "relu") -> np.ndarray:
    anchor = np.asarray(anchor, dtype=float).reshape(-1)
    refs = np.asarray(refs, dtype=float)
    if refs.ndim == 1:
        refs = refs[None, :]
    if refs.shape[0] == 0:
        raise ValueError("refs must be nonempty")
    if refs.shape[1] != anchor.shape[0] or 2 * anchor.shape[0] != params.weights[0].shape[0]:
        raise ValueError("dimension mismatch between anchor, refs and network input")
    return pair_scores(params, anchor[None, :], refs[None, :, :], activation)[0]


def softmax_weights(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    k = np.exp(shifted)
    return k / k.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class BatchCache:
    params: KernelNetParams
    activation: str
    pre: list
    post: list
    weights: np.ndarray        # (B, n) softmax weights, original order
    order: np.ndarray          # (B, n) risk order per row
    remaining: np.ndarray      # (B, n) remaining mass D_i, risk order
    live: np.ndarray           # (B, n) factor contributes to the gradient
    survival: np.ndarray       # (B, n) S after each record, risk order
    widths: np.ndarray         # (B, n) t_i - t_{i-1}, risk order
    expected: np.ndarray       # (B,)
    fingerprint: str | None = field(default=None)


def risk_orders(times: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Row-wise risk ordering for ``(B, n)`` arrays."""
    index = np.broadcast_to(np.arange(times.shape[-1]), times.shape)
    return np.lexsort((index, ~events, times), axis=-1)


def batch_forward(
    params: KernelNetParams,
    activation: str,
    anchors: np.ndarray,
    refs_x: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    order: np.ndarray | None = None,
) -> BatchCache:
    """Expected lifetimes of the Beran SFs for a batch of (anchor, reference set) pairs."""
    b, n, _ = refs_x.shape
    scores, pre, post = _mlp_forward(params, _pair_inputs(anchors, refs_x), activation)
    w = softmax_weights(scores.reshape(b, n))
    if order is None:
        order = risk_orders(times, events)
    w_s = np.take_along_axis(w, order, axis=1)
    t_s = np.take_along_axis(times, order, axis=1)
    e_s = np.take_along_axis(events, order, axis=1)
    remaining = np.cumsum(w_s[:, ::-1], axis=1)[:, ::-1]
    active = e_s & (remaining >= DENOMINATOR_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(active, 1.0 - w_s / remaining, 1.0)
    ratio = np.clip(ratio, 0.0, 1.0)
    live = active & (ratio >= LOG_FLOOR)
    log_factor = np.where(active, np.log(np.maximum(ratio, LOG_FLOOR)), 0.0)
    survival = np.exp(np.cumsum(log_factor, axis=1))
    widths = np.diff(t_s, axis=1, prepend=0.0)
    before = np.concatenate([np.ones((b, 1)), survival[:, :-1]], axis=1)
    expected = np.sum(widths * before, axis=1)
    return BatchCache(params, activation, pre, post, w, order, remaining, live, survival, widths, expected)


def batch_backward(cache: BatchCache, grad_expected) -> GradientAccumulator:
    """Gradient of ``sum_b grad_expected[b] * E_b`` with respect to the parameters."""
    g = np.broadcast_to(np.asarray(grad_expected, dtype=float), cache.expected.shape)
    b, n = cache.survival.shape
    # dE/dlogS_k = width_{k+1} * S_k
    d_logs = np.zeros((b, n))
    d_logs[:, :-1] = cache.widths[:, 1:] * cache.survival[:, :-1]
    # dE/dlog g_i: every later log S includes log g_i
    d_logg = np.where(cache.live, np.cumsum(d_logs[:, ::-1], axis=1)[:, ::-1], 0.0)
    # log g_i = log D_{i+1} - log D_i
    d_logd = -d_logg
    d_logd[:, 1:] += d_logg[:, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        d_rem = np.where(d_logd != 0.0, d_logd / cache.remaining, 0.0)
    d_w_sorted = np.cumsum(d_rem, axis=1) * g[:, None]
    d_w = np.empty_like(d_w_sorted)
    np.put_along_axis(d_w, cache.order, d_w_sorted, axis=1)
    w = cache.weights
    d_scores = w * (d_w - np.sum(w * d_w, axis=1, keepdims=True))
    return _mlp_backward(cache.params, cache.pre, cache.post, d_scores.reshape(-1), cache.activation)


def forward_sf(params: KernelNetParams, anchor, refs: SurvivalDataset, activation: str = "relu"):
    """Beran SF at ``anchor`` with learned-kernel weights, plus a cache for :func:`backward`."""
    anchor = np.asarray(anchor, dtype=float).reshape(-1)
    if anchor.shape[0] != refs.d or 2 * refs.d != params.weights[0].shape[0]:
        raise ValueError("dimension mismatch between anchor, refs and network input")
    cache = batch_forward(
        params, activation, anchor[None, :], refs.x[None, :, :], refs.time[None, :], refs.event[None, :]
    )
    cache.fingerprint = params.fingerprint()
    sf = beran_sf(refs, cache.weights[0] / cache.weights[0].sum())
    return sf, cache


def backward(cache: BatchCache, loss_grad_wrt_expected_lifetime: float) -> GradientAccumulator:
    if cache.fingerprint is None or cache.fingerprint != cache.params.fingerprint():
        raise StaleCache("parameters changed since the forward pass")
    return batch_backward(cache, np.array([loss_grad_wrt_expected_lifetime], dtype=float))


@dataclass
class GradCheckReport:
    max_relative_error: float
    trials: int
    compared: int
    worst: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.max_relative_error < 1e-4


def _expected_lifetime(params, activation, anchor, refs_x, times, events):
    cache = batch_forward(params, activation, anchor, refs_x, times, events)
    return float(cache.expected[0]), cache


def draw_check_trial(config: KernelNetConfig, rng: np.random.Generator, ref_counts: Sequence[int] = (3, 5, 8)):
    """One random gradient-check problem: fresh parameters, an anchor and ``n`` mixed-censoring references."""
    n = int(rng.choice(ref_counts))
    params = KernelNetParams.initialize(replace(config, init_seed=int(rng.integers(2**32))))
    anchor = rng.normal(size=(1, config.d))
    refs_x = rng.normal(size=(1, n, config.d))
    times = rng.uniform(0.5, 5.0, size=(1, n))
    events = rng.random((1, n)) < 0.7
    return params, anchor, refs_x, times, events


def gradient_check(
    config: KernelNetConfig,
    trial_count: int = 20,
    seed: int = 0,
    ref_counts: Sequence[int] = (3, 5, 8),
    step: float = 1e-5,
    threshold: float = 1e-8,
    backward_fn: Callable[[BatchCache, np.ndarray], KernelNetParams] = batch_backward,
) -> GradCheckReport:
    """Compare analytic gradients of the expected lifetime with central differences.

    Each trial draws fresh parameters, a random anchor and ``n`` references
    with mixed censoring.  Relative error is ``|a - n| / max(|a|, |n|)`` over
    entries with ``|a| + |n| > threshold``.  ``backward_fn`` exists so a
    corrupted backward can be injected as a negative control.
    """
    if trial_count < 1:
        raise ValueError("trial_count must be at least 1")
    rng = np.random.default_rng(seed)
    worst = {"error": 0.0}
    compared = 0
    for trial in range(trial_count):
        params, anchor, refs_x, times, events = draw_check_trial(config, rng, ref_counts)
        n = refs_x.shape[1]

        _, cache = _expected_lifetime(params, config.activation, anchor, refs_x, times, events)
        analytic = backward_fn(cache, np.ones(1)).flat()

        base = params.flat()
        numeric = np.empty_like(base)
        for k in range(base.size):
            plus, minus = base.copy(), base.copy()
            plus[k] += step
            minus[k] -= step
            ep, _ = _expected_lifetime(params.with_flat(plus), config.activation, anchor, refs_x, times, events)
            em, _ = _expected_lifetime(params.with_flat(minus), config.activation, anchor, refs_x, times, events)
            numeric[k] = (ep - em) / (2.0 * step)

        mask = np.abs(analytic) + np.abs(numeric) > threshold
        compared += int(mask.sum())
        if mask.any():
            a, m = analytic[mask], numeric[mask]
            rel = np.abs(a - m) / np.maximum(np.abs(a), np.abs(m))
            k = int(np.argmax(rel))
            if rel[k] > worst["error"]:
                worst = {"error": float(rel[k]), "trial": trial, "n": n, "index": int(np.flatnonzero(mask)[k]),
                         "analytic": float(a[k]), "numeric": float(m[k])}
    return GradCheckReport(worst["error"], trial_count, compared, worst)


# --- serialization -------------------------------------------------------

def dumps_params(params: KernelNetParams, header: dict | None = None) -> str:
    """Text format: a JSON header line with layer shapes, then one value per line.

    Values are written row-major with ``float.hex`` so the round trip is exact.
    """
    import json

    head = dict(header or {})
    head["format"] = "benk-kernel-params"
    head["version"] = 1
    head["layers"] = [list(w.shape) for w in params.weights]
    lines = [json.dumps(head, sort_keys=True)]
    for a in params.arrays():
        lines.extend(float(v).hex() for v in a.ravel(order="C"))
    return "\n".join(lines) + "\n"


def loads_params(text: str) -> tuple[KernelNetParams, dict]:
    import json

    lines = text.splitlines()
    head = json.loads(lines[0])
    if head.get("format") != "benk-kernel-params":
        raise ValueError("not a kernel parameter file")
    values = np.array([float.fromhex(s) for s in lines[1:] if s], dtype=float)
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in head["layers"]:
        weights.append(values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
        pos += fan_in * fan_out
        biases.append(values[pos:pos + fan_out].copy())
        pos += fan_out
    if pos != values.size:
        raise ValueError("parameter count does not match the header")
    return KernelNetParams(weights, biases), head
