"""Dense networks with hand-written reverse-mode gradients and an Adam optimizer.

All arithmetic is float64 numpy. A network is described by a :class:`NetSpec`
and its weights live in a :class:`ParamSet`; both are treated as values, so
updates return new objects instead of mutating in place.

Weight layout: layer ``i`` owns ``W{i}`` with shape ``(fan_in, fan_out)`` and
``b{i}`` with shape ``(fan_out,)``; the forward map is ``act(x @ W + b)``,
plus ``x`` when the layer is residual.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import LoadError, ShapeError, TrainingError, UsageError, ConfigError

ACTIVATIONS = ("swish", "relu", "tanh", "identity")
PARAMS_FORMAT = "auvdiff-params/1"


def _sigmoid(x):
    # tanh form never overflows and is a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "swish":
        return z * _sigmoid(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the activation evaluated at pre-activation ``z``."""
    if name == "swish":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class NetSpec:
    """Architecture of a dense network.

    ``layer_widths`` lists every width from input to output, so ``[2, 3, 1]``
    is one hidden layer of width 3. ``activations`` and ``residual`` have one
    entry per layer (``len(layer_widths) - 1``).
    """

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    residual: tuple[bool, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activations", tuple(self.activations))
        n = len(widths) - 1
        if not self.residual:
            object.__setattr__(self, "residual", (False,) * max(n, 0))
        else:
            object.__setattr__(self, "residual", tuple(bool(r) for r in self.residual))
        self.validate()

    def validate(self) -> None:
        widths = self.layer_widths
        if len(widths) < 2:
            raise ConfigError("a network needs an input and an output width")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"layer widths must be positive, got {list(widths)}")
        n = len(widths) - 1
        if len(self.activations) != n or len(self.residual) != n:
            raise ConfigError("need one activation and one residual flag per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        for i, r in enumerate(self.residual):
            if r and widths[i] != widths[i + 1]:
                raise ConfigError(f"residual layer {i} must preserve width")

    @classmethod
    def mlp(
        cls,
        widths: Iterable[int],
        hidden: str = "relu",
        output: str = "identity",
        residual: bool = False,
    ) -> "NetSpec":
        """Hidden layers share one activation; residual applies to width-preserving hidden layers."""
        widths = tuple(int(w) for w in widths)
        n = len(widths) - 1
        acts = tuple([hidden] * (n - 1) + [output])
        res = tuple(
            residual and i < n - 1 and i > 0 and widths[i] == widths[i + 1] for i in range(n)
        )
        return cls(widths, acts, res)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"W{i}"] = (self.layer_widths[i], self.layer_widths[i + 1])
            shapes[f"b{i}"] = (self.layer_widths[i + 1],)
        return shapes


@dataclass
class ParamSet:
    """Ordered named tensors plus the seed they were initialised from."""

    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.tensors.items()}, self.seed)

    def map(self, fn: Callable[..., np.ndarray], *others: "ParamSet") -> "ParamSet":
        for o in others:
            _check_same_layout(self, o)
        return ParamSet(
            {k: fn(v, *(o.tensors[k] for o in others)) for k, v in self.tensors.items()},
            self.seed,
        )

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equals(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def _check_same_layout(a: ParamSet, b: ParamSet) -> None:
    if a.names() != b.names():
        raise ShapeError(f"parameter names differ: {a.names()} vs {b.names()}")
    for k, v in a.tensors.items():
        if v.shape != b.tensors[k].shape:
            raise ShapeError(f"shape mismatch for {k}: {v.shape} vs {b.tensors[k].shape}")


def net_init(spec: NetSpec, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = 1.0 / math.sqrt(fan_in)
        tensors[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"b{i}"] = np.zeros(fan_out)
    return ParamSet(tensors, int(seed))


@dataclass
class ForwardCache:
    spec: NetSpec
    params: ParamSet
    inputs: list = field(default_factory=list)  # input to each layer
    preacts: list = field(default_factory=list)
    squeeze: bool = False


def _as_batch(x, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"expected input width {width}, got shape {x.shape}")
    return x, squeeze


def net_forward(params: ParamSet, spec: NetSpec, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a vector or a (batch, in_dim) matrix."""
    h, squeeze = _as_batch(x, spec.in_dim)
    cache = ForwardCache(spec, params, squeeze=squeeze)
    for i in range(spec.n_layers):
        W, b = params.tensors[f"W{i}"], params.tensors[f"b{i}"]
        if W.shape != (spec.layer_widths[i], spec.layer_widths[i + 1]):
            raise ShapeError(f"W{i} has shape {W.shape}, spec expects "
                             f"{(spec.layer_widths[i], spec.layer_widths[i + 1])}")
        z = h @ W + b
        cache.inputs.append(h)
        cache.preacts.append(z)
        out = activate(spec.activations[i], z)
        h = h + out if spec.residual[i] else out
    return (h[0] if squeeze else h), cache


def net_eval(params: ParamSet, spec: NetSpec, x) -> np.ndarray:
    """Inference-only forward pass: same arithmetic as :func:`net_forward`, no cache."""
    h, squeeze = _as_batch(x, spec.in_dim)
    t = params.tensors
    for i in range(spec.n_layers):
        out = activate(spec.activations[i], h @ t[f"W{i}"] + t[f"b{i}"])
        h = h + out if spec.residual[i] else out
    return h[0] if squeeze else h


def net_backward(cache: ForwardCache, grad_out, params: ParamSet | None = None):
    """Reverse pass. Returns ``(grad_params, grad_input)``; gradients are summed over the batch."""
    if not isinstance(cache, ForwardCache):
        raise UsageError("net_backward needs the cache returned by net_forward")
    if params is not None and params is not cache.params:
        raise UsageError("cache was produced with a different ParamSet")
    spec = cache.spec
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeeze and g.ndim == 1:
        g = g[None, :]
    expected = (cache.inputs[0].shape[0], spec.out_dim)
    if g.shape != expected:
        raise UsageError(f"grad_out shape {g.shape} does not match forward output {expected}")
    grads = {}
    for i in reversed(range(spec.n_layers)):
        z = cache.preacts[i]
        gz = g * activate_grad(spec.activations[i], z)
        h_in = cache.inputs[i]
        grads[f"W{i}"] = h_in.T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        g_in = gz @ cache.params.tensors[f"W{i}"].T
        if spec.residual[i]:
            g_in = g_in + g
        g = g_in
    ordered = {k: grads[k] for k in cache.params.names()}
    gx = g[0] if cache.squeeze else g
    return ParamSet(ordered, cache.params.seed), gx


def numeric_gradient(fn: Callable[[ParamSet], float], params: ParamSet, name: str,
                     index: tuple, eps: float) -> float:
    """Central difference of a scalar function of ``params`` along one coordinate."""
    plus, minus = params.copy(), params.copy()
    plus.tensors[name][index] += eps
    minus.tensors[name][index] -= eps
    return (fn(plus) - fn(minus)) / (2.0 * eps)


def check_gradients(fn: Callable[[ParamSet], float], params: ParamSet, grads: ParamSet,
                    eps: float = 1e-5, probes: int | None = None, seed: int = 0) -> float:
    """Max of |analytic - numeric| / max(1, |numeric|) over all (or ``probes`` random) coordinates."""
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"eps must lie in (0, 1e-2], got {eps}")
    coords = [(k, idx) for k, v in params.items() for idx in np.ndindex(v.shape)]
    if probes is not None and probes < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst = 0.0
    for name, idx in coords:
        num = numeric_gradient(fn, params, name, idx, eps)
        ana = float(grads.tensors[name][idx])
        worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
    return worst


def grad_check(spec: NetSpec, params: ParamSet, x, eps: float = 1e-5,
               probes: int | None = None, seed: int = 0) -> float:
    """Compare backward against central differences for ``L = sum(w * net(x))``.

    ``w`` is a fixed pseudo-random projection so every output unit is probed
    with a different weight.
    """
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"eps must lie in (0, 1e-2], got {eps}")
    out, cache = net_forward(params, spec, x)
    proj = np.random.default_rng(seed + 1).normal(size=np.shape(out))

    def loss(p):
        y, _ = net_forward(p, spec, x)
        return float(np.sum(proj * y))

    grads, _ = net_backward(cache, proj)
    return check_gradients(loss, params, grads, eps, probes, seed)


@dataclass
class OptimState:
    m: ParamSet
    v: ParamSet
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: ParamSet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimState:
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return OptimState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def opt_step(params: ParamSet, grads: ParamSet, state: OptimState) -> tuple[ParamSet, OptimState]:
    """One Adam step (descending ``grads``). Refuses non-finite gradients."""
    _check_same_layout(params, grads)
    _check_same_layout(params, state.m)
    keys = list(params.tensors)
    flat = lambda ps: np.concatenate([ps.tensors[k].ravel() for k in keys])
    g = flat(grads)
    if not np.isfinite(g).all():
        raise TrainingError("non-finite gradient; optimizer step refused")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    lr, eps = state.lr, state.eps
    # one pass over a flat vector; elementwise arithmetic is unchanged
    m = b1 * flat(state.m) + (1.0 - b1) * g
    v = b2 * flat(state.v) + (1.0 - b2) * g * g
    p = flat(params) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return (_unflat(p, params), OptimState(_unflat(m, state.m), _unflat(v, state.v), step, lr,
                                           b1, b2, eps))


def _unflat(vec: np.ndarray, like: ParamSet) -> ParamSet:
    out, i = {}, 0
    for k, t in like.tensors.items():
        out[k] = vec[i:i + t.size].reshape(t.shape)
        i += t.size
    return ParamSet(out, like.seed)


def params_to_json(params: ParamSet) -> dict:
    return {
        "seed": params.seed,
        "tensors": [
            {"name": k, "shape": list(v.shape), "values": v.ravel().tolist()}
            for k, v in params.items()
        ],
    }


def params_from_json(obj: dict) -> ParamSet:
    try:
        tensors = {}
        for t in obj["tensors"]:
            shape = tuple(int(s) for s in t["shape"])
            values = np.asarray(t["values"], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise LoadError(f"tensor {t['name']} has {values.size} values for shape {shape}")
            tensors[t["name"]] = values.reshape(shape)
        return ParamSet(tensors, int(obj.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed parameter record: {exc}") from exc


def save_checkpoint(path, nets: dict[str, ParamSet], header: dict | None = None) -> None:
    """Write named ParamSets and a JSON header to one UTF-8 JSON file.

    Floats are written with ``repr`` precision, so a load reproduces every
    weight bit for bit.
    """
    doc = {
        "format": PARAMS_FORMAT,
        "header": header or {},
        "nets": {name: params_to_json(p) for name, p in nets.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=False) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, ParamSet], dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != PARAMS_FORMAT:
        raise LoadError(f"{path}: unsupported format {doc.get('format')!r}")
    nets = {name: params_from_json(obj) for name, obj in doc["nets"].items()}
    return nets, doc.get("header", {})


def soft_update(target: ParamSet, live: ParamSet, tau: float) -> ParamSet:
    """Polyak averaging ``target <- tau * live + (1 - tau) * target``."""
    if not (0.0 < tau <= 1.0):
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    if tau == 1.0:
        _check_same_layout(target, live)
        return live.copy()
    return target.map(lambda t, l: tau * l + (1.0 - tau) * t, live)
