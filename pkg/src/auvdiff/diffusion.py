"""Conditional DDPM over (stacked) action vectors.

The denoiser predicts the injected noise from the noisy sample, the encoded
vehicle state and the diffusion step. Candidate actions come from independent
reverse chains, one RNG sub-stream per candidate.

Step indices are 1-based throughout: ``t`` ranges over ``1..T`` and array
position ``t - 1`` holds the value for step ``t``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import NetSpec, ParamSet, net_backward, net_eval, net_forward, net_init
from .errors import ConfigError, ShapeError, UsageError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def beta_start(self) -> float:
        return float(self.beta[0])

    @property
    def beta_end(self) -> float:
        return float(self.beta[-1])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with its cumulative products."""
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}", "T")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}", "beta_start"
        )
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T)
    beta[0], beta[-1] = beta_start, beta_end
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _check_step(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ConfigError(f"diffusion step must lie in [1, {sched.T}]")
    return t.astype(np.int64)


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one step per row of a batched ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _check_step(t, sched)
    ab = sched.alpha_bar[t - 1]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(x_prev, t: int, z, sched: NoiseSchedule) -> np.ndarray:
    """A single forward transition q(x_t | x_{t-1})."""
    t = int(_check_step(t, sched))
    b = sched.beta[t - 1]
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(z)


# ---------------------------------------------------------------------------
# state encoding


def encoded_width(obs_dim: int, act_dim: int, L: int) -> int:
    return obs_dim * (L + 1) + act_dim * L


def encode_state(o_t, hist_o: Sequence, hist_a: Sequence, L: int, act_dim: int) -> np.ndarray:
    """``[o_t, flat(hist_o oldest->newest), flat(hist_a oldest->newest)]``.

    Histories shorter than ``L`` are left-padded with zeros, so the newest
    entry always sits in the last slot.
    """
    o_t = np.asarray(o_t, dtype=np.float64).ravel()
    obs_dim = o_t.size
    if len(hist_o) > L or len(hist_a) > L:
        raise ShapeError(f"history longer than L={L}")
    out = np.zeros(encoded_width(obs_dim, act_dim, L))
    out[:obs_dim] = o_t
    base = obs_dim
    for i, o in enumerate(hist_o):
        o = np.asarray(o, dtype=np.float64).ravel()
        if o.size != obs_dim:
            raise ShapeError(f"history observation has width {o.size}, expected {obs_dim}")
        slot = L - len(hist_o) + i
        out[base + slot * obs_dim: base + (slot + 1) * obs_dim] = o
    base += L * obs_dim
    for i, a in enumerate(hist_a):
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.size != act_dim:
            raise ShapeError(f"history action has width {a.size}, expected {act_dim}")
        slot = L - len(hist_a) + i
        out[base + slot * act_dim: base + (slot + 1) * act_dim] = a
    return out


class History:
    """Rolling window of the last ``L`` observations and actions."""

    def __init__(self, L: int, obs_dim: int, act_dim: int):
        self.L, self.obs_dim, self.act_dim = L, obs_dim, act_dim
        self.obs: deque = deque(maxlen=L)
        self.actions: deque = deque(maxlen=L)

    def reset(self) -> None:
        self.obs.clear()
        self.actions.clear()

    def push(self, obs, action) -> None:
        self.obs.append(np.asarray(obs, dtype=np.float64).copy())
        self.actions.append(np.asarray(action, dtype=np.float64).copy())

    def encode(self, o_t) -> np.ndarray:
        if self.L == 0:
            return np.asarray(o_t, dtype=np.float64).copy()
        return encode_state(o_t, self.obs, self.actions, self.L, self.act_dim)

    @property
    def width(self) -> int:
        return encoded_width(self.obs_dim, self.act_dim, self.L)


# ---------------------------------------------------------------------------
# time embedding


def time_embed(t, width: int, tau: float = 1000.0) -> np.ndarray:
    """Sin/cos bank; pair ``i = 1..width/2`` uses frequency ``tau ** (-2i / width)``.

    The last pair therefore runs at ``1/tau`` and is injective over ``[0, tau*pi)``.
    Accepts a scalar step (returns ``(width,)``) or an array of steps.
    """
    if width <= 0 or width % 2:
        raise ConfigError(f"time embedding width must be a positive even number, got {width}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ConfigError("time step must be non-negative")
    half = width // 2
    freqs = tau ** (-2.0 * np.arange(1, half + 1) / width)
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (width,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserLayout:
    """Widths of the pieces concatenated into the main network's input."""

    x_dim: int
    state_dim: int
    state_embed: int
    time_raw: int
    time_embed: int
    hidden: int
    depth: int
    tau: float = 1000.0

    @property
    def main_in(self) -> int:
        return self.x_dim + self.state_embed + self.time_embed


class DenoiserNet:
    """Noise predictor built from three dense nets.

    * ``state``: encoded state -> ``state_embed`` (swish)
    * ``time``: sin/cos features -> ``time_embed`` (two layers, swish then linear)
    * ``main``: ``[x_t, state feature, time feature]`` -> noise estimate,
      swish residual hidden blocks.

    All weights live in one :class:`ParamSet` with ``state.``, ``time.`` and
    ``main.`` name prefixes so a single optimizer state covers them.
    """

    def __init__(self, layout: DenoiserLayout, params: ParamSet | None = None, seed: int = 0):
        self.layout = layout
        lo = layout
        if lo.depth < 1:
            raise ConfigError("denoiser needs at least one hidden layer", "diff_depth")
        self.specs = {
            "state": NetSpec((lo.state_dim, lo.state_embed), ("swish",)),
            "time": NetSpec((lo.time_raw, lo.time_embed, lo.time_embed), ("swish", "identity")),
            "main": NetSpec.mlp(
                [lo.main_in] + [lo.hidden] * lo.depth + [lo.x_dim],
                hidden="swish", output="identity", residual=True,
            ),
        }
        if params is None:
            params = self.init_params(seed)
        self.params = params

    def init_params(self, seed: int) -> ParamSet:
        children = np.random.SeedSequence(seed).spawn(3)
        tensors = {}
        for child, (name, spec) in zip(children, self.specs.items()):
            sub = net_init(spec, int(child.generate_state(1)[0]))
            tensors.update({f"{name}.{k}": v for k, v in sub.items()})
        return ParamSet(tensors, int(seed))

    def sub(self, name: str, params: ParamSet | None = None) -> ParamSet:
        params = self.params if params is None else params
        cached = getattr(self, "_sub_cache", None)
        key = tuple(map(id, params.tensors.values()))
        if cached is None or cached[0] is not params or cached[1] != key:
            prefix = {n: n + "." for n in self.specs}
            subs = {
                n: ParamSet({k[len(p):]: v for k, v in params.items() if k.startswith(p)},
                            params.seed)
                for n, p in prefix.items()
            }
            self._sub_cache = cached = (params, key, subs)
        return cached[2][name]

    def state_features(self, s, params: ParamSet | None = None) -> np.ndarray:
        """State branch output; constant along a reverse chain, so samplers compute it once."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[1] != self.layout.state_dim:
            raise ShapeError(f"state width {s.shape[1]} != {self.layout.state_dim}")
        return net_eval(self.sub("state", params), self.specs["state"], s)

    def time_features(self, steps, params: ParamSet | None = None) -> np.ndarray:
        sub = self.sub("time", params)
        steps = np.atleast_1d(steps)
        key = (sub, steps.tobytes())
        hit = getattr(self, "_time_cache", None)
        if hit is not None and hit[0][0] is sub and hit[0][1] == key[1]:
            return hit[1]
        raw = time_embed(steps, self.layout.time_raw, self.layout.tau)
        out = net_eval(sub, self.specs["time"], raw)
        out.setflags(write=False)
        self._time_cache = (key, out)
        return out

    def predict_from_features(self, x_t, hs, ht, params: ParamSet | None = None) -> np.ndarray:
        """Main branch on precomputed state (``hs``) and time (``ht``) features."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        B = x_t.shape[0]
        hs = np.atleast_2d(hs)
        ht = np.atleast_2d(ht)
        inp = np.concatenate([x_t, np.repeat(hs, B // hs.shape[0], axis=0),
                              np.repeat(ht, B // ht.shape[0], axis=0)], axis=1)
        return net_eval(self.sub("main", params), self.specs["main"], inp)

    @property
    def x_dim(self) -> int:
        return self.layout.x_dim

    def forward(self, x_t, s, t, params: ParamSet | None = None):
        params = self.params if params is None else params
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        lo = self.layout
        if x_t.shape[1] != lo.x_dim:
            raise ShapeError(f"x_t width {x_t.shape[1]} != {lo.x_dim}")
        if s.shape[1] != lo.state_dim:
            raise ShapeError(f"state width {s.shape[1]} != {lo.state_dim}")
        B = x_t.shape[0]
        if s.shape[0] != B:
            if s.shape[0] == 1:
                s = np.repeat(s, B, axis=0)
            else:
                raise ShapeError("batch sizes of x_t and state differ")
        t = np.broadcast_to(np.asarray(t), (B,))
        raw = time_embed(t, lo.time_raw, lo.tau)
        hs, cs = net_forward(self.sub("state", params), self.specs["state"], s)
        ht, ct = net_forward(self.sub("time", params), self.specs["time"], raw)
        inp = np.concatenate([x_t, hs, ht], axis=1)
        out, cm = net_forward(self.sub("main", params), self.specs["main"], inp)
        return out, (cs, ct, cm)

    def backward(self, cache, grad_out) -> ParamSet:
        cs, ct, cm = cache
        lo = self.layout
        gm, ginp = net_backward(cm, grad_out)
        a, b = lo.x_dim, lo.x_dim + lo.state_embed
        gs, _ = net_backward(cs, ginp[:, a:b])
        gt, _ = net_backward(ct, ginp[:, b:])
        tensors = {}
        for name, g in (("state", gs), ("time", gt), ("main", gm)):
            tensors.update({f"{name}.{k}": v for k, v in g.items()})
        return ParamSet({k: tensors[k] for k in self.params.names()}, self.params.seed)


def denoise_predict(net: DenoiserNet, x_t, s0, t) -> np.ndarray:
    """Noise estimate for one sample (1-D in, 1-D out) or a batch."""
    single = np.ndim(x_t) == 1
    out, _ = net.forward(x_t, s0, t)
    if not np.all(np.isfinite(out)):
        raise UsageError("denoiser produced non-finite output")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# reverse process


def strided_steps(T: int, n_steps: int) -> np.ndarray:
    """Evenly spaced subsequence of ``1..T`` containing both ends, descending."""
    return _strided(int(T), int(n_steps))


@lru_cache(maxsize=32)
def _strided(T: int, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ConfigError(f"n_steps must be >= 1, got {n_steps}", "sample_steps")
    if n_steps > T:
        raise ConfigError(f"n_steps={n_steps} exceeds T={T}", "sample_steps")
    if n_steps == 1:
        steps = np.array([T])
        steps.setflags(write=False)
        return steps
    steps = np.unique(np.round(np.linspace(1, T, n_steps)).astype(np.int64))[::-1].copy()
    steps.setflags(write=False)
    return steps


def reverse_coefficients(sched: NoiseSchedule, steps: np.ndarray):
    """Per-step (beta, alpha, alpha_bar) for the respaced chain.

    Consecutive steps reuse the schedule's own beta; skipped spans use the
    effective increment ``1 - abar_t / abar_prev``.
    """
    betas, alphas, abars = [], [], []
    for i, t in enumerate(steps):
        prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab = sched.alpha_bar[t - 1]
        if prev == t - 1:
            b = sched.beta[t - 1]
        else:
            ab_prev = sched.alpha_bar[prev - 1] if prev > 0 else 1.0
            b = 1.0 - ab / ab_prev
        betas.append(b)
        alphas.append(1.0 - b)
        abars.append(ab)
    return np.array(betas), np.array(alphas), np.array(abars)


@dataclass
class CandidateSet:
    samples: np.ndarray  # (K, x_dim) clamped reverse-chain outputs
    act_dim: int
    sigmas: np.ndarray
    seed: int
    stage: int

    @property
    def actions(self) -> np.ndarray:
        """First action of each stacked plan."""
        return self.samples[:, : self.act_dim]

    def __len__(self) -> int:
        return self.samples.shape[0]


def _seed_from(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def sample_candidates(net: DenoiserNet, s, K: int, sched: NoiseSchedule, n_steps: int,
                      rng, act_dim: int | None = None, stop_at: int | None = None,
                      eps_fn=None, trace: list | None = None) -> CandidateSet:
    """Draw ``K`` samples by running independent reverse chains.

    ``rng`` is a seed or a Generator (one integer is drawn from it). Candidate
    ``k`` uses child ``k`` of that seed's :class:`numpy.random.SeedSequence`,
    so it does not depend on ``K``. ``stop_at`` truncates the chain after that
    many reverse iterations. ``eps_fn(x, s, t)`` overrides the network (used
    by tests for an analytically tractable predictor). When ``trace`` is a
    list, the clamped state after every iteration is appended to it.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}", "K")
    steps = strided_steps(sched.T, n_steps)
    n = len(steps)
    if stop_at is None:
        stop_at = n
    if not (1 <= stop_at <= n):
        raise UsageError(f"stage must lie in [1, {n}], got {stop_at}")
    d = net.x_dim if net is not None else None
    if d is None:
        raise UsageError("need a network to know the sample width")
    act_dim = d if act_dim is None else act_dim
    seed = _seed_from(rng)
    gens = [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(K)]
    x = np.stack([g.standard_normal(d) for g in gens])
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    betas, alphas, abars = reverse_coefficients(sched, steps)
    sigmas = np.sqrt(betas)
    sigmas[-1] = 0.0
    if eps_fn is None:
        hs = net.state_features(s)
        ht = net.time_features(steps[:stop_at])
    for i in range(stop_at):
        t = int(steps[i])
        if eps_fn is None:
            eps_hat = net.predict_from_features(x, hs, ht[i])
        else:
            eps_hat = eps_fn(x, s, t)
        x = (x - (betas[i] / np.sqrt(1.0 - abars[i])) * eps_hat) / np.sqrt(alphas[i])
        if i < n - 1:
            z = np.stack([g.standard_normal(d) for g in gens])
            x = x + sigmas[i] * z
        if trace is not None:
            trace.append(np.clip(x, -1.0, 1.0))
    return CandidateSet(np.clip(x, -1.0, 1.0), act_dim, sigmas[:stop_at].copy(), seed, stop_at)


# ---------------------------------------------------------------------------
# training loss


def diffusion_loss_at(net: DenoiserNet, x0, s, t, eps, sched: NoiseSchedule,
                      params: ParamSet | None = None):
    """Loss and gradients for explicit steps ``t`` and noise ``eps``.

    ``loss = mean_b ||eps_b - eps_hat_b||^2``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    B = x0.shape[0]
    if B == 0:
        raise UsageError("diffusion_loss needs a non-empty batch")
    x_t = forward_diffuse(x0, np.broadcast_to(t, (B,)), eps, sched)
    pred, cache = net.forward(x_t, s, np.broadcast_to(t, (B,)), params)
    diff = pred - eps
    loss = float(np.sum(diff * diff) / B)
    grads = net.backward(cache, 2.0 * diff / B)
    return loss, grads


def diffusion_loss(net: DenoiserNet, x0, s, sched: NoiseSchedule, rng: np.random.Generator):
    """Simplified (uniformly weighted) ELBO with one random step per item."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0 or np.size(x0) == 0:
        raise UsageError("diffusion_loss needs a non-empty batch")
    B = x0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    return diffusion_loss_at(net, x0, s, t, eps, sched)
