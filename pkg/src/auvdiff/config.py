"""Run configuration: a flat ``key = value`` text format.

Blank lines and lines starting with ``#`` are ignored. Every key must be a
field of :class:`RunConfig`; values are parsed according to the field's
default type (``true``/``false`` for booleans). An empty file gives the
defaults.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .dynamics import DEFAULT_CAPS, CONTROLLERS, ControllerGains, SeaCaps, SeaCondition, VehicleParams, parse_controller, parse_sea
from .errors import ConfigError
from .task import EnvConfig, RewardWeights, WorldConfig


@dataclass(frozen=True)
class RunConfig:
    # run
    seed: int = 0
    episodes: int = 150
    out: str = "runs/default"
    policy: str = "diffusion"  # diffusion | vanilla
    sea: str = "ideal"
    controller: str = "ssurface"
    checkpoint_every: int = 50
    log_decisions: bool = False

    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    L: int = 10
    K: int = 5
    H: int = 4
    sample_steps: int = 50
    diff_hidden: int = 128
    diff_depth: int = 3
    state_embed: int = 128
    time_raw: int = 32
    time_embed: int = 128
    time_tau: float = 1000.0
    lr_diffusion: float = 1e-4
    diffusion_continual: bool = True

    # reinforcement learning
    critic_hidden: int = 128
    actor_hidden: int = 128
    batch_size: int = 256
    lr_rl: float = 3e-4
    gamma: float = 0.99
    target_sigma: float = 0.2
    noise_clip: float = 0.5
    tau_soft: float = 0.005
    policy_delay: int = 2
    buffer_capacity: int = 100000
    warmup_steps: int = 1000
    explore_sigma: float = 0.1
    updates_per_step: int = 1
    reward_scale: float = 0.01

    # vehicle and control
    v_max: float = 2.3
    omega_max: float = 0.26
    rpm_max: float = 1525.0
    rho: float = 1026.0
    control_hz: float = 20.0
    zeta1: float = 2.0
    zeta2: float = 2.0
    k_delta: float = 0.2
    delta_window: int = 40
    delta_cap: float = 0.3
    kp: float = 1.0
    ki: float = 0.05
    kd: float = 1.5
    smc_lambda: float = 0.5
    smc_eta: float = 1.0
    smc_phi: float = 0.02
    es_current: float = 0.5
    es_wave_amp: float = 0.3
    es_wave_period: float = 8.0
    ves_current: float = 1.0
    ves_wave_amp: float = 0.6
    ves_wave_period: float = 6.0

    # task world
    world_north: float = 60.0
    world_east: float = 60.0
    world_down: float = 30.0
    n_nodes: int = 3
    n_auv: int = 1
    episode_steps: int = 200
    node_data: float = 20.0
    service_radius: float = 15.0
    r_max: float = 10.0
    power_max: float = 110.0
    safety_margin: float = 2.0
    n_nearest: int = 3
    action_repeat: int = 10
    resample_world: bool = False
    w_rate: float = 1.0
    w_energy: float = 0.01
    w_collision: float = 100.0
    w_serve: float = 10.0

    # evaluation experiments
    eval_episodes: int = 5
    track_duration: float = 120.0
    track_profile: str = "0:0,10;20:0.5,14;70:-0.3,8"
    track_cruise_rpm: float = 1000.0
    stages: str = "1,25,50"
    stage_horizon: int = 20

    def validate(self) -> "RunConfig":
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}", key)

        need(self.episodes >= 0, "episodes", "must be >= 0")
        need(self.policy in ("diffusion", "vanilla"), "policy", "must be diffusion or vanilla")
        parse_sea(self.sea)
        parse_controller(self.controller)
        need(self.checkpoint_every >= 1, "checkpoint_every", "must be >= 1")
        need(self.T >= 2, "T", "must be >= 2")
        need(0.0 < self.beta_start < self.beta_end < 1.0, "beta_start",
             "need 0 < beta_start < beta_end < 1")
        need(self.L >= 0, "L", "must be >= 0")
        need(self.K >= 1, "K", "must be >= 1")
        need(self.H >= 1, "H", "must be >= 1")
        need(1 <= self.sample_steps <= self.T, "sample_steps", "must lie in [1, T]")
        for key in ("diff_hidden", "diff_depth", "state_embed", "time_embed",
                    "critic_hidden", "actor_hidden", "batch_size", "policy_delay",
                    "buffer_capacity", "updates_per_step", "action_repeat", "episode_steps",
                    "delta_window", "stage_horizon", "eval_episodes"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        need(self.time_raw >= 2 and self.time_raw % 2 == 0, "time_raw", "must be even and >= 2")
        for key in ("lr_diffusion", "lr_rl", "time_tau", "v_max", "omega_max", "rpm_max", "rho",
                    "zeta1", "zeta2", "smc_eta", "smc_phi", "service_radius", "r_max",
                    "world_north", "world_east", "world_down", "track_duration", "reward_scale"):
            need(getattr(self, key) > 0, key, "must be positive")
        need(0.0 <= self.gamma <= 1.0, "gamma", "must lie in [0, 1]")
        need(self.target_sigma >= 0, "target_sigma", "must be >= 0")
        need(self.noise_clip > 0, "noise_clip", "must be positive")
        need(0.0 < self.tau_soft <= 1.0, "tau_soft", "must lie in (0, 1]")
        need(self.warmup_steps >= 0, "warmup_steps", "must be >= 0")
        need(self.explore_sigma >= 0, "explore_sigma", "must be >= 0")
        need(self.control_hz == 20.0, "control_hz", "the plant integrates at a fixed 20 Hz")
        need(self.n_auv in (1, 2), "n_auv", "must be 1 or 2")
        need(self.n_nodes >= 0, "n_nodes", "must be >= 0")
        need(self.n_nearest >= 0, "n_nearest", "must be >= 0")
        need(self.es_current <= self.ves_current and self.es_wave_amp <= self.ves_wave_amp,
             "ves_current", "VES caps must be at least the ES caps")
        for key in ("es_current", "es_wave_amp", "ves_current", "ves_wave_amp", "k_delta",
                    "delta_cap", "kp", "ki", "kd", "smc_lambda", "safety_margin", "node_data",
                    "power_max", "w_rate", "w_energy", "w_collision", "w_serve",
                    "track_cruise_rpm"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(self.track_cruise_rpm <= self.rpm_max, "track_cruise_rpm", "must not exceed rpm_max")
        self.weights().validate()
        parse_profile(self.track_profile)
        parse_stage_list(self.stages)
        return self

    # -- derived objects -------------------------------------------------

    def gains(self) -> ControllerGains:
        g = ControllerGains(
            zeta1=self.zeta1, zeta2=self.zeta2, k_delta=self.k_delta,
            delta_window=self.delta_window, delta_cap=self.delta_cap,
            kp=self.kp, ki=self.ki, kd=self.kd,
            smc_lambda=self.smc_lambda, smc_eta=self.smc_eta, smc_phi=self.smc_phi,
        )
        g.validate()
        return g

    def vehicle(self) -> VehicleParams:
        return VehicleParams(rho=self.rho, v_max=self.v_max, omega_max=self.omega_max,
                             rpm_max=self.rpm_max)

    def sea_caps(self) -> dict:
        return {
            SeaCondition.IDEAL: DEFAULT_CAPS[SeaCondition.IDEAL],
            SeaCondition.ES: SeaCaps(self.es_current, self.es_wave_amp, self.es_wave_period),
            SeaCondition.VES: SeaCaps(self.ves_current, self.ves_wave_amp, self.ves_wave_period),
        }

    def weights(self) -> RewardWeights:
        return RewardWeights(self.w_rate, self.w_energy, self.w_collision, self.w_serve)

    def world(self) -> WorldConfig:
        return WorldConfig(
            bounds=(self.world_north, self.world_east, self.world_down),
            n_nodes=self.n_nodes, n_auv=self.n_auv, episode_steps=self.episode_steps,
            node_data=self.node_data, service_radius=self.service_radius, r_max=self.r_max,
            power_max=self.power_max, rpm_max=self.rpm_max, safety_margin=self.safety_margin,
            n_nearest=self.n_nearest, weights=self.weights(),
        )

    def env(self, sea: str | None = None, controller: str | None = None) -> EnvConfig:
        return EnvConfig(
            world=self.world(), sea=sea or self.sea, controller=controller or self.controller,
            gains=self.gains(), action_repeat=self.action_repeat,
            resample_world=self.resample_world, vehicle=self.vehicle(), caps=self.sea_caps(),
        )

    def with_(self, **changes) -> "RunConfig":
        for k in changes:
            if k not in _FIELDS:
                raise ConfigError(f"unknown configuration key {k!r}", k)
        return replace(self, **changes).validate()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_profile(text: str) -> list[tuple[float, float, float]]:
    """``"t0:yaw,depth;t1:yaw,depth;..."`` -> sorted ``[(t, yaw, depth), ...]`` starting at t=0."""
    try:
        out = []
        for part in text.split(";"):
            part = part.strip()
            if not part:
                continue
            t, rest = part.split(":")
            yaw, depth = rest.split(",")
            out.append((float(t), float(yaw), float(depth)))
    except ValueError:
        raise ConfigError(f"track_profile: cannot parse {text!r}", "track_profile") from None
    out.sort()
    if not out or out[0][0] != 0.0:
        raise ConfigError("track_profile: first segment must start at t=0", "track_profile")
    if any(not all(math.isfinite(v) for v in seg) for seg in out):
        raise ConfigError("track_profile: values must be finite", "track_profile")
    return out


def parse_stage_list(text: str) -> list[int]:
    try:
        stages = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"stages: cannot parse {text!r}", "stages") from None
    if not stages or any(s < 1 for s in stages):
        raise ConfigError("stages: need positive stage indices", "stages")
    return stages


def _parse_value(key: str, raw: str):
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}", key) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown configuration key {key!r}", key)
        values[key] = _parse_value(key, raw)
    return replace(base or RunConfig(), **values).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in asdict(cfg).items())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
