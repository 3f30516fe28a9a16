"""Reduced-order REMUS-class vehicle model, sea disturbances and low-level controllers.

Frames follow the usual marine convention: north-east-down positions, yaw
about the down axis, pitch positive nose-up. The plant is decoupled into a
surge channel (propeller thrust against quadratic drag), a yaw channel
(rudder sets a yaw-rate demand tracked with a first-order lag) and a depth
channel (stern plane sets a pitch rate; depth follows from the pitch angle
and surge speed).

Sign conventions for the normalized commands: positive rudder turns
starboard (yaw increases); positive stern plane pitches the nose down, so the
vehicle dives.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConfigError, UsageError

RHO = 1026.0
MASS = 31.9
LENGTH = 1.6
DIAMETER = 0.191
V_MAX = 2.3
OMEGA_MAX = 0.26
RPM_MAX = 1525.0
DT = 0.05


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    if isinstance(a, (float, int)):
        if -math.pi < a <= math.pi:
            return float(a)
        w = (a + math.pi) % (2.0 * math.pi) - math.pi
        return math.pi if w == -math.pi else float(w)
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class VehicleParams:
    """Plant coefficients. Defaults give a 2.3 m/s, 0.26 rad/s, 1525 rpm vehicle."""

    mass: float = MASS
    rho: float = RHO
    drag_coeff: float = 0.27
    diameter: float = DIAMETER
    v_max: float = V_MAX
    omega_max: float = OMEGA_MAX
    rpm_max: float = RPM_MAX
    yaw_lag: float = 0.5  # s
    pitch_rate_max: float = 0.26  # rad/s
    pitch_max: float = 0.5  # rad
    sway_damping: float = 1.0  # 1/s
    heave_damping: float = 1.0  # 1/s
    wave_yaw_coupling: float = 0.2  # rad/s^2 per m/s^2 of sway wave acceleration
    fin_rate_max: float = 1.5  # normalized fin travel per second (servo slew limit)

    @property
    def frontal_area(self) -> float:
        return math.pi * (self.diameter / 2.0) ** 2

    @property
    def drag(self) -> float:
        """Quadratic surge drag coefficient in kg/m."""
        return 0.5 * self.rho * self.drag_coeff * self.frontal_area

    @property
    def thrust_coeff(self) -> float:
        """Chosen so the steady speed at maximum rpm is exactly ``v_max``."""
        return self.drag * self.v_max ** 2 / self.rpm_max ** 2


@dataclass(frozen=True)
class AuvState:
    north: float = 0.0
    east: float = 0.0
    down: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    surge: float = 0.0
    sway: float = 0.0
    heave: float = 0.0
    yaw_rate: float = 0.0
    rudder_pos: float = 0.0  # actual fin deflections, normalized [-1, 1]
    stern_pos: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.north, self.east, self.down])

    @property
    def speed(self) -> float:
        return math.sqrt(self.surge ** 2 + self.sway ** 2 + self.heave ** 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.north, self.east, self.down, self.yaw, self.pitch,
                         self.surge, self.sway, self.heave, self.yaw_rate,
                         self.rudder_pos, self.stern_pos])


@dataclass(frozen=True)
class ActuatorCommand:
    rpm: float = 0.0
    rudder: float = 0.0
    stern: float = 0.0

    def within_bounds(self, rpm_max: float = RPM_MAX) -> bool:
        return (0.0 <= self.rpm <= rpm_max and -1.0 <= self.rudder <= 1.0
                and -1.0 <= self.stern <= 1.0)

    def clamped(self, rpm_max: float = RPM_MAX) -> "ActuatorCommand":
        return ActuatorCommand(
            float(np.clip(self.rpm, 0.0, rpm_max)),
            float(np.clip(self.rudder, -1.0, 1.0)),
            float(np.clip(self.stern, -1.0, 1.0)),
        )


class SeaCondition(str, Enum):
    IDEAL = "ideal"
    ES = "es"
    VES = "ves"


@dataclass(frozen=True)
class SeaCaps:
    current: float  # m/s, cap on the current vector norm
    wave_amp: float  # m/s^2
    wave_period: float  # s
    current_tau: float = 20.0  # s, mean-reversion time of the current process
    vertical_ratio: float = 0.1  # vertical current std relative to horizontal


DEFAULT_CAPS = {
    SeaCondition.IDEAL: SeaCaps(0.0, 0.0, 8.0),
    SeaCondition.ES: SeaCaps(0.5, 0.3, 8.0),
    SeaCondition.VES: SeaCaps(1.0, 0.6, 6.0),
}


def parse_sea(cond) -> SeaCondition:
    if isinstance(cond, SeaCondition):
        return cond
    try:
        return SeaCondition(str(cond).lower())
    except ValueError:
        raise ConfigError(f"unknown sea condition {cond!r}", "sea") from None


@dataclass(frozen=True)
class Disturbance:
    current: np.ndarray = field(default_factory=lambda: np.zeros(3))  # NED, m/s
    wave_accel: np.ndarray = field(default_factory=lambda: np.zeros(3))  # body, m/s^2
    phase: float = 0.0

    @staticmethod
    def zero() -> "Disturbance":
        return Disturbance()


def sample_disturbance(cond, t: float, rng: np.random.Generator,
                       prev: Disturbance | None = None, dt: float = DT,
                       caps: dict | None = None) -> Disturbance:
    """Advance the sea state to time ``t``.

    The current is an Ornstein-Uhlenbeck process around zero whose
    stationary horizontal std is half the cap (the vertical axis is scaled by
    ``vertical_ratio``); its norm is clipped to the cap.
    Waves are body-frame sinusoids (surge, sway, heave) sharing one random
    phase, drawn on the first call and carried in ``prev`` afterwards.
    """
    cond = parse_sea(cond)
    cap = (caps or DEFAULT_CAPS)[cond]
    if cap.current == 0.0 and cap.wave_amp == 0.0:
        return Disturbance()
    axis_scale = np.array([1.0, 1.0, cap.vertical_ratio])
    if prev is None:
        phase = float(rng.uniform(0.0, 2.0 * math.pi))
        current = rng.normal(0.0, cap.current / 2.0, size=3) * axis_scale
    else:
        phase = prev.phase
        theta = 1.0 / cap.current_tau
        sigma = (cap.current / 2.0) * math.sqrt(2.0 * theta)
        noise = rng.standard_normal(3) * axis_scale
        current = prev.current - theta * prev.current * dt + sigma * math.sqrt(dt) * noise
    norm = float(np.linalg.norm(current))
    if norm > cap.current:
        current = current * (cap.current / norm)
    w = 2.0 * math.pi / cap.wave_period
    wave = cap.wave_amp * np.array([
        0.3 * math.sin(w * t + phase),
        math.sin(w * t + phase + 1.0),
        math.sin(w * t + phase + 2.0),
    ])
    return Disturbance(current, wave, phase)


def step_dynamics(s: AuvState, cmd: ActuatorCommand, dist: Disturbance | None = None,
                  dt: float = DT, vp: VehicleParams = VehicleParams()) -> AuvState:
    """Semi-implicit Euler step: velocities first, then kinematics with the new velocities.

    Fins slew toward the commanded deflection at ``fin_rate_max``; the yaw-rate
    demand and pitch rate follow the actual fin positions.

    Surge drag is treated implicitly so a zero command can never add energy.
    """
    if not cmd.within_bounds(vp.rpm_max):
        raise UsageError(f"actuator command out of bounds: {cmd}")
    if dist is None:
        dist = Disturbance()
    wave = dist.wave_accel.tolist()

    thrust = vp.thrust_coeff * cmd.rpm ** 2
    u = (s.surge + dt * (thrust / vp.mass + wave[0])) / (1.0 + dt * vp.drag * abs(s.surge) / vp.mass)
    v = (s.sway + dt * wave[1]) / (1.0 + dt * vp.sway_damping)
    w = (s.heave + dt * wave[2]) / (1.0 + dt * vp.heave_damping)
    speed = math.sqrt(u * u + v * v + w * w)
    if speed > vp.v_max:
        k = vp.v_max / speed
        # rounding can leave the rescaled norm an ulp above the cap
        while math.sqrt((u * k) ** 2 + (v * k) ** 2 + (w * k) ** 2) > vp.v_max:
            k = math.nextafter(k, 0.0)
        u, v, w = u * k, v * k, w * k

    max_move = vp.fin_rate_max * dt
    rudder = s.rudder_pos + min(max(cmd.rudder - s.rudder_pos, -max_move), max_move)
    stern = s.stern_pos + min(max(cmd.stern - s.stern_pos, -max_move), max_move)

    r_demand = vp.omega_max * rudder
    r = (s.yaw_rate + dt * (r_demand / vp.yaw_lag + vp.wave_yaw_coupling * wave[1])) / (
        1.0 + dt / vp.yaw_lag)
    r = min(max(r, -vp.omega_max), vp.omega_max)
    q = -vp.pitch_rate_max * stern
    pitch = min(max(s.pitch + dt * q, -vp.pitch_max), vp.pitch_max)
    yaw = wrap_angle(s.yaw + dt * r)

    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    c = dist.current.tolist()
    north = s.north + dt * (u * cp * cy - v * sy + c[0])
    east = s.east + dt * (u * cp * sy + v * cy + c[1])
    down = s.down + dt * (-u * sp + w + c[2])
    if down < 0.0:
        down = 0.0
        w = max(w, 0.0)
    return AuvState(north, east, down, yaw, pitch, u, v, w, r, rudder, stern)


def kinetic_energy(s: AuvState, vp: VehicleParams = VehicleParams(), inertia: float = 3.45) -> float:
    return 0.5 * vp.mass * (s.surge ** 2 + s.sway ** 2 + s.heave ** 2) + 0.5 * inertia * s.yaw_rate ** 2


# ---------------------------------------------------------------------------
# controllers


@dataclass(frozen=True)
class ControllerGains:
    zeta1: float = 2.0
    zeta2: float = 2.0
    k_delta: float = 0.5  # integral-style disturbance estimate gain
    delta_window: int = 40
    delta_cap: float = 0.3
    kp: float = 1.0
    ki: float = 0.05
    kd: float = 1.5
    smc_lambda: float = 0.5
    smc_eta: float = 1.0
    smc_phi: float = 0.02

    def validate(self) -> None:
        if self.zeta1 <= 0 or self.zeta2 <= 0:
            raise ConfigError("S-Surface gains must be positive", "zeta1")
        if self.smc_eta <= 0 or self.smc_phi <= 0:
            raise ConfigError("SMC switching gain and boundary layer must be positive", "smc_eta")
        if self.delta_window < 1:
            raise ConfigError("delta_window must be >= 1", "delta_window")


def s_surface(e: float, edot: float, gains: ControllerGains = ControllerGains(),
              delta_u: float = 0.0) -> float:
    """``2 / (1 + exp(-zeta1 e - zeta2 edot)) - 1 + delta_u``.

    Written as ``tanh(z / 2)``, which is the same function but keeps
    ``f(-z) == -f(z)`` exact in floating point and never overflows.
    """
    z = gains.zeta1 * e + gains.zeta2 * edot
    return math.tanh(0.5 * z) + delta_u


def s_surface_logistic(e: float, edot: float, gains: ControllerGains = ControllerGains(),
                       delta_u: float = 0.0) -> float:
    """The law evaluated literally through the logistic form (reference for tests)."""
    return 2.0 / (1.0 + math.exp(-gains.zeta1 * e - gains.zeta2 * edot)) - 1.0 + delta_u


def estimate_delta_u(window, k_i: float = 0.5, cap: float = 0.3) -> float:
    """Bias estimate ``clamp(k_i * mean(window), +-cap)``."""
    if len(window) == 0:
        raise UsageError("disturbance window is empty")
    return _clamp(k_i * (sum(window) / len(window)), cap)


def pid_control(e: float, e_int: float, edot: float, gains: ControllerGains = ControllerGains()) -> float:
    return _clamp(gains.kp * e + gains.ki * e_int + gains.kd * edot)


def _clamp(x: float, cap: float = 1.0) -> float:
    return float(min(max(x, -cap), cap))


def sat(x: float) -> float:
    return min(max(x, -1.0), 1.0)


def smc_control(e: float, edot: float, gains: ControllerGains = ControllerGains()) -> float:
    """Boundary-layer sliding mode law on ``sigma = edot + lambda e``.

    ``e`` here is state minus reference (the opposite sign to the other two
    laws), so a positive sliding variable pushes the command negative.
    """
    sigma = edot + gains.smc_lambda * e
    return _clamp(-gains.smc_eta * sat(sigma / gains.smc_phi))


CONTROLLERS = ("ssurface", "pid", "smc")


def parse_controller(name: str) -> str:
    key = str(name).lower().replace("-", "").replace("_", "")
    if key in ("ssurface", "s"):
        return "ssurface"
    if key in CONTROLLERS:
        return key
    raise ConfigError(f"unknown controller {name!r}", "controller")


@dataclass
class ChannelState:
    """Per-channel controller memory."""

    window: deque
    integral: float = 0.0
    prev_error: float | None = None


@dataclass
class TrackerState:
    yaw: ChannelState
    depth: ChannelState

    @classmethod
    def fresh(cls, gains: ControllerGains = ControllerGains()) -> "TrackerState":
        return cls(ChannelState(deque(maxlen=gains.delta_window)),
                   ChannelState(deque(maxlen=gains.delta_window)))


# depth errors are in metres; this scale brings them to the same order as yaw errors in radians
DEPTH_ERROR_SCALE = 1.0


def _channel(controller: str, e: float, edot: float, ch: ChannelState,
             gains: ControllerGains, dt: float) -> float:
    ch.window.append(e)
    ch.integral += e * dt
    if controller == "ssurface":
        du = estimate_delta_u(ch.window, gains.k_delta, gains.delta_cap)
        return _clamp(s_surface(e, edot, gains, du))
    if controller == "pid":
        return pid_control(e, ch.integral, edot, gains)
    return smc_control(-e, -edot, gains)


def track_step(controller: str, ref: tuple[float, float], s: AuvState, state: TrackerState,
               gains: ControllerGains = ControllerGains(), cruise_rpm: float = 1000.0,
               dt: float = DT, vp: VehicleParams = VehicleParams()) -> ActuatorCommand:
    """One low-level control tick.

    Yaw error (wrapped) drives the rudder, depth error drives the stern
    plane, propeller rpm is held at ``cruise_rpm``. Error rates come from the
    measured rates rather than differencing, so the first tick has no kick.
    """
    controller = parse_controller(controller)
    yaw_ref, depth_ref = ref
    e_yaw = wrap_angle(yaw_ref - s.yaw)
    edot_yaw = -s.yaw_rate
    e_depth = DEPTH_ERROR_SCALE * (depth_ref - s.down)
    down_rate = -s.surge * math.sin(s.pitch) + s.heave
    edot_depth = -DEPTH_ERROR_SCALE * down_rate
    rudder = _channel(controller, e_yaw, edot_yaw, state.yaw, gains, dt)
    stern = _channel(controller, e_depth, edot_depth, state.depth, gains, dt)
    state.yaw.prev_error, state.depth.prev_error = e_yaw, e_depth
    return ActuatorCommand(min(max(float(cruise_rpm), 0.0), vp.rpm_max), rudder, stern)
