"""3D underwater data-collection world.

Sensor nodes buffer data that an AUV drains while inside a node's service
radius. The link model is a quadratic falloff, propulsion power is cubic in
rpm, and a collision is any approach closer than the safety margin to the
seabed or to another AUV. The surface vessel that ultimately receives the
data is a static sink and plays no active role.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    DT,
    ActuatorCommand,
    AuvState,
    ControllerGains,
    Disturbance,
    TrackerState,
    VehicleParams,
    parse_controller,
    parse_sea,
    sample_disturbance,
    step_dynamics,
    track_step,
    wrap_angle,
)
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class RewardWeights:
    w_rate: float = 1.0
    w_energy: float = 0.01
    w_collision: float = 100.0
    w_serve: float = 10.0

    def validate(self) -> None:
        ws = (self.w_rate, self.w_energy, self.w_collision, self.w_serve)
        if any(w < 0 for w in ws):
            raise ConfigError("reward weights must be non-negative", "w_rate")
        if not any(w > 0 for w in ws):
            raise ConfigError("at least one reward weight must be positive", "w_rate")


@dataclass(frozen=True)
class WorldConfig:
    bounds: tuple[float, float, float] = (60.0, 60.0, 30.0)  # north, east, down extents (m)
    n_nodes: int = 3
    n_auv: int = 1
    episode_steps: int = 200
    node_data: float = 20.0  # MBit buffered per node at spawn
    service_radius: float = 15.0
    r_max: float = 10.0  # MBit/s
    power_max: float = 110.0  # W drawn at maximum rpm
    rpm_max: float = 1525.0
    safety_margin: float = 2.0
    node_clearance: float = 3.0  # min height of a node above the seabed and below the surface
    min_node_spacing: float = 5.0
    seabed_depth: float = 0.85  # mean seabed depth as a fraction of the down extent
    seabed_relief: float = 0.1  # relief amplitude as a fraction of the down extent
    n_nearest: int = 3
    weights: RewardWeights = field(default_factory=RewardWeights)

    def validate(self) -> None:
        if any(b <= 0 for b in self.bounds):
            raise ConfigError("world bounds must be positive", "bounds")
        if self.n_nodes < 0:
            raise ConfigError("n_nodes must be >= 0", "n_nodes")
        if self.n_auv not in (1, 2):
            raise ConfigError("n_auv must be 1 or 2", "n_auv")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1", "episode_steps")
        if self.service_radius <= 0 or self.r_max <= 0:
            raise ConfigError("service_radius and r_max must be positive", "service_radius")
        if self.n_nearest < 0:
            raise ConfigError("n_nearest must be >= 0", "n_nearest")
        self.weights.validate()

    @property
    def power_coeff(self) -> float:
        """k_P in ``P = k_P * rpm**3``."""
        return self.power_max / self.rpm_max ** 3

    def capacity(self) -> int:
        """Lattice count of node slots at ``min_node_spacing`` in the usable water column."""
        n, e, d = self.bounds
        usable = d * (self.seabed_depth - self.seabed_relief) - 2.0 * self.node_clearance
        if usable < 0:
            return 0
        sp = self.min_node_spacing
        return int(n // sp + 1) * int(e // sp + 1) * int(usable // sp + 1)


@dataclass
class SensorNode:
    position: np.ndarray
    data: float
    initial: float
    radius: float

    @property
    def served(self) -> bool:
        return self.data == 0.0


@dataclass(frozen=True)
class Metrics:
    sdr: float = 0.0  # MBit/s
    ec: float = 0.0  # W
    ssn: int = 0
    collisions: int = 0


@dataclass(frozen=True)
class StepOutcome:
    """Everything one tick of the task produced, with the reward split into its terms."""

    reward: float
    rate_term: float
    serve_term: float
    energy_term: float
    collision_term: float
    drained: float  # MBit
    rate: float  # MBit/s actually delivered
    power: float  # W
    newly_served: int
    collisions: int


class Seabed:
    """Smooth random heightfield ``depth(n, e)`` built from a few cosine modes."""

    def __init__(self, cfg: WorldConfig, rng: np.random.Generator, n_modes: int = 3):
        n, e, d = cfg.bounds
        self.mean = cfg.seabed_depth * d
        self.relief = cfg.seabed_relief * d
        self.k = rng.uniform(0.5, 2.0, size=(n_modes, 2)) * (2.0 * math.pi / np.array([n, e]))
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=n_modes)
        self.amp = rng.uniform(0.5, 1.0, size=n_modes)
        self.amp = self.amp / self.amp.sum()

    def depth(self, north: float, east: float) -> float:
        arg = self.k[:, 0] * north + self.k[:, 1] * east + self.phase
        return float(self.mean + self.relief * np.dot(self.amp, np.cos(arg)))

    def to_json(self) -> dict:
        return {"mean": self.mean, "relief": self.relief, "k": self.k.tolist(),
                "phase": self.phase.tolist(), "amp": self.amp.tolist()}


class World:
    def __init__(self, cfg: WorldConfig, nodes: list[SensorNode], seabed: Seabed, seed: int):
        self.cfg = cfg
        self.nodes = nodes
        self.seabed = seabed
        self.seed = seed
        self.ticks = 0
        self.total_data = 0.0
        self.energy = 0.0  # J
        self.collisions = 0
        self.finished = False

    @property
    def elapsed(self) -> float:
        return self.ticks * DT

    def served_count(self) -> int:
        return sum(n.served for n in self.nodes)

    def unserved(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if not n.served]

    def finish(self) -> None:
        self.finished = True

    def snapshot(self, auv_states=(), grid: int = 8) -> dict:
        n, e, _ = self.cfg.bounds
        samples = [
            [float(x), float(y), self.seabed.depth(x, y)]
            for x in np.linspace(0.0, n, grid) for y in np.linspace(0.0, e, grid)
        ]
        return {
            "seed": self.seed,
            "bounds": list(self.cfg.bounds),
            "nodes": [
                {"position": nd.position.tolist(), "data": nd.data, "initial": nd.initial,
                 "radius": nd.radius, "served": nd.served}
                for nd in self.nodes
            ],
            "seabed": self.seabed.to_json(),
            "seabed_samples": samples,
            "auvs": [asdict(s) for s in auv_states],
        }

    def export_json(self, path, auv_states=()) -> None:
        Path(path).write_text(json.dumps(self.snapshot(auv_states), indent=1) + "\n")


def spawn_world(cfg: WorldConfig, seed: int, max_tries: int = 10000) -> World:
    """Seeded world: seabed first, then nodes by rejection sampling."""
    cfg.validate()
    if cfg.n_nodes > cfg.capacity():
        raise ConfigError(
            f"{cfg.n_nodes} nodes do not fit (capacity {cfg.capacity()} at spacing "
            f"{cfg.min_node_spacing} m)", "n_nodes")
    rng = np.random.default_rng(seed)
    seabed = Seabed(cfg, rng)
    bn, be, _ = cfg.bounds
    nodes: list[SensorNode] = []
    tries = 0
    while len(nodes) < cfg.n_nodes:
        tries += 1
        if tries > max_tries:
            raise ConfigError("could not place all nodes; lower n_nodes or spacing", "n_nodes")
        x, y = rng.uniform(0.0, bn), rng.uniform(0.0, be)
        floor = seabed.depth(x, y) - cfg.node_clearance
        if floor <= cfg.node_clearance:
            continue
        z = rng.uniform(cfg.node_clearance, floor)
        p = np.array([x, y, z])
        if any(np.linalg.norm(p - nd.position) < cfg.min_node_spacing for nd in nodes):
            continue
        nodes.append(SensorNode(p, cfg.node_data, cfg.node_data, cfg.service_radius))
    return World(cfg, nodes, seabed, seed)


def comm_rate(auv_pos, node: SensorNode, r_max: float = 10.0) -> float:
    """``r_max * (1 - dist/radius)**2`` inside the service radius, else 0."""
    dist = math.dist(auv_pos, node.position)
    if dist >= node.radius:
        return 0.0
    return r_max * (1.0 - dist / node.radius) ** 2


def collision_count(world: World, auv_states) -> int:
    """Seabed proximity counts once per AUV; each close AUV pair counts once."""
    margin = world.cfg.safety_margin
    count = 0
    for s in auv_states:
        if world.seabed.depth(s.north, s.east) - s.down < margin:
            count += 1
    for i in range(len(auv_states)):
        for j in range(i + 1, len(auv_states)):
            if np.linalg.norm(auv_states[i].position - auv_states[j].position) < margin:
                count += 1
    return count


def step_task(world: World, auv_states, commands, dt: float = DT) -> StepOutcome:
    """Advance the task bookkeeping by one control tick."""
    if world.finished:
        raise UsageError("episode already finished")
    cfg = world.cfg
    w = cfg.weights
    drained = 0.0
    newly = 0
    for s in auv_states:
        pos = (s.north, s.east, s.down)
        for nd in world.nodes:
            if nd.data == 0.0:
                continue
            amount = min(nd.data, comm_rate(pos, nd, cfg.r_max) * dt)
            if amount <= 0.0:
                continue
            if amount >= nd.data:
                amount = nd.data
                nd.data = 0.0
                newly += 1
            else:
                nd.data -= amount
            drained += amount
    power = sum(cfg.power_coeff * c.rpm ** 3 for c in commands)
    hits = collision_count(world, auv_states)

    rate = drained / dt
    rate_term = w.w_rate * rate
    serve_term = w.w_serve * newly
    energy_term = w.w_energy * power
    collision_term = w.w_collision * hits
    reward = rate_term + serve_term - energy_term - collision_term

    world.ticks += 1
    world.total_data += drained
    world.energy += power * dt
    world.collisions += hits
    return StepOutcome(reward, rate_term, serve_term, energy_term, collision_term,
                       drained, rate, power, newly, hits)


def observation_width(n_nearest: int = 3) -> int:
    return 10 + 4 * n_nearest + 1 + 3


def nearest_unserved(world: World, pos, m: int) -> list[int]:
    idx = world.unserved()
    if not idx:
        return []
    d = np.array([np.linalg.norm(world.nodes[i].position - pos) for i in idx])
    order = np.argsort(d, kind="stable")
    return [idx[k] for k in order[:m]]


def observe(world: World, s: AuvState, disturbance: Disturbance | None = None,
            vp: VehicleParams = VehicleParams()) -> np.ndarray:
    """Fixed-width observation.

    Layout: own pose and rates (10), then for each of the ``n_nearest``
    closest unserved nodes its offset in the heading frame and remaining data
    fraction (4 each, zero-padded), height above the seabed (1), and the
    current vector (3).
    """
    cfg = world.cfg
    bn, be, bd = cfg.bounds
    scale = max(bn, be)
    out = np.zeros(observation_width(cfg.n_nearest))
    out[:10] = [
        s.north / bn, s.east / be, s.down / bd,
        math.sin(s.yaw), math.cos(s.yaw), s.pitch,
        s.surge / vp.v_max, s.sway / vp.v_max, s.heave / vp.v_max, s.yaw_rate / vp.omega_max,
    ]
    cy, sy = math.cos(s.yaw), math.sin(s.yaw)
    pos = s.position
    for k, i in enumerate(nearest_unserved(world, pos, cfg.n_nearest)):
        nd = world.nodes[i]
        dn, de, dd = nd.position - pos
        base = 10 + 4 * k
        out[base:base + 4] = [
            (cy * dn + sy * de) / scale,
            (-sy * dn + cy * de) / scale,
            dd / bd,
            nd.data / nd.initial if nd.initial > 0 else 0.0,
        ]
    base = 10 + 4 * cfg.n_nearest
    out[base] = (world.seabed.depth(s.north, s.east) - s.down) / bd
    if disturbance is not None:
        out[base + 1:base + 4] = disturbance.current / vp.v_max
    return out


def episode_metrics(world: World) -> Metrics:
    if not world.finished:
        raise UsageError("episode_metrics called before the episode finished")
    if world.ticks == 0:
        return Metrics(0.0, 0.0, world.served_count(), world.collisions)
    duration = world.elapsed
    return Metrics(world.total_data / duration, world.energy / duration,
                   world.served_count(), world.collisions)


# ---------------------------------------------------------------------------
# high-level environment


@dataclass(frozen=True)
class EnvConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sea: str = "ideal"
    controller: str = "ssurface"
    gains: ControllerGains = field(default_factory=ControllerGains)
    action_repeat: int = 10  # control ticks per decision
    max_turn: float = math.pi / 2  # yaw-reference offset at |action| = 1
    min_depth: float = 2.0
    resample_world: bool = False
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    caps: dict | None = None  # sea-condition caps; None uses the module defaults


ACT_DIM = 3


class AuvTaskEnv:
    """Decision-level wrapper: one action sets yaw/depth references and rpm for a few ticks.

    Action layout (each in [-1, 1]): heading offset relative to the current
    yaw, target depth across the water column, propeller rpm from 0 to max.
    The low-level controller turns references into fin commands every tick.
    """

    act_dim = ACT_DIM

    def __init__(self, cfg: EnvConfig, seed: int):
        cfg.world.validate()
        self.cfg = cfg
        self.controller = parse_controller(cfg.controller)
        self.sea = parse_sea(cfg.sea)
        self.seed = int(seed)
        self.vp = cfg.vehicle
        self.world = spawn_world(cfg.world, self.seed)
        self.obs_dim = observation_width(cfg.world.n_nearest)
        self.episode = -1
        self.state = AuvState()
        self.steps = 0

    def reset(self, episode: int | None = None) -> np.ndarray:
        self.episode = self.episode + 1 if episode is None else episode
        ss = np.random.SeedSequence([self.seed, self.episode])
        world_seed, start_seed, sea_seed = ss.generate_state(3)
        if self.cfg.resample_world:
            self.world = spawn_world(self.cfg.world, int(world_seed))
        else:
            self.world = spawn_world(self.cfg.world, self.seed)
        rng = np.random.default_rng(int(start_seed))
        bn, be, _ = self.cfg.world.bounds
        self.state = AuvState(
            north=float(rng.uniform(0.05, 0.2) * bn),
            east=float(rng.uniform(0.05, 0.2) * be),
            down=float(rng.uniform(self.cfg.min_depth, 2.0 * self.cfg.min_depth + 2.0)),
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        self.sea_rng = np.random.default_rng(int(sea_seed))
        self.dist = sample_disturbance(self.sea, 0.0, self.sea_rng, caps=self.cfg.caps)
        self.tracker = TrackerState.fresh(self.cfg.gains)
        self.steps = 0
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe(self.world, self.state, self.dist, self.vp)

    def references(self, action) -> tuple[tuple[float, float], float]:
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        yaw_ref = wrap_angle(self.state.yaw + self.cfg.max_turn * a[0])
        lo = self.cfg.min_depth
        hi = self.cfg.world.bounds[2]
        depth_ref = lo + 0.5 * (a[1] + 1.0) * (hi - lo)
        rpm = 0.5 * (a[2] + 1.0) * self.vp.rpm_max
        return (yaw_ref, depth_ref), rpm

    def step(self, action):
        """Run ``action_repeat`` ticks. Returns ``(obs, reward, done, info)``.

        ``done`` marks a true terminal (every node served); the time limit is
        reported separately as ``info["truncated"]``.
        """
        if self.episode < 0:
            raise UsageError("call reset() before step()")
        ref, rpm = self.references(action)
        total = 0.0
        terms = np.zeros(4)
        outcomes = []
        for _ in range(self.cfg.action_repeat):
            t = self.world.elapsed
            cmd = track_step(self.controller, ref, self.state, self.tracker, self.cfg.gains,
                             cruise_rpm=rpm, vp=self.vp)
            self.state = step_dynamics(self.state, cmd, self.dist, vp=self.vp)
            out = step_task(self.world, [self.state], [cmd])
            self.dist = sample_disturbance(self.sea, t + DT, self.sea_rng, self.dist,
                                           caps=self.cfg.caps)
            total += out.reward
            terms += (out.rate_term, out.serve_term, out.energy_term, out.collision_term)
            outcomes.append(out)
            if self.world.served_count() == len(self.world.nodes) and self.world.nodes:
                break
        self.steps += 1
        done = bool(self.world.nodes) and self.world.served_count() == len(self.world.nodes)
        truncated = self.steps >= self.cfg.world.episode_steps and not done
        if done or truncated:
            self.world.finish()
        info = {"truncated": truncated, "terms": terms, "ticks": outcomes}
        return self.observe(), total, done, info
