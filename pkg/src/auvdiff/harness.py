"""Joint training loop, evaluation experiments and CSV output.

CSV files share one convention: mandatory header row, ``,`` separator,
``.`` decimal point, ``\\n`` line endings, floats written with ``repr`` so
re-reading them is exact. Column sets are pinned in :data:`SCHEMAS` and
versioned by :data:`SCHEMA_VERSION`.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rl
from .agent import HybridAgent
from .config import RunConfig, parse_profile, parse_stage_list, save_config
from .diffusion import History, strided_steps
from .dynamics import (
    CONTROLLERS,
    AuvState,
    DT,
    TrackerState,
    parse_controller,
    parse_sea,
    sample_disturbance,
    step_dynamics,
    track_step,
    wrap_angle,
)
from .errors import TrainingError, UsageError
from .task import ACT_DIM, AuvTaskEnv, episode_metrics, observation_width

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMAS = {
    "episodes": ["episode", "reward", "sdr", "ec", "ssn", "collisions", "steps",
                 "diffusion_loss", "critic1_loss", "critic2_loss"],
    "decisions": ["episode", "step", "index", "chosen_q", "max_q", "q_values"],
    "eval": ["sea", "controller", "episodes", "reward_mean", "reward_std", "sdr_mean", "sdr_std",
             "ec_mean", "ec_std", "ssn_mean", "ssn_std", "collisions_mean", "collisions_std"],
    "track_series": ["time", "yaw_ref", "yaw", "yaw_error", "depth_ref", "depth", "depth_error",
                     "rudder", "stern"],
    "track_summary": ["controller", "sea", "seed", "yaw_mse", "yaw_sq_std", "depth_mse",
                      "depth_sq_std", "yaw_abs_mean", "yaw_abs_std", "depth_abs_mean",
                      "depth_abs_std", "sign_flips"],
    "stage_trajectories": ["stage", "candidate", "step", "north", "east", "down"],
    "stage_summary": ["stage", "candidate", "q_value", "selected", "a0", "a1", "a2"],
    "stage_dispersion": ["stage", "dispersion"],
}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def emit_csv(rows, path, columns: list[str]) -> None:
    """Write ``rows`` (dicts or sequences) with a header; missing dict keys are an error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in columns]
            if len(row) != len(columns):
                raise UsageError(f"row has {len(row)} fields, expected {len(columns)}")
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# training


@dataclass
class EpisodeLog:
    episode: int
    reward: float
    sdr: float
    ec: float
    ssn: int
    collisions: int
    steps: int
    diffusion_loss: float
    critic1_loss: float
    critic2_loss: float
    wall_time: float = 0.0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in SCHEMAS["episodes"]}


@dataclass
class TrainResult:
    out: Path
    logs: list[EpisodeLog]
    checkpoint: Path
    agent: HybridAgent
    decisions: list = field(default_factory=list)


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else float("nan")


def make_env(cfg: RunConfig, seed: int | None = None, sea: str | None = None,
             controller: str | None = None) -> AuvTaskEnv:
    return AuvTaskEnv(cfg.env(sea, controller), cfg.seed if seed is None else seed)


def run_episode(env: AuvTaskEnv, agent: HybridAgent, history: History, *, explore: bool,
                buffer: rl.ReplayBuffer | None = None, learn: bool = False,
                warmup: bool = False, episode_id: int = 0, decisions: list | None = None,
                max_steps: int | None = None):
    """Roll out one episode; optionally store transitions and learn after every step."""
    cfg = agent.cfg
    obs = env.reset()
    history.reset()
    s = history.encode(obs)
    total, steps = 0.0, 0
    losses = []
    done = False
    while True:
        if warmup:
            a = agent.warmup_action(s)
        else:
            dec = agent.act(s, explore=explore)
            a = dec.action
            if decisions is not None and dec.q_values is not None:
                decisions.append((episode_id, steps, dec.index, float(dec.q_values[dec.index]),
                                  dec.q_values.copy()))
        obs2, r, done, info = env.step(a)
        history.push(obs, a)
        s2 = history.encode(obs2)
        if buffer is not None:
            buffer.push(rl.Transition(s, a, r * cfg.reward_scale, s2, done), episode_id)
        if learn:
            for _ in range(cfg.updates_per_step):
                losses.append(agent.update(buffer))
        total += r
        steps += 1
        obs, s = obs2, s2
        if done or info["truncated"] or (max_steps is not None and steps >= max_steps):
            break
    if not env.world.finished:
        env.world.finish()
    return total, steps, losses


def train(cfg: RunConfig, progress: bool = False) -> TrainResult:
    """Joint training: buffer warm-up, then per-step proposal, selection, storage and updates."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    save_config(cfg, out / "config.txt")

    env = make_env(cfg)
    agent = HybridAgent(cfg, env.obs_dim, env.act_dim)
    buffer = rl.ReplayBuffer(cfg.buffer_capacity, agent.state_dim, env.act_dim)
    history = History(cfg.L, env.obs_dim, env.act_dim)

    episode_id = 0
    while len(buffer) < cfg.warmup_steps:
        run_episode(env, agent, history, explore=True, buffer=buffer, warmup=True,
                    episode_id=episode_id, max_steps=cfg.warmup_steps - len(buffer))
        episode_id += 1
    if not cfg.diffusion_continual and agent.uses_diffusion:
        # train the generator on the warm-up data, then freeze it
        for _ in range(cfg.warmup_steps):
            agent.update(buffer)
        agent.train_diffusion = False

    logs: list[EpisodeLog] = []
    decisions = [] if cfg.log_decisions else None
    for m in range(1, cfg.episodes + 1):
        t0 = time.perf_counter()
        total, steps, losses = run_episode(env, agent, history, explore=True, buffer=buffer,
                                           learn=True, episode_id=episode_id, decisions=decisions)
        episode_id += 1
        met = episode_metrics(env.world)
        entry = EpisodeLog(
            m, total, met.sdr, met.ec, met.ssn, met.collisions, steps,
            _nanmean([l.diffusion for l in losses]), _nanmean([l.critic1 for l in losses]),
            _nanmean([l.critic2 for l in losses]), time.perf_counter() - t0)
        for v in (entry.diffusion_loss, entry.critic1_loss, entry.critic2_loss):
            if math.isinf(v):
                raise TrainingError(f"episode {m}: non-finite loss {entry}")
        logs.append(entry)
        if progress:
            log.info("episode %d reward %.2f sdr %.3f ssn %d (%.1fs)", m, total, met.sdr,
                     met.ssn, entry.wall_time)
        if m % cfg.checkpoint_every == 0:
            agent.save(out / "checkpoints" / f"episode_{m:05d}.json")

    emit_csv([l.row() for l in logs], out / "episodes.csv", SCHEMAS["episodes"])
    if decisions is not None:
        emit_csv([(e, s, k, q, float(np.max(qs)), " ".join(repr(float(x)) for x in qs))
                  for e, s, k, q, qs in decisions], out / "decisions.csv", SCHEMAS["decisions"])
    ckpt = out / "checkpoint.json"
    agent.save(ckpt)
    return TrainResult(out, logs, ckpt, agent, decisions or [])


def load_agent(checkpoint, cfg: RunConfig) -> HybridAgent:
    return HybridAgent.load(checkpoint, cfg, observation_width(cfg.n_nearest), ACT_DIM)


# ---------------------------------------------------------------------------
# evaluation


EVAL_EPISODE_OFFSET = 1_000_000


def evaluate(checkpoint, cfg: RunConfig, n_episodes: int, seas=("es", "ves"),
             controllers=CONTROLLERS, out=None) -> list[dict]:
    """Frozen-policy rollouts for every (sea condition, controller) pair."""
    if n_episodes < 1:
        raise UsageError("evaluate needs at least one episode")
    rows = []
    for sea in seas:
        for ctrl in controllers:
            agent = load_agent(checkpoint, cfg)
            env = make_env(cfg, sea=parse_sea(sea).value, controller=parse_controller(ctrl))
            env.episode = EVAL_EPISODE_OFFSET - 1
            history = History(cfg.L, env.obs_dim, env.act_dim)
            rewards, mets = [], []
            for _ in range(n_episodes):
                total, _, _ = run_episode(env, agent, history, explore=False)
                rewards.append(total)
                mets.append(episode_metrics(env.world))
            arr = lambda f: np.array([getattr(m, f) for m in mets], dtype=float)
            rows.append({
                "sea": parse_sea(sea).value, "controller": parse_controller(ctrl),
                "episodes": n_episodes,
                "reward_mean": float(np.mean(rewards)), "reward_std": float(np.std(rewards)),
                "sdr_mean": float(arr("sdr").mean()), "sdr_std": float(arr("sdr").std()),
                "ec_mean": float(arr("ec").mean()), "ec_std": float(arr("ec").std()),
                "ssn_mean": float(arr("ssn").mean()), "ssn_std": float(arr("ssn").std()),
                "collisions_mean": float(arr("collisions").mean()),
                "collisions_std": float(arr("collisions").std()),
            })
    if out is not None:
        emit_csv(rows, Path(out) / "eval_summary.csv", SCHEMAS["eval"])
    return rows


def reference_at(profile, t: float) -> tuple[float, float]:
    yaw, depth = profile[0][1], profile[0][2]
    for t0, y, d in profile:
        if t >= t0:
            yaw, depth = y, d
    return yaw, depth


def sign_flips(values) -> int:
    v = np.sign(np.asarray(values, dtype=float))
    v = v[v != 0]
    return int(np.count_nonzero(v[1:] != v[:-1]))


@dataclass
class TrackResult:
    series: list[dict]
    summary: dict


def track(cfg: RunConfig, controller: str, profile=None, sea: str | None = None,
          seed: int | None = None, out=None) -> TrackResult:
    """Closed-loop yaw/depth tracking of a piecewise-constant reference."""
    controller = parse_controller(controller)
    sea = parse_sea(sea or cfg.sea)
    profile = parse_profile(cfg.track_profile) if profile is None else profile
    seed = cfg.seed if seed is None else seed
    gains, vp, caps = cfg.gains(), cfg.vehicle(), cfg.sea_caps()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7AC]))
    yaw0, depth0 = reference_at(profile, 0.0)
    u0 = vp.v_max * cfg.track_cruise_rpm / vp.rpm_max
    s = AuvState(down=depth0, yaw=wrap_angle(yaw0), surge=u0)
    tracker = TrackerState.fresh(gains)
    dist = sample_disturbance(sea, 0.0, rng, caps=caps)
    series = []
    rud, ste = [], []
    for k in range(int(round(cfg.track_duration / DT))):
        t = k * DT
        ref = reference_at(profile, t)
        cmd = track_step(controller, ref, s, tracker, gains, cfg.track_cruise_rpm, vp=vp)
        s = step_dynamics(s, cmd, dist, vp=vp)
        dist = sample_disturbance(sea, t + DT, rng, dist, caps=caps)
        ey = wrap_angle(ref[0] - s.yaw)
        ed = ref[1] - s.down
        rud.append(cmd.rudder)
        ste.append(cmd.stern)
        series.append({"time": t + DT, "yaw_ref": ref[0], "yaw": s.yaw, "yaw_error": ey,
                       "depth_ref": ref[1], "depth": s.down, "depth_error": ed,
                       "rudder": cmd.rudder, "stern": cmd.stern})
    ey = np.array([r["yaw_error"] for r in series])
    ed = np.array([r["depth_error"] for r in series])
    summary = {
        "controller": controller, "sea": sea.value, "seed": seed,
        "yaw_mse": float(np.mean(ey ** 2)), "yaw_sq_std": float(np.std(ey ** 2)),
        "depth_mse": float(np.mean(ed ** 2)), "depth_sq_std": float(np.std(ed ** 2)),
        "yaw_abs_mean": float(np.mean(np.abs(ey))), "yaw_abs_std": float(np.std(np.abs(ey))),
        "depth_abs_mean": float(np.mean(np.abs(ed))), "depth_abs_std": float(np.std(np.abs(ed))),
        "sign_flips": sign_flips(rud) + sign_flips(ste),
    }
    if out is not None:
        out = Path(out)
        emit_csv(series, out / f"track_{controller}_{sea.value}_{seed}.csv",
                 SCHEMAS["track_series"])
        emit_csv([summary], out / f"track_{controller}_{sea.value}_{seed}_summary.csv",
                 SCHEMAS["track_summary"])
    return TrackResult(series, summary)


# ---------------------------------------------------------------------------
# denoising stages


@dataclass
class StageResult:
    trajectories: dict  # stage -> array (K, steps + 1, 3)
    q_values: dict  # stage -> array (K,)
    actions: dict  # stage -> array (K, act_dim)
    selected: dict  # stage -> index
    dispersion: dict  # stage -> mean pairwise distance


def mean_pairwise_distance(traj: np.ndarray) -> float:
    """Average over time and over candidate pairs of the Euclidean distance between positions."""
    K = traj.shape[0]
    if K < 2:
        return 0.0
    total, n = 0.0, 0
    for i in range(K):
        for j in range(i + 1, K):
            total += float(np.mean(np.linalg.norm(traj[i] - traj[j], axis=1)))
            n += 1
    return total / n


STAGE_EPISODE = 2_000_000


def stages(checkpoint, cfg: RunConfig, stage_list=None, out=None, seed: int | None = None,
           agent: HybridAgent | None = None) -> StageResult:
    """Execute the K candidates available at each requested denoising stage open-loop.

    Stage ``s`` is the chain state after ``s`` reverse iterations; the last
    stage equals the normal sampler output. Each candidate's stacked plan is
    played action by action and its final action held for the rest of the
    horizon.
    """
    stage_list = parse_stage_list(cfg.stages) if stage_list is None else list(stage_list)
    n_iter = len(strided_steps(cfg.T, cfg.sample_steps))
    for st in stage_list:
        if not (1 <= st <= n_iter):
            raise UsageError(f"stage {st} outside the reverse chain (1..{n_iter})")
    if agent is None:
        agent = load_agent(checkpoint, cfg)
    seed = cfg.seed if seed is None else seed
    agent.sample_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A6E]))

    def fresh_env():
        env = make_env(cfg, seed=seed)
        obs = env.reset(episode=STAGE_EPISODE)
        return env, obs

    env, obs = fresh_env()
    history = History(cfg.L, env.obs_dim, env.act_dim)
    s = history.encode(obs)
    trace: list = []
    agent.propose(s, trace=trace)
    d = env.act_dim
    res = StageResult({}, {}, {}, {}, {})
    for st in stage_list:
        plans = trace[st - 1]
        acts = plans[:, :d]
        _, k_sel, q = rl.select_action(agent.critics, s, acts)
        trajs = []
        for k in range(plans.shape[0]):
            env_k, _ = fresh_env()
            pts = [env_k.state.position]
            for step in range(cfg.stage_horizon):
                h = min(step, cfg.H - 1)
                env_k.step(plans[k, h * d:(h + 1) * d])
                pts.append(env_k.state.position)
                if env_k.world.finished:
                    break
            while len(pts) < cfg.stage_horizon + 1:
                pts.append(pts[-1])
            trajs.append(np.array(pts))
        traj = np.stack(trajs)
        res.trajectories[st] = traj
        res.q_values[st] = q
        res.actions[st] = acts
        res.selected[st] = k_sel
        res.dispersion[st] = mean_pairwise_distance(traj)
    if out is not None:
        out = Path(out)
        rows = [(st, k, i, *res.trajectories[st][k, i])
                for st in stage_list for k in range(cfg.K)
                for i in range(res.trajectories[st].shape[1])]
        emit_csv(rows, out / "stage_trajectories.csv", SCHEMAS["stage_trajectories"])
        rows = [(st, k, res.q_values[st][k], k == res.selected[st], *res.actions[st][k])
                for st in stage_list for k in range(cfg.K)]
        emit_csv(rows, out / "stage_summary.csv", SCHEMAS["stage_summary"])
        emit_csv([(st, res.dispersion[st]) for st in stage_list], out / "stage_dispersion.csv",
                 SCHEMAS["stage_dispersion"])
    return res
