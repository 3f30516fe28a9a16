"""Acceptance gates, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting. The five-seed training sweep is shared by the decision audit,
the convergence comparison and the stage-dispersion check.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from auvdiff import harness, rl
from auvdiff.config import RunConfig, load_config
from auvdiff.core import check_gradients, net_init
from auvdiff.diffusion import (DenoiserLayout, DenoiserNet, build_schedule, diffusion_loss_at,
                               encoded_width, forward_step, strided_steps)
from auvdiff.dynamics import (DT, ActuatorCommand, AuvState, ControllerGains, Disturbance,
                              SeaCondition, s_surface, sample_disturbance, step_dynamics)
from auvdiff.task import ACT_DIM, AuvTaskEnv, observation_width

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.cfg"
SEEDS = range(5)
FINAL_WINDOW = 20


# -- 1 -----------------------------------------------------------------------

def test_c01_schedule(criterion):
    t0 = time.perf_counter()
    sch = build_schedule(1000, 1e-4, 0.02)
    ends = sch.beta[0] == 1e-4 and sch.beta[-1] == 0.02
    decreasing = bool(np.all(np.diff(sch.alpha_bar) < 0))
    prod = np.array([math.prod(1.0 - sch.beta[: t + 1]) for t in range(1000)])
    err = float(np.max(np.abs(prod - sch.alpha_bar)))
    dt = time.perf_counter() - t0
    ok = ends and decreasing and err <= 1e-12 and dt < 1.0
    criterion(1, ok, f"endpoints={ends} decreasing={decreasing} product err={err:.1e} {dt:.2f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_c02_forward_marginals(criterion):
    t0 = time.perf_counter()
    sch = build_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    N, x0 = 100_000, 0.7
    x = np.full(N, x0)
    worst_var, worst_mean = 0.0, 0.0
    for t in range(1, 1001):
        x = forward_step(x, t, rng.standard_normal(N), sch)
        if t in (1, 10, 100, 500, 1000):
            ab = sch.alpha_bar[t - 1]
            worst_var = max(worst_var, abs(x.var() / (1 - ab) - 1))
            worst_mean = max(worst_mean, abs(x.mean() - math.sqrt(ab) * x0) / math.sqrt((1 - ab) / N))
    dt = time.perf_counter() - t0
    ok = worst_var <= 0.02 and worst_mean <= 4.0 and dt < 10.0
    criterion(2, ok, f"max rel var err={worst_var:.4f} max mean z={worst_mean:.2f} {dt:.2f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_c03_gradients(criterion):
    t0 = time.perf_counter()
    cfg = RunConfig()
    obs = observation_width(cfg.n_nearest)
    sd = encoded_width(obs, ACT_DIM, cfg.L)
    rng = np.random.default_rng(0)
    B = 4
    s = rng.normal(size=(B, sd))

    lo = DenoiserLayout(x_dim=cfg.H * ACT_DIM, state_dim=sd, state_embed=cfg.state_embed,
                        time_raw=cfg.time_raw, time_embed=cfg.time_embed, hidden=cfg.diff_hidden,
                        depth=cfg.diff_depth, tau=cfg.time_tau)
    net = DenoiserNet(lo, seed=1)
    sch = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    x0 = rng.uniform(-1, 1, (B, lo.x_dim))
    t, eps = rng.integers(1, 1001, B), rng.normal(size=(B, lo.x_dim))
    _, g = diffusion_loss_at(net, x0, s, t, eps, sch)
    fn = lambda p: diffusion_loss_at(net, x0, s, t, eps, sch, params=p)[0]
    e_den = check_gradients(fn, net.params, g, eps=1e-5, probes=300)

    pair = rl.CriticPair.create(sd, ACT_DIM, cfg.critic_hidden, 2)
    a, y = rng.uniform(-1, 1, (B, ACT_DIM)), rng.normal(size=B)
    _, g = rl.critic_loss_grads(pair, 1, s, a, y)
    fn = lambda p: rl.critic_loss_grads(rl.CriticPair(pair.spec, p, pair.q2), 1, s, a, y)[0]
    e_q1 = check_gradients(fn, pair.q1, g, eps=1e-5, probes=300)
    _, g = rl.critic_loss_grads(pair, 2, s, a, y)
    fn = lambda p: rl.critic_loss_grads(rl.CriticPair(pair.spec, pair.q1, p), 2, s, a, y)[0]
    e_q2 = check_gradients(fn, pair.q2, g, eps=1e-5, probes=300)

    actor = rl.Actor.create(sd, ACT_DIM, cfg.actor_hidden, 3)
    _, g = rl.actor_objective_grads(actor, pair, s)
    fn = lambda p: rl.actor_objective_grads(rl.Actor(actor.spec, p), pair, s)[0]
    e_act = check_gradients(fn, actor.params, g, eps=1e-5, probes=300)

    worst = max(e_den, e_q1, e_q2, e_act)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 30.0
    criterion(3, ok, f"denoiser={e_den:.1e} q1={e_q1:.1e} q2={e_q2:.1e} actor={e_act:.1e} {dt:.1f}s")
    assert ok


# -- 4, 8, 10: shared sweep ----------------------------------------------------

@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    base = load_config(DESK)
    root = tmp_path_factory.mktemp("sweep")
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        for policy in ("diffusion", "vanilla"):
            cfg = base.with_(seed=seed, policy=policy, out=str(root / f"{policy}{seed}"),
                             log_decisions=policy == "diffusion")
            runs[policy, seed] = (cfg, harness.train(cfg))
    return runs, time.perf_counter() - t0


def test_c04_selection_audit(sweep, criterion):
    runs, _ = sweep
    n = violations = 0
    for seed in SEEDS:
        cfg, res = runs["diffusion", seed]
        for row in harness.read_csv(res.out / "decisions.csv"):
            qs = [float(x) for x in row["q_values"].split()]
            n += 1
            if float(row["chosen_q"]) != max(qs) or qs[int(row["index"])] != max(qs):
                violations += 1
    ok = n >= 10_000 and violations == 0
    criterion(4, ok, f"{n} logged decisions, {violations} violations")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_c05_td3_target(criterion):
    rng = np.random.default_rng(0)
    sd, B = 6, 512
    targets = rl.CriticPair.create(sd, ACT_DIM, 32, 0)
    actor = rl.Actor.create(sd, ACT_DIM, 32, 1)
    r, s2 = rng.normal(size=B), rng.normal(size=(B, sd))
    done = (rng.random(B) < 0.2).astype(float)
    y0 = rl.td3_target(r, s2, done, targets, actor, 0.0, 0.2, 0.5, rng)
    exact = bool(np.array_equal(y0, r))
    noise = rl.target_noise((B, ACT_DIM), 0.2, 0.5, rng)
    args = (r, s2, done, targets, actor, 0.99, 0.2, 0.5, rng)
    ym = rl.td3_target(*args, noise=noise)
    y1 = rl.td3_target(*args, noise=noise, reduce="q1")
    y2 = rl.td3_target(*args, noise=noise, reduce="q2")
    pointwise = bool(np.all(ym <= y1) and np.all(ym <= y2))
    draws = rl.target_noise((100_000,), 0.2, 0.5, np.random.default_rng(1))
    bounded = float(np.max(np.abs(draws)))
    ok = exact and pointwise and bounded <= 0.5
    criterion(5, ok, f"gamma=0 exact={exact} min<=single={pointwise} max|noise|={bounded:.3f}")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_c06_s_surface(criterion):
    g = ControllerGains(zeta1=2.0, zeta2=2.0)
    direct = 2.0 / (1.0 + math.exp(-(2.0 * 0.5 + 2.0 * -0.1))) - 1.0
    err = abs(s_surface(0.5, -0.1, g, 0.0) - direct)
    # beyond |z| ~ 37 tanh rounds to exactly 1.0 in float64, so the grid spans the operating range
    grid = np.linspace(-5, 5, 100)
    odd = all(s_surface(-e, -d, g, 0.0) == -s_surface(e, d, g, 0.0) for e in grid for d in grid)
    inside = all(-1.0 < s_surface(e, d, g, 0.0) < 1.0 for e in grid for d in grid)
    ok = err <= 1e-12 and odd and inside
    criterion(6, ok, f"|u-direct|={err:.1e} odd={odd} inside(-1,1)={inside}")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_c07_dynamics_caps(criterion):
    rng = np.random.default_rng(7)
    s, dist = AuvState(down=10.0), None
    max_speed = max_rate = 0.0
    for i in range(100_000):
        if i % 2000 == 0:
            s, dist = AuvState(down=10.0, surge=rng.uniform(0, 2.3)), None
            cond = (SeaCondition.ES, SeaCondition.VES)[i // 2000 % 2]
        dist = sample_disturbance(cond, i * DT, rng, dist)
        if i % 5 == 0:
            dist = Disturbance(rng.uniform(-2, 2, 3), rng.uniform(-5, 5, 3), 0.0)
        cmd = ActuatorCommand(rng.uniform(0, 1525), rng.uniform(-1, 1), rng.uniform(-1, 1))
        s = step_dynamics(s, cmd, dist)
        max_speed = max(max_speed, s.speed)
        max_rate = max(max_rate, abs(s.yaw_rate))
    ok = max_speed <= 2.3 and max_rate <= 0.26
    criterion(7, ok, f"max speed={max_speed:.4f} m/s max |yaw rate|={max_rate:.4f} rad/s")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_c08_convergence(sweep, criterion):
    runs, elapsed = sweep
    wins, detail = 0, []
    for seed in SEEDS:
        d = np.mean([l.reward for l in runs["diffusion", seed][1].logs[-FINAL_WINDOW:]])
        v = np.mean([l.reward for l in runs["vanilla", seed][1].logs[-FINAL_WINDOW:]])
        wins += d >= v
        detail.append(f"{d:.1f}/{v:.1f}")
    ok = wins >= 4 and elapsed <= 1800
    criterion(8, ok, f"diffusion>=vanilla in {wins}/5 seeds ({' '.join(detail)}) {elapsed:.0f}s")
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_c09_controller_ordering(criterion):
    t0 = time.perf_counter()
    cfg = RunConfig()
    wins = {"es": 0, "ves": 0}
    chatter = True
    for sea in wins:
        for seed in SEEDS:
            a = harness.track(cfg, "ssurface", sea=sea, seed=seed).summary
            b = harness.track(cfg, "smc", sea=sea, seed=seed).summary
            wins[sea] += a["yaw_mse"] + a["depth_mse"] < b["yaw_mse"] + b["depth_mse"]
            chatter &= b["sign_flips"] > a["sign_flips"]
    dt = time.perf_counter() - t0
    ok = wins["es"] >= 4 and wins["ves"] >= 4 and chatter and dt <= 600
    criterion(9, ok, f"ssurface<smc MSE: ES {wins['es']}/5 VES {wins['ves']}/5; "
                     f"smc flips more in every run={chatter} {dt:.1f}s")
    assert ok


# -- 10 ----------------------------------------------------------------------

def test_c10_stage_dispersion(sweep, criterion):
    runs, _ = sweep
    wins, detail = 0, []
    for seed in SEEDS:
        cfg, res = runs["diffusion", seed]
        last = len(strided_steps(cfg.T, cfg.sample_steps))
        st = harness.stages(res.checkpoint, cfg, stage_list=[1, last], seed=seed)
        first, final = st.dispersion[1], st.dispersion[last]
        wins += first > final
        detail.append(f"{first:.2f}>{final:.2f}")
    ok = wins >= 4
    criterion(10, ok, f"earliest>final in {wins}/5 seeds ({' '.join(detail)})")
    assert ok


# -- 11 ----------------------------------------------------------------------

def test_c11_determinism(tmp_path, criterion):
    cfg = load_config(DESK).with_(episodes=3, checkpoint_every=1, log_decisions=True,
                                  warmup_steps=100)
    cfg = cfg.with_(out=str(tmp_path / "run"))
    out = harness.train(cfg).out
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    first = {f: (out / f).read_bytes() for f in files}
    for f in files:
        (out / f).unlink()
    harness.train(cfg)
    same = all((out / f).read_bytes() == first[f] for f in files)
    ok = same and len(files) >= 6
    criterion(11, ok, f"{len(files)} files compared, identical={same}")
    assert ok


# -- 12 ----------------------------------------------------------------------

def test_c12_bookkeeping(criterion):
    worst_cons = worst_dec = 0.0
    base = RunConfig()
    for ep in range(100):
        rng = np.random.default_rng(ep)
        w = rng.uniform(0.1, 10, 4)
        cfg = base.with_(n_nodes=int(rng.integers(1, 6)), node_data=float(rng.uniform(0.5, 8)),
                         service_radius=float(rng.uniform(10, 40)), episode_steps=60,
                         w_rate=w[0], w_energy=w[1], w_collision=w[2], w_serve=w[3],
                         sea=("ideal", "es", "ves")[ep % 3])
        env = AuvTaskEnv(cfg.env(), ep)
        env.reset()
        initial = sum(n.data for n in env.world.nodes)
        drained = 0.0
        while True:
            _, reward, done, info = env.step(rng.uniform(-1, 1, 3))
            ticks = info["ticks"]
            worst_dec = max(worst_dec, abs(reward - sum(t.reward for t in ticks)))
            for t in ticks:
                drained += t.drained
                parts = (w[0] * t.rate + w[3] * t.newly_served - w[1] * t.power
                         - w[2] * t.collisions)
                worst_dec = max(worst_dec, abs(t.reward - parts))
            if done or info["truncated"]:
                break
        remaining = sum(n.data for n in env.world.nodes)
        worst_cons = max(worst_cons, abs(initial - remaining - drained),
                         abs(env.world.total_data - drained))
    ok = worst_cons <= 1e-9 and worst_dec <= 1e-9
    criterion(12, ok, f"conservation err={worst_cons:.1e} decomposition err={worst_dec:.1e}")
    assert ok
