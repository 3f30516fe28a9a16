"""The hybrid policy: diffusion proposals scored by TD3 critics.

With ``policy = "vanilla"`` the same learner acts through its actor plus
Gaussian exploration noise and never touches the diffusion model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rl
from .config import RunConfig
from .core import adam_init, load_checkpoint, opt_step, save_checkpoint
from .diffusion import (
    DenoiserLayout,
    DenoiserNet,
    build_schedule,
    diffusion_loss,
    encoded_width,
    sample_candidates,
)
from .errors import LoadError, TrainingError


@dataclass
class Decision:
    action: np.ndarray
    index: int
    q_values: np.ndarray | None
    candidates: np.ndarray | None


@dataclass
class UpdateStats:
    diffusion: float = float("nan")
    critic1: float = float("nan")
    critic2: float = float("nan")


class HybridAgent:
    def __init__(self, cfg: RunConfig, obs_dim: int, act_dim: int, seed: int | None = None):
        self.cfg = cfg
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.state_dim = encoded_width(obs_dim, act_dim, cfg.L)
        seed = cfg.seed if seed is None else seed
        ss = np.random.SeedSequence([seed, 0xA11CE])
        net_seeds = ss.spawn(4)
        stream_seeds = ss.spawn(3)
        self.update_rng = np.random.default_rng(stream_seeds[0])
        self.sample_rng = np.random.default_rng(stream_seeds[1])
        self.explore_rng = np.random.default_rng(stream_seeds[2])

        self.schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.layout = DenoiserLayout(
            x_dim=cfg.H * act_dim, state_dim=self.state_dim, state_embed=cfg.state_embed,
            time_raw=cfg.time_raw, time_embed=cfg.time_embed, hidden=cfg.diff_hidden,
            depth=cfg.diff_depth, tau=cfg.time_tau,
        )
        self.denoiser = DenoiserNet(self.layout, seed=int(net_seeds[0].generate_state(1)[0]))
        self.critics = rl.CriticPair.create(self.state_dim, act_dim, cfg.critic_hidden,
                                            int(net_seeds[1].generate_state(1)[0]))
        self.actor = rl.Actor.create(self.state_dim, act_dim, cfg.actor_hidden,
                                     int(net_seeds[2].generate_state(1)[0]))
        self.target_critics = self.critics.copy()
        self.target_actor = self.actor.copy()

        self.opt_diffusion = adam_init(self.denoiser.params, cfg.lr_diffusion)
        self.opt_q1 = adam_init(self.critics.q1, cfg.lr_rl)
        self.opt_q2 = adam_init(self.critics.q2, cfg.lr_rl)
        self.opt_actor = adam_init(self.actor.params, cfg.lr_rl)
        self.n_updates = 0
        self.train_diffusion = cfg.policy == "diffusion"

    @property
    def uses_diffusion(self) -> bool:
        return self.cfg.policy == "diffusion"

    # -- acting ------------------------------------------------------------

    def propose(self, s, stop_at: int | None = None, trace: list | None = None):
        return sample_candidates(self.denoiser, s, self.cfg.K, self.schedule,
                                 self.cfg.sample_steps, self.sample_rng, act_dim=self.act_dim,
                                 stop_at=stop_at, trace=trace)

    def act(self, s, explore: bool = True) -> Decision:
        """Behaviour action for encoded state ``s``.

        Diffusion policy: argmax of min(Q1, Q2) over K denoised candidates.
        Vanilla policy: actor output, plus clipped Gaussian noise when exploring.
        """
        if self.uses_diffusion:
            cands = self.propose(s)
            action, k, q = rl.select_action(self.critics, s, cands)
            return Decision(action, k, q, cands.actions)
        a = self.actor(s)
        if explore and self.cfg.explore_sigma > 0:
            a = a + self.explore_rng.normal(0.0, self.cfg.explore_sigma, size=a.shape)
        return Decision(np.clip(a, -1.0, 1.0), 0, None, None)

    def warmup_action(self, s) -> np.ndarray:
        """Pre-fill behaviour: one raw diffusion sample, or uniform noise for the vanilla learner."""
        if self.uses_diffusion:
            cands = sample_candidates(self.denoiser, s, 1, self.schedule, self.cfg.sample_steps,
                                      self.sample_rng, act_dim=self.act_dim)
            return cands.actions[0].copy()
        return self.explore_rng.uniform(-1.0, 1.0, size=self.act_dim)

    # -- learning ----------------------------------------------------------

    def update(self, buffer: rl.ReplayBuffer) -> UpdateStats:
        cfg = self.cfg
        stats = UpdateStats()
        n = min(cfg.batch_size, len(buffer))
        batch = buffer.sample(n, self.update_rng, horizon=cfg.H if self.train_diffusion else 1)

        if self.train_diffusion:
            loss, grads = diffusion_loss(self.denoiser, batch.plan, batch.s, self.schedule,
                                         self.update_rng)
            if not np.isfinite(loss):
                raise TrainingError(f"diffusion loss became non-finite at update {self.n_updates}")
            self.denoiser.params, self.opt_diffusion = opt_step(self.denoiser.params, grads,
                                                                self.opt_diffusion)
            stats.diffusion = loss

        (self.critics, self.opt_q1, self.opt_q2, l1, l2, _) = rl.critic_update(
            self.critics, self.target_critics, self.target_actor, batch, cfg.gamma,
            cfg.target_sigma, cfg.noise_clip, self.update_rng, self.opt_q1, self.opt_q2)
        if not (np.isfinite(l1) and np.isfinite(l2)):
            raise TrainingError(f"critic loss became non-finite at update {self.n_updates}")
        stats.critic1, stats.critic2 = l1, l2

        self.n_updates += 1
        self.actor, self.opt_actor, g = rl.actor_update(
            self.actor, self.critics, batch.s, self.n_updates, self.opt_actor, cfg.policy_delay)
        if g is not None:
            self.target_critics = rl.soft_update_pair(self.target_critics, self.critics, cfg.tau_soft)
            self.target_actor = rl.soft_update_actor(self.target_actor, self.actor, cfg.tau_soft)
        return stats

    # -- persistence -------------------------------------------------------

    def header(self) -> dict:
        cfg = self.cfg
        return {
            "policy": cfg.policy, "obs_dim": self.obs_dim, "act_dim": self.act_dim,
            "state_dim": self.state_dim, "L": cfg.L, "H": cfg.H, "K": cfg.K,
            "T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end,
            "sample_steps": cfg.sample_steps, "layout": self.layout.__dict__,
            "critic_hidden": cfg.critic_hidden, "actor_hidden": cfg.actor_hidden,
            "n_updates": self.n_updates,
        }

    def save(self, path) -> None:
        save_checkpoint(path, {
            "denoiser": self.denoiser.params,
            "critic1": self.critics.q1, "critic2": self.critics.q2,
            "target_critic1": self.target_critics.q1, "target_critic2": self.target_critics.q2,
            "actor": self.actor.params, "target_actor": self.target_actor.params,
        }, self.header())

    @classmethod
    def load(cls, path, cfg: RunConfig, obs_dim: int, act_dim: int) -> "HybridAgent":
        nets, header = load_checkpoint(path)
        agent = cls(cfg, obs_dim, act_dim)
        mine = agent.header()
        for key in ("obs_dim", "act_dim", "state_dim", "H", "layout", "critic_hidden",
                    "actor_hidden"):
            if header.get(key) != mine[key]:
                raise LoadError(f"checkpoint {key}={header.get(key)!r} does not match "
                                f"configuration {mine[key]!r}")
        try:
            agent.denoiser.params = _match(nets["denoiser"], agent.denoiser.params)
            agent.critics = rl.CriticPair(agent.critics.spec,
                                          _match(nets["critic1"], agent.critics.q1),
                                          _match(nets["critic2"], agent.critics.q2))
            agent.target_critics = rl.CriticPair(agent.critics.spec,
                                                 _match(nets["target_critic1"], agent.critics.q1),
                                                 _match(nets["target_critic2"], agent.critics.q2))
            agent.actor = rl.Actor(agent.actor.spec, _match(nets["actor"], agent.actor.params))
            agent.target_actor = rl.Actor(agent.actor.spec,
                                          _match(nets["target_actor"], agent.actor.params))
        except KeyError as exc:
            raise LoadError(f"checkpoint lacks network {exc}") from exc
        agent.n_updates = int(header.get("n_updates", 0))
        return agent


def _match(loaded, like):
    if loaded.names() != like.names() or any(
            loaded[k].shape != like[k].shape for k in like.names()):
        raise LoadError("checkpoint tensor layout does not match the configured network")
    return loaded
