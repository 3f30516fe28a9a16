"""Command line entry point: ``auvdiff {train,eval,track,stages}``.

Exit status is 0 on success, 2 for configuration or usage errors and 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import RunConfig, load_config
from .dynamics import CONTROLLERS
from .errors import AuvDiffError, ConfigError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="auvdiff", description="Diffusion-guided TD3 control of an AUV.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--controller", choices=CONTROLLERS)
    common.add_argument("--sea", choices=("ideal", "es", "ves"))
    common.add_argument("-v", "--verbose", action="store_true")

    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="joint diffusion and TD3 training")
    t.add_argument("--episodes", type=int)
    t.add_argument("--policy", choices=("diffusion", "vanilla"))

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint per sea and controller")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--episodes", type=int)

    k = sub.add_parser("track", parents=[common], help="yaw/depth reference tracking")
    k.add_argument("--profile", help="t:yaw,depth;... reference segments")

    s = sub.add_parser("stages", parents=[common], help="open-loop rollouts per denoising stage")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--stages", help="comma separated stage indices")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    changes = {}
    for key in ("seed", "controller", "sea", "policy"):
        v = getattr(args, key, None)
        if v is not None:
            changes[key] = v
    if args.out is not None:
        changes["out"] = str(args.out)
    if getattr(args, "profile", None):
        changes["track_profile"] = args.profile
    if getattr(args, "stages", None):
        changes["stages"] = args.stages
    eps = getattr(args, "episodes", None)
    if eps is not None:
        changes["episodes" if args.command == "train" else "eval_episodes"] = eps
    return cfg.with_(**changes) if changes else cfg


def run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    if args.command == "train":
        res = harness.train(cfg, progress=True)
        print(f"trained {len(res.logs)} episodes; checkpoint {res.checkpoint}")
    elif args.command == "eval":
        if getattr(args, "episodes", None) == 0:
            raise UsageError("eval needs at least one episode")
        seas = (cfg.sea,) if args.sea else ("es", "ves")
        ctrls = (cfg.controller,) if args.controller else CONTROLLERS
        rows = harness.evaluate(args.checkpoint, cfg, cfg.eval_episodes, seas, ctrls, out)
        for r in rows:
            print(f"{r['sea']:5s} {r['controller']:8s} reward {r['reward_mean']:.3f} "
                  f"sdr {r['sdr_mean']:.4f} ec {r['ec_mean']:.3f} ssn {r['ssn_mean']:.2f}")
    elif args.command == "track":
        ctrls = (cfg.controller,) if args.controller else CONTROLLERS
        for c in ctrls:
            s = harness.track(cfg, c, out=out).summary
            print(f"{c:8s} yaw mse {s['yaw_mse']:.5f} depth mse {s['depth_mse']:.5f} "
                  f"flips {s['sign_flips']}")
    elif args.command == "stages":
        res = harness.stages(args.checkpoint, cfg, out=out)
        for st, d in res.dispersion.items():
            print(f"stage {st:4d} dispersion {d:.4f} selected {res.selected[st]}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AuvDiffError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
