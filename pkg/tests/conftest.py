import pytest

from auvdiff.config import RunConfig

TINY = dict(
    episodes=2, episode_steps=10, warmup_steps=20, batch_size=8, buffer_capacity=1000,
    diff_hidden=16, diff_depth=1, state_embed=16, time_raw=8, time_embed=16,
    critic_hidden=16, actor_hidden=16, sample_steps=5, L=2, checkpoint_every=1,
    log_decisions=True, eval_episodes=1, stage_horizon=6, stages="1,3,5", track_duration=5.0,
)


@pytest.fixture
def tiny(tmp_path):
    return RunConfig().with_(out=str(tmp_path / "run"), **TINY)


@pytest.fixture
def criterion(request):
    """Record one acceptance line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(n: int, ok: bool, detail: str):
        lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
