import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from auvdiff import rl
from auvdiff.core import NetSpec, ParamSet, adam_init, check_gradients, net_init, opt_step
from auvdiff.errors import ConfigError, ShapeError, UsageError

SD, AD = 4, 2


def linear_critic(w_action, bias=0.0, sd=SD, ad=AD):
    """Q(s, a) = w . a + bias (state ignored)."""
    spec = NetSpec((sd + ad, 1), ("identity",))
    W = np.zeros((sd + ad, 1))
    W[sd:, 0] = w_action
    return spec, ParamSet({"W0": W, "b0": np.array([bias])})


def constant_pair(c1, c2):
    spec, p1 = linear_critic(np.zeros(AD), c1)
    _, p2 = linear_critic(np.zeros(AD), c2)
    return rl.CriticPair(spec, p1, p2)


def random_pair(seed=0, hidden=8):
    return rl.CriticPair.create(SD, AD, hidden, seed)


def batch(n=6, seed=0, done=None):
    rng = np.random.default_rng(seed)
    return rl.Batch(rng.normal(size=(n, SD)), rng.uniform(-1, 1, (n, AD)), rng.normal(size=n),
                    rng.normal(size=(n, SD)),
                    np.zeros(n) if done is None else np.asarray(done, dtype=float))


class TestCritic:
    def test_zero_weight(self):
        pair = random_pair()
        zero = rl.CriticPair(pair.spec, pair.q1.map(np.zeros_like), pair.q2.map(np.zeros_like))
        assert rl.critic_q(zero, 1, np.ones(SD), np.ones(AD)) == 0.0

    def test_deterministic_and_straight_line(self):
        pair = random_pair(3)
        s, a = np.linspace(-1, 1, SD), np.array([0.2, -0.7])
        q = rl.critic_q(pair, 2, s, a)
        assert q == rl.critic_q(pair, 2, s, a)
        p = pair.q2
        h = np.concatenate([s, a])
        h = np.maximum(h @ p["W0"] + p["b0"], 0)
        h = np.maximum(h @ p["W1"] + p["b1"], 0)
        assert q == pytest.approx(float((h @ p["W2"] + p["b2"])[0]), abs=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            rl.critic_q(random_pair(), 1, np.ones(SD + 1), np.ones(AD))

    def test_bad_index(self):
        with pytest.raises(UsageError):
            rl.critic_q(random_pair(), 3, np.ones(SD), np.ones(AD))

    def test_independent_params(self):
        pair = random_pair(1)
        assert not pair.q1.equals(pair.q2)


class TestSelect:
    def test_single(self):
        a, k, q = rl.select_action(random_pair(), np.zeros(SD), np.array([[0.3, 0.1]]))
        assert k == 0 and a.tolist() == [0.3, 0.1]

    def test_hand_built(self):
        spec, p = linear_critic([1.0, 0.0])
        pair = rl.CriticPair(spec, p, p)
        cands = np.array([[0.1, 0.0], [0.9, 0.0], [0.5, 0.0]])
        _, k, q = rl.select_action(pair, np.zeros(SD), cands)
        assert k == 1 and q.tolist() == [0.1, 0.9, 0.5]

    def test_ties_lowest_index(self):
        _, k, _ = rl.select_action(constant_pair(1.0, 1.0), np.zeros(SD), np.zeros((4, AD)))
        assert k == 0

    def test_uses_min_of_twins(self):
        spec, p1 = linear_critic([1.0, 0.0])
        _, p2 = linear_critic([-1.0, 0.0])
        pair = rl.CriticPair(spec, p1, p2)
        # min(a0, -a0) = -|a0| is largest at a0 closest to zero
        _, k, _ = rl.select_action(pair, np.zeros(SD), np.array([[0.8, 0], [-0.1, 0], [0.4, 0]]))
        assert k == 1

    def test_empty(self):
        with pytest.raises(UsageError):
            rl.select_action(random_pair(), np.zeros(SD), np.zeros((0, AD)))

    def test_random_trials_match_external_scoring(self):
        rng = np.random.default_rng(0)
        pair = random_pair(5)
        for _ in range(1000):
            s = rng.normal(size=SD)
            cands = rng.uniform(-1, 1, (5, AD))
            _, k, q = rl.select_action(pair, s, cands)
            ext = [min(rl.critic_q(pair, 1, s, c), rl.critic_q(pair, 2, s, c)) for c in cands]
            # batched and single-row matmuls may differ in the last ulp
            np.testing.assert_allclose(q, ext, rtol=0, atol=1e-12)
            assert k == int(np.argmax(q))
            assert q[k] == np.max(q)
            if np.sort(ext)[-1] - np.sort(ext)[-2] > 1e-12:
                assert k == int(np.argmax(ext))

    @settings(max_examples=30, deadline=None)
    @given(scale=st.floats(0.01, 100.0), shift=st.floats(-100.0, 100.0), seed=st.integers(0, 10**6))
    def test_affine_invariance(self, scale, shift, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=AD)
        spec, p = linear_critic(w)
        _, p2 = linear_critic(scale * w, shift)
        cands = rng.uniform(-1, 1, (5, AD))
        _, k1, _ = rl.select_action(rl.CriticPair(spec, p, p), np.zeros(SD), cands)
        _, k2, _ = rl.select_action(rl.CriticPair(spec, p2, p2), np.zeros(SD), cands)
        assert k1 == k2

    def test_bounded_output(self):
        a, _, _ = rl.select_action(random_pair(), np.zeros(SD), np.array([[3.0, -4.0]]))
        assert np.all(np.abs(a) <= 1)


class TestTarget:
    def setup_method(self):
        self.actor = rl.Actor.create(SD, AD, 8, 0)
        self.rng = np.random.default_rng(0)

    def test_gamma_zero(self):
        y = rl.td3_target(1.7, np.ones(SD), False, random_pair(), self.actor, 0.0, 0.2, 0.5, self.rng)
        assert y == 1.7

    def test_done(self):
        y = rl.td3_target(-2.5, np.ones(SD), True, random_pair(), self.actor, 0.99, 0.2, 0.5, self.rng)
        assert y == -2.5

    def test_constant_critics(self):
        y = rl.td3_target(1.0, np.ones(SD), False, constant_pair(2.0, 5.0), self.actor, 0.99, 0.0,
                          0.5, self.rng)
        assert y == pytest.approx(2.98, abs=1e-15)

    def test_conservative(self):
        b = batch(200, 1)
        noise = rl.target_noise((200, AD), 0.2, 0.5, np.random.default_rng(3))
        args = (b.r, b.s_next, b.done, random_pair(2), self.actor, 0.99, 0.2, 0.5, self.rng)
        y = rl.td3_target(*args, noise=noise)
        y1 = rl.td3_target(*args, noise=noise, reduce="q1")
        y2 = rl.td3_target(*args, noise=noise, reduce="q2")
        assert np.all(y <= y1) and np.all(y <= y2)

    def test_noise_clipped(self):
        n = rl.target_noise((100_000,), 1.0, 0.5, np.random.default_rng(0))
        assert np.max(np.abs(n)) <= 0.5
        assert np.any(np.abs(n) == 0.5)

    def test_noise_clip_positive(self):
        with pytest.raises(ConfigError):
            rl.target_noise((3,), 0.2, 0.0, self.rng)

    def test_bad_gamma(self):
        with pytest.raises(ConfigError):
            rl.td3_target(0.0, np.ones(SD), False, random_pair(), self.actor, 1.5, 0.2, 0.5, self.rng)


class TestCriticUpdate:
    def test_zero_loss_when_consistent(self):
        # Q == 0 everywhere, rewards 0: targets 0, loss 0
        pair = constant_pair(0.0, 0.0)
        b = batch(5)
        b.r[:] = 0.0
        opt = adam_init(pair.q1, 1e-3)
        _, _, _, l1, l2, _ = rl.critic_update(pair, pair.copy(), rl.Actor.create(SD, AD, 4, 0), b,
                                              0.99, 0.0, 0.5, np.random.default_rng(0), opt, opt)
        assert l1 == 0.0 and l2 == 0.0

    def test_single_item_hand_computed(self):
        pair = constant_pair(1.0, 3.0)
        tgt = constant_pair(2.0, 5.0)
        b = rl.Batch(np.zeros((1, SD)), np.zeros((1, AD)), np.array([0.5]), np.zeros((1, SD)),
                     np.array([0.0]))
        opt = adam_init(pair.q1, 1e-3)
        _, _, _, l1, l2, _ = rl.critic_update(pair, tgt, rl.Actor.create(SD, AD, 4, 0), b, 0.9,
                                              0.0, 0.5, np.random.default_rng(0), opt, opt)
        y = 0.5 + 0.9 * 2.0
        assert l1 == pytest.approx((1.0 - y) ** 2) and l2 == pytest.approx((3.0 - y) ** 2)

    def test_empty(self):
        pair = random_pair()
        b = rl.Batch(*(np.zeros((0,) + sh) for sh in [(SD,), (AD,), (), (SD,), ()]))
        opt = adam_init(pair.q1, 1e-3)
        with pytest.raises(UsageError):
            rl.critic_update(pair, pair, rl.Actor.create(SD, AD, 4, 0), b, 0.9, 0.0, 0.5,
                             np.random.default_rng(0), opt, opt)

    def test_loss_gradient(self):
        pair = random_pair(4, hidden=5)
        b = batch(4, 2)
        y = b.r * 2
        _, g = rl.critic_loss_grads(pair, 1, b.s, b.a, y)

        def fn(p):
            return rl.critic_loss_grads(rl.CriticPair(pair.spec, p, pair.q2), 1, b.s, b.a, y)[0]

        assert check_gradients(fn, pair.q1, g) <= 1e-4

    def test_two_parameter_critic(self):
        spec = NetSpec((1, 1), ("identity",))
        p = ParamSet({"W0": np.array([[0.7]]), "b0": np.array([-0.2])})
        pair = rl.CriticPair(spec, p, p)
        s, a = np.zeros((3, 0)), np.array([[0.1], [-0.5], [0.9]])
        y = np.array([1.0, 0.0, -1.0])
        _, g = rl.critic_loss_grads(pair, 1, s, a, y)
        fn = lambda q: rl.critic_loss_grads(rl.CriticPair(spec, q, q), 1, s, a, y)[0]
        assert check_gradients(fn, p, g) <= 1e-4

    def test_both_critics_step(self):
        pair = random_pair(1)
        opt1, opt2 = adam_init(pair.q1, 1e-3), adam_init(pair.q2, 1e-3)
        new, o1, o2, *_ = rl.critic_update(pair, pair.copy(), rl.Actor.create(SD, AD, 4, 0),
                                           batch(), 0.99, 0.2, 0.5, np.random.default_rng(0),
                                           opt1, opt2)
        assert not new.q1.equals(pair.q1) and not new.q2.equals(pair.q2)
        assert o1.step == o2.step == 1

    def test_update_sequence_deterministic(self):
        def run():
            pair, actor = random_pair(2), rl.Actor.create(SD, AD, 8, 1)
            tgt = pair.copy()
            o1, o2 = adam_init(pair.q1, 1e-3), adam_init(pair.q2, 1e-3)
            rng = np.random.default_rng(7)
            for i in range(5):
                pair, o1, o2, *_ = rl.critic_update(pair, tgt, actor, batch(8, i), 0.99, 0.2, 0.5,
                                                    rng, o1, o2)
            return pair

        a, b = run(), run()
        assert a.q1.equals(b.q1) and a.q2.equals(b.q2)


class TestActor:
    def test_bounded(self):
        actor = rl.Actor.create(SD, AD, 8, 0)
        out = actor(np.random.default_rng(0).normal(size=(50, SD)) * 100)
        assert np.all(np.abs(out) <= 1)

    def test_delay_noop(self):
        actor = rl.Actor.create(SD, AD, 8, 0)
        opt = adam_init(actor.params, 1e-3)
        new, opt2, g = rl.actor_update(actor, random_pair(), batch().s, 1, opt, delay=2)
        assert g is None and new is actor and opt2 is opt
        new, opt2, g = rl.actor_update(actor, random_pair(), batch().s, 2, opt, delay=2)
        assert g is not None and not new.params.equals(actor.params)

    def test_gradient(self):
        actor = rl.Actor.create(SD, AD, 5, 3)
        pair = random_pair(4, hidden=5)
        s = batch(4).s
        _, g = rl.actor_objective_grads(actor, pair, s)
        fn = lambda p: rl.actor_objective_grads(rl.Actor(actor.spec, p), pair, s)[0]
        assert check_gradients(fn, actor.params, g) <= 1e-4

    def test_converges_to_critic_peak(self):
        # critic fitted to Q(s, a) = -(a - 0.3)^2, then the actor ascends it
        rng = np.random.default_rng(0)
        spec = rl.critic_spec(1, 1, 32)
        q = net_init(spec, 0)
        opt = adam_init(q, 1e-2)
        pair = rl.CriticPair(spec, q, q)
        for _ in range(1500):
            s, a = rng.uniform(-1, 1, (128, 1)), rng.uniform(-1, 1, (128, 1))
            _, g = rl.critic_loss_grads(pair, 1, s, a, -(a[:, 0] - 0.3) ** 2)
            q, opt = opt_step(pair.q1, g, opt)
            pair = rl.CriticPair(spec, q, q)
        actor = rl.Actor.create(1, 1, 16, 1)
        aopt = adam_init(actor.params, 1e-2)
        for i in range(1, 801):
            actor, aopt, _ = rl.actor_update(actor, pair, rng.uniform(-1, 1, (64, 1)), i, aopt)
        out = actor(np.linspace(-1, 1, 11)[:, None])[:, 0]
        assert np.all(np.abs(out - 0.3) <= 0.05)


class TestReplay:
    def tr(self, i, done=False):
        return rl.Transition(np.full(SD, i, float), np.full(AD, i / 10), float(i),
                             np.full(SD, i + 1, float), done)

    def test_fifo(self):
        buf = rl.ReplayBuffer(2, SD, AD)
        for i in range(3):
            buf.push(self.tr(i))
        assert len(buf) == 2
        assert sorted(buf.r[:2].tolist()) == [1.0, 2.0]

    def test_empty(self):
        with pytest.raises(UsageError):
            rl.ReplayBuffer(3, SD, AD).sample(1, np.random.default_rng(0))

    def test_too_many(self):
        buf = rl.ReplayBuffer(3, SD, AD)
        buf.push(self.tr(0))
        with pytest.raises(UsageError):
            buf.sample(2, np.random.default_rng(0))

    def test_seeded(self):
        buf = rl.ReplayBuffer(10, SD, AD)
        for i in range(10):
            buf.push(self.tr(i))
        a = buf.sample(5, np.random.default_rng(3))
        b = buf.sample(5, np.random.default_rng(3))
        assert np.array_equal(a.s, b.s) and np.array_equal(a.r, b.r)

    def test_uniform_frequencies(self):
        buf = rl.ReplayBuffer(10, SD, AD)
        for i in range(10):
            buf.push(self.tr(i))
        N = 100_000
        rng = np.random.default_rng(0)
        idx = np.concatenate([buf.sample_indices(10, rng) for _ in range(N // 10)])
        counts = np.bincount(idx, minlength=10)
        sd = np.sqrt(N * 0.1 * 0.9)
        assert np.all(np.abs(counts - N / 10) <= 3 * sd)

    def test_plans_stay_in_episode(self):
        buf = rl.ReplayBuffer(20, SD, AD)
        for i in range(3):
            buf.push(self.tr(i, done=(i == 2)), episode=0)
        for i in range(3, 5):
            buf.push(self.tr(i), episode=1)
        plan = buf.plans([1, 3, 4], horizon=3)
        a = lambda i: [i / 10] * AD
        assert plan[0].tolist() == a(1) + a(2) + a(2)
        assert plan[1].tolist() == a(3) + a(4) + a(4)
        assert plan[2].tolist() == a(4) * 3

    def test_plans_across_wraparound(self):
        buf = rl.ReplayBuffer(4, SD, AD)
        for i in range(6):
            buf.push(self.tr(i), episode=0)
        # slots now hold 4, 5, 2, 3; the plan from item 3 continues into 4 then 5
        idx = int(np.where(buf.r == 3.0)[0][0])
        plan = buf.plans([idx], horizon=3)[0]
        assert plan.tolist() == [0.3] * AD + [0.4] * AD + [0.5] * AD

    def test_save_load(self, tmp_path):
        buf = rl.ReplayBuffer(4, SD, AD)
        for i in range(6):
            buf.push(self.tr(i, done=i == 3), episode=i // 3)
        buf.save(tmp_path / "buf.bin")
        back = rl.ReplayBuffer.load(tmp_path / "buf.bin")
        assert len(back) == len(buf)
        assert np.array_equal(back.plans(np.arange(4), 3)[np.argsort(back.r[:4])],
                              buf.plans(np.arange(4), 3)[np.argsort(buf.r[:4])])
        assert sorted(back.r[:4].tolist()) == sorted(buf.r[:4].tolist())

    def test_reject_bad_transition(self):
        buf = rl.ReplayBuffer(4, SD, AD)
        with pytest.raises((ShapeError, UsageError)):
            buf.push(rl.Transition(np.zeros(SD + 1), np.zeros(AD), 0.0, np.zeros(SD), False))
        with pytest.raises((ShapeError, UsageError, ValueError)):
            buf.push(rl.Transition(np.zeros(SD), np.zeros(AD), float("nan"), np.zeros(SD), False))


def test_soft_update_pair():
    a, b = random_pair(0), random_pair(1)
    out = rl.soft_update_pair(a, b, 1.0)
    assert out.q1.equals(b.q1) and out.q2.equals(b.q2)
