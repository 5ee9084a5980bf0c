import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planar_chain, voxel_overlap
from diffplan.chain import ChainSpec, Joint, Link, clip_joints
from diffplan.denoiser import Denoiser
from diffplan.diffusion import condition_endpoints, make_schedule, reverse_step
from diffplan.evaluation import oracle_collision_free
from diffplan.geom import Expansion, Pose
from diffplan.gradcheck import central_diff, check_cost, rel_err
from diffplan.guidance import (
    GuideConfig,
    Schedule,
    constant,
    cost_and_grad,
    default_guides,
    guide_gradient,
    guided_reverse_step,
    j_inter,
    j_swept,
    literal_contrastive,
    load_guides,
    multimodality_cost,
    obstacle_extents,
    plan,
    save_guides,
    slot_noise,
    split_sizes,
)
from diffplan.worldgen import Obstacle, Scene


def cube_chain():
    """One z joint whose link box is [0,1]^3 at q = 0."""
    return ChainSpec([Joint((0, 0, 1))], [Link(0, (0.5, 0.5, 0.5), Pose.from_xyz_rpy((0.5, 0.5, 0.5)))])


def scene(obstacles, m=2, start=None, goal=None):
    return Scene(list(obstacles), np.zeros(m) if start is None else start, np.zeros(m) if goal is None else goal)


POST = Obstacle((0.6, 0.6, 0.0), (0.02, 0.02, 0.1))  # sits on the 45 degree ray of a planar arm


class TestCosts:
    def test_empty_scene(self, chain, rng):
        tau = rng.uniform(-2, 2, (6, 3))
        assert j_inter(tau, scene([], 3), chain) == 0.0
        assert j_swept(tau, scene([], 3), chain) == 0.0

    def test_clear_trajectory(self):
        tau = np.zeros((4, 2))
        far = scene([Obstacle((0, 5, 0), (0.2, 0.2, 0.2))])
        assert j_inter(tau, far, planar_chain()) == 0.0 and j_swept(tau, far, planar_chain()) == 0.0

    def test_single_waypoint_voxel_value(self):
        obstacle = Obstacle((1.0, 0.3, 0.6), (0.5, 0.5, 0.3))  # [0.5,1.5]x[-0.2,0.8]x[0.3,0.9]
        v = j_inter(np.zeros((1, 1)), scene([obstacle], 1), cube_chain())
        assert v == pytest.approx(voxel_overlap((0, 0, 0), (1, 1, 1), (0.5, -0.2, 0.3), (1.5, 0.8, 0.9)), rel=0.01)
        assert v == pytest.approx(0.24, rel=1e-12)

    def test_stationary_reduction(self, chain):
        tau = np.tile([0.3, 0.4, -0.2], (7, 1))
        sc = scene([Obstacle((0.7, 0.2, 0.8), (0.3, 0.3, 0.3))], 3)
        inter = j_inter(tau, sc, chain)
        assert inter > 0
        assert j_swept(tau, sc, chain) == pytest.approx(inter * 6 / 7, rel=1e-12)

    def test_straddle_tunneling(self):
        ch, sc = planar_chain(1), scene([POST], 1)
        tau = np.array([[0.0], [np.pi / 2]])
        assert j_inter(tau, sc, ch) == 0.0
        assert j_swept(tau, sc, ch) > 0.0
        # the enclosing box [-0.05,1]x[-0.05,1] swallows the whole post footprint
        assert j_swept(tau, sc, ch) == pytest.approx(0.04 * 0.04 * 0.1, rel=1e-9)
        assert not oracle_collision_free(tau, sc, ch, substeps=8)

    def test_batched_costs_match_single(self, chain, rng):
        taus = rng.uniform(-2, 2, (4, 5, 3))
        Olo, Ohi = obstacle_extents([Obstacle((0.5, 0.3, 0.6), (0.3, 0.2, 0.4)).cuboid], 0.05)
        for kind in ("intersection", "swept"):
            c, g = cost_and_grad(kind, taus, chain, Olo, Ohi)
            for i in range(4):
                ci, gi = cost_and_grad(kind, taus[i], chain, Olo, Ohi)
                assert c[i] == pytest.approx(float(ci), rel=1e-12) and np.allclose(g[i], gi, rtol=1e-12, atol=0)

    @pytest.mark.parametrize("kind", ["intersection", "swept"])
    def test_gradients_random_chains(self, kind):
        assert check_cost(kind, n=100, seed=11).max_rel <= 1e-4

    @pytest.mark.parametrize("kind", ["intersection", "swept"])
    def test_gradients_default_chain(self, kind, chain):
        assert check_cost(kind, n=30, seed=12, chain=chain).max_rel <= 1e-4


class TestGuideGradient:
    SC = scene([Obstacle((0.8, 0.1, 0.7), (0.2, 0.3, 0.3))], 3)

    def colliding(self, rng, chain, h=6):
        while True:
            tau = rng.uniform(-1.0, 1.0, (h, 3))
            if j_inter(tau[1:-1], self.SC, chain) > 1e-3:
                return tau

    def test_zero_when_clear(self, chain):
        g = guide_gradient(GuideConfig(), np.tile([np.pi, 0, 0], (5, 1)), self.SC, chain, 3, 10)
        assert not g.any()

    def test_zero_weight(self, chain, rng):
        g = guide_gradient(GuideConfig(weight=constant(0.0)), self.colliding(rng, chain), self.SC, chain, 3, 10)
        assert not g.any()

    def test_matches_weighted_cost_fd(self, chain, rng):
        cfg = GuideConfig("swept", constant(0.05), Expansion.TYPE1, False, Schedule("affine", 1.4, 1.0))
        t, T = 7, 10
        tau = self.colliding(rng, chain)
        g = guide_gradient(cfg, tau, self.SC, chain, t, T)
        num = central_diff(lambda x: cfg.weight(t, T) * j_swept(x, self.SC, chain, 0.05, Expansion.TYPE1, t, T), tau)
        num[[0, -1]] = 0.0
        assert rel_err(g, num) <= 1e-4
        assert not g[0].any() and not g[-1].any()

    def test_normalized_is_unit_times_weight(self, chain, rng):
        cfg = GuideConfig("intersection", constant(0.0), normalize=True, weight=constant(0.1))
        g = guide_gradient(cfg, self.colliding(rng, chain), self.SC, chain, 2, 4)
        assert np.linalg.norm(g) == pytest.approx(0.1, rel=1e-12)

    def test_batch_normalizes_each_trajectory(self, chain, rng):
        cfg = GuideConfig("intersection", constant(0.0), normalize=True, weight=constant(1.0))
        taus = np.stack([self.colliding(rng, chain), np.tile([np.pi, 0, 0], (6, 1))])
        g = guide_gradient(cfg, taus, self.SC, chain, 2, 4)
        assert np.linalg.norm(g[0]) == pytest.approx(1.0) and not g[1].any()


class TestSchedules:
    def test_weight_affine(self):
        assert Schedule("affine", 1.4, 1.0)(32, 64) == pytest.approx(1.9)

    def test_clearance_linear_decreases_over_denoising(self):
        s = Schedule("linear", 0.15, 0.01)
        assert s(64, 64) == pytest.approx(0.15) and s(0, 64) == pytest.approx(0.01)
        assert s(10, 64) < s(50, 64)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            constant(-0.1)

    def test_default_table(self):
        g = default_guides()
        assert len(g) == 12
        assert [x.cost for x in g] == ["intersection"] * 5 + ["swept"] * 7
        assert [x.clearance(64, 64) for x in g[:4]] == [0.1, 0.05, 0.01, 0.15]
        assert g[4].clearance(64, 64) == pytest.approx(0.15) and g[4].clearance(0, 64) == pytest.approx(0.01)
        assert [x.expansion.value for x in g] == ["none"] * 5 + ["type1"] + ["type2"] * 4 + ["type3"] * 2
        assert [x.normalize for x in g] == [False] * 6 + [True] * 6
        assert all(x.weight(16, 64) == pytest.approx(1.65) for x in g[:6])
        assert [x.weight(5, 64) for x in g[6:]] == [0.05, 0.01, 0.1, 0.1, 0.05, 0.1]
        assert [x.clearance(5, 64) for x in g[5:]] == [0.06, 0.0, 0.0, 0.02, 0.1, 0.05, 0.05]

    def test_guides_file_round_trip(self, tmp_path):
        save_guides(default_guides(), tmp_path / "g.json")
        assert load_guides(tmp_path / "g.json") == default_guides()

    def test_guides_file_unknown_field(self, tmp_path):
        (tmp_path / "g.json").write_text('[{"cost": "swept", "colour": 1}]')
        with pytest.raises(ValueError, match=r"guides\[0\]"):
            load_guides(tmp_path / "g.json")


def scalar_chain():
    return ChainSpec([Joint((0, 0, 1), limits=(-2.0, 2.0))], [Link(0, (0.5, 0.05, 0.05), Pose.from_xyz_rpy((0.5, 0, 0)))])


class ConstModel:
    def __init__(self, value=0.0):
        self.value = value

    def __call__(self, x, t):
        return np.full_like(x, self.value)


class TestGuidedStep:
    S = make_schedule(8)

    def test_empty_scene_is_unguided(self, rng):
        ch = planar_chain()
        x = rng.standard_normal((3, 6, 2)) * 3
        z = rng.standard_normal(x.shape)
        sc = scene([], 2, np.array([0.1, 0.2]), np.array([0.3, 0.4]))
        out, bad = guided_reverse_step(ConstModel(0.2), x, 5, self.S, default_guides()[0], sc, ch, z)
        mu = clip_joints(reverse_step(ConstModel(0.2), x, 5, self.S, np.zeros_like(z)), ch)
        expect = condition_endpoints(mu + np.sqrt(self.S.beta[4]) * z, sc.start, sc.goal)
        assert np.array_equal(out, expect) and not bad.any()

    def test_zero_weight_is_unguided(self, rng):
        ch = planar_chain()
        sc = scene([POST], 2)
        x = rng.standard_normal((2, 6, 2))
        z = rng.standard_normal(x.shape)
        zero = GuideConfig("swept", constant(0.1), weight=constant(0.0))
        empty = scene([], 2)
        a, _ = guided_reverse_step(ConstModel(0.1), x, 4, self.S, zero, sc, ch, z)
        b, _ = guided_reverse_step(ConstModel(0.1), x, 4, self.S, zero, empty, ch, z)
        assert np.array_equal(a, b)

    def test_scalar_toy_mean_shift(self):
        ch = scalar_chain()
        # box clipping the x-reach of the link AABB near q = 0.7
        sc = scene([Obstacle((0.85, 0.3, 0.0), (0.05, 0.1, 0.1))], 1, np.array([0.0]), np.array([1.5]))
        x = np.array([[0.0], [0.7], [0.8], [1.5]])
        cfg = GuideConfig("intersection", constant(0.05), weight=constant(0.3))
        out, _ = guided_reverse_step(ConstModel(0.0), x, 1, self.S, cfg, sc, ch, np.zeros_like(x))
        mu = clip_joints(x / np.sqrt(self.S.alpha[0]), ch)
        dJ = central_diff(lambda q: j_inter(q, sc, ch, 0.05), mu)
        assert np.any(dJ[1:-1] != 0)
        assert np.allclose(out[1:-1], mu[1:-1] - 0.3 * dJ[1:-1], atol=1e-8)
        assert np.array_equal(out[[0, -1]], [[0.0], [1.5]])

    def test_clip_before_guidance(self):
        ch = scalar_chain()
        sc = scene([], 1, np.array([0.0]), np.array([0.0]))
        x = np.array([[[0.0], [9.0], [-9.0], [0.0]]])
        out, _ = guided_reverse_step(ConstModel(0.0), x, 1, self.S, GuideConfig(), sc, ch, np.zeros_like(x))
        assert out[0, 1, 0] == 2.0 and out[0, 2, 0] == -2.0

    def test_nan_gradient_falls_back_and_flags(self, rng):
        ch = planar_chain()
        sc = scene([POST], 2)
        x = rng.standard_normal((3, 6, 2))
        z = rng.standard_normal(x.shape)
        extra = np.zeros_like(x)
        extra[1, 2, 0] = np.nan
        cfg = GuideConfig(weight=constant(0.0))
        out, bad = guided_reverse_step(ConstModel(), x, 3, self.S, cfg, sc, ch, z, extra_grad=extra)
        ref, _ = guided_reverse_step(ConstModel(), x, 3, self.S, cfg, sc, ch, z)
        assert bad.tolist() == [False, True, False]
        assert np.array_equal(out, ref) and np.all(np.isfinite(out))


class TestMultimodality:
    @given(st.integers(2, 8), st.integers(0, 2**16))
    @settings(max_examples=30)
    def test_literal_is_zero_softmax_positive(self, b, seed):
        batch = np.random.default_rng(seed).standard_normal((b, 5, 3))
        assert literal_contrastive(batch) == 0.0
        assert multimodality_cost(batch)[0] > 0

    def test_orthogonal_cheaper_than_identical(self):
        a = np.zeros((4, 2))
        a[0, 0] = 1.0
        b = np.zeros((4, 2))
        b[1, 1] = 1.0
        ortho = multimodality_cost(np.stack([a, b]))[0]
        same = multimodality_cost(np.stack([a, a]))[0]
        # hand softmax: row (1/0.1, 0) -> -log(e^10 / (e^10 + 1)); identical rows -> log 2
        assert ortho == pytest.approx(2 * np.log1p(np.exp(-10.0)), rel=1e-9)
        assert same == pytest.approx(2 * np.log(2.0), rel=1e-12)
        assert ortho < same

    def test_identical_batch_is_maximal(self, rng):
        v = rng.standard_normal((5, 3))
        same = multimodality_cost(np.stack([v] * 4))[0]
        for _ in range(10):
            perturbed = np.stack([v + 0.3 * rng.standard_normal(v.shape) for _ in range(4)])
            perturbed *= np.linalg.norm(v) / np.linalg.norm(perturbed.reshape(4, -1), axis=1)[:, None, None]
            assert multimodality_cost(perturbed)[0] < same

    def test_gradient_fd(self, rng):
        batch = rng.standard_normal((4, 5, 2))
        _, g = multimodality_cost(batch)
        assert rel_err(g, central_diff(lambda x: multimodality_cost(x)[0], batch)) <= 1e-6

    def test_zero_norm_trajectory(self, rng):
        batch = rng.standard_normal((3, 4, 2))
        batch[1] = 0.0
        c, g = multimodality_cost(batch)
        assert np.isfinite(c) and not g[1].any()

    def test_needs_two(self):
        with pytest.raises(ValueError):
            multimodality_cost(np.ones((1, 3, 2)))


class TestSplit:
    def test_paper_batch(self):
        assert split_sizes(120, 12) == [10] * 12

    @given(st.integers(1, 40), st.integers(0, 200))
    def test_remainder_rule(self, n, extra):
        b = n + extra
        sizes = split_sizes(b, n)
        assert sum(sizes) == b and max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True) and sizes.count(b // n + 1) == b % n

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_sizes(3, 4)


# --- planner properties on a tiny random network -------------------------------------


@pytest.fixture(scope="module")
def tiny():
    net = Denoiser(2, 8, widths=(4, 8), seed=3)
    rng = np.random.default_rng(0)
    for v in net.params.values():
        v[...] = 0.2 * rng.standard_normal(v.shape)
    return net, make_schedule(6)


def toy_scene():
    return Scene([POST, Obstacle((1.2, -0.9, 0.0), (0.2, 0.1, 0.2))], np.array([0.0, 0.1]), np.array([1.4, -0.2]))


def unguided_reference(net, sched, sc, ch, sizes, seed):
    """Plain reverse chain with clip and conditioning, same per-slot noise as ``plan``."""
    h, m = net.h, ch.m
    bounds = np.cumsum([0] + sizes)
    x = condition_endpoints(slot_noise(seed, "plan-init", sizes, h, m), sc.start, sc.goal)
    for t in range(sched.T, 0, -1):
        eps = np.concatenate([net(x[bounds[i]:bounds[i + 1]], t) for i in range(len(sizes))])
        mu = clip_joints((x - (1 - sched.alpha[t - 1]) / np.sqrt(1 - sched.alpha_bar[t - 1]) * eps)
                         / np.sqrt(sched.alpha[t - 1]), ch)
        if t > 1:
            mu = mu + np.sqrt(sched.beta[t - 1]) * slot_noise(seed, "plan-z", sizes, h, m, t)
        x = condition_endpoints(mu, sc.start, sc.goal)
    return x


class TestPlan:
    def test_endpoints_and_selection(self, tiny):
        net, sched = tiny
        sc, ch = toy_scene(), planar_chain()
        for seed in range(3):
            res = plan(net, sched, sc, ch, b=24, seed=seed)
            assert np.array_equal(res.batch[:, 0], np.broadcast_to(sc.start, (24, 2)))
            assert np.array_equal(res.batch[:, -1], np.broadcast_to(sc.goal, (24, 2)))
            assert res.selected_index == int(np.flatnonzero(res.final_cost == res.final_cost.min())[0])
            assert np.array_equal(res.selected, res.batch[res.selected_index])
            assert res.final_cost[res.selected_index] == pytest.approx(j_swept(res.selected, sc, ch), rel=1e-12)
            assert res.guide_index.tolist() == np.repeat(np.arange(12), 2).tolist()
            assert res.success_any == bool(np.any(res.guide_flags(12)))

    def test_deterministic(self, tiny):
        net, sched = tiny
        a = plan(net, sched, toy_scene(), planar_chain(), b=24, seed=5)
        b = plan(net, sched, toy_scene(), planar_chain(), b=24, seed=5)
        assert np.array_equal(a.batch, b.batch)

    def test_guide_zero_equivalence(self, tiny):
        net, sched = tiny
        sc, ch = toy_scene(), planar_chain()
        zero = [GuideConfig(g.cost, g.clearance, g.expansion, g.normalize, constant(0.0)) for g in default_guides()]
        res = plan(net, sched, sc, ch, zero, b=24, seed=9)
        assert np.array_equal(res.batch, unguided_reference(net, sched, sc, ch, [2] * 12, 9))

    def test_empty_scene_matches_unguided(self, tiny):
        net, sched = tiny
        sc = Scene([], np.array([0.0, 0.1]), np.array([1.4, -0.2]))
        res = plan(net, sched, sc, planar_chain(), b=13, seed=2)
        assert np.array_equal(res.batch, unguided_reference(net, sched, sc, planar_chain(), split_sizes(13, 12), 2))
        assert res.success and res.collision_free.all()

    def test_union_monotonicity(self, tiny):
        net, sched = tiny
        sc, ch = toy_scene(), planar_chain()
        guides = default_guides()
        prev = None
        for k in range(1, 13):
            res = plan(net, sched, sc, ch, guides[:k], b=3 * k, seed=4)
            if prev is not None:
                assert np.array_equal(res.batch[: 3 * (k - 1)], prev.batch)
                assert np.array_equal(res.collision_free[: 3 * (k - 1)], prev.collision_free)
                assert res.success_any >= prev.success_any
            prev = res

    def test_uneven_batch(self, tiny):
        net, sched = tiny
        res = plan(net, sched, toy_scene(), planar_chain(), b=14, seed=0)
        assert np.bincount(res.guide_index).tolist() == [2, 2] + [1] * 10

    def test_multimodality_runs(self, tiny):
        net, sched = tiny
        res = plan(net, sched, toy_scene(), planar_chain(), b=12, seed=0, multimodality=0.5)
        assert np.all(np.isfinite(res.batch))

    def test_model_chain_mismatch(self, tiny):
        net, sched = tiny
        with pytest.raises(ValueError):
            plan(net, sched, Scene([], np.zeros(3), np.zeros(3)), planar_chain(3), b=12)
