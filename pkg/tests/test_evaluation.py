import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planar_chain
from diffplan.denoiser import Denoiser
from diffplan.diffusion import make_schedule
from diffplan.evaluation import (
    BenchReport,
    SceneRecord,
    acsm,
    bench,
    interpolate,
    obstacle_collision,
    oracle_collision_free,
    path_length,
    roughness,
    scene_seed,
    success_chart_svg,
)
from diffplan.guidance import default_guides, j_inter
from diffplan.worldgen import Obstacle, Scene

POST = Obstacle((0.6, 0.6, 0.0), (0.02, 0.02, 0.1))
trajs = st.integers(0, 2**16).map(lambda s: np.random.default_rng(s).standard_normal((4, 7, 3)))


class TestOracle:
    def test_empty_scene(self):
        assert oracle_collision_free(np.zeros((5, 2)), Scene([], np.zeros(2), np.zeros(2)), planar_chain())

    def test_waypoint_inside_obstacle(self):
        sc = Scene([Obstacle((0.5, 0.0, 0.0), (0.1, 0.1, 0.1))], np.zeros(1), np.zeros(1))
        assert not oracle_collision_free(np.zeros((3, 1)), sc, planar_chain(1))

    def test_straddle(self):
        sc = Scene([POST], np.zeros(1), np.zeros(1))
        tau = np.array([[0.0], [np.pi / 2]])
        assert oracle_collision_free(tau, sc, planar_chain(1), substeps=1)
        assert not oracle_collision_free(tau, sc, planar_chain(1), substeps=8)

    def test_self_collision_counts(self):
        tau = np.tile([0.0, 0.9 * np.pi, 0.9 * np.pi], (3, 1))
        assert not oracle_collision_free(tau, Scene([], tau[0], tau[-1]), planar_chain(3))

    def test_interpolate_shape_and_endpoints(self, rng):
        tau = rng.standard_normal((5, 3))
        q = interpolate(tau, 8)
        assert q.shape == (33, 3)
        assert np.array_equal(q[::8], tau)

    def test_waypoint_consistency_with_cost(self, chain, rng):
        sc = Scene([Obstacle((0.8, 0.1, 0.7), (0.2, 0.3, 0.3))], np.zeros(3), np.zeros(3))
        for _ in range(40):
            tau = rng.uniform(-np.pi, np.pi, (4, 3))
            waypoint_free = not obstacle_collision(chain, sc.obstacle_cuboids(), tau).any()
            assert (j_inter(tau, sc, chain) == 0) == waypoint_free


class TestRoughness:
    def test_constant(self):
        assert roughness(np.ones((2, 6, 3))) == (0.0, 0.0, 0.0, 0.0)

    def test_uniform_line(self):
        ar, mresg, rf, rl = roughness(np.array([[0.0], [0.5], [1.0]]))
        assert ar == rf == rl == 0.5
        assert path_length(np.array([[0.0], [0.5], [1.0]])) == 1.0

    def test_mresg_excludes_end_pairs(self):
        tau = np.array([[0.0], [5.0], [5.5], [6.0], [10.0]])
        assert roughness(tau)[1] == 0.5

    @given(trajs)
    @settings(max_examples=30)
    def test_properties(self, batch):
        ar, mresg, rf, rl = roughness(batch)
        assert min(ar, mresg, rf, rl) >= 0
        for tau in batch:
            r = roughness(tau)
            assert path_length(tau) == pytest.approx(6 * r[0], rel=1e-12)
            steps = np.linalg.norm(np.diff(tau, axis=0), axis=1)
            assert r[1] <= max(6 * r[0], steps.max())


class TestACSM:
    def test_identical(self, rng):
        v = rng.standard_normal((5, 2))
        assert acsm(np.stack([v] * 4)) == pytest.approx(1.0)

    def test_antipodal(self, rng):
        v = rng.standard_normal((5, 2))
        assert acsm(np.stack([v, -v])) == pytest.approx(-1.0)

    @given(trajs)
    @settings(max_examples=30)
    def test_range(self, batch):
        assert -1.0 <= acsm(batch) <= 1.0

    def test_zero_trajectory(self, rng):
        b = rng.standard_normal((3, 4, 2))
        b[0] = 0
        C = [np.dot(b[1].ravel(), b[2].ravel()) / np.linalg.norm(b[1]) / np.linalg.norm(b[2])]
        assert acsm(b) == pytest.approx((0 + 0 + C[0]) / 3)


def record(name, flags, sel, kind="tabletop"):
    return SceneRecord(name, kind, sel, any(flags), list(flags), 1.0, 0.0, 0.5, [sel] * len(flags), [0.9] * len(flags))


class TestReport:
    def test_prefix_union_non_decreasing(self, rng):
        recs = [record(f"s{i}", rng.uniform(size=12) < 0.2, False) for i in range(30)]
        rep = BenchReport(recs, 12)
        pre = rep.prefix_success_any()
        assert all(b >= a for a, b in zip(pre, pre[1:]))
        assert pre[-1] == rep.success_rate("any")

    def test_success_any_is_or_of_flags(self, rng):
        recs = [record(f"s{i}", rng.uniform(size=4) < 0.3, False) for i in range(20)]
        for r in recs:
            assert r.success_any == any(r.guide_flags)
        assert BenchReport(recs, 4).success_rate("any") >= BenchReport(recs, 4).success_rate("selected")

    def test_csv_sorted_and_columns(self):
        rep = BenchReport([record("b", [True, False], True), record("a", [False, True], False)], 2)
        lines = rep.records_csv().splitlines()
        assert lines[0] == "scene,kind,success_selected,success_any,guide_flags,path_length,wall_ms"
        assert lines[1].startswith("a,tabletop,0,1,2,") and lines[2].startswith("b,tabletop,1,1,1,")
        assert "success_any_first_2_guides" in rep.summary_csv()

    def test_svg(self):
        svg = success_chart_svg([10.0, 20.0, 20.0])
        assert svg.startswith("<svg") and "polyline" in svg

    def test_scene_seed_stable(self):
        assert scene_seed(0, "0001-shelf") == scene_seed(0, "0001-shelf")
        assert scene_seed(0, "0001-shelf") != scene_seed(1, "0001-shelf")


@pytest.fixture(scope="module")
def tiny():
    net = Denoiser(2, 8, widths=(4, 8), seed=3)
    rng = np.random.default_rng(0)
    for v in net.params.values():
        v[...] = 0.2 * rng.standard_normal(v.shape)
    return net, make_schedule(4)


class TestBench:
    def scenes(self, n=3):
        return [Scene([], np.array([0.1 * i, 0.0]), np.array([1.0, -0.3]), f"e{i}", "tabletop") for i in range(n)]

    def test_empty_scenes_all_succeed(self, tiny):
        net, sched = tiny
        rep = bench(net, sched, self.scenes(), planar_chain(), default_guides(), b=12)
        assert rep.success_rate("selected") == 100.0 and rep.success_rate("any") == 100.0
        assert np.all(rep.guide_contribution() == 1.0)

    def test_rerun_identical_and_order_free(self, tiny):
        net, sched = tiny
        sc = self.scenes(4) + [Scene([POST], np.array([0.0, 0.1]), np.array([1.4, -0.2]), "p", "shelf")]
        a = bench(net, sched, sc, planar_chain(), default_guides(), b=12, seed=3)
        b = bench(net, sched, sc[::-1], planar_chain(), default_guides(), b=12, seed=3)
        strip = lambda rep: [(r.scene, r.success_selected, r.flag_bits, r.path_length) for r in rep.records]
        assert strip(a) == strip(b)
        assert a.summary_csv() == b.summary_csv()

    def test_workers_do_not_change_results(self, tiny):
        net, sched = tiny
        sc = self.scenes(4)
        a = bench(net, sched, sc, planar_chain(), default_guides(), b=12, seed=1)
        b = bench(net, sched, sc, planar_chain(), default_guides(), b=12, seed=1, workers=2)
        assert [r.path_length for r in a.records] == [r.path_length for r in b.records]

    def test_failure_recorded_not_raised(self, tiny):
        net, sched = tiny
        bad = Scene([], np.zeros(3), np.zeros(3), "bad", "tabletop")  # wrong joint count for the model
        rep = bench(net, sched, [bad] + self.scenes(1), planar_chain(), default_guides(), b=12)
        assert rep.records[0].scene == "bad"
        assert rep.records[0].error and not rep.records[0].success_selected and not rep.records[1].error

    def test_no_scenes(self, tiny):
        with pytest.raises(ValueError):
            bench(*tiny, [], planar_chain(), default_guides())
