import math

import numpy as np
import pytest
from scipy import optimize, stats

from gradcheck import numeric_grad, rel_error
from residual_toss import ballistics
from residual_toss.policy import (
    EXPLORE_RANGE,
    MIN_SPEED,
    GraspThrowNet,
    NetConfig,
    PolicyOutput,
    PolicyVariant,
    RotationStack,
    compose_throw,
    conditioning_value,
    select_action,
)
from residual_toss.scene import GraspAction, Vec3, WorkspaceConfig, make_standard_objects
from residual_toss.simulator import render_heightmap, spawn_bin
from residual_toss.tensornet import bce_loss

SMALL = NetConfig(trunk=(4, 4, 8, 8), head=(8, 4, 4), tile_channels=2)
WS8 = WorkspaceConfig(num_rotations=8)
P1 = Vec3(1.1, 0.16, 0.0)
P2 = Vec3(1.7, -0.48, 0.0)


@pytest.fixture(scope="module")
def scene():
    return render_heightmap(spawn_bin(make_standard_objects(), 12, seed=0, workspace=WS8))


@pytest.fixture(scope="module")
def net():
    return GraspThrowNet(PolicyVariant.RESIDUAL_PHYSICS, WS8, SMALL, seed=1)


@pytest.mark.parametrize("R", [1, 3, 8, 16])
def test_rotation_round_trip_is_exact(R):
    rot = RotationStack((90, 70), R)
    img = np.random.default_rng(R).standard_normal((90, 70, 1))
    ks = list(range(R))
    canvases = rot.rotate(img, ks, [-9.0])
    back = rot.unrotate(canvases[..., 0], ks)
    for k in ks:
        np.testing.assert_array_equal(back[k], img[..., 0])
    assert rot.S % 4 == 0 and rot.S >= math.hypot(90, 70)


def test_rotation_sends_rows_to_world_angle():
    # a bar along world angle theta_k appears along canvas axis 0 in rotation k
    rot = RotationStack((90, 70), 8)
    img = np.zeros((90, 70, 1))
    for t in range(-20, 21):
        img[45 + t, 35, 0] = 1.0  # along +x (rows), world angle 0
    c0 = rot.rotate(img, [0], [0.0])[0, ..., 0]
    rows, cols = np.nonzero(c0)
    assert np.ptp(cols) == 0 and np.ptp(rows) == 40
    c2 = rot.rotate(img, [2], [0.0])[0, ..., 0]  # 90 degrees: the bar is now across the closing axis
    rows, cols = np.nonzero(c2)
    assert np.ptp(rows) == 0 and np.ptp(cols) == 40


def test_forward_shapes_and_ranges(net, scene):
    out = net.forward(scene, P1)
    assert out.qg.shape == (8, 90, 70) and out.qt.shape == (8, 90, 70)
    assert np.all((out.qg > 0) & (out.qg < 1))
    assert np.all(np.isfinite(out.qt))
    assert out.cond_grasp == pytest.approx(ballistics.solve_release(P1, WS8).speed)
    assert out.ballistic_speed == out.cond_grasp


def test_conditioning_is_live(net, scene):
    a = net.forward(scene, P1, rotations=[0])
    b = net.forward(scene, P2, rotations=[0])
    assert a.cond_grasp != b.cond_grasp
    assert not np.array_equal(a.qt, b.qt)
    mu = np.zeros((1, 3, 3, 4), dtype=np.float32)
    tiled = net._tile(mu, a.cond_grasp)
    assert np.all(tiled[..., 4:] == np.float32(a.cond_grasp))


def test_regression_conditions_on_distance():
    assert conditioning_value(PolicyVariant.REGRESSION, P1, WS8) == pytest.approx(P1.planar_norm() - 0.7)
    assert conditioning_value(PolicyVariant.PHYSICS_ONLY, P1, WS8) == ballistics.solve_release(P1, WS8).speed
    with pytest.raises(ballistics.UnreachableTarget):
        conditioning_value(PolicyVariant.RESIDUAL_PHYSICS, Vec3(0.3, 0.0, 0.0), WS8)


def test_physics_only_has_no_throw_head(scene):
    po = GraspThrowNet(PolicyVariant.PHYSICS_ONLY, WS8, SMALL)
    assert po.throw_head is None
    assert po.forward(scene, P1, rotations=[0]).qt is None
    assert not any(k.startswith("throw") for k in po.named_params())


def test_single_rotation_equals_direct_application(scene):
    ws = WorkspaceConfig(num_rotations=1)
    net = GraspThrowNet(PolicyVariant.RESIDUAL_PHYSICS, ws, SMALL, seed=2)
    out = net.forward(scene, P1)
    S = net.rot.S
    bg = net.background(scene.stats)
    canvas = np.empty((1, S, S, 2), dtype=np.float32)
    canvas[...] = bg
    oi, oj = (S - 90) // 2, (S - 70) // 2
    canvas[0, oi : oi + 90, oj : oj + 70] = scene.normalized
    mu = net.trunk.forward(canvas)
    g = net.grasp_head.forward(net._tile(mu, out.cond_grasp))[0, oi : oi + 90, oj : oj + 70, 0]
    t = net.throw_head.forward(net._tile(mu, out.cond_throw))[0, oi : oi + 90, oj : oj + 70, 0]
    np.testing.assert_array_equal(out.qg[0], g)
    np.testing.assert_array_equal(out.qt[0], t)


def test_half_turn_equivariance(net, scene):
    from residual_toss.simulator import Heightmap

    flipped = Heightmap(scene.height[::-1, ::-1].copy(), scene.intensity[::-1, ::-1].copy(), scene.stats)
    a = net.forward(scene, P1)
    b = net.forward(flipped, P1)
    R = 8
    for k in range(R):
        kb = (k + R // 2) % R
        np.testing.assert_allclose(b.qg[kb], a.qg[k][::-1, ::-1], atol=1e-4)
        np.testing.assert_allclose(b.qt[kb], a.qt[k][::-1, ::-1], atol=1e-4)


def output_with(qg, qt=None, rotations=None):
    rotations = tuple(range(qg.shape[0])) if rotations is None else rotations
    return PolicyOutput(qg, qt, 1.0, 1.0, rotations)


def test_select_greedy_single_max():
    qg = np.full((4, 6, 5), 0.2)
    qg[2, 3, 1] = 0.9
    a = select_action(output_with(qg), 0.0, np.random.default_rng(0))
    assert (a.k, a.i, a.j) == (2, 3, 1)


def test_select_ties_pick_first_flat_index():
    a = select_action(output_with(np.full((4, 6, 5), 0.5)), 0.0, np.random.default_rng(0))
    assert (a.k, a.i, a.j) == (0, 0, 0)


def test_select_invariant_to_monotone_transform():
    rng = np.random.default_rng(3)
    qg = rng.uniform(0.01, 0.99, (4, 6, 5))
    a = select_action(output_with(qg), 0.0, np.random.default_rng(0))
    b = select_action(output_with(np.log(qg / (1 - qg)) ** 3), 0.0, np.random.default_rng(0))
    assert a == b


def test_select_skips_blocked_grasps():
    qg = np.full((2, 3, 3), 0.1)
    qg[1, 2, 2] = 0.9
    qg[0, 1, 1] = 0.8
    a = select_action(output_with(qg), 0.0, np.random.default_rng(0), blocked={(1, 2, 2)})
    assert (a.k, a.i, a.j) == (0, 1, 1)


def test_random_grasps_are_uniform():
    R, H, W = 8, 90, 70
    out = output_with(np.zeros((R, H, W)))
    rng = np.random.default_rng(42)
    draws = [select_action(out, 1.0, rng, R) for _ in range(10_000)]
    # coarse cells: rotation x 3 row bands x 2 column bands (48 cells, about 208 draws each)
    cells = np.zeros((R, 3, 2))
    for a in draws:
        cells[a.k, a.i // 30, a.j // 35] += 1
    assert stats.chisquare(cells.ravel()).pvalue > 0.01
    for marginal, n in ((np.bincount([a.i for a in draws], minlength=H), H), (np.bincount([a.j for a in draws], minlength=W), W)):
        assert stats.chisquare(marginal).pvalue > 0.01


def target_with_speed(speed):
    f = lambda d: ballistics.solve_release(Vec3(0.7 + d, 0.0, 0.0), WS8).speed - speed
    d = optimize.brentq(f, 0.05, 10.0, xtol=1e-14)
    return Vec3(0.7 + d, 0.0, 0.0)


def throw_output(delta):
    qt = np.zeros((8, 90, 70))
    qt[3, 10, 20] = delta
    return output_with(np.full((8, 90, 70), 0.5), qt), GraspAction(10, 20, 3, 8)


def test_zero_residual_matches_physics_only():
    out, a = throw_output(0.0)
    rng = np.random.default_rng(0)
    res = compose_throw(out, a, P1, PolicyVariant.RESIDUAL_PHYSICS, 0.0, rng, WS8)
    phys = compose_throw(out, a, P1, PolicyVariant.PHYSICS_ONLY, 0.0, rng, WS8)
    assert res == phys
    plan = ballistics.solve_release(P1, WS8)
    assert res.r == plan.r and res.v == plan.v_hat


def test_residual_adds_to_ballistic_speed():
    p = target_with_speed(3.6)
    out, a = throw_output(0.4)
    tp = compose_throw(out, a, p, PolicyVariant.RESIDUAL_PHYSICS, 0.0, np.random.default_rng(0), WS8)
    assert tp.planar_speed == pytest.approx(4.0, abs=1e-9)
    assert tp.v.z == pytest.approx(tp.planar_speed)
    assert not tp.exploratory


def test_regression_uses_absolute_speed():
    out, a = throw_output(2.25)
    tp = compose_throw(out, a, P2, PolicyVariant.REGRESSION, 0.0, np.random.default_rng(0), WS8)
    assert tp.planar_speed == pytest.approx(2.25)
    assert math.atan2(tp.v.y, tp.v.x) == pytest.approx(math.atan2(P2.y, P2.x))


def test_non_positive_speed_is_clamped():
    out, a = throw_output(-10.0)
    tp = compose_throw(out, a, P1, PolicyVariant.RESIDUAL_PHYSICS, 0.0, np.random.default_rng(0), WS8)
    assert tp.planar_speed == pytest.approx(MIN_SPEED) and tp.exploratory


def test_throw_exploration_range():
    out, a = throw_output(0.3)
    rng = np.random.default_rng(5)
    base = ballistics.solve_release(P2, WS8).speed
    for _ in range(200):
        tp = compose_throw(out, a, P2, PolicyVariant.REGRESSION_POP, 1.0, rng, WS8)
        assert tp.exploratory
        assert EXPLORE_RANGE[0] * base <= tp.planar_speed <= EXPLORE_RANGE[1] * base
    tp = compose_throw(out, a, P2, PolicyVariant.PHYSICS_ONLY, 1.0, rng, WS8)
    assert tp.planar_speed == pytest.approx(base) and not tp.exploratory


def head_input_grads(net, out, action, y, label):
    seen = {}
    for name in ("grasp_head", "throw_head"):
        head = getattr(net, name)
        orig = head.backward

        def spy(g, orig=orig, name=name):
            seen[name] = g.copy()
            return orig(g)

        head.backward = spy
    try:
        net.zero_grad()
        losses = net.loss_and_backward(out, action, y, label)
    finally:
        for name in ("grasp_head", "throw_head"):
            del getattr(net, name).backward
    return losses, seen


def test_grasp_failure_leaves_throw_head_untouched(net, scene):
    a = GraspAction(40, 30, 2, 8)
    out = net.forward(scene, P1, rotations=[2], keep_cache=True)
    (lg, lt), seen = head_input_grads(net, out, a, 0, None)
    assert lt == 0.0
    assert lg == pytest.approx(bce_loss(out.qg[0, 40, 30], 0)[0])
    assert "throw_head" not in seen
    assert all(not p.grad.any() for p in net.throw_head.params())
    assert any(p.grad.any() for p in net.grasp_head.params())
    assert any(p.grad.any() for p in net.trunk.params())


def test_exact_label_gives_zero_throw_loss(net, scene):
    a = GraspAction(40, 30, 2, 8)
    out = net.forward(scene, P1, rotations=[2], keep_cache=True)
    (_, lt), _ = head_input_grads(net, out, a, 1, float(out.qt[0, 40, 30]))
    assert lt == 0.0


def test_gradient_enters_one_pixel_per_head(net, scene):
    a = GraspAction(12, 55, 5, 8)
    out = net.forward(scene, P1, rotations=[1, 5, 6], keep_cache=True)
    _, seen = head_input_grads(net, out, a, 1, 0.7)
    for g in seen.values():
        nz = np.argwhere(g != 0)
        assert len(nz) == 1
        assert nz[0][0] == 1  # the slot of rotation 5
        assert tuple(nz[0][1:3]) == net.rot.canvas_index(5, 12, 55)


def test_loss_and_backward_needs_cache(net, scene):
    out = net.forward(scene, P1, rotations=[0])
    with pytest.raises(ValueError):
        net.loss_and_backward(out, GraspAction(0, 0, 0, 8), 1, None)


def test_end_to_end_finite_differences():
    ws = WorkspaceConfig(bin_extents=(0.04, 0.04), num_rotations=2)  # 8 x 8 heightmap
    cfg = NetConfig(trunk=(2, 2, 2, 2), head=(2, 2, 2), tile_channels=1, dtype="float64")
    net = GraspThrowNet(PolicyVariant.RESIDUAL_PHYSICS, ws, cfg, seed=3)
    rng = np.random.default_rng(0)
    for p in net.params():  # non-zero biases so every path carries signal
        p.value[...] = rng.standard_normal(p.value.shape) * 0.5
    img = rng.standard_normal((8, 8, 2))
    bg = np.array([0.1, -0.2])
    a = GraspAction(3, 5, 1, 2)
    label = 0.05

    def total():
        out = net.run(img, bg, 1.3, 1.7, rotations=[1], keep_cache=True)
        q = float(out.qg[0, a.i, a.j])
        t = float(out.qt[0, a.i, a.j])
        from residual_toss.tensornet import huber_loss

        return bce_loss(q, 1)[0] + huber_loss(t, label)[0]

    out = net.run(img, bg, 1.3, 1.7, rotations=[1], keep_cache=True)
    net.zero_grad()
    lg, lt = net.loss_and_backward(out, a, 1, label)
    assert lg + lt == pytest.approx(total())
    for name, p in net.named_params().items():
        analytic = p.grad.copy()
        numeric = numeric_grad(total, p.value)
        if np.abs(numeric).max() < 1e-10:
            assert np.abs(analytic).max() < 1e-8, name
            continue
        assert rel_error(analytic, numeric) < 1e-4, name


def test_crop_training_matches_full_canvas(scene):
    net = GraspThrowNet(PolicyVariant.RESIDUAL_PHYSICS, WS8, NetConfig(trunk=(4, 4, 8, 8), head=(8, 4, 4), dtype="float64"))
    img = scene.normalized.astype(np.float64)
    bg = net.background(scene.stats)
    for a in (GraspAction(0, 0, 3, 8), GraspAction(45, 35, 1, 8), GraspAction(89, 69, 6, 8)):
        net.zero_grad()
        crop_losses = net.train_batch([(img, bg, 2.0, 2.1, a, 1, 0.3)])
        crop_grads = [p.grad.copy() for p in net.params()]
        net.zero_grad()
        out = net.run(img, bg, 2.0, 2.1, rotations=[a.k], keep_cache=True)
        full_losses = net.loss_and_backward(out, a, 1, 0.3)
        assert crop_losses[0] == pytest.approx(full_losses, abs=1e-12)
        for g, p in zip(crop_grads, net.params()):
            np.testing.assert_allclose(g, p.grad, atol=1e-12)


def test_checkpoint_round_trip(tmp_path, net, scene):
    path = tmp_path / "net.rtnw"
    net.save(path)
    other = GraspThrowNet(PolicyVariant.RESIDUAL_PHYSICS, WS8, SMALL, seed=99)
    other.load(path)
    np.testing.assert_array_equal(other.forward(scene, P1, [0]).qg, net.forward(scene, P1, [0]).qg)
    po = GraspThrowNet(PolicyVariant.PHYSICS_ONLY, WS8, SMALL)
    with pytest.raises(ValueError):
        po.load(path)
