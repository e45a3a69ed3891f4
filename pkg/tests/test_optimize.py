import dataclasses

import numpy as np
import pytest

from flowdepth import synth
from flowdepth.errors import ConfigError, ProbeError
from flowdepth.flow import synthesize_flow
from flowdepth.geometry import PoseSE3, rotation_distance
from flowdepth.optimize import (
    OptimizeConfig,
    PoseObjective,
    estimate_pose,
    numeric_gradient,
    params_to_pose,
    pose_loss,
    pose_to_params,
)


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimizeConfig(method="newton")
    with pytest.raises(ConfigError):
        OptimizeConfig(blur_sigmas=(2.0, 1.0))
    with pytest.raises(ConfigError):
        OptimizeConfig(fd_epsilon=0)


def test_numeric_gradient_quadratic():
    g = numeric_gradient(np.array([1.0, 0, 0, 0, 0, 0]), lambda p: 0.5 * p @ p)
    assert np.allclose(g, [1, 0, 0, 0, 0, 0], atol=1e-6)


def test_numeric_gradient_richardson():
    f = lambda p: np.sin(p).sum() + np.exp(p[0] * p[1])  # noqa: E731
    p = np.array([0.3, 0.7, -0.2, 0.1, 0.5, -0.4])
    exact = np.cos(p)
    exact[0] += p[1] * np.exp(p[0] * p[1])
    exact[1] += p[0] * np.exp(p[0] * p[1])
    e1 = np.abs(numeric_gradient(p, f, 1e-2) - exact).max()
    e2 = np.abs(numeric_gradient(p, f, 5e-3) - exact).max()
    assert 3.5 < e1 / e2 < 4.5


def test_numeric_gradient_probe_error():
    with pytest.raises(ProbeError):
        numeric_gradient(np.zeros(6), lambda p: np.inf if p[2] > 0 else 0.0)
    with pytest.raises(ConfigError):
        numeric_gradient(np.zeros(6), lambda p: 0.0, eps=0)


def test_chart_round_trip():
    center = PoseSE3.from_axis_angle([0.1, -0.2, 0.05], [0.3, 0.1, -0.2])
    p = np.array([0.01, -0.02, 0.03, 0.05, -0.01, 0.02])
    T = params_to_pose(p, center)
    assert np.allclose(pose_to_params(T, center), p, atol=1e-12)


def test_pose_loss_chart_consistency(ego_bundle):
    b = ego_bundle
    K = b.spec.K
    center = b.T_cam
    p = np.array([0.004, -0.003, 0.002, 0.01, -0.02, 0.005])
    T = params_to_pose(p, center)
    a = pose_loss(p, b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=center)
    c = pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=T)
    assert a == pytest.approx(c, abs=1e-9)


def test_pose_loss_static_zero(ego_bundle):
    b = ego_bundle
    assert pose_loss(np.zeros(6), b.I_t, b.I_t, b.D_t, b.D_t, b.spec.K) < 1e-12


def test_truth_minimizes_pose_loss(ego_bundle):
    b = ego_bundle
    K = b.spec.K
    truth = pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=b.T_cam)
    for seed in range(50):
        P = synth.perturb_pose(b.T_cam, 1.0, 0.05, seed)
        assert truth <= pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=P)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("with_flow", [False, True])
def test_analytic_gradient_matches_fd(seed, with_flow):
    b = synth.generate(synth.ego_scene_spec(100 + seed))
    K = b.spec.K
    ref = synthesize_flow(b.D_t, b.T_cam, K) if with_flow else None
    obj = PoseObjective(b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=b.T_cam, ref_flow=ref)
    rng = np.random.default_rng(seed)
    p = np.concatenate([rng.normal(0, 0.005, 3), rng.normal(0, 0.01, 3)])
    value, grad = obj.value_and_grad(p)
    assert value == pytest.approx(obj.loss(p), abs=1e-12)
    # the loss jumps when a pixel crosses the image border; differences are
    # taken on the smooth piece the analytic gradient belongs to
    assert rel_err(grad, numeric_gradient(p, obj.frozen_loss(p), 1e-6)) < 1e-4
    # and on the raw loss along every coordinate whose probes keep the valid set
    counts = obj.valid_counts(p)
    fd = numeric_gradient(p, obj.loss, 1e-6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-6
        if obj.valid_counts(p + e) == counts == obj.valid_counts(p - e):
            assert grad[i] == pytest.approx(fd[i], rel=1e-4, abs=1e-4 * np.linalg.norm(grad))


def test_loss_is_piecewise_smooth():
    # documents why raw differences are not always a fair oracle
    b = synth.generate(synth.ego_scene_spec(100))
    obj = PoseObjective(b.I_t, b.I_t1, b.D_t, b.D_t1, b.spec.K, center=b.T_cam)
    p = np.concatenate([np.random.default_rng(0).normal(0, 0.005, 3), np.random.default_rng(0).normal(0, 0.01, 3)])
    frozen = obj.frozen_loss(p)
    assert frozen(p) == pytest.approx(obj.loss(p), abs=1e-12)


def test_gradient_small_at_minimum(ego_bundle):
    b = ego_bundle
    # interpolation leaves a small residual, so the minimum sits near (not at) the truth
    pose, _ = estimate_pose(b.I_t, b.I_t1, b.D_t, b.D_t1, b.spec.K, init=b.T_cam, cfg=OptimizeConfig(blur_sigmas=(0.0,)))
    obj = PoseObjective(b.I_t, b.I_t1, b.D_t, b.D_t1, b.spec.K, center=pose)
    assert np.linalg.norm(numeric_gradient(np.zeros(6), obj.frozen_loss(np.zeros(6)), 1e-6)) < 1e-3


def test_identical_frames_identity(ego_bundle):
    b = ego_bundle
    pose, trace = estimate_pose(b.I_t, b.I_t, b.D_t, b.D_t, b.spec.K)
    assert rotation_distance(pose, PoseSE3.identity()) < 1e-12
    assert np.linalg.norm(pose.translation) < 1e-12
    assert trace.losses[-1] < 1e-12 and trace.converged


@pytest.mark.slow
def test_recover_sideways_translation():
    spec = dataclasses.replace(synth.ego_scene_spec(2), ego=PoseSE3.from_translation([0.1, 0, 0]))
    b = synth.generate(spec)
    pose, trace = estimate_pose(b.I_t, b.I_t1, b.D_t, b.D_t1, b.spec.K)
    assert np.linalg.norm(pose.translation - [0.1, 0, 0]) < 1e-3
    assert np.rad2deg(rotation_distance(pose, b.T_cam)) < 0.1
    for _, losses in trace.stages:
        assert all(b2 <= a for a, b2 in zip(losses, losses[1:]))


def test_init_at_truth_never_worse(ego_bundle):
    b = ego_bundle
    K = b.spec.K
    cfg = OptimizeConfig(max_iterations=5, blur_sigmas=(0.0,))
    pose, trace = estimate_pose(b.I_t, b.I_t1, b.D_t, b.D_t1, K, init=b.T_cam, cfg=cfg)
    start = pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=b.T_cam)
    end = pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=pose)
    assert end <= start
    assert trace.losses[0] == pytest.approx(start, abs=1e-12)


def test_gd_and_numeric_modes_descend(ego_bundle):
    b = ego_bundle
    K = b.spec.K
    init = synth.perturb_pose(b.T_cam, 0.5, 0.02, 3)
    start = pose_loss(np.zeros(6), b.I_t, b.I_t1, b.D_t, b.D_t1, K, center=init)
    for cfg in (
        OptimizeConfig(method="gd", max_iterations=10, blur_sigmas=(0.0,)),
        OptimizeConfig(gradient="numeric", max_iterations=3, blur_sigmas=(0.0,)),
    ):
        pose, trace = estimate_pose(b.I_t, b.I_t1, b.D_t, b.D_t1, K, init=init, cfg=cfg)
        assert trace.losses[-1] < start
        assert all(y <= x for x, y in zip(trace.losses, trace.losses[1:]))


def test_trace_csv(ego_bundle):
    b = ego_bundle
    _, trace = estimate_pose(b.I_t, b.I_t, b.D_t, b.D_t, b.spec.K, cfg=OptimizeConfig(blur_sigmas=(1.0, 0.0)))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "stage_sigma,iteration,loss"
    assert {line.split(",")[0] for line in lines[1:]} == {"1.0", "0.0"}
