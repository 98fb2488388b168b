import math
import warnings

import numpy as np
import pytest

import oracles
from plnav.frames import so3_exp, so3_log
from plnav.navstate import ImuBias, NavState
from plnav.preintegration import (
    BiasDriftWarning,
    ImuNoiseParams,
    ImuSample,
    ImuSeries,
    PreintegratedImu,
    bias_corrected_deltas,
    imu_residual,
    integrate_sample,
    predict_state,
    preintegrate,
    preintegrate_spans,
    residual_jacobians,
)

NOISE = ImuNoiseParams()
DT = 0.005


def series(gyro, accel, n, dt=DT):
    t = dt * np.arange(1, n + 1)
    return ImuSeries(t, np.broadcast_to(gyro, (n, 3)), np.broadcast_to(accel, (n, 3)))


def wiggly(rng, n):
    gyro = np.array([0.05, -0.1, 0.4]) + 0.1 * np.sin(np.arange(n)[:, None] * [0.03, 0.05, 0.02])
    accel = np.array([0.5, 0.1, 9.8]) + rng.normal(scale=0.3, size=(n, 3))
    return gyro, accel


def test_constant_rate():
    pre = preintegrate(series([0, 0, 0.1], [0, 0, 0], 100, 0.01), 0.0, NOISE)
    assert np.allclose(pre.delta_R, so3_exp([0, 0, 0.1]), atol=1e-13)
    assert np.array_equal(pre.delta_v, np.zeros(3))
    assert pre.dt_total == pytest.approx(1.0, abs=1e-9)
    assert pre.n_samples == 100


def test_constant_acceleration():
    pre = preintegrate(series([0, 0, 0], [0, 0, 1], 100, 0.01), 0.0, NOISE)
    assert np.allclose(pre.delta_v, [0, 0, 1], atol=1e-13)
    assert np.allclose(pre.delta_p, [0, 0, 0.5], atol=1e-13)


def test_matches_reference_loop(rng):
    gyro, accel = wiggly(rng, 150)
    pre = preintegrate(ImuSeries(DT * np.arange(1, 151), gyro, accel), 0.0, NOISE)
    R, v, p = oracles.integrate_reference(gyro, accel, DT)
    assert np.allclose(pre.delta_R, R, atol=1e-12)
    assert np.allclose(pre.delta_v, v, atol=1e-11)
    assert np.allclose(pre.delta_p, p, atol=1e-11)


def test_sample_by_sample_equals_batch(rng):
    gyro, accel = wiggly(rng, 40)
    acc = PreintegratedImu()
    for k in range(40):
        acc = integrate_sample(acc, ImuSample((k + 1) * DT, gyro[k], accel[k]), DT, NOISE)
    pre = preintegrate(ImuSeries(DT * np.arange(1, 41), gyro, accel), 0.0, NOISE)
    for name in ("delta_R", "delta_v", "delta_p", "covariance", "J_dR_dbg", "J_dv_dba", "J_dp_dbg"):
        assert np.allclose(getattr(acc, name), getattr(pre, name), atol=1e-14), name


def test_spans_equal_individual_runs(rng):
    n = 400
    gyro, accel = wiggly(rng, n)
    imu = ImuSeries(DT * np.arange(1, n + 1), gyro, accel)
    spans = [(0.0, 0, 200), (1.0, 200, 330), (1.65, 330, 400)]
    batch = preintegrate_spans(imu, spans, NOISE)
    for (t0, a, b), pre in zip(spans, batch):
        one = preintegrate(imu.slice(a, b), t0, NOISE)
        assert pre.dt_total == pytest.approx(one.dt_total, abs=1e-12)
        for name in ("delta_R", "delta_v", "delta_p", "covariance", "J_dv_dbg"):
            assert np.allclose(getattr(pre, name), getattr(one, name), atol=1e-13), name


def test_dt_total_is_sum_of_intervals():
    t = np.cumsum([0.004, 0.005, 0.006, 0.005])
    pre = preintegrate(ImuSeries(t, np.zeros((4, 3)), np.zeros((4, 3))), 0.0, NOISE)
    assert abs(pre.dt_total - t[-1]) < 1e-9


def test_non_positive_dt_rejected():
    with pytest.raises(ValueError):
        integrate_sample(PreintegratedImu(), ImuSample(0.0, np.zeros(3), np.zeros(3)), 0.0, NOISE)
    with pytest.raises(ValueError):
        preintegrate(ImuSeries([0.1], [[0, 0, 0]], [[0, 0, 0]]), 0.2, NOISE)
    with pytest.raises(ValueError):
        ImuSeries([0.2, 0.1], np.zeros((2, 3)), np.zeros((2, 3)))


def test_fold_composition(rng):
    n, k = 300, 117
    gyro, accel = wiggly(rng, n)
    imu = ImuSeries(DT * np.arange(1, n + 1), gyro, accel)
    whole = preintegrate(imu, 0.0, NOISE)
    a = preintegrate(imu.slice(0, k), 0.0, NOISE)
    b = preintegrate(imu.slice(k, n), imu.t[k - 1], NOISE)
    R, v, p = oracles.compose_deltas((a.delta_R, a.delta_v, a.delta_p), (b.delta_R, b.delta_v, b.delta_p),
                                     b.dt_total)
    assert np.abs(R - whole.delta_R).max() < 1e-9
    assert np.abs(v - whole.delta_v).max() < 1e-9
    assert np.abs(p - whole.delta_p).max() < 1e-9


def test_covariance_symmetric_psd_every_step(rng):
    gyro, accel = wiggly(rng, 200)
    acc = PreintegratedImu()
    for k in range(200):
        acc = integrate_sample(acc, ImuSample((k + 1) * DT, gyro[k], accel[k]), DT, NOISE)
        C = acc.covariance
        assert np.array_equal(C, C.T) or np.abs(C - C.T).max() < 1e-20
        assert np.linalg.eigvalsh(C).min() >= -1e-12


def test_gyro_noise_covariance_grows_linearly():
    noise = ImuNoiseParams(gyro_noise_density=1e-3, accel_noise_density=1e-12)
    one = preintegrate(series([0.01, 0.02, 0.2], [0, 0, 9.8], 200), 0.0, noise)
    two = preintegrate(series([0.01, 0.02, 0.2], [0, 0, 9.8], 400), 0.0, noise)
    r1 = np.trace(one.covariance[:3, :3])
    r2 = np.trace(two.covariance[:3, :3])
    assert abs(r2 / r1 - 2.0) < 0.05 * 2.0
    assert r1 == pytest.approx(3 * 1e-6 * 1.0, rel=0.05)


def test_covariance_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    n = 200
    gyro = np.array([0.1, -0.2, 0.5]) + 0.2 * np.sin(np.arange(n)[:, None] * [0.02, 0.03, 0.05])
    accel = np.array([1.0, 0.5, 9.8]) + 0.5 * np.cos(np.arange(n)[:, None] * [0.04, 0.01, 0.02])
    noise = ImuNoiseParams(gyro_noise_density=5e-3, accel_noise_density=5e-2)
    pre = preintegrate(ImuSeries(DT * np.arange(1, n + 1), gyro, accel), 0.0, noise)
    mc = oracles.monte_carlo_deltas(gyro, accel, DT, 5e-3, 5e-2, 5000, rng)
    err = np.linalg.norm(pre.covariance - mc) / np.linalg.norm(mc)
    assert err < 0.15


# ---------------------------------------------------------------- bias correction


def test_bias_correction_identity():
    b = ImuBias([0.01, 0, 0], [0, 1e-3, 0])
    pre = preintegrate(series([0, 0, 0.3], [1, 0, 9.8], 100), 0.0, NOISE, b)
    dR, dv, dp, far = bias_corrected_deltas(pre, b)
    assert np.array_equal(dR, pre.delta_R @ so3_exp(np.zeros(3)))
    assert np.array_equal(dv, pre.delta_v)
    assert np.array_equal(dp, pre.delta_p)
    assert not far


def test_bias_correction_matches_reintegration(rng):
    gyro, accel = wiggly(rng, 200)
    imu = ImuSeries(DT * np.arange(1, 201), gyro, accel)
    pre = preintegrate(imu, 0.0, NOISE)
    for _ in range(10):
        dbg = rng.normal(size=3)
        dbg *= 1e-3 / np.linalg.norm(dbg)
        new = ImuBias(np.zeros(3), dbg)
        dR, dv, dp, _ = bias_corrected_deltas(pre, new)
        R, v, p = oracles.integrate_reference(gyro, accel, DT, bg=dbg)
        assert np.linalg.norm(so3_log(R.T @ dR)) < 1e-4
        assert np.linalg.norm(dv - v) < 1e-4
        assert np.linalg.norm(dp - p) < 1e-4


def test_accel_bias_correction_exact(rng):
    gyro, accel = wiggly(rng, 120)
    imu = ImuSeries(DT * np.arange(1, 121), gyro, accel)
    pre = preintegrate(imu, 0.0, NOISE)
    dba = np.array([0.05, -0.02, 0.03])
    _, dv, dp, _ = bias_corrected_deltas(pre, ImuBias(dba, np.zeros(3)))
    _, v, p = oracles.integrate_reference(gyro, accel, DT, ba=dba)
    # Accel bias enters linearly, so the first-order update is exact.
    assert np.allclose(dv, v, atol=1e-12)
    assert np.allclose(dp, p, atol=1e-12)
    _, dv2, dp2, _ = bias_corrected_deltas(pre, ImuBias(2 * dba, np.zeros(3)))
    assert np.allclose(dv2 - pre.delta_v, 2 * (dv - pre.delta_v), atol=1e-14)
    assert np.allclose(dp2 - pre.delta_p, 2 * (dp - pre.delta_p), atol=1e-14)


def test_bias_drift_warning():
    pre = preintegrate(series([0, 0, 0.3], [1, 0, 9.8], 10), 0.0, NOISE)
    with pytest.warns(BiasDriftWarning):
        _, _, _, far = bias_corrected_deltas(pre, ImuBias([0, 0, 0], [0.06, 0, 0]))
    assert far
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        bias_corrected_deltas(pre, ImuBias([0.4, 0, 0], [0.04, 0, 0]))


# ---------------------------------------------------------------- prediction and residual


def test_predict_equilibrium(rng):
    g = np.array([0.0, 0.0, -9.81])
    R = oracles.random_rotation(rng)
    pre = preintegrate(series([0, 0, 0], -R.T @ g, 200), 0.0, NOISE)
    s = NavState(R, [1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    out = predict_state(s, pre, g)
    assert np.allclose(out.position, s.position, atol=1e-9)
    assert np.allclose(out.velocity, s.velocity, atol=1e-9)


def test_predict_free_fall():
    g = np.array([0.3, -0.2, -9.8])
    pre = preintegrate(series([0.1, 0.2, 0.3], [0, 0, 0], 150), 0.0, NOISE)
    s = NavState(np.eye(3), np.zeros(3), [1.0, 0, 0])
    out = predict_state(s, pre, g)
    assert np.allclose(out.velocity - s.velocity, g * pre.dt_total, rtol=0, atol=1e-14)
    assert out.epoch == pytest.approx(pre.dt_total)


def test_predict_requires_time():
    with pytest.raises(ValueError):
        predict_state(NavState(np.eye(3), np.zeros(3), np.zeros(3)), PreintegratedImu(), np.zeros(3))


def test_residual_zero_at_prediction(rng):
    for _ in range(20):
        si, _, pre, g = oracles.random_imu_case(rng)
        si = NavState(si.rotation, si.position, si.velocity, pre.bias_lin)
        r = imu_residual(si, predict_state(si, pre, g), pre, g).vector()
        assert np.abs(r).max() < 1e-10


def test_residual_linear_in_position(rng):
    si, sj, pre, g = oracles.random_imu_case(rng)
    r0 = imu_residual(si, sj, pre, g)
    moved = NavState(sj.rotation, sj.position + [1.0, 0, 0], sj.velocity, sj.bias)
    r1 = imu_residual(si, moved, pre, g)
    assert np.allclose(r1.r_dp - r0.r_dp, si.rotation.T @ [1.0, 0, 0], atol=1e-12)
    assert np.array_equal(r1.r_dv, r0.r_dv)


def test_jacobian_vj_at_zero_residual(rng):
    si, _, pre, g = oracles.random_imu_case(rng)
    si = NavState(si.rotation, si.position, si.velocity, pre.bias_lin)
    _, Jj = residual_jacobians(si, predict_state(si, pre, g), pre, g)
    assert np.array_equal(Jj[3:6, 6:9], si.rotation.T)


def _check_case(si, sj, pre, g, pos_eps=None):
    def res(states):
        return imu_residual(states[0], states[1], pre, g).vector()

    Ji, Jj = residual_jacobians(si, sj, pre, g)
    Ni = oracles.numeric_jacobian(res, [si, sj], 0, pos_eps=pos_eps)
    Nj = oracles.numeric_jacobian(res, [si, sj], 1, pos_eps=pos_eps)
    return oracles.relative_error(np.hstack([Ji, Jj]), np.hstack([Ni, Nj])), Ji, Jj, Ni, Nj


def test_jacobians_match_finite_differences(rng):
    worst = 0.0
    for _ in range(100):
        err, Ji, Jj, Ni, Nj = _check_case(*oracles.random_imu_case(rng))
        worst = max(worst, err)
        # Block-wise as well, so a small block cannot hide behind a large one.
        for a, b in ((Ji, Ni), (Jj, Nj)):
            for rows in (slice(0, 3), slice(3, 6), slice(6, 9)):
                for cols in (slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)):
                    d = np.linalg.norm(a[rows, cols] - b[rows, cols])
                    assert d <= 1e-5 * max(np.linalg.norm(b[rows, cols]), 1.0)
    assert worst < 1e-5


def test_jacobians_at_ecef_scale(rng):
    si, sj, pre, g = oracles.random_imu_case(rng)
    off = np.array([4.18e6, 8.6e5, 4.72e6])
    si = NavState(si.rotation, si.position + off, si.velocity, si.bias)
    sj = NavState(sj.rotation, sj.position + off, sj.velocity, sj.bias)
    err, *_ = _check_case(si, sj, pre, g, pos_eps=1e-2)
    assert err < 1e-5


def test_bias_jacobian_blocks_are_preintegration_jacobians(rng):
    si, sj, pre, g = oracles.random_imu_case(rng)
    si = NavState(si.rotation, si.position, si.velocity, pre.bias_lin)
    Ji, _ = residual_jacobians(si, sj, pre, g)
    assert np.array_equal(Ji[3:6, 9:12], -pre.J_dv_dba)
    assert np.array_equal(Ji[6:9, 9:12], -pre.J_dp_dba)
    assert np.array_equal(Ji[3:6, 12:15], -pre.J_dv_dbg)


def test_noise_params_validation():
    with pytest.raises(ValueError):
        ImuNoiseParams(gyro_noise_density=0.0)
    assert math.isclose(NOISE.sample_rate, 200.0)
