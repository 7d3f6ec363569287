"""Vehicle dynamics tests against an independent scalar oracle."""

import math

import numpy as np
import pytest

from suspccd.vehicle import (
    DesignBounds,
    DrivingCondition,
    Plant,
    RealSystemPerturbation,
    SuspensionDesign,
    VehicleParams,
    WheelDisturbance,
    coupling_moments,
    derivative,
    geometric_offsets,
    is_divergent,
    observation_matrix,
    observe,
    rk4_step,
    suspension_force,
    tire_force,
)

PARAMS = VehicleParams()
DESIGN = SuspensionDesign(k_s=27692.0, c_s=1906.5)


def oracle_derivative(x, u, v, a, delta, z_r, zdot_r, params, design, pert=None):
    """Component-by-component scalar re-derivation of the motion equations.

    Deliberately written without any shared code or vectorization so it can
    act as an independent check of the production implementation.
    """
    if pert is None:
        m_s, i_a, i_b = params.m_s, params.i_alpha, params.i_beta
        m_u = list(params.m_u)
        k_t = list(params.k_t)
        h_cg = params.h_cg
        k_nl = c_nl = 0.0
    else:
        m_s = params.m_s * pert.mass_inertia_scale
        i_a = params.i_alpha * pert.mass_inertia_scale
        i_b = params.i_beta * pert.mass_inertia_scale
        m_u = list(pert.m_u_override)
        k_t = [s * k for s, k in zip(pert.k_t_scale, params.k_t)]
        h_cg = params.h_cg + pert.h_cg_delta
        k_nl = pert.k_nl_factor * design.k_s
        c_nl = pert.c_nl_factor * design.c_s
    c_t, l_f, l_r, l = params.c_t, params.l_f, params.l_r, params.l
    k_s, c_s = design.k_s, design.c_s

    z_s, alpha, beta = x[0], x[1], x[2]
    z_u = [x[3], x[4], x[5], x[6]]
    zd_s, alphad, betad = x[7], x[8], x[9]
    zd_u = [x[10], x[11], x[12], x[13]]

    deltas = [
        -l_f * alpha + 0.5 * l * beta,
        -l_f * alpha - 0.5 * l * beta,
        l_r * alpha + 0.5 * l * beta,
        l_r * alpha - 0.5 * l * beta,
    ]
    delta_dots = [
        -l_f * alphad + 0.5 * l * betad,
        -l_f * alphad - 0.5 * l * betad,
        l_r * alphad + 0.5 * l * betad,
        l_r * alphad - 0.5 * l * betad,
    ]
    d_x = [-l_f, -l_f, l_r, l_r]
    d_y = [l / 2, -l / 2, l / 2, -l / 2]

    f_s = []
    f_t = []
    for i in range(4):
        rd = z_u[i] - z_s - deltas[i]
        rv = zd_u[i] - zd_s - delta_dots[i]
        f = k_s * rd + c_s * rv + k_nl * rd ** 3 + c_nl * abs(rv) * rv
        f_s.append(f)
        f_t.append(k_t[i] * (z_r[i] - z_u[i]) + c_t * (zdot_r[i] - zd_u[i]))

    m_alpha = m_s * h_cg * a
    m_beta = m_s * h_cg * v * v * math.tan(delta) / (l_f + l_r)

    out = [0.0] * 14
    out[0], out[1], out[2] = zd_s, alphad, betad
    for i in range(4):
        out[3 + i] = zd_u[i]
    out[7] = sum(f_s[i] + u[i] for i in range(4)) / m_s
    out[8] = (sum((f_s[i] + u[i]) * d_x[i] for i in range(4)) + m_alpha) / i_a
    out[9] = (sum((f_s[i] + u[i]) * d_y[i] for i in range(4)) + m_beta) / i_b
    for i in range(4):
        out[10 + i] = (f_t[i] - f_s[i] - u[i]) / m_u[i]
    return np.array(out)


def expm_oracle(a, order=24, squarings=None):
    """Scaling-and-squaring Taylor-series matrix exponential."""
    norm = np.max(np.sum(np.abs(a), axis=1))
    if squarings is None:
        squarings = max(0, int(math.ceil(math.log2(max(norm, 1e-16)))) + 2)
    b = a / (2.0 ** squarings)
    n = a.shape[0]
    term = np.eye(n)
    result = np.eye(n)
    for k in range(1, order + 1):
        term = term @ b / k
        result = result + term
    for _ in range(squarings):
        result = result @ result
    return result


class TestGeometricOffsets:
    def test_zero_angles(self):
        state = np.zeros(14)
        delta, rate = geometric_offsets(state, PARAMS)
        assert np.all(delta == 0.0) and np.all(rate == 0.0)

    def test_pitch_only(self):
        state = np.zeros(14)
        state[1] = 0.01
        delta, _ = geometric_offsets(state, PARAMS)
        np.testing.assert_allclose(delta, [-0.0135, -0.0135, 0.0135, 0.0135])

    def test_roll_only(self):
        state = np.zeros(14)
        state[2] = 0.02
        delta, _ = geometric_offsets(state, PARAMS)
        np.testing.assert_allclose(delta, [0.0075, -0.0075, 0.0075, -0.0075])

    def test_rates_use_angle_rates(self):
        state = np.zeros(14)
        state[8], state[9] = 0.3, -0.1
        _, rate = geometric_offsets(state, PARAMS)
        expect = np.array([-1.35, -1.35, 1.35, 1.35]) * 0.3 \
            + np.array([0.375, -0.375, 0.375, -0.375]) * -0.1
        np.testing.assert_allclose(rate, expect)


class TestForces:
    def test_zero_deflection(self):
        assert suspension_force(DESIGN, 0.0, 0.0) == 0.0

    def test_linear_spring(self):
        assert suspension_force(DESIGN, 0.01, 0.0) == pytest.approx(276.92)

    def test_nonlinear_cubic(self):
        d = SuspensionDesign(k_s=20000.0, c_s=1000.0)
        pert = RealSystemPerturbation()
        # k_nl = 0.1*20000 = 2000; 20000*0.1 + 2000*0.001 = 2002
        assert suspension_force(d, 0.1, 0.0, nonlinear=pert) == pytest.approx(2002.0)

    def test_quadratic_damping_keeps_sign(self):
        d = SuspensionDesign(k_s=20000.0, c_s=1000.0)
        pert = RealSystemPerturbation()
        f_pos = suspension_force(d, 0.0, 0.5, nonlinear=pert)
        f_neg = suspension_force(d, 0.0, -0.5, nonlinear=pert)
        assert f_pos == pytest.approx(1000.0 * 0.5 + 100.0 * 0.25)
        assert f_neg == pytest.approx(-f_pos)

    def test_tire_force_zero(self):
        state = np.zeros(14)
        state[3:7] = 0.01
        state[10:14] = 0.2
        road = WheelDisturbance(z_r=(0.01,) * 4, zdot_r=(0.2,) * 4)
        for w in (1, 2, 3, 4):
            assert tire_force(PARAMS, w, road, state) == 0.0

    def test_tire_force_table_stiffness(self):
        state = np.zeros(14)
        road = WheelDisturbance(z_r=(0.001, 0.001, 0.0, 0.0))
        assert tire_force(PARAMS, 1, road, state) == pytest.approx(200.0)

    def test_tire_force_perturbed_wheel2(self):
        pert = RealSystemPerturbation()
        eff = pert.apply(PARAMS)
        state = np.zeros(14)
        road = WheelDisturbance(z_r=(0.0, 0.001, 0.0, 0.0))
        assert tire_force(eff, 2, road, state) == pytest.approx(240.0)

    def test_bad_wheel_index(self):
        with pytest.raises(ValueError):
            tire_force(PARAMS, 0, WheelDisturbance.zero(), np.zeros(14))


class TestCouplingMoments:
    def test_zero(self):
        assert coupling_moments(PARAMS, DrivingCondition()) == (0.0, 0.0)

    def test_longitudinal(self):
        m_a, _ = coupling_moments(PARAMS, DrivingCondition(a=2.0))
        assert m_a == pytest.approx(1650.0)

    def test_lateral(self):
        # 1500*0.55*100*tan(0.05)/2.7, cross-checked by direct evaluation
        m_a, m_b = coupling_moments(PARAMS, DrivingCondition(v=10.0, delta=0.05))
        assert m_a == 0.0
        assert m_b == pytest.approx(
            1500.0 * 0.55 * 100.0 * math.tan(0.05) / 2.7)
        assert m_b == pytest.approx(1529.05, abs=0.01)


class TestDerivative:
    def test_equilibrium(self):
        out = derivative(np.zeros(14), np.zeros(4), DrivingCondition(),
                         WheelDisturbance.zero(), PARAMS, DESIGN)
        assert np.all(out == 0.0)

    def test_pure_pitch_moment(self):
        out = derivative(np.zeros(14), np.zeros(4), DrivingCondition(a=2.0),
                         WheelDisturbance.zero(), PARAMS, DESIGN)
        expect = np.zeros(14)
        expect[8] = 1650.0 / 2500.0
        np.testing.assert_allclose(out, expect)
        assert out[8] == pytest.approx(0.66)

    @pytest.mark.parametrize("perturbed", [False, True])
    def test_matches_oracle_random(self, perturbed):
        rng = np.random.default_rng(42)
        pert = RealSystemPerturbation() if perturbed else None
        for _ in range(20):
            x = rng.normal(scale=0.1, size=14)
            u = rng.normal(scale=500.0, size=4)
            v = abs(rng.normal(scale=10.0))
            a = rng.normal(scale=2.0)
            delta = rng.normal(scale=0.05)
            z_r = rng.normal(scale=0.02, size=4)
            zdot_r = rng.normal(scale=0.2, size=4)
            got = derivative(x, u, DrivingCondition(v=v, a=a, delta=delta),
                             WheelDisturbance(z_r=tuple(z_r), zdot_r=tuple(zdot_r)),
                             PARAMS, DESIGN, pert)
            want = oracle_derivative(x, u, v, a, delta, z_r, zdot_r,
                                     PARAMS, DESIGN, pert)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_linearity_superposition(self):
        """Nominal model is linear in (state, u, road) when a = delta = 0."""
        rng = np.random.default_rng(7)
        drive = DrivingCondition(v=10.0)
        plant = Plant(PARAMS, DESIGN)
        for _ in range(10):
            x1, x2 = rng.normal(size=14), rng.normal(size=14)
            u1, u2 = rng.normal(size=4), rng.normal(size=4)
            r1 = WheelDisturbance(tuple(rng.normal(size=4)), tuple(rng.normal(size=4)))
            r2 = WheelDisturbance(tuple(rng.normal(size=4)), tuple(rng.normal(size=4)))
            r12 = WheelDisturbance(tuple(np.add(r1.z_r, r2.z_r)),
                                   tuple(np.add(r1.zdot_r, r2.zdot_r)))
            lhs = plant.derivative(x1 + x2, u1 + u2, drive, r12)
            rhs = plant.derivative(x1, u1, drive, r1) \
                + plant.derivative(x2, u2, drive, r2)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestRk4:
    def test_fixed_point(self):
        plant = Plant(PARAMS, DESIGN)
        x = np.zeros(14)
        for _ in range(100):
            x = plant.rk4_step(x, np.zeros(4), DrivingCondition(),
                               WheelDisturbance.zero())
        assert np.max(np.abs(x)) == 0.0

    def test_rejects_bad_dt(self):
        plant = Plant(PARAMS, DESIGN)
        with pytest.raises(ValueError):
            plant.rk4_step(np.zeros(14), np.zeros(4), DrivingCondition(),
                           WheelDisturbance.zero(), dt=0.0)

    def test_against_matrix_exponential(self):
        """One homogeneous step vs the scaling-and-squaring oracle."""
        plant = Plant(PARAMS, DESIGN)
        a = plant.linearized_matrix()
        rng = np.random.default_rng(3)
        x0 = rng.normal(scale=0.01, size=14)
        dt = 0.002
        exact = expm_oracle(a * dt) @ x0
        got = plant.rk4_step(x0, np.zeros(4), DrivingCondition(),
                             WheelDisturbance.zero(), dt=dt)
        # local error ~ (|A| dt)^5 / 120 * |x|; fastest mode sits near 68 rad/s
        assert np.max(np.abs(got - exact)) < 1e-6

    def test_global_order_four(self):
        """Error at t = 1 s shrinks ~16x per dt halving."""
        plant = Plant(PARAMS, DESIGN)
        a = plant.linearized_matrix()
        rng = np.random.default_rng(11)
        x0 = rng.normal(scale=0.01, size=14)
        exact = expm_oracle(a * 1.0) @ x0
        errors = []
        for dt in (0.02, 0.01, 0.005):
            x = x0.copy()
            for _ in range(round(1.0 / dt)):
                x = plant.rk4_step(x, np.zeros(4), DrivingCondition(),
                                   WheelDisturbance.zero(), dt=dt)
            errors.append(np.max(np.abs(x - exact)))
        for e_coarse, e_fine in zip(errors, errors[1:]):
            ratio = e_coarse / e_fine
            assert 12.0 < ratio < 20.0

    def test_equilibrium_long_run(self):
        plant = Plant(PARAMS, DESIGN)
        x = np.zeros(14)
        for _ in range(10_000):
            x = plant.rk4_step(x, np.zeros(4), DrivingCondition(),
                               WheelDisturbance.zero())
        assert np.max(np.abs(x)) <= 1e-12

    def test_saturation_limit(self):
        plant = Plant(PARAMS, DESIGN, saturation_limit=100.0)
        clamped = plant.clamp_u(np.array([500.0, -500.0, 50.0, 0.0]))
        np.testing.assert_allclose(clamped, [100.0, -100.0, 50.0, 0.0])


class TestPassiveStability:
    def test_eigenvalues_nonpositive_real(self):
        """Linearized passive plant (u = 0) has no growing modes."""
        plant = Plant(PARAMS, DESIGN)
        a = plant.linearized_matrix()
        eig = np.linalg.eigvals(a)
        assert np.max(eig.real) <= 1e-9


class TestObservation:
    def test_zero(self):
        assert np.all(observe(np.zeros(14)) == 0.0)

    def test_relative_displacement(self):
        x = np.zeros(14)
        x[0] = 0.1
        x[3] = 0.02
        y = observe(x)
        assert y[7] == pytest.approx(0.08)
        assert y[3] == pytest.approx(0.02)

    def test_matches_matrix(self):
        c = observation_matrix()
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = rng.normal(size=14)
            np.testing.assert_array_equal(observe(x), c @ x)

    def test_commutes_with_integration(self):
        plant = Plant(PARAMS, DESIGN)
        c = observation_matrix()
        rng = np.random.default_rng(9)
        x = rng.normal(scale=0.01, size=14)
        nxt = plant.rk4_step(x, np.zeros(4), DrivingCondition(v=5.0),
                             WheelDisturbance.zero())
        np.testing.assert_array_equal(observe(nxt), c @ nxt)


class TestPerturbation:
    def test_defaults_match_real_system_spec(self):
        pert = RealSystemPerturbation()
        eff = pert.apply(PARAMS)
        assert eff.m_s == pytest.approx(1650.0)
        assert eff.i_alpha == pytest.approx(2750.0)
        assert eff.i_beta == pytest.approx(550.0)
        assert eff.m_u == (60.0, 50.0, 45.0, 50.0)
        np.testing.assert_allclose(eff.k_t, [1.8e5, 2.4e5, 2.2e5, 1.8e5])
        assert eff.h_cg == pytest.approx(0.60)

    def test_nominal_table_values(self):
        p = VehicleParams()
        assert (p.m_s, p.i_alpha, p.i_beta) == (1500.0, 2500.0, 500.0)
        assert p.m_u == (50.0,) * 4
        assert p.k_t == (2e5,) * 4
        assert (p.c_t, p.l_f, p.l_r, p.l, p.h_cg) == (150.0, 1.35, 1.35, 0.75, 0.55)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            VehicleParams(m_s=-1.0)
        with pytest.raises(ValueError):
            SuspensionDesign(k_s=0.0, c_s=100.0)


class TestBoundsAndGuards:
    def test_design_bounds_clip(self):
        b = DesignBounds()
        d = b.clip(1e9, -5.0)
        assert d.k_s == b.k_s_max and d.c_s == b.c_s_min
        assert b.contains(d)

    def test_normalize_roundtrip(self):
        b = DesignBounds()
        nk, nc = b.normalize(27692.0, 1906.5)
        k, c = b.denormalize(nk, nc)
        assert k == pytest.approx(27692.0) and c == pytest.approx(1906.5)
        assert -1.0 <= nk <= 1.0 and -1.0 <= nc <= 1.0

    def test_divergence_flag(self):
        assert not is_divergent(np.zeros(14))
        bad = np.zeros(14)
        bad[3] = 2e6
        assert is_divergent(bad)
        bad[3] = np.nan
        assert is_divergent(bad)
