"""7-DOF full-vehicle dynamics with active suspensions.

State layout (14 entries):
    [z_s, alpha, beta, z_u1..z_u4, zdot_s, alphadot, betadot, zdot_u1..zdot_u4]

Observation layout (11 entries):
    [zdot_s, alphadot, betadot, z_u1..z_u4, (z_s - z_u1)..(z_s - z_u4)]

Body heave, pitch and roll plus four unsprung vertical DOFs. Small-angle
rotational dynamics; wheels never leave the ground; actuators are ideal
force sources (optional symmetric saturation via the plant config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_STATE = 14
N_OBS = 11
N_WHEELS = 4

STATE_NAMES = (
    "z_s", "alpha", "beta",
    "z_u1", "z_u2", "z_u3", "z_u4",
    "zdot_s", "alphadot", "betadot",
    "zdot_u1", "zdot_u2", "zdot_u3", "zdot_u4",
)
OBS_NAMES = (
    "zdot_s", "alphadot", "betadot",
    "z_u1", "z_u2", "z_u3", "z_u4",
    "susp_defl_1", "susp_defl_2", "susp_defl_3", "susp_defl_4",
)

# State magnitude beyond which an episode is declared divergent.
DIVERGENCE_LIMIT = 1e6


def _require_positive(**kwargs):
    for name, value in kwargs.items():
        arr = np.asarray(value, dtype=float)
        if not np.all(arr > 0.0):
            raise ValueError(f"{name} must be strictly positive, got {value!r}")


@dataclass(frozen=True)
class VehicleParams:
    """Fixed physical constants of the vehicle body and tires."""

    m_s: float = 1500.0          # sprung mass [kg]
    i_alpha: float = 2500.0      # pitch inertia [kg m^2]
    i_beta: float = 500.0        # roll inertia [kg m^2]
    m_u: tuple[float, float, float, float] = (50.0, 50.0, 50.0, 50.0)
    k_t: tuple[float, float, float, float] = (2e5, 2e5, 2e5, 2e5)
    c_t: float = 150.0           # tire damping [N s/m]
    l_f: float = 1.35            # CG to front axle [m]
    l_r: float = 1.35            # CG to rear axle [m]
    l: float = 0.75              # track width [m]
    h_cg: float = 0.55           # CG height [m]

    def __post_init__(self):
        if len(self.m_u) != N_WHEELS or len(self.k_t) != N_WHEELS:
            raise ValueError("m_u and k_t need one entry per wheel")
        _require_positive(
            m_s=self.m_s, i_alpha=self.i_alpha, i_beta=self.i_beta,
            m_u=self.m_u, k_t=self.k_t, c_t=self.c_t,
            l_f=self.l_f, l_r=self.l_r, l=self.l, h_cg=self.h_cg,
        )


@dataclass(frozen=True)
class SuspensionDesign:
    """Co-designed spring stiffness and damping, shared by all four corners."""

    k_s: float
    c_s: float

    def __post_init__(self):
        _require_positive(k_s=self.k_s, c_s=self.c_s)

    def as_array(self) -> np.ndarray:
        return np.array([self.k_s, self.c_s])


@dataclass(frozen=True)
class DesignBounds:
    """Box constraints for the design variables."""

    k_s_min: float = 5_000.0
    k_s_max: float = 60_000.0
    c_s_min: float = 500.0
    c_s_max: float = 6_000.0

    def clip(self, k_s: float, c_s: float) -> SuspensionDesign:
        return SuspensionDesign(
            k_s=float(min(max(k_s, self.k_s_min), self.k_s_max)),
            c_s=float(min(max(c_s, self.c_s_min), self.c_s_max)),
        )

    def contains(self, design: SuspensionDesign) -> bool:
        return (self.k_s_min <= design.k_s <= self.k_s_max
                and self.c_s_min <= design.c_s <= self.c_s_max)

    # Midpoint/half-span scaling used to feed well-conditioned design values
    # to the networks (raw stiffness ~1e4 would swamp tanh layers).
    def normalize(self, k_s, c_s):
        mk, hk = self._mid_half(self.k_s_min, self.k_s_max)
        mc, hc = self._mid_half(self.c_s_min, self.c_s_max)
        return (k_s - mk) / hk, (c_s - mc) / hc

    def denormalize(self, nk, nc):
        mk, hk = self._mid_half(self.k_s_min, self.k_s_max)
        mc, hc = self._mid_half(self.c_s_min, self.c_s_max)
        return nk * hk + mk, nc * hc + mc

    @staticmethod
    def _mid_half(lo, hi):
        return 0.5 * (lo + hi), 0.5 * (hi - lo)


@dataclass(frozen=True)
class DrivingCondition:
    """Longitudinal speed/acceleration and steering angle at one instant."""

    v: float = 0.0
    a: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if self.v < 0.0:
            raise ValueError("speed must be non-negative")


@dataclass(frozen=True)
class WheelDisturbance:
    """Road elevation and elevation rate under each wheel."""

    z_r: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    zdot_r: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @classmethod
    def zero(cls) -> "WheelDisturbance":
        return cls()


@dataclass(frozen=True)
class RealSystemPerturbation:
    """Deviations defining the emulated real system.

    Cubic spring / quadratic damping nonlinearities scale with the current
    design (k_nl = k_nl_factor * k_s, c_nl = c_nl_factor * c_s); masses,
    inertias, CG height and per-wheel tire stiffness deviate from nominal.
    """

    k_nl_factor: float = 0.1
    c_nl_factor: float = 0.1
    m_u_override: tuple[float, float, float, float] = (60.0, 50.0, 45.0, 50.0)
    h_cg_delta: float = 0.05
    k_t_scale: tuple[float, float, float, float] = (0.9, 1.2, 1.1, 0.9)
    mass_inertia_scale: float = 1.1

    def __post_init__(self):
        _require_positive(
            k_t_scale=self.k_t_scale,
            mass_inertia_scale=self.mass_inertia_scale,
        )

    def apply(self, params: VehicleParams) -> VehicleParams:
        """Perturbed physical constants (everything except the nonlinear forces)."""
        return VehicleParams(
            m_s=params.m_s * self.mass_inertia_scale,
            i_alpha=params.i_alpha * self.mass_inertia_scale,
            i_beta=params.i_beta * self.mass_inertia_scale,
            m_u=self.m_u_override,
            k_t=tuple(s * k for s, k in zip(self.k_t_scale, params.k_t)),
            c_t=params.c_t,
            l_f=params.l_f,
            l_r=params.l_r,
            l=params.l,
            h_cg=params.h_cg + self.h_cg_delta,
        )


def pitch_roll_levers(params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Signed lever arms (d_x, d_y) per wheel: FL, FR, RL, RR."""
    d_x = np.array([-params.l_f, -params.l_f, params.l_r, params.l_r])
    d_y = np.array([params.l / 2, -params.l / 2, params.l / 2, -params.l / 2])
    return d_x, d_y


def geometric_offsets(state: np.ndarray, params: VehicleParams):
    """Wheel-level body displacement (and rate) induced by pitch and roll.

    Rear wheels use the rear lever arm l_r so the offsets stay consistent
    with the moment arms when l_f != l_r.
    """
    d_x, d_y = pitch_roll_levers(params)
    delta = d_x * state[1] + d_y * state[2]
    delta_rate = d_x * state[8] + d_y * state[9]
    return delta, delta_rate


def suspension_force(design: SuspensionDesign, rel_disp, rel_vel,
                     nonlinear: RealSystemPerturbation | None = None):
    """Per-corner suspension force; accepts scalars or per-wheel arrays.

    rel_disp = z_u - z_s - Delta, rel_vel its rate. The nonlinear variant adds
    the cubic-spring and quadratic-damping terms of the emulated real system.
    """
    rel_disp = np.asarray(rel_disp, dtype=float)
    rel_vel = np.asarray(rel_vel, dtype=float)
    force = design.k_s * rel_disp + design.c_s * rel_vel
    if nonlinear is not None:
        k_nl = nonlinear.k_nl_factor * design.k_s
        c_nl = nonlinear.c_nl_factor * design.c_s
        force = force + k_nl * rel_disp ** 3 + c_nl * np.abs(rel_vel) * rel_vel
    return force


def tire_force(params: VehicleParams, wheel: int, road: WheelDisturbance,
               state: np.ndarray) -> float:
    """Vertical tire contact force at one wheel (1-indexed)."""
    if wheel not in (1, 2, 3, 4):
        raise ValueError("wheel index must be in 1..4")
    i = wheel - 1
    return (params.k_t[i] * (road.z_r[i] - state[3 + i])
            + params.c_t * (road.zdot_r[i] - state[10 + i]))


def coupling_moments(params: VehicleParams, drive: DrivingCondition):
    """Pitch/roll moments from longitudinal and lateral inertial coupling."""
    m_alpha = params.m_s * params.h_cg * drive.a
    m_beta = (params.m_s * params.h_cg * drive.v ** 2
              * math.tan(drive.delta) / (params.l_f + params.l_r))
    return m_alpha, m_beta


class Plant:
    """Precomputed, immutable plant for fast repeated stepping.

    `perturbation=None` gives the nominal digital model; passing a
    RealSystemPerturbation yields the emulated real system (perturbed
    constants plus nonlinear suspension forces).
    """

    def __init__(self, params: VehicleParams, design: SuspensionDesign,
                 perturbation: RealSystemPerturbation | None = None,
                 saturation_limit: float | None = None):
        self.base_params = params
        self.design = design
        self.perturbation = perturbation
        self.saturation_limit = saturation_limit
        eff = perturbation.apply(params) if perturbation is not None else params
        self.params = eff
        self.m_s = eff.m_s
        self.i_alpha = eff.i_alpha
        self.i_beta = eff.i_beta
        self.m_u = np.array(eff.m_u)
        self.k_t = np.array(eff.k_t)
        self.c_t = eff.c_t
        self.d_x, self.d_y = pitch_roll_levers(eff)
        self.k_s = design.k_s
        self.c_s = design.c_s
        if perturbation is not None:
            self.k_nl = perturbation.k_nl_factor * design.k_s
            self.c_nl = perturbation.c_nl_factor * design.c_s
        else:
            self.k_nl = 0.0
            self.c_nl = 0.0

    def clamp_u(self, u: np.ndarray) -> np.ndarray:
        if self.saturation_limit is None:
            return u
        return np.clip(u, -self.saturation_limit, self.saturation_limit)

    def derivative(self, state: np.ndarray, u: np.ndarray,
                   drive: DrivingCondition, road: WheelDisturbance) -> np.ndarray:
        """Time derivative of the 14-entry state."""
        z_s = state[0]
        z_u = state[3:7]
        zdot_s = state[7]
        zdot_u = state[10:14]

        delta = self.d_x * state[1] + self.d_y * state[2]
        delta_rate = self.d_x * state[8] + self.d_y * state[9]
        rel_disp = z_u - z_s - delta
        rel_vel = zdot_u - zdot_s - delta_rate

        f_s = self.k_s * rel_disp + self.c_s * rel_vel
        if self.k_nl != 0.0 or self.c_nl != 0.0:
            f_s = f_s + self.k_nl * rel_disp ** 3 \
                + self.c_nl * np.abs(rel_vel) * rel_vel
        f_t = self.k_t * (np.asarray(road.z_r) - z_u) \
            + self.c_t * (np.asarray(road.zdot_r) - zdot_u)

        m_alpha = self.m_s * self.h_cg * drive.a
        m_beta = (self.m_s * self.h_cg * drive.v ** 2
                  * math.tan(drive.delta) / (self.params.l_f + self.params.l_r))

        total = f_s + u
        out = np.empty(N_STATE)
        out[0:7] = state[7:14]
        out[7] = np.sum(total) / self.m_s
        out[8] = (np.dot(total, self.d_x) + m_alpha) / self.i_alpha
        out[9] = (np.dot(total, self.d_y) + m_beta) / self.i_beta
        out[10:14] = (f_t - f_s - u) / self.m_u
        return out

    @property
    def h_cg(self):
        return self.params.h_cg

    def rk4_step(self, state: np.ndarray, u: np.ndarray,
                 drive: DrivingCondition, road: WheelDisturbance,
                 dt: float = 0.01) -> np.ndarray:
        """Classical RK4 step; drive and road are held constant across substeps."""
        return self.step_and_accels(state, u, drive, road, dt)[0]

    def step_and_accels(self, state: np.ndarray, u: np.ndarray,
                        drive: DrivingCondition, road: WheelDisturbance,
                        dt: float = 0.01):
        """RK4 step plus the pre-step body accelerations (from stage one)."""
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        u = self.clamp_u(np.asarray(u, dtype=float))
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = self.derivative(state, u, drive, road)
            k2 = self.derivative(state + 0.5 * dt * k1, u, drive, road)
            k3 = self.derivative(state + 0.5 * dt * k2, u, drive, road)
            k4 = self.derivative(state + dt * k3, u, drive, road)
            nxt = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return nxt, (k1[7], k1[8], k1[9])

    def body_accelerations(self, state, u, drive, road):
        """(zdd_s, alphadd, betadd) at the given state and inputs."""
        d = self.derivative(state, self.clamp_u(np.asarray(u, dtype=float)),
                            drive, road)
        return d[7], d[8], d[9]

    def linearized_matrix(self) -> np.ndarray:
        """A of xdot = A x for the homogeneous system (zero drive/road/u)."""
        a = np.zeros((N_STATE, N_STATE))
        zero_drive = DrivingCondition()
        zero_road = WheelDisturbance.zero()
        u0 = np.zeros(N_WHEELS)
        base = self.derivative(np.zeros(N_STATE), u0, zero_drive, zero_road)
        for j in range(N_STATE):
            e = np.zeros(N_STATE)
            e[j] = 1.0
            a[:, j] = self.derivative(e, u0, zero_drive, zero_road) - base
        return a


def derivative(state, u, drive: DrivingCondition, road: WheelDisturbance,
               params: VehicleParams, design: SuspensionDesign,
               perturbation: RealSystemPerturbation | None = None) -> np.ndarray:
    return Plant(params, design, perturbation).derivative(
        np.asarray(state, dtype=float), np.asarray(u, dtype=float), drive, road)


def rk4_step(state, u, drive: DrivingCondition, road: WheelDisturbance,
             dt: float, params: VehicleParams, design: SuspensionDesign,
             perturbation: RealSystemPerturbation | None = None) -> np.ndarray:
    return Plant(params, design, perturbation).rk4_step(
        np.asarray(state, dtype=float), np.asarray(u, dtype=float),
        drive, road, dt)


def observation_matrix() -> np.ndarray:
    """The fixed 11x14 selection/difference matrix C with y = C x."""
    c = np.zeros((N_OBS, N_STATE))
    c[0, 7] = 1.0   # zdot_s
    c[1, 8] = 1.0   # alphadot
    c[2, 9] = 1.0   # betadot
    for i in range(N_WHEELS):
        c[3 + i, 3 + i] = 1.0       # z_ui
        c[7 + i, 0] = 1.0           # z_s - z_ui
        c[7 + i, 3 + i] = -1.0
    return c


def observe(state: np.ndarray) -> np.ndarray:
    """Extract the 11 sensor-accessible outputs from the full state."""
    out = np.empty(N_OBS)
    out[0:3] = state[7:10]
    out[3:7] = state[3:7]
    out[7:11] = state[0] - state[3:7]
    return out


def is_divergent(state: np.ndarray) -> bool:
    return bool(np.any(~np.isfinite(state))
                or np.any(np.abs(state) > DIVERGENCE_LIMIT))
