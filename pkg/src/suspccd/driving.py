"""Driver command profiles, vehicle path integration, wheel-level road inputs.

Two scripted driver styles share the same 1,200 s / 100 Hz schedule:
acceleration, cruise, braking, plus periodic steering maneuvers. The mild
driver ramps at 2 m/s^2 to a 12 m/s cruise with small, infrequent steering;
the aggressive driver ramps at 6 m/s^2 to 20 m/s with frequent, sharp
steering. Both command series are Savitzky-Golay smoothed. A small constant
steering bias keeps the resulting path circulating inside the road map.

Frames: the path/yaw kinematics place the front wheels ahead of the CG at
+l_f with FL at lateral offset -l/2 (road-lookup frame). The dynamics module
uses its own signed lever convention for moments; the two frames are
deliberately independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import savgol_filter

from .road import RoadSurface
from .vehicle import VehicleParams, WheelDisturbance

PROFILE_DT = 0.01
PROFILE_DURATION = 1200.0

SG_WINDOW = 51
SG_POLYORDER = 3


@dataclass(frozen=True)
class ProfileStyle:
    """Schedule constants for one driver style."""

    name: str
    accel: float            # ramp target [m/s^2]
    cruise_speed: float     # [m/s]
    steer_bias: float       # constant offset keeping the path on-map [rad]
    steer_amplitude: float  # maneuver amplitude on top of the bias [rad]
    steer_period: float     # time between maneuvers [s]
    steer_duration: float   # maneuver length [s]


MILD = ProfileStyle(name="mild", accel=2.0, cruise_speed=12.0,
                    steer_bias=0.015, steer_amplitude=0.03,
                    steer_period=60.0, steer_duration=8.0)
AGGRESSIVE = ProfileStyle(name="aggressive", accel=6.0, cruise_speed=20.0,
                          steer_bias=0.04, steer_amplitude=0.13,
                          steer_period=15.0, steer_duration=4.0)

STYLES = {"mild": MILD, "aggressive": AGGRESSIVE}


@dataclass(frozen=True)
class DrivingProfile:
    """Smoothed longitudinal-acceleration and steering command series."""

    dt: float
    a: np.ndarray
    delta: np.ndarray
    style: str

    def __len__(self):
        return len(self.a)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.a))


@dataclass(frozen=True)
class VehicleTrajectory:
    """Integrated CG path over the map."""

    dt: float
    x: np.ndarray
    y: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    psidot: np.ndarray
    style: str

    def __len__(self):
        return len(self.x)


def _trapezoid_pulse(t: np.ndarray, start: float, ramp: float,
                     plateau: float, amplitude: float) -> np.ndarray:
    """Ramp up / hold / ramp down pulse starting at `start`."""
    out = np.zeros_like(t)
    t1, t2, t3 = start + ramp, start + ramp + plateau, start + 2 * ramp + plateau
    rising = (t >= start) & (t < t1)
    hold = (t >= t1) & (t < t2)
    falling = (t >= t2) & (t < t3)
    out[rising] = amplitude * (t[rising] - start) / ramp
    out[hold] = amplitude
    out[falling] = amplitude * (t3 - t[falling]) / ramp
    return out


def _steering_series(t: np.ndarray, style: ProfileStyle) -> np.ndarray:
    """Bias plus repeated single-period sine maneuvers (zero net heading)."""
    delta = np.full_like(t, style.steer_bias)
    start = 20.0
    horizon = t[-1] - 20.0  # keep the wheel steady while braking to rest
    while start + style.steer_duration < horizon:
        window = (t >= start) & (t < start + style.steer_duration)
        phase = 2 * np.pi * (t[window] - start) / style.steer_duration
        delta[window] += style.steer_amplitude * np.sin(phase)
        start += style.steer_period
    return delta


def build_driving_profile(style: str, duration: float = PROFILE_DURATION,
                          dt: float = PROFILE_DT) -> DrivingProfile:
    """Construct and smooth the command series for one driver style."""
    if style not in STYLES:
        raise ValueError(f"unknown driver style {style!r}")
    spec = STYLES[style]
    n = round(duration / dt)
    t = dt * np.arange(n)

    ramp = 1.0
    plateau = spec.cruise_speed / spec.accel - ramp
    if plateau <= 0:
        raise ValueError("cruise speed too low for the ramp shape")
    accel_start = 2.0
    brake_end = duration - 2.0
    brake_start = brake_end - (2 * ramp + plateau)
    a = (_trapezoid_pulse(t, accel_start, ramp, plateau, spec.accel)
         - _trapezoid_pulse(t, brake_start, ramp, plateau, spec.accel))
    delta = _steering_series(t, spec)

    a = savgol_filter(a, SG_WINDOW, SG_POLYORDER, mode="interp")
    delta = savgol_filter(delta, SG_WINDOW, SG_POLYORDER, mode="interp")
    return DrivingProfile(dt=dt, a=a, delta=delta, style=style)


def integrate_trajectory(profile: DrivingProfile, params: VehicleParams,
                         start: tuple[float, float] = (1000.0, 800.0),
                         heading: float = 0.0,
                         v0: float = 0.0) -> VehicleTrajectory:
    """Kinematic-bicycle path: psidot = v tan(delta) / (l_f + l_r).

    Speed integrates the acceleration series with a clamp at zero; position
    uses the midpoint heading so constant-steer arcs close to within a
    fraction of a millimeter per lap.
    """
    wheelbase = params.l_f + params.l_r
    n = len(profile)
    dt = profile.dt
    x = np.empty(n)
    y = np.empty(n)
    v = np.empty(n)
    psi = np.empty(n)
    psidot = np.empty(n)
    x[0], y[0] = start
    psi[0] = heading
    v[0] = v0
    for k in range(n):
        psidot[k] = v[k] * math.tan(profile.delta[k]) / wheelbase
        if k + 1 == n:
            break
        half_psi = psi[k] + 0.5 * psidot[k] * dt
        x[k + 1] = x[k] + v[k] * dt * math.cos(half_psi)
        y[k + 1] = y[k] + v[k] * dt * math.sin(half_psi)
        psi[k + 1] = psi[k] + psidot[k] * dt
        v[k + 1] = max(v[k] + profile.a[k] * dt, 0.0)
    return VehicleTrajectory(dt=dt, x=x, y=y, v=v, psi=psi, psidot=psidot,
                             style=profile.style)


# Wheel offsets relative to the CG in the body frame: FL, FR, RL, RR.
def _wheel_offsets(params: VehicleParams) -> np.ndarray:
    half = params.l / 2
    return np.array([
        [params.l_f, -half],
        [params.l_f, half],
        [-params.l_r, -half],
        [-params.l_r, half],
    ])


def wheel_positions(x: float, y: float, psi: float,
                    params: VehicleParams) -> np.ndarray:
    """Global (x, y) of the four contact points, yaw-rotated body offsets."""
    offsets = _wheel_offsets(params)
    c, s = math.cos(psi), math.sin(psi)
    gx = x + offsets[:, 0] * c - offsets[:, 1] * s
    gy = y + offsets[:, 0] * s + offsets[:, 1] * c
    return np.column_stack([gx, gy])


def wheel_disturbance(surface: RoadSurface, x: float, y: float, psi: float,
                      v: float, params: VehicleParams) -> WheelDisturbance:
    """Elevation and chain-rule elevation rate under each wheel.

    zdot_r = dZ/dX * v cos(psi) + dZ/dY * v sin(psi), evaluated per wheel.
    """
    pos = wheel_positions(x, y, psi, params)
    z, dzdx, dzdy = surface.sample(pos[:, 0], pos[:, 1])
    rate = dzdx * v * math.cos(psi) + dzdy * v * math.sin(psi)
    return WheelDisturbance(z_r=tuple(z), zdot_r=tuple(rate))


def export_profile_csv(profile: DrivingProfile, path) -> None:
    t = profile.times
    with open(path, "w") as fh:
        fh.write("t,a,delta\n")
        for k in range(len(profile)):
            fh.write(f"{t[k]:.2f},{profile.a[k]:.9g},{profile.delta[k]:.9g}\n")


def export_trajectory_csv(traj: VehicleTrajectory, path) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,v,psi,psidot\n")
        for k in range(len(traj)):
            fh.write(f"{k * traj.dt:.2f},{traj.x[k]:.9g},{traj.y[k]:.9g},"
                     f"{traj.v[k]:.9g},{traj.psi[k]:.9g},{traj.psidot[k]:.9g}\n")
