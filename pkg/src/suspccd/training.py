"""Co-design training: warm start, rollouts, advantages, PPO over (θ, φ, p).

The design variables live in a 2-entry Parameter holding bound-normalized
(k_s, c_s). They receive gradients along two routes: through the policy and
value networks (the design is part of their input features) inside the
clipped-surrogate loss, and through a taped replay of the collected rollout
in which the plant dynamics themselves are differentiated with respect to
the design. After every optimizer step the design is projected back into
its bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape
from .bo import BoResult, bayesian_minimize
from .config import RunConfig
from .networks import (Adam, GaussianPolicy, NonFiniteGradientError, ValueFn,
                       pretrain_mean)
from .vehicle import (DesignBounds, DrivingCondition, Plant,
                      RealSystemPerturbation, SuspensionDesign, VehicleParams,
                      WheelDisturbance, is_divergent, observe)

DT = 0.01
DIVERGENCE_PENALTY = 1e6


# ---------------------------------------------------------------------------
# P-controller warm start
# ---------------------------------------------------------------------------

def build_K(gains: np.ndarray) -> np.ndarray:
    """Expand [K0..K4] into the fixed 4x11 feedback pattern (u = -K y)."""
    k0, k1, k2, k3, k4 = np.asarray(gains, dtype=float)
    return np.array([
        [k0,  k1,  k2, k3, 0.0, 0.0, 0.0, k4, 0.0, 0.0, 0.0],
        [k0, -k1,  k2, 0.0, k3, 0.0, 0.0, 0.0, k4, 0.0, 0.0],
        [k0,  k1, -k2, 0.0, 0.0, k3, 0.0, 0.0, 0.0, k4, 0.0],
        [k0, -k1, -k2, 0.0, 0.0, 0.0, k3, 0.0, 0.0, 0.0, k4],
    ])


@dataclass
class RewardWeights:
    w1: float = 10.0
    w2: float = 1.0
    w3: float = 0.5
    c1: float = 1.0 / 0.00004
    c2: float = 1.0 / 0.00003
    c3: float = 0.0001
    lambda_u: float = 1.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "RewardWeights":
        r = cfg.reward
        return cls(w1=r.w1, w2=r.w2, w3=r.w3, c1=r.c1, c2=r.c2, c3=r.c3,
                   lambda_u=r.lambda_u)


def comfort_and_reward(state_accels, alpha: float, beta: float, u,
                       weights: RewardWeights):
    """Comfort index and step reward from body accelerations and effort."""
    zdd, add_, bdd = state_accels
    comfort = math.sqrt((weights.w1 * zdd) ** 2 + (weights.w2 * add_) ** 2
                        + (weights.w3 * bdd) ** 2)
    cost = (comfort + weights.c1 * alpha * alpha + weights.c2 * beta * beta
            + weights.c3 * float(np.sum(np.square(u))))
    return comfort, -cost


def uncertainty_penalty(width: np.ndarray, weights: RewardWeights,
                        dt: float = DT) -> float:
    """Map observation quantile widths to the acceleration/angle penalties.

    The velocity-component widths pass through one finite-difference step:
    divided by dt for the acceleration-level terms, multiplied by dt for the
    angle-level terms.
    """
    da = width[0] / dt
    dth = width[1] / dt
    dph = width[2] / dt
    j_comfort = math.sqrt((weights.w1 * da) ** 2 + (weights.w2 * dth) ** 2
                          + (weights.w3 * dph) ** 2)
    j_pitch = (width[1] * dt) ** 2
    j_roll = (width[2] * dt) ** 2
    return j_comfort + weights.c1 * j_pitch + weights.c2 * j_roll


# ---------------------------------------------------------------------------
# Disturbance sources
# ---------------------------------------------------------------------------

class GaussianRoadNoise:
    """First-stage training disturbance: iid per-wheel road noise, fixed drive."""

    def __init__(self, rng: np.random.Generator, std_z: float = 0.001,
                 std_zdot: float = 0.1, speed: float = 10.0):
        self.rng = rng
        self.std_z = std_z
        self.std_zdot = std_zdot
        self.drive = DrivingCondition(v=speed)

    def __len__(self):
        return 1 << 62  # effectively unbounded

    def at(self, k: int):
        z_r = self.rng.normal(0.0, self.std_z, size=4)
        zdot_r = self.rng.normal(0.0, self.std_zdot, size=4)
        return self.drive, WheelDisturbance(tuple(z_r), tuple(zdot_r))


class TrajectoryRoad:
    """Wheel-level inputs along a driver trajectory over a road surface."""

    def __init__(self, surface, trajectory, profile, params: VehicleParams,
                 start: int = 0, length: int | None = None):
        n = len(trajectory) if length is None else min(length, len(trajectory))
        idx = np.arange(start, start + n)
        if idx[-1] >= len(trajectory):
            raise ValueError("window exceeds trajectory length")
        xs = trajectory.x[idx]
        ys = trajectory.y[idx]
        psis = trajectory.psi[idx]
        vs = trajectory.v[idx]
        half = params.l / 2
        offsets = np.array([[params.l_f, -half], [params.l_f, half],
                            [-params.l_r, -half], [-params.l_r, half]])
        c, s = np.cos(psis), np.sin(psis)
        wx = xs[:, None] + offsets[None, :, 0] * c[:, None] \
            - offsets[None, :, 1] * s[:, None]
        wy = ys[:, None] + offsets[None, :, 0] * s[:, None] \
            + offsets[None, :, 1] * c[:, None]
        z, dzdx, dzdy = surface.sample(wx.ravel(), wy.ravel())
        self.z_r = z.reshape(n, 4)
        rate = (dzdx.reshape(n, 4) * (vs * c)[:, None]
                + dzdy.reshape(n, 4) * (vs * s)[:, None])
        self.zdot_r = rate
        self.a = profile.a[idx]
        self.v = vs
        self.delta = profile.delta[idx]
        self.n = n

    def __len__(self):
        return self.n

    def at(self, k: int):
        drive = DrivingCondition(v=float(self.v[k]), a=float(self.a[k]),
                                 delta=float(self.delta[k]))
        road = WheelDisturbance(tuple(self.z_r[k]), tuple(self.zdot_r[k]))
        return drive, road


# ---------------------------------------------------------------------------
# Rollouts and advantage estimation
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    features: np.ndarray      # (T, 13)
    actions: np.ndarray       # (T, 4)
    log_probs: np.ndarray     # (T,)
    rewards: np.ndarray       # (T,)
    values: np.ndarray        # (T,)
    drives: np.ndarray        # (T, 3): a, v, delta
    roads: np.ndarray         # (T, 8): z_r, zdot_r
    states: np.ndarray        # (T, 14) pre-step states
    diverged: bool
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def __len__(self):
        return len(self.rewards)


def rollout(plant: Plant, policy: GaussianPolicy, value_fn: ValueFn,
            design_norm: np.ndarray, source, length: int,
            rng: np.random.Generator, weights: RewardWeights,
            deterministic: bool = False, obs_noise_std: float = 0.0,
            initial_state: np.ndarray | None = None) -> RolloutBatch:
    """Simulate one episode, recording everything PPO and replay need."""
    if length < 1:
        raise ValueError("rollout length must be >= 1")
    length = min(length, len(source))
    state = np.zeros(14) if initial_state is None else initial_state.copy()
    feats = np.empty((length, 13))
    actions = np.empty((length, 4))
    log_probs = np.empty(length)
    rewards = np.empty(length)
    drives = np.empty((length, 3))
    roads = np.empty((length, 8))
    states = np.empty((length, 14))
    diverged = False
    t = 0
    for t in range(length):
        drive, road = source.at(t)
        obs = observe(state)
        if obs_noise_std > 0.0:
            obs = obs + rng.normal(0.0, obs_noise_std, size=11)
        feats[t] = np.concatenate([design_norm, obs])
        if deterministic:
            mu, sigma = policy.mean_std_np(feats[t])
            action, lp = mu, float(policy.log_prob_np(feats[t], mu))
        else:
            action, lp = policy.sample(feats[t], rng)
        applied = plant.clamp_u(action)
        states[t] = state
        actions[t] = action  # the sampled action, so PPO ratios start at 1
        log_probs[t] = lp
        drives[t] = (drive.a, drive.v, drive.delta)
        roads[t] = np.concatenate([road.z_r, road.zdot_r])
        next_state, accels = plant.step_and_accels(state, applied, drive,
                                                   road, DT)
        _, rewards[t] = comfort_and_reward(accels, state[1], state[2],
                                           applied, weights)
        state = next_state
        if is_divergent(state):
            diverged = True
            t += 1
            break
    n = t if diverged else length
    if diverged:
        rewards[n - 1] = -DIVERGENCE_PENALTY
    values = value_fn.forward_np(feats[:n])
    return RolloutBatch(features=feats[:n], actions=actions[:n],
                        log_probs=log_probs[:n], rewards=rewards[:n],
                        values=values, drives=drives[:n], roads=roads[:n],
                        states=states[:n], diverged=diverged)


def compute_gae(rewards: np.ndarray, values: np.ndarray, gamma: float,
                lambda_gae: float):
    """Generalized advantage estimation with zero terminal bootstrap."""
    if len(rewards) != len(values):
        raise ValueError("rewards and values must have equal length")
    n = len(rewards)
    advantages = np.empty(n)
    last = 0.0
    next_value = 0.0
    for k in range(n - 1, -1, -1):
        delta = rewards[k] + gamma * next_value - values[k]
        last = delta + gamma * lambda_gae * last
        advantages[k] = last
        next_value = values[k]
    return advantages, advantages + values


# ---------------------------------------------------------------------------
# Taped dynamics: gradients of the episode reward wrt the design
# ---------------------------------------------------------------------------

def _traced_derivative(state, u_const, drive, road, plant: Plant, k_s, c_s):
    """Taped mirror of Plant.derivative with the design on the tape."""
    z_s = state[0]
    alpha = state[1]
    beta = state[2]
    z_u = state[3:7]
    zdot_s = state[7]
    alphadot = state[8]
    betadot = state[9]
    zdot_u = state[10:14]

    d_x = plant.d_x
    d_y = plant.d_y
    delta = ad.add(ad.mul(alpha, d_x), ad.mul(beta, d_y))
    delta_rate = ad.add(ad.mul(alphadot, d_x), ad.mul(betadot, d_y))
    rel_disp = ad.sub(ad.sub(z_u, z_s), delta)
    rel_vel = ad.sub(ad.sub(zdot_u, zdot_s), delta_rate)

    f_s = ad.add(ad.mul(k_s, rel_disp), ad.mul(c_s, rel_vel))
    if plant.perturbation is not None:
        k_nl = ad.mul(k_s, plant.perturbation.k_nl_factor)
        c_nl = ad.mul(c_s, plant.perturbation.c_nl_factor)
        cubic = ad.mul(k_nl, ad.mul(rel_disp, ad.mul(rel_disp, rel_disp)))
        quad = ad.mul(c_nl, ad.mul(ad.absolute(rel_vel), rel_vel))
        f_s = ad.add(f_s, ad.add(cubic, quad))
    f_t = ad.add(ad.mul(z_u, -plant.k_t),
                 ad.add(ad.mul(zdot_u, -plant.c_t),
                        plant.k_t * np.asarray(road.z_r)
                        + plant.c_t * np.asarray(road.zdot_r)))

    m_alpha = plant.m_s * plant.h_cg * drive.a
    m_beta = (plant.m_s * plant.h_cg * drive.v ** 2
              * math.tan(drive.delta) / (plant.params.l_f + plant.params.l_r))

    total = ad.add(f_s, u_const)
    zdd = ad.mul(ad.vsum(total), 1.0 / plant.m_s)
    alphadd = ad.mul(ad.add(ad.vsum(ad.mul(total, d_x)), m_alpha),
                     1.0 / plant.i_alpha)
    betadd = ad.mul(ad.add(ad.vsum(ad.mul(total, d_y)), m_beta),
                    1.0 / plant.i_beta)
    wheel_acc = ad.mul(ad.sub(f_t, total), 1.0 / plant.m_u)
    vel = state[7:14]
    return ad.concat([vel, ad.stack_scalars([zdd, alphadd, betadd]), wheel_acc]), \
        (zdd, alphadd, betadd)


def _traced_rk4(state, u_const, drive, road, plant, k_s, c_s, dt=DT):
    k1, accels = _traced_derivative(state, u_const, drive, road, plant, k_s, c_s)
    s2 = ad.add(state, ad.mul(k1, 0.5 * dt))
    k2, _ = _traced_derivative(s2, u_const, drive, road, plant, k_s, c_s)
    s3 = ad.add(state, ad.mul(k2, 0.5 * dt))
    k3, _ = _traced_derivative(s3, u_const, drive, road, plant, k_s, c_s)
    s4 = ad.add(state, ad.mul(k3, dt))
    k4, _ = _traced_derivative(s4, u_const, drive, road, plant, k_s, c_s)
    incr = ad.add(ad.add(k1, ad.mul(k2, 2.0)), ad.add(ad.mul(k3, 2.0), k4))
    return ad.add(state, ad.mul(incr, dt / 6.0)), accels


def design_return_gradient(batch: RolloutBatch, plant: Plant,
                           design_param: Parameter, bounds: DesignBounds,
                           weights: RewardWeights,
                           segment: int = 50) -> np.ndarray:
    """d(-mean reward)/d(normalized design) by replaying the rollout on tape.

    The recorded actions and disturbances are treated as constants; the state
    chain is detached every `segment` steps to bound gradient depth.
    """
    saved_grad = design_param.grad.copy()
    design_param.zero_grad()
    mid_k, half_k = DesignBounds._mid_half(bounds.k_s_min, bounds.k_s_max)
    mid_c, half_c = DesignBounds._mid_half(bounds.c_s_min, bounds.c_s_max)
    n = len(batch)
    with Tape() as tape:
        design = tape.watch(design_param)
        k_s = ad.add(ad.mul(design[0], half_k), mid_k)
        c_s = ad.add(ad.mul(design[1], half_c), mid_c)
        state = ad.detach(batch.states[0])
        reward_terms = []
        for t in range(n):
            a, v, delta = batch.drives[t]
            drive = DrivingCondition(v=v, a=a, delta=delta)
            road = WheelDisturbance(tuple(batch.roads[t, :4]),
                                    tuple(batch.roads[t, 4:]))
            u = plant.clamp_u(batch.actions[t])
            alpha = state[1]
            beta = state[2]
            state, accels = _traced_rk4(state, u, drive, road, plant, k_s, c_s)
            zdd, alphadd, betadd = accels
            comfort = ad.sqrt(
                ad.add(ad.mul(ad.mul(zdd, zdd), weights.w1 ** 2),
                       ad.add(ad.mul(ad.mul(alphadd, alphadd), weights.w2 ** 2),
                              ad.mul(ad.mul(betadd, betadd), weights.w3 ** 2))))
            cost = ad.add(comfort,
                          ad.add(ad.mul(ad.mul(alpha, alpha), weights.c1),
                                 ad.mul(ad.mul(beta, beta), weights.c2)))
            cost = ad.add(cost, weights.c3 * float(np.sum(u * u)))
            reward_terms.append(ad.mul(cost, 1.0))
            if segment > 0 and (t + 1) % segment == 0:
                state = ad.detach(state)
        mean_cost = ad.mean(ad.stack_scalars(reward_terms))
    tape.backward(mean_cost)
    grad = design_param.grad.copy()
    design_param.grad[...] = saved_grad
    return grad


# ---------------------------------------------------------------------------
# PPO update
# ---------------------------------------------------------------------------

_E_DESIGN = np.zeros((2, 13))
_E_DESIGN[0, 0] = 1.0
_E_DESIGN[1, 1] = 1.0
_E_OBS = np.zeros((11, 13))
_E_OBS[:, 2:] = np.eye(11)


def _traced_features(tape: Tape, design_param: Parameter, obs: np.ndarray):
    """(B, 13) feature node with the live design broadcast into columns 0-1."""
    design = tape.watch(design_param)
    row = ad.reshape(design, (1, 2))
    bcast = ad.matmul(np.ones((len(obs), 1)), row)
    return ad.add(ad.matmul(bcast, _E_DESIGN), obs @ _E_OBS)


def smooth_l1_traced(pred, target):
    diff = ad.sub(pred, target)
    absd = ad.absolute(diff)
    mask = np.abs(ad.value_of(diff)) < 1.0
    return ad.where(mask, ad.mul(ad.mul(diff, diff), 0.5),
                    ad.sub(absd, 0.5))


def smooth_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.abs(a - b)
    return np.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)


def ppo_loss_traced(policy: GaussianPolicy, value_fn: ValueFn, feats,
                    actions: np.ndarray, old_log_probs: np.ndarray,
                    norm_adv: np.ndarray, value_targets: np.ndarray, ppo_cfg):
    """Clipped-surrogate plus smooth-L1 value loss on traced features."""
    log_prob = policy.log_prob_traced(feats, actions)
    ratio = ad.exp(ad.sub(log_prob, old_log_probs))
    clipped = ad.clip(ratio, 1.0 - ppo_cfg.clip_eps, 1.0 + ppo_cfg.clip_eps)
    surrogate = ad.minimum(ad.mul(ratio, norm_adv), ad.mul(clipped, norm_adv))
    policy_loss = ad.mul(ad.mean(surrogate), -1.0)
    value_pred = value_fn.forward_traced(feats)
    value_loss = ad.mean(smooth_l1_traced(value_pred, value_targets))
    return ad.add(policy_loss, ad.mul(value_loss, ppo_cfg.c_v)), \
        policy_loss, value_loss


@dataclass
class PpoStepInfo:
    loss: float
    policy_loss: float
    value_loss: float
    aborted: bool = False


def ppo_update(batch: RolloutBatch, policy: GaussianPolicy, value_fn: ValueFn,
               design_param: Parameter, bounds: DesignBounds, ppo_cfg,
               optimizers: dict[str, Adam], rng: np.random.Generator,
               dynamics_grad: np.ndarray | None = None) -> PpoStepInfo:
    """One optimization pass (update_epochs x minibatches) over a batch.

    A non-finite loss or gradient aborts the pass and restores the parameter
    values from before it started.
    """
    adv = batch.advantages
    if adv is None:
        raise ValueError("run compute_gae on the batch first")
    norm_adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    obs = batch.features[:, 2:]
    n = len(batch)
    params = (policy.parameters() + value_fn.parameters() + [design_param])
    snapshot = [p.value.copy() for p in params]
    opt_states = {name: opt.state() for name, opt in optimizers.items()}
    last = PpoStepInfo(np.nan, np.nan, np.nan)
    for _ in range(ppo_cfg.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n, ppo_cfg.minibatch):
            idx = order[start:start + ppo_cfg.minibatch]
            for opt in optimizers.values():
                opt.zero_grad()
            with Tape() as tape:
                feats = _traced_features(tape, design_param, obs[idx])
                loss, policy_loss, value_loss = ppo_loss_traced(
                    policy, value_fn, feats, batch.actions[idx],
                    batch.log_probs[idx], norm_adv[idx],
                    batch.value_targets[idx], ppo_cfg)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                for p, v in zip(params, snapshot):
                    p.value[...] = v
                for name, opt in optimizers.items():
                    opt.load_state(opt_states[name])
                return PpoStepInfo(loss_val, float(policy_loss.value),
                                   float(value_loss.value), aborted=True)
            tape.backward(loss)
            if dynamics_grad is not None:
                design_param.grad += ppo_cfg.dynamics_grad_weight * dynamics_grad
            try:
                for opt in optimizers.values():
                    opt.step()
            except NonFiniteGradientError:
                for p, v in zip(params, snapshot):
                    p.value[...] = v
                for name, opt in optimizers.items():
                    opt.load_state(opt_states[name])
                return PpoStepInfo(loss_val, float(policy_loss.value),
                                   float(value_loss.value), aborted=True)
            np.clip(design_param.value, -1.0, 1.0, out=design_param.value)
            last = PpoStepInfo(loss_val, float(policy_loss.value),
                               float(value_loss.value))
    return last


# ---------------------------------------------------------------------------
# Warm start (Step 0 helpers)
# ---------------------------------------------------------------------------

def simulate_p_controller(gains: np.ndarray, plant: Plant, source,
                          steps: int, weights: RewardWeights):
    """Closed-loop u = -K y rollout; returns (rms comfort, diverged)."""
    k_matrix = build_K(gains)
    state = np.zeros(14)
    total = 0.0
    for t in range(steps):
        drive, road = source.at(t)
        y = observe(state)
        u = plant.clamp_u(-k_matrix @ y)
        state, accels = plant.step_and_accels(state, u, drive, road, DT)
        comfort, _ = comfort_and_reward(accels, state[1], state[2], u, weights)
        total += comfort * comfort
        if is_divergent(state):
            return DIVERGENCE_PENALTY, True
    return math.sqrt(total / steps), False


def bo_warmstart(cfg: RunConfig, plant: Plant,
                 log_rows: list | None = None) -> BoResult:
    """Tune the P-controller gains by GP/EI Bayesian optimization.

    The objective is the RMS comfort index of the closed loop under a fixed
    Gaussian road-noise realization; divergent candidates score a large
    penalty. The zero-gain controller is always one of the seed evaluations.
    """
    weights = RewardWeights.from_config(cfg)
    ws = cfg.warmstart
    noise_seed = cfg.seed_stream("warmstart-noise")
    frozen = [GaussianRoadNoise(cfg.seed_stream("warmstart-noise"),
                                cfg.ppo.road_noise_std_z,
                                cfg.ppo.road_noise_std_zdot,
                                cfg.ppo.train_speed).at(t)
              for t in range(ws.eval_steps)]

    class FrozenSource:
        def __len__(self):
            return len(frozen)

        def at(self, k):
            return frozen[k]

    source = FrozenSource()

    def objective(gains):
        value, diverged = simulate_p_controller(gains, plant, source,
                                                ws.eval_steps, weights)
        if log_rows is not None:
            log_rows.append(list(gains) + [value, int(diverged)])
        return value

    result = bayesian_minimize(
        objective, np.asarray(ws.gain_bounds, dtype=float),
        budget=ws.budget, rng=cfg.seed_stream("warmstart-bo"),
        n_seed=ws.seed_evaluations, seed_points=[np.zeros(5)])
    return result


def collect_pretraining_data(cfg: RunConfig, gains: np.ndarray,
                             params: VehicleParams, bounds: DesignBounds):
    """(features, target actions) from closed-loop P-controller episodes.

    Episodes vary the design sample fed to the feature vector (the warm-start
    law itself ignores the design), teaching the mean net the feature layout.
    """
    ws = cfg.warmstart
    weights = RewardWeights.from_config(cfg)
    k_matrix = build_K(gains)
    rng = cfg.seed_stream("pretrain-designs")
    feats_out = []
    acts_out = []
    initial = cfg.design.initial()
    for ep in range(ws.pretrain_episodes):
        if ep == 0:
            design = initial
        else:
            design = SuspensionDesign(
                k_s=rng.uniform(bounds.k_s_min, bounds.k_s_max),
                c_s=rng.uniform(bounds.c_s_min, bounds.c_s_max))
        plant = Plant(params, design, saturation_limit=None)
        design_norm = np.array(bounds.normalize(design.k_s, design.c_s))
        source = GaussianRoadNoise(cfg.seed_stream(f"pretrain-noise-{ep}"),
                                   cfg.ppo.road_noise_std_z,
                                   cfg.ppo.road_noise_std_zdot,
                                   cfg.ppo.train_speed)
        state = np.zeros(14)
        for t in range(ws.pretrain_steps):
            drive, road = source.at(t)
            y = observe(state)
            u = -k_matrix @ y
            feats_out.append(np.concatenate([design_norm, y]))
            acts_out.append(u)
            state = plant.rk4_step(state, u, drive, road, DT)
            if is_divergent(state):
                break
    return np.array(feats_out), np.array(acts_out)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainingRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_return: float = -math.inf
    stop_reason: str = ""

    def log(self, epoch: int, episode_return: float, k_s: float, c_s: float,
            info: PpoStepInfo, diverged: bool) -> bool:
        """Append one epoch; returns True when this is a new best."""
        improved = episode_return > self.best_return and not diverged
        if improved:
            self.best_return = episode_return
            self.best_epoch = epoch
        self.epochs.append({
            "epoch": epoch, "return": episode_return, "k_s": k_s, "c_s": c_s,
            "loss": info.loss, "policy_loss": info.policy_loss,
            "value_loss": info.value_loss, "diverged": int(diverged),
            "aborted": int(info.aborted),
            "best_return": self.best_return,
        })
        return improved

    @property
    def best_so_far(self) -> list:
        return [row["best_return"] for row in self.epochs]

    def rows(self):
        header = ["epoch", "return", "k_s", "c_s", "loss", "policy_loss",
                  "value_loss", "diverged", "aborted", "best_return"]
        return header, [[row[h] for h in header] for row in self.epochs]


class TrainingDiverged(RuntimeError):
    """More than half of the recent rollouts diverged."""


def _design_of(design_param: Parameter, bounds: DesignBounds) -> SuspensionDesign:
    k_s, c_s = bounds.denormalize(design_param.value[0], design_param.value[1])
    return bounds.clip(k_s, c_s)


def make_optimizers(policy: GaussianPolicy, value_fn: ValueFn,
                    design_param: Parameter, ppo_cfg) -> dict[str, Adam]:
    return {
        "policy": Adam(policy.parameters(), lr=ppo_cfg.lr_policy),
        "value": Adam(value_fn.parameters(), lr=ppo_cfg.lr_value),
        "design": Adam([design_param], lr=ppo_cfg.lr_design),
    }


def train_ccd(cfg: RunConfig, policy: GaussianPolicy, value_fn: ValueFn,
              design_param: Parameter, collect_fn, epochs: int,
              seed_prefix: str, *, design_frozen: bool = False,
              patience: int | None = None,
              dynamics_plant_factory=None,
              on_best=None) -> TrainingRecord:
    """Generic CCD loop: rollout, GAE, clipped-surrogate update.

    `collect_fn(design, design_norm, epoch, rng)` gathers one RolloutBatch;
    `dynamics_plant_factory(design)` returns the plant used for the taped
    design-gradient replay (None disables that path, e.g. when the design
    is frozen).
    """
    bounds = cfg.design.bounds()
    weights = RewardWeights.from_config(cfg)
    optimizers = make_optimizers(policy, value_fn, design_param, cfg.ppo)
    if design_frozen:
        optimizers.pop("design")
    record = TrainingRecord()
    action_rng = cfg.seed_stream(f"{seed_prefix}-actions")
    update_rng = cfg.seed_stream(f"{seed_prefix}-updates")
    recent_diverged: list[bool] = []
    for epoch in range(epochs):
        design = _design_of(design_param, bounds)
        design_norm = np.array(bounds.normalize(design.k_s, design.c_s))
        batch = collect_fn(design, design_norm, epoch, action_rng)
        recent_diverged.append(batch.diverged)
        if len(recent_diverged) > 20:
            recent_diverged.pop(0)
        if len(recent_diverged) >= 10 and np.mean(recent_diverged) > 0.5:
            record.stop_reason = "divergence"
            raise TrainingDiverged(
                f"{sum(recent_diverged)}/{len(recent_diverged)} recent "
                f"rollouts diverged at epoch {epoch} "
                f"(k_s={design.k_s:.1f}, c_s={design.c_s:.1f})")
        batch.advantages, batch.value_targets = compute_gae(
            batch.rewards, batch.values, cfg.ppo.gamma, cfg.ppo.lambda_gae)
        dyn_grad = None
        if not design_frozen and dynamics_plant_factory is not None \
                and cfg.ppo.dynamics_grad_weight != 0.0 and not batch.diverged:
            dyn_plant = dynamics_plant_factory(design)
            dyn_grad = design_return_gradient(
                batch, dyn_plant, design_param, bounds, weights,
                segment=cfg.ppo.dynamics_tape_segment)
        info = ppo_update(batch, policy, value_fn, design_param, bounds,
                          cfg.ppo, optimizers, update_rng,
                          dynamics_grad=dyn_grad)
        improved = record.log(epoch, batch.episode_return, design.k_s,
                              design.c_s, info, batch.diverged)
        if improved and on_best is not None:
            on_best(epoch, record)
        if patience is not None and epoch - record.best_epoch >= patience:
            record.stop_reason = f"patience({patience})"
            break
    if not record.stop_reason:
        record.stop_reason = "epochs"
    return record


def train_first_ccd(cfg: RunConfig, policy: GaussianPolicy, value_fn: ValueFn,
                    design_param: Parameter, epochs: int | None = None,
                    on_best=None) -> TrainingRecord:
    """Step 1: co-design on the nominal plant under Gaussian road noise."""
    params = cfg.vehicle.params()
    saturation = cfg.vehicle.saturation()
    noise_rng = cfg.seed_stream("ccd1-road-noise")
    weights = RewardWeights.from_config(cfg)

    def collect(design, design_norm, epoch, rng):
        plant = Plant(params, design, saturation_limit=saturation)
        source = GaussianRoadNoise(noise_rng, cfg.ppo.road_noise_std_z,
                                   cfg.ppo.road_noise_std_zdot,
                                   cfg.ppo.train_speed)
        return rollout(plant, policy, value_fn, design_norm, source,
                       cfg.ppo.rollout_len, rng, weights,
                       obs_noise_std=cfg.vehicle.obs_noise_std)

    def dyn_factory(design):
        return Plant(params, design, saturation_limit=saturation)

    return train_ccd(cfg, policy, value_fn, design_param, collect,
                     cfg.ppo.first_ccd_epochs if epochs is None else epochs,
                     "ccd1", dynamics_plant_factory=dyn_factory,
                     on_best=on_best)


def finetune_on_real_plant(cfg: RunConfig, policy: GaussianPolicy,
                           value_fn: ValueFn, design_param: Parameter,
                           real_plant: Plant, surface, trajectory, profile,
                           epochs: int, seed_prefix: str = "finetune",
                           on_best=None) -> TrainingRecord:
    """Step 2 policy refinement: PPO on the real plant, design frozen.

    Each epoch rolls out one window of the driver trajectory, drawn at a
    seeded random start, so the policy sees the whole deployment envelope.
    """
    params = real_plant.base_params
    weights = RewardWeights.from_config(cfg)
    window_rng = cfg.seed_stream(f"{seed_prefix}-windows")
    horizon = len(trajectory) - cfg.ppo.rollout_len - 1
    if horizon <= 0:
        raise ValueError("trajectory shorter than one rollout window")

    def collect(design, design_norm, epoch, rng):
        start = int(window_rng.integers(0, horizon))
        source = TrajectoryRoad(surface, trajectory, profile, params,
                                start=start, length=cfg.ppo.rollout_len)
        return rollout(real_plant, policy, value_fn, design_norm, source,
                       cfg.ppo.rollout_len, rng, weights,
                       obs_noise_std=cfg.vehicle.obs_noise_std)

    return train_ccd(cfg, policy, value_fn, design_param, collect, epochs,
                     seed_prefix, design_frozen=True, on_best=on_best)


def rollout_updated(model, policy: GaussianPolicy, value_fn: ValueFn,
                    design_norm: np.ndarray, source, length: int,
                    rng: np.random.Generator, weights: RewardWeights,
                    lambda_u: float, deterministic: bool = False,
                    initial_state: np.ndarray | None = None) -> RolloutBatch:
    """Episode on the discrepancy-corrected model with the augmented reward.

    The policy observes the median-corrected outputs; each step's reward is
    -(cost + lambda_u * J_uncertainty) with the uncertainty taken from the
    predicted quantile band width.
    """
    length = min(length, len(source))
    state = np.zeros(14) if initial_state is None else initial_state.copy()
    model.reset(state)
    feats = np.empty((length, 13))
    actions = np.empty((length, 4))
    log_probs = np.empty(length)
    rewards = np.empty(length)
    drives = np.empty((length, 3))
    roads = np.empty((length, 8))
    states = np.empty((length, 14))
    diverged = False
    t = 0
    for t in range(length):
        drive, road = source.at(t)
        obs = model.observation
        feats[t] = np.concatenate([design_norm, obs])
        if deterministic:
            action, _ = policy.mean_std_np(feats[t])
            lp = float(policy.log_prob_np(feats[t], action))
        else:
            action, lp = policy.sample(feats[t], rng)
        applied = model.plant.clamp_u(action)
        states[t] = state
        actions[t] = action
        log_probs[t] = lp
        drives[t] = (drive.a, drive.v, drive.delta)
        roads[t] = np.concatenate([road.z_r, road.zdot_r])
        alpha, beta = state[1], state[2]
        state, _, width, accels = model.step(state, applied, drive, road)
        _, base_reward = comfort_and_reward(accels, alpha, beta, applied,
                                            weights)
        rewards[t] = base_reward - lambda_u * uncertainty_penalty(width,
                                                                  weights)
        if is_divergent(state):
            diverged = True
            t += 1
            break
    n = t if diverged else length
    if diverged:
        rewards[n - 1] = -DIVERGENCE_PENALTY
    values = value_fn.forward_np(feats[:n])
    return RolloutBatch(features=feats[:n], actions=actions[:n],
                        log_probs=log_probs[:n], rewards=rewards[:n],
                        values=values, drives=drives[:n], roads=roads[:n],
                        states=states[:n], diverged=diverged)


def train_second_ccd(cfg: RunConfig, policy: GaussianPolicy,
                     value_fn: ValueFn, design_param: Parameter, qmodel,
                     surface, trajectory, profile,
                     epochs: int | None = None, seed_prefix: str = "ccd2",
                     on_best=None) -> TrainingRecord:
    """Step 3: co-design on the updated (discrepancy-corrected) model.

    Rollouts follow seeded random windows of the driver trajectory; early
    stopping uses the configured patience. The taped design-gradient replay
    runs on the nominal plant along the recorded disturbances (the quantile
    correction is treated as design-independent there).
    """
    from .discrepancy import UpdatedModel

    params = cfg.vehicle.params()
    saturation = cfg.vehicle.saturation()
    weights = RewardWeights.from_config(cfg)
    window_rng = cfg.seed_stream(f"{seed_prefix}-windows")
    horizon = len(trajectory) - cfg.ppo.rollout_len - 1
    if horizon <= 0:
        raise ValueError("trajectory shorter than one rollout window")

    def collect(design, design_norm, epoch, rng):
        start = int(window_rng.integers(0, horizon))
        source = TrajectoryRoad(surface, trajectory, profile, params,
                                start=start, length=cfg.ppo.rollout_len)
        plant = Plant(params, design, saturation_limit=saturation)
        model = UpdatedModel(plant, qmodel,
                             reset_interval=cfg.discrepancy.error_reset_interval)
        return rollout_updated(model, policy, value_fn, design_norm, source,
                               cfg.ppo.rollout_len, rng, weights,
                               lambda_u=weights.lambda_u)

    def dyn_factory(design):
        return Plant(params, design, saturation_limit=saturation)

    return train_ccd(cfg, policy, value_fn, design_param, collect,
                     cfg.ppo.second_ccd_epochs if epochs is None else epochs,
                     seed_prefix, patience=cfg.ppo.patience,
                     dynamics_plant_factory=dyn_factory, on_best=on_best)
