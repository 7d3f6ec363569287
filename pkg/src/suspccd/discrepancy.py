"""Quantile discrepancy model between the digital twin and the real system.

Errors are one-step, teacher-forced: from the real state x_k both plants
advance one step under the same action, and e_{k+1} is the difference of the
resulting observations. Three tanh MLPs (one per quantile) predict the next
error from (e_k, y_k, u_k, a_k, v_k, delta_k); a componentwise sorting guard
keeps lower <= median <= upper unconditionally. The updated transition model
adds the median prediction to the nominal observation and feeds the
(upper - lower) width to the uncertainty-aware reward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .networks import Adam, Mlp
from .serialize import load_container, save_container
from .vehicle import (DrivingCondition, Plant, WheelDisturbance, is_divergent,
                      observe)

INPUT_DIM = 29   # 11 error + 11 observation + 4 action + (a, v, delta)
OUTPUT_DIM = 11
DT = 0.01

DATASET_HEADER = (
    [f"e_{i}" for i in range(11)] + [f"y_{i}" for i in range(11)]
    + [f"u_{i}" for i in range(4)] + ["a", "v", "delta"]
    + [f"e_next_{i}" for i in range(11)]
)


@dataclass
class ErrorDataset:
    """Chronological (input, next-error) pairs with a contiguous split."""

    inputs: np.ndarray    # (N, 29)
    targets: np.ndarray   # (N, 11)
    truncated: bool = False

    def __len__(self):
        return len(self.inputs)

    def split(self, validation_fraction: float = 0.2):
        n_train = int(round(len(self) * (1.0 - validation_fraction)))
        return ((self.inputs[:n_train], self.targets[:n_train]),
                (self.inputs[n_train:], self.targets[n_train:]))

    def to_csv(self, path) -> None:
        data = np.concatenate([self.inputs, self.targets], axis=1)
        with open(path, "w") as fh:
            fh.write(",".join(DATASET_HEADER) + "\n")
            for row in data:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ErrorDataset":
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        data = np.atleast_2d(data)
        return cls(inputs=data[:, :INPUT_DIM], targets=data[:, INPUT_DIM:])


def collect_errors(real_plant: Plant, nominal_plant: Plant, policy,
                   design_norm: np.ndarray, source, steps: int,
                   deterministic: bool = True,
                   rng: np.random.Generator | None = None) -> ErrorDataset:
    """Run the real plant and record one-step prediction errors of the twin."""
    steps = min(steps, len(source))
    inputs = np.empty((steps, INPUT_DIM))
    targets = np.empty((steps, OUTPUT_DIM))
    state = np.zeros(14)
    error = np.zeros(OUTPUT_DIM)
    truncated = False
    n = 0
    for k in range(steps):
        drive, road = source.at(k)
        y = observe(state)
        feats = np.concatenate([design_norm, y])
        if deterministic:
            u, _ = policy.mean_std_np(feats)
        else:
            u, _ = policy.sample(feats, rng)
        u = real_plant.clamp_u(u)
        next_real = real_plant.rk4_step(state, u, drive, road, DT)
        next_nominal = nominal_plant.rk4_step(state, u, drive, road, DT)
        next_error = observe(next_real) - observe(next_nominal)
        inputs[k] = np.concatenate([error, y, u,
                                    [drive.a, drive.v, drive.delta]])
        targets[k] = next_error
        error = next_error
        state = next_real
        n = k + 1
        if is_divergent(state):
            truncated = True
            break
    return ErrorDataset(inputs=inputs[:n], targets=targets[:n],
                        truncated=truncated)


def pinball_loss_np(residual: np.ndarray, tau: float) -> np.ndarray:
    """Asymmetric absolute loss; residual = target - prediction."""
    return np.where(residual >= 0.0, tau * residual, (tau - 1.0) * residual)


class QuantileModel:
    """One regressor per quantile with shared input/target standardization."""

    def __init__(self, taus=(0.1, 0.5, 0.9), hidden=(64, 64),
                 input_dim: int = INPUT_DIM, output_dim: int = OUTPUT_DIM,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.taus = tuple(sorted(float(t) for t in taus))
        if len(self.taus) != 3:
            raise ValueError("expected exactly three quantile levels")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = tuple(hidden)
        self.nets = [Mlp((input_dim, *hidden, output_dim), rng=rng,
                         name=f"quantile_{t}") for t in self.taus]
        self.x_mean = np.zeros(input_dim)
        self.x_std = np.ones(input_dim)
        self.t_mean = np.zeros(output_dim)
        self.t_std = np.ones(output_dim)
        self.validation_rmse = float("nan")
        self.validation_pinball = float("nan")

    # -- fitting ---------------------------------------------------------
    def fit(self, dataset: ErrorDataset, rng: np.random.Generator,
            epochs: int = 40, minibatch: int = 256, lr: float = 1e-3,
            validation_fraction: float = 0.2) -> dict:
        (x_tr, t_tr), (x_va, t_va) = dataset.split(validation_fraction)
        if len(x_tr) == 0:
            raise ValueError("empty training split")
        self.x_mean = x_tr.mean(axis=0)
        self.x_std = np.maximum(x_tr.std(axis=0), 1e-12)
        self.t_mean = t_tr.mean(axis=0)
        self.t_std = np.maximum(t_tr.std(axis=0), 1e-12)
        xs = (x_tr - self.x_mean) / self.x_std
        ts = (t_tr - self.t_mean) / self.t_std
        n = len(xs)
        history = []
        for tau, net in zip(self.taus, self.nets):
            opt = Adam(net.parameters(), lr=lr)
            for _ in range(epochs):
                order = rng.permutation(n)
                losses = []
                for start in range(0, n, minibatch):
                    idx = order[start:start + minibatch]
                    opt.zero_grad()
                    with Tape() as tape:
                        pred = net.forward(xs[idx])
                        residual = ad.sub(ts[idx], pred)
                        mask = ad.value_of(residual) >= 0.0
                        loss = ad.mean(ad.where(mask,
                                                ad.mul(residual, tau),
                                                ad.mul(residual, tau - 1.0)))
                    tape.backward(loss)
                    opt.step()
                    losses.append(float(loss.value))
                history.append({"tau": tau, "loss": float(np.mean(losses))})
        if len(x_va):
            upper, median, lower = self.predict_batch(x_va)
            self.validation_rmse = float(
                np.sqrt(np.mean((median - t_va) ** 2)))
            pin = 0.0
            for tau, pred in zip(self.taus, (lower, median, upper)):
                pin += float(np.mean(pinball_loss_np(t_va - pred, tau)))
            self.validation_pinball = pin / 3.0
        return {"history": history,
                "validation_rmse": self.validation_rmse,
                "validation_pinball": self.validation_pinball}

    # -- prediction --------------------------------------------------------
    def _raw_predict(self, inputs: np.ndarray) -> np.ndarray:
        xs = (inputs - self.x_mean) / self.x_std
        preds = np.stack([net.forward_np(xs) * self.t_std + self.t_mean
                          for net in self.nets])
        return preds  # (3, ..., out) ordered by tau: low, mid, high

    def predict_batch(self, inputs: np.ndarray):
        """(upper, median, lower) with the componentwise sorting guard."""
        preds = np.sort(self._raw_predict(inputs), axis=0)
        return preds[2], preds[1], preds[0]

    def predict(self, error, obs, u, a, v, delta):
        x = np.concatenate([error, obs, u, [a, v, delta]])
        upper, median, lower = self.predict_batch(x[None, :])
        return upper[0], median[0], lower[0]

    # -- persistence -------------------------------------------------------
    def save(self, path) -> None:
        arrays = {}
        for net in self.nets:
            arrays.update(net.state_arrays())
        arrays.update({"x_mean": self.x_mean, "x_std": self.x_std,
                       "t_mean": self.t_mean, "t_std": self.t_std})
        meta = {"taus": list(self.taus), "hidden": list(self.hidden),
                "input_dim": self.input_dim, "output_dim": self.output_dim,
                "validation_rmse": self.validation_rmse,
                "validation_pinball": self.validation_pinball}
        save_container(path, arrays, meta, magic=b"SCQM")

    @classmethod
    def load(cls, path) -> "QuantileModel":
        arrays, meta = load_container(path, magic=b"SCQM")
        model = cls(taus=meta["taus"], hidden=tuple(meta["hidden"]),
                    input_dim=meta["input_dim"], output_dim=meta["output_dim"])
        for net in model.nets:
            net.load_state_arrays(arrays)
        model.x_mean = arrays["x_mean"]
        model.x_std = arrays["x_std"]
        model.t_mean = arrays["t_mean"]
        model.t_std = arrays["t_std"]
        model.validation_rmse = float(meta["validation_rmse"])
        model.validation_pinball = float(meta["validation_pinball"])
        return model


class ZeroQuantileModel:
    """Stand-in with zero discrepancy and zero width (testing/ablation)."""

    def predict(self, error, obs, u, a, v, delta):
        zero = np.zeros(OUTPUT_DIM)
        return zero, zero.copy(), zero.copy()


class UpdatedModel:
    """Discrepancy-corrected transition model for the second CCD stage.

    The nominal plant advances the state; the quantile model corrects the
    observation. The running error feeds back on itself (the median
    prediction becomes the next error input), optionally reset every
    `reset_interval` steps.
    """

    def __init__(self, plant: Plant, qmodel, reset_interval: int = 0):
        self.plant = plant
        self.qmodel = qmodel
        self.reset_interval = reset_interval
        self.reset()

    def reset(self, state: np.ndarray | None = None):
        self._error = np.zeros(OUTPUT_DIM)
        self._obs = observe(state) if state is not None else np.zeros(OUTPUT_DIM)
        self._k = 0

    @property
    def observation(self) -> np.ndarray:
        return self._obs

    def step(self, state: np.ndarray, u: np.ndarray, drive: DrivingCondition,
             road: WheelDisturbance):
        """Advance one step: (next_state, corrected obs, band width, accels)."""
        next_state, accels = self.plant.step_and_accels(state, u, drive,
                                                        road, DT)
        upper, median, lower = self.qmodel.predict(
            self._error, self._obs, u, drive.a, drive.v, drive.delta)
        obs = observe(next_state) + median
        width = upper - lower
        self._error = median
        self._k += 1
        if self.reset_interval > 0 and self._k % self.reset_interval == 0:
            self._error = np.zeros(OUTPUT_DIM)
        self._obs = obs
        return next_state, obs, width, accels
