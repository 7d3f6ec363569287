"""Tanh MLPs for the Gaussian policy and value function, plus Adam.

Both networks consume a 13-dim feature vector: the two design variables
(normalized by their bound midpoints) concatenated with the 11 observed
outputs. The policy keeps separate mean and standard-deviation networks;
the std head is zero-weight / 0.01-bias initialized and mapped through
softplus so exploration starts small but strictly positive.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter

POLICY_INPUT_DIM = 13   # 2 design + 11 observation
ACTION_DIM = 4
HIDDEN_SIZES = (128, 128, 128)

LOG_2PI = float(np.log(2.0 * np.pi))


def softplus_np(x):
    return np.logaddexp(0.0, x)


class Mlp:
    """Fully connected stack with tanh after every hidden layer."""

    def __init__(self, sizes, rng: np.random.Generator | None = None,
                 init: str = "xavier", name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("need at least input and output widths")
        self.sizes = tuple(int(s) for s in sizes)
        self.name = name
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
            if init == "xavier":
                limit = np.sqrt(6.0 / (n_in + n_out))
                w = rng.uniform(-limit, limit, size=(n_in, n_out))
                b = np.zeros(n_out)
            elif init == "zero_bias_eps":
                # all-zero weights, small positive bias on every layer
                w = np.zeros((n_in, n_out))
                b = np.full(n_out, 0.01)
            else:
                raise ValueError(f"unknown init {init!r}")
            self.weights.append(Parameter(w, name=f"{name}.w{i}"))
            self.biases.append(Parameter(b, name=f"{name}.b{i}"))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x):
        """Traced forward; requires an active tape. Accepts (B, in) or (in,)."""
        self._check_width(ad.value_of(x))
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = ad.tanh(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward for rollouts (no gradient tracking)."""
        self._check_width(x)
        h = np.asarray(x, dtype=float)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.value + b.value
            if i != last:
                h = np.tanh(h)
        return h

    def _check_width(self, x):
        if np.shape(x)[-1] != self.sizes[0]:
            raise ValueError(
                f"{self.name}: input width {np.shape(x)[-1]} != {self.sizes[0]}")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value[...] = arrays[p.name]


class GaussianPolicy:
    """Diagonal-Gaussian policy over four actuator forces.

    The mean net works in units of `action_scale` newtons so its output head
    stays O(1); the std head is left in raw newtons to preserve the
    small-positive initialization.
    """

    def __init__(self, rng: np.random.Generator,
                 input_dim: int = POLICY_INPUT_DIM,
                 hidden=HIDDEN_SIZES, action_dim: int = ACTION_DIM,
                 action_scale: float = 1000.0):
        sizes = (input_dim, *hidden, action_dim)
        self.mean_net = Mlp(sizes, rng=rng, init="xavier", name="policy_mean")
        self.std_net = Mlp(sizes, init="zero_bias_eps", name="policy_std")
        self.action_dim = action_dim
        self.input_dim = input_dim
        self.action_scale = float(action_scale)

    def parameters(self) -> list[Parameter]:
        return self.mean_net.parameters() + self.std_net.parameters()

    def mean_std_np(self, features: np.ndarray):
        mu = self.mean_net.forward_np(features) * self.action_scale
        sigma = softplus_np(self.std_net.forward_np(features))
        return mu, sigma

    def sample(self, features: np.ndarray, rng: np.random.Generator):
        """(action, log_prob) for a single feature vector."""
        mu, sigma = self.mean_std_np(features)
        z = rng.standard_normal(self.action_dim)
        action = mu + sigma * z
        log_prob = float(-np.sum(np.log(sigma) + 0.5 * LOG_2PI + 0.5 * z * z))
        return action, log_prob

    def log_prob_np(self, features: np.ndarray, actions: np.ndarray):
        mu, sigma = self.mean_std_np(features)
        z = (actions - mu) / sigma
        return -np.sum(np.log(sigma) + 0.5 * LOG_2PI + 0.5 * z * z, axis=-1)

    def log_prob_traced(self, features: np.ndarray, actions: np.ndarray):
        """Traced log-density of given actions for a feature batch (B, 13)."""
        mu = ad.mul(self.mean_net.forward(features), self.action_scale)
        sigma = ad.softplus(self.std_net.forward(features))
        z = ad.div(ad.sub(actions, mu), sigma)
        per_dim = ad.add(ad.log(sigma),
                         ad.add(ad.mul(ad.mul(z, z), 0.5), 0.5 * LOG_2PI))
        return ad.mul(ad.vsum(per_dim, axis=1), -1.0)


class ValueFn:
    """Scalar state-value network over the same 13-dim features."""

    def __init__(self, rng: np.random.Generator,
                 input_dim: int = POLICY_INPUT_DIM, hidden=HIDDEN_SIZES):
        self.net = Mlp((input_dim, *hidden, 1), rng=rng, init="xavier",
                       name="value")

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def forward_np(self, features: np.ndarray) -> np.ndarray:
        return self.net.forward_np(features)[..., 0]

    def forward_traced(self, features):
        return ad.take(self.net.forward(features), (slice(None), 0))


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer step sees NaN or infinite gradients."""


class Adam:
    """Standard Adam over a fixed list of Parameters."""

    def __init__(self, params: list[Parameter], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(
                    f"non-finite gradient in {p.name or 'parameter'}")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state(self) -> dict:
        return {"t": self.t,
                "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


def pretrain_mean(policy: GaussianPolicy, features: np.ndarray,
                  targets: np.ndarray, rng: np.random.Generator,
                  epochs: int = 200, batch_size: int = 256,
                  lr: float = 1e-3) -> list[float]:
    """Fit the policy mean net to warm-start actions by minimizing MSE.

    Returns the per-epoch training MSE history in squared newtons.
    """
    if len(features) == 0:
        raise ValueError("pretraining dataset is empty")
    opt = Adam(policy.mean_net.parameters(), lr=lr)
    scaled_targets = np.asarray(targets, dtype=float) / policy.action_scale
    n = len(features)
    history = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with ad.Tape() as tape:
                pred = policy.mean_net.forward(features[idx])
                diff = ad.sub(pred, scaled_targets[idx])
                loss = ad.mean(ad.mul(diff, diff))
            tape.backward(loss)
            opt.step()
            epoch_losses.append(float(loss.value))
        history.append(float(np.mean(epoch_losses)) * policy.action_scale ** 2)
    return history
