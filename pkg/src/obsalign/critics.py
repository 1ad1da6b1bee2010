"""Per-observable Lipschitz-regularized critics realizing the observable
Wasserstein distance, with a gradient penalty in place of hard constraints.

Each critic owns its scorer net, a normalization frozen from reference
data (applied identically to model and reference observables), and its
optimizer state. A trained critic's gap estimates the Wasserstein-1
distance between the two observable batches from below.
"""
from __future__ import annotations

import numpy as np

from .diffcore import DenseNet, NumericalError, OptState, Tensor, apply_adam, backward, custom_op


class Critic:
    """Scalar scorer over one observable's space."""

    def __init__(self, obs_dim: int, reference: np.ndarray, rng: np.random.Generator,
                 hidden=(512, 512), lam_gp: float = 1000.0, lr: float = 1e-3,
                 one_sided: bool = False):
        reference = np.atleast_2d(np.asarray(reference, dtype=np.float64))
        if reference.shape[1] != obs_dim:
            raise ValueError(f"reference width {reference.shape[1]} != obs_dim {obs_dim}")
        self.obs_dim = obs_dim
        self.shift = reference.mean(axis=0)
        self.inv_scale = 1.0 / np.maximum(reference.std(axis=0), 1e-8)
        self.lam_gp = float(lam_gp)
        self.one_sided = bool(one_sided)
        self.net = DenseNet([obs_dim, *hidden, 1], rng)
        self.opt = OptState.for_params(self.net.params(), lr=lr)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.shift) * self.inv_scale

    def score(self, obs) -> Tensor:
        """Critic values on raw observables; normalization happens inside."""
        obs = obs if isinstance(obs, Tensor) else Tensor(np.atleast_2d(obs))
        if obs.value.shape[1] != self.obs_dim:
            raise ValueError(f"observable width {obs.value.shape[1]} != {self.obs_dim}")
        return self.net.forward((obs - self.shift) * self.inv_scale)


def _check_batches(critic: Critic, model_obs: np.ndarray, ref_obs: np.ndarray):
    model_obs = np.atleast_2d(np.asarray(model_obs, dtype=np.float64))
    ref_obs = np.atleast_2d(np.asarray(ref_obs, dtype=np.float64))
    if model_obs.shape[0] == 0 or ref_obs.shape[0] == 0:
        raise ValueError("both observable batches must be nonempty")
    if model_obs.shape[1] != ref_obs.shape[1]:
        raise ValueError(f"batch widths disagree: {model_obs.shape[1]} vs {ref_obs.shape[1]}")
    if model_obs.shape[1] != critic.obs_dim:
        raise ValueError(f"batch width {model_obs.shape[1]} != critic width {critic.obs_dim}")
    return model_obs, ref_obs


def gap_term(critic: Critic, model_obs, ref_obs: np.ndarray) -> Tensor:
    """Mean critic value on the model batch minus mean on the reference batch.

    ``model_obs`` may be a graph node so generator gradients can flow
    through the model side; the reference side is a constant.
    """
    model_val = model_obs.value if isinstance(model_obs, Tensor) else model_obs
    _check_batches(critic, model_val, ref_obs)
    return critic.score(model_obs).mean() - critic.score(np.atleast_2d(ref_obs)).mean()


def wasserstein_gap(critic: Critic, model_obs: np.ndarray, ref_obs: np.ndarray) -> float:
    return gap_term(critic, model_obs, ref_obs).item()


def _relu(t: Tensor) -> Tensor:
    v = np.maximum(t.value, 0.0)
    return custom_op(v, (t,), lambda up: (up * (t.value > 0.0),))


def penalty_term(critic: Critic, model_obs: np.ndarray, ref_obs: np.ndarray,
                 rng: np.random.Generator) -> Tensor:
    """Gradient penalty at uniform random interpolates of the two batches.

    Penalizes the deviation of the full scorer's input-gradient norm from 1
    (two-sided by default, one-sided excess when configured).
    """
    model_obs, ref_obs = _check_batches(critic, model_obs, ref_obs)
    n = min(model_obs.shape[0], ref_obs.shape[0])
    u = rng.uniform(size=(n, 1))
    mix = u * model_obs[:n] + (1.0 - u) * ref_obs[:n]
    gi = critic.net.input_gradient((mix - critic.shift) * critic.inv_scale)
    gi = gi * critic.inv_scale  # chain through the frozen normalization
    norm = gi.square().sum(axis=1).sqrt()
    excess = _relu(norm - 1.0) if critic.one_sided else norm - 1.0
    return excess.square().mean() * critic.lam_gp


def gradient_penalty(critic: Critic, model_obs, ref_obs, rng) -> float:
    return penalty_term(critic, model_obs, ref_obs, rng).item()


CHECKPOINT_VERSION = 1


def save_critic(critic: Critic, path) -> None:
    """Serialize scorer weights and frozen normalization (optimizer state excluded)."""
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "obs_dim": np.array(critic.obs_dim),
        "widths": np.array(critic.net.widths),
        "shift": critic.shift,
        "inv_scale": critic.inv_scale,
        "lam_gp": np.array(critic.lam_gp),
        "one_sided": np.array(int(critic.one_sided)),
        "lr": np.array(critic.opt.lr),
    }
    for j, (w, b) in enumerate(zip(critic.net.weights, critic.net.biases)):
        arrays[f"w{j}"] = w.value
        arrays[f"b{j}"] = b.value
    np.savez(path, **arrays)


def load_critic(path) -> Critic:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        widths = data["widths"].tolist()
        critic = Critic(int(data["obs_dim"]), np.zeros((2, int(data["obs_dim"]))),
                        np.random.default_rng(0), hidden=widths[1:-1],
                        lam_gp=float(data["lam_gp"]), lr=float(data["lr"]),
                        one_sided=bool(int(data["one_sided"])))
        critic.shift = data["shift"].copy()
        critic.inv_scale = data["inv_scale"].copy()
        for j in range(len(critic.net.weights)):
            critic.net.weights[j].value[...] = data[f"w{j}"]
            critic.net.biases[j].value[...] = data[f"b{j}"]
    return critic


def critic_update(critic: Critic, model_obs: np.ndarray, ref_obs: np.ndarray,
                  rng: np.random.Generator) -> float:
    """One descent step driving the gap toward the Wasserstein-1 supremum.

    The loss is the negated gap plus the gradient penalty; returns the
    pre-step loss value.
    """
    loss = -gap_term(critic, np.asarray(model_obs, dtype=np.float64), ref_obs) \
        + penalty_term(critic, model_obs, ref_obs, rng)
    if not np.isfinite(loss.value):
        raise NumericalError(f"critic loss is non-finite: {loss.value!r}")
    backward(loss)
    params = critic.net.params()
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    apply_adam(params, grads, critic.opt, "descend")
    return loss.item()
