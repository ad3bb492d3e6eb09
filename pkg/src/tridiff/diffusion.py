"""Forward diffusion, denoising steps and score-matching training.

The arithmetic here is written against the plain-number protocol shared
by numpy arrays and autodiff tensors, so the same functions serve both
the samplers (numpy iterates) and objectives that are differentiated
through (tensor iterates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .schedule import NoiseSchedule
from .validation import check_same_shape

__all__ = [
    "TrainBatch",
    "forward_diffuse",
    "tweedie_denoise",
    "ddpm_reverse_step",
    "score_form_reverse_step",
    "resample",
    "pf_ode_denoise",
    "dsm_loss",
    "train_score_model",
    "TrainingDiverged",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"training loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainBatch:
    """One training batch: clean samples, their times, and injected noises."""

    x0: np.ndarray      # (B, n)
    times: np.ndarray   # (B,) ints in 1..T
    noises: np.ndarray  # (B, n) standard normal

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.noises = np.atleast_2d(np.asarray(self.noises, dtype=np.float64))
        self.times = np.atleast_1d(np.asarray(self.times, dtype=np.int64))
        if self.x0.shape != self.noises.shape or self.x0.shape[0] != self.times.shape[0]:
            raise ValueError(
                f"TrainBatch: shapes disagree: x0 {self.x0.shape}, "
                f"noises {self.noises.shape}, times {self.times.shape}"
            )
        if self.x0.shape[0] == 0:
            raise ValueError("TrainBatch: batch is empty")


def _shape_of(x):
    return x.shape


def forward_diffuse(x0, t: int, eta, sched: NoiseSchedule):
    """Noise a clean signal to schedule time t: sqrt(ab)*x0 + sqrt(1-ab)*eta."""
    t = sched.check_t(t)
    check_same_shape(_shape_of(x0), _shape_of(eta), "forward_diffuse")
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eta


def tweedie_denoise(x_t, t: int, model, sched: NoiseSchedule):
    """Posterior-mean estimate of the clean signal from a noisy iterate.

    Combines the noise predictor with the closed-form denoising identity
    (x_t - sqrt(1-ab)*eps) / sqrt(ab). Works on tensors, in which case the
    result stays differentiable with respect to x_t.
    """
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab >= 1.0:
        return x_t
    eps = model.eps(x_t, t)
    return (1.0 / math.sqrt(ab)) * (x_t - math.sqrt(1.0 - ab) * eps)


def ddpm_reverse_step(x_t, t: int, xhat0, eta, sched: NoiseSchedule):
    """Ancestral reverse step from t to t-1 given a clean estimate.

    Callers choose xhat0: the plain Tweedie estimate gives the standard
    sampler, a measurement-consistent estimate gives the guided variant.
    """
    t = sched.check_t(t, lo=1)
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    beta_t = sched.beta[t]
    alpha_t = sched.alpha[t]
    c_xt = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    return c_xt * x_t + c_x0 * xhat0 + math.sqrt(beta_t) * eta


def score_form_reverse_step(x_t, t: int, score, eta, sched: NoiseSchedule):
    """Reverse step written in terms of the score instead of the clean estimate."""
    t = sched.check_t(t, lo=1)
    beta_t = sched.beta[t]
    return (1.0 / math.sqrt(1.0 - beta_t)) * (x_t + beta_t * score) + math.sqrt(beta_t) * eta


def resample(xhat0, t_minus_1: int, eta, sched: NoiseSchedule):
    """Map a clean estimate back to time t-1 through the forward kernel."""
    t_minus_1 = sched.check_t(t_minus_1)
    if t_minus_1 == 0:
        return xhat0
    ab = sched.alpha_bar[t_minus_1]
    return math.sqrt(ab) * xhat0 + math.sqrt(1.0 - ab) * eta


def pf_ode_denoise(v_t: np.ndarray, t: int, model, sched: NoiseSchedule, n_ode: int) -> np.ndarray:
    """Deterministic probability-flow denoising from time t to 0.

    The VP state is rescaled to x = v/sqrt(ab), whose noise level is
    sigma(t) = sqrt((1-ab)/ab). In that variable the flow reduces to
    dx/dsigma = eps_hat(x; sigma), integrated here with n_ode Euler steps
    on a uniform sigma grid; the noise predictor is evaluated at the
    schedule index whose sigma is nearest to the current grid point.
    """
    t = sched.check_t(t)
    n_ode = int(n_ode)
    if n_ode < 1:
        raise ValueError(f"n_ode must be >= 1, got {n_ode}")
    if t == 0:
        return np.array(v_t, copy=True)
    sigma_start = sched.sigma(t)
    x = np.asarray(v_t, dtype=np.float64) / math.sqrt(sched.alpha_bar[t])
    sigmas = np.linspace(sigma_start, 0.0, n_ode + 1)
    for j in range(n_ode):
        tj = sched.nearest_t_for_sigma(sigmas[j])
        if tj == 0:
            break
        ab_j = sched.alpha_bar[tj]
        eps = model.eps(math.sqrt(ab_j) * x, tj)
        if isinstance(eps, ad.Tensor):
            eps = eps.data
        x = x + (sigmas[j + 1] - sigmas[j]) * eps
    return x


def dsm_loss(model, batch: TrainBatch, sched: NoiseSchedule):
    """Denoising score-matching loss on one batch.

    Mean over the batch of the squared error between the injected noise
    and the model's prediction at the diffused points. Returns a scalar
    tensor whose graph reaches the model weights.
    """
    ab = sched.alpha_bar[batch.times][:, None]
    x_t = np.sqrt(ab) * batch.x0 + np.sqrt(1.0 - ab) * batch.noises
    pred = model.eps(ad.constant(x_t), batch.times)
    resid = ad.sub(pred, ad.constant(batch.noises))
    return ad.mul(ad.sq_norm(resid), 1.0 / batch.x0.shape[0])


def train_score_model(model, dataset: np.ndarray, sched: NoiseSchedule, iters: int,
                      batch: int, lr: float, seed: int = 0):
    """Adam-train a noise predictor with the score-matching objective.

    Deterministic given the seed: batch indices, times and noises come
    from a single named stream in a fixed order. Returns the loss curve;
    the model is updated in place.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    params = model.parameters()
    opt = _AdamParams(params, lr)
    curve = np.zeros(iters)
    for it in range(iters):
        idx = rng.integers(0, dataset.shape[0], size=batch)
        times = rng.integers(1, sched.T + 1, size=batch)
        noises = rng.standard_normal((batch, dataset.shape[1]))
        loss = dsm_loss(model, TrainBatch(dataset[idx], times, noises), sched)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(it)
        curve[it] = value
        for p in params:
            p.grad = None
        ad.backward(loss)
        opt.step()
    return curve


class _AdamParams:
    """Adam over a list of weight tensors (training-side twin of the
    sampler-side single-variable optimizer in samplers.py)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
