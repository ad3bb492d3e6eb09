"""Reconstruction samplers for inverse problems.

All samplers share one RNG discipline so that equivalence statements
between variants are exactly testable. From the run seed, two named
streams are derived:

  * "init": one standard normal draw, the starting iterate x_N;
  * "eta":  N standard normal draws, pre-drawn in step order
            i = N, N-1, ..., 1 and used as the per-step noise (the
            resampling noise in the triple-consistent family, the
            ancestral/guidance noise in the DPS family).

No other randomness is consumed while sampling, so two samplers with the
same seed see identical noise at every step regardless of how many inner
iterations they run. In particular, the triple-consistent sampler with a
single plain gradient-descent inner step, no regularization and step
size zeta reproduces the guided-resampling baseline trajectory exactly.

The time grid maps sampler index i to schedule time t_i = i * floor(T/N);
remainder steps at the high-noise end are dropped. The DPS/DDPM ancestral
steps use the effective per-stride coefficients implied by the subsampled
alpha_bar sequence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .diffusion import pf_ode_denoise, resample, tweedie_denoise
from .metrics import psnr
from .operators import ProblemInstance
from .schedule import NoiseSchedule

__all__ = [
    "AdamState",
    "adam_step",
    "ObjectiveParts",
    "consistency_objective",
    "InnerResult",
    "inner_optimize",
    "StepDiagnostics",
    "RunResult",
    "TripleConsistentSampler",
    "OdeTripleConsistentSampler",
    "NoBackwardSampler",
    "DPSSampler",
    "DPSResampleSampler",
    "DDPMSampler",
    "SAMPLER_VARIANTS",
    "make_sampler",
]


def _stream(seed: int, role: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(role,))))


_ROLE_INIT, _ROLE_ETA = 0, 1


# -- inner optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    """Moment accumulators for a single optimization variable."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, var: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(var), v=np.zeros_like(var))


def adam_step(state: AdamState, grad: np.ndarray, var: np.ndarray, gamma: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates state, returns the new variable."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return var - gamma * m_hat / (np.sqrt(v_hat) + state.eps)


# -- the per-step objective ----------------------------------------------------


@dataclass
class ObjectiveParts:
    """Scalar graph nodes of the per-step objective; reg is None when lam == 0."""

    total: ad.Tensor
    data: ad.Tensor
    reg: ad.Tensor | None
    xhat0: ad.Tensor

    @property
    def data_value(self) -> float:
        return self.data.item()

    @property
    def reg_value(self) -> float:
        return 0.0 if self.reg is None else self.reg.item()


def consistency_objective(v, x_i, t: int, y, operator, model, lam: float,
                          sched: NoiseSchedule) -> ObjectiveParts:
    """Measurement misfit of the denoised input plus closeness to x_i.

    data = ||A(denoise(v, t)) - y||^2, reg = lam * ||x_i - v||^2. The
    stopping rule elsewhere compares the data term alone against delta^2.
    """
    v_t = v if isinstance(v, ad.Tensor) else ad.constant(np.asarray(v, dtype=np.float64))
    xhat0 = tweedie_denoise(v_t, t, model, sched)
    resid = ad.sub(operator.apply(xhat0), y if isinstance(y, ad.Tensor) else ad.constant(y))
    data = ad.sq_norm(resid)
    if lam == 0.0:
        return ObjectiveParts(total=data, data=data, reg=None, xhat0=xhat0)
    x_ref = x_i if isinstance(x_i, ad.Tensor) else ad.constant(np.asarray(x_i, dtype=np.float64))
    reg = ad.mul(ad.sq_norm(ad.sub(x_ref, v_t)), lam)
    return ObjectiveParts(total=ad.add(data, reg), data=data, reg=reg, xhat0=xhat0)


@dataclass
class InnerResult:
    v: np.ndarray
    xhat0: np.ndarray
    data_sq: float
    reg: float
    iterations: int
    break_reason: str  # "threshold" or "budget"
    data_trace: list = field(default_factory=list)
    psnr_trace: list = field(default_factory=list)


def inner_optimize(x_i: np.ndarray, t: int, y: np.ndarray, operator, model,
                   sched: NoiseSchedule, n_inner: int, lam: float, delta: float,
                   gamma: float, optimizer: str = "adam",
                   x_true: np.ndarray | None = None) -> InnerResult:
    """Optimize the per-step objective over the model input.

    Starts from v = x_i. Before every update the squared data term is
    checked against delta^2; once it drops below, the loop breaks without
    a further update (so a generous delta leaves x_i untouched). At most
    n_inner updates run. The clean estimate of the last evaluation is
    reused, no extra model call is spent on it.
    """
    if n_inner < 1:
        raise ValueError(f"n_inner must be >= 1, got {n_inner}")
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r} (valid: adam, gd)")
    v = np.array(x_i, dtype=np.float64, copy=True)
    state = AdamState.like(v) if optimizer == "adam" else None
    threshold = delta * delta
    data_trace: list[float] = []
    psnr_trace: list[float] = []

    def evaluate(var, need_grad):
        leaf = ad.Tensor(var, requires_grad=need_grad)
        parts = consistency_objective(leaf, x_i, t, y, operator, model, lam, sched)
        return leaf, parts

    steps_done = 0
    for _ in range(n_inner):
        leaf, parts = evaluate(v, need_grad=True)
        data_val = parts.data_value
        data_trace.append(data_val)
        if x_true is not None:
            psnr_trace.append(psnr(parts.xhat0.data, x_true))
        if not np.isfinite(parts.total.item()):
            raise FloatingPointError(
                f"inner objective became non-finite at iteration {steps_done}"
            )
        if data_val < threshold:
            return InnerResult(v, parts.xhat0.data.copy(), data_val, parts.reg_value,
                               steps_done, "threshold", data_trace, psnr_trace)
        g = ad.gradient(parts.total, leaf).data
        v = adam_step(state, g, v, gamma) if state is not None else v - gamma * g
        steps_done += 1

    _, parts = evaluate(v, need_grad=False)
    data_val = parts.data_value
    data_trace.append(data_val)
    if x_true is not None:
        psnr_trace.append(psnr(parts.xhat0.data, x_true))
    return InnerResult(v, parts.xhat0.data.copy(), data_val, parts.reg_value,
                       steps_done, "budget", data_trace, psnr_trace)


# -- results -------------------------------------------------------------------


@dataclass
class StepDiagnostics:
    index: int
    t: int
    data_sq: float
    reg: float
    iterations: int
    break_reason: str
    inner_seconds: float
    data_trace: list = field(default_factory=list)
    psnr_trace: list = field(default_factory=list)


@dataclass
class RunResult:
    """Reconstruction plus per-step diagnostics for one sampling run."""

    x_hat: np.ndarray
    variant: str
    seed: int
    steps: list
    runtime_seconds: float = 0.0
    metrics: object = None
    fingerprint: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def total_inner_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)


# -- sampler base ---------------------------------------------------------------


class _SamplerBase(BaseEstimator):
    variant = "base"

    def _grid(self, problem: ProblemInstance):
        sched: NoiseSchedule = self.schedule
        n = int(self.n_steps)
        if n < 1:
            raise ValueError(f"n_steps must be >= 1, got {n}")
        dt = sched.T // n
        if dt < 1:
            raise ValueError(f"n_steps={n} exceeds schedule length T={sched.T}")
        times = [i * dt for i in range(n + 1)]  # t_0 = 0, ..., t_N
        rng_init = _stream(self.seed, _ROLE_INIT)
        rng_eta = _stream(self.seed, _ROLE_ETA)
        shape = problem.operator.signal_shape
        x_init = rng_init.standard_normal(shape)
        etas = {i: rng_eta.standard_normal(shape) for i in range(n, 0, -1)}
        return times, x_init, etas

    def fit(self, problem: ProblemInstance, y=None):
        """Run the sampler on a problem; the result lands in result_."""
        self.result_ = self.reconstruct(problem)
        return self

    def reconstruct(self, problem: ProblemInstance) -> RunResult:
        start = time.perf_counter()
        x_hat, steps = self._run(problem)
        return RunResult(x_hat=x_hat, variant=self.variant, seed=self.seed, steps=steps,
                         runtime_seconds=time.perf_counter() - start)

    def _run(self, problem):
        raise NotImplementedError


class TripleConsistentSampler(_SamplerBase):
    """Step-wise triple-consistent sampler.

    Per step: optimize the model input for measurement consistency of its
    denoised image (staying close to the current iterate), denoise the
    optimized input, then map the estimate to the next time by the
    forward kernel. forward_map="ddpm" replaces that last mapping with
    the ancestral update (the forward-consistency ablation).
    """

    variant = "triple"

    def __init__(self, model=None, schedule=None, n_steps=20, n_inner=30, lam=0.0,
                 delta=0.0, gamma=0.01, optimizer="adam", forward_map="resample", seed=0):
        self.model = model
        self.schedule = schedule
        self.n_steps = n_steps
        self.n_inner = n_inner
        self.lam = lam
        self.delta = delta
        self.gamma = gamma
        self.optimizer = optimizer
        self.forward_map = forward_map
        self.seed = seed

    def _denoise_final(self, v_hat: np.ndarray, t: int, inner: InnerResult) -> np.ndarray:
        return inner.xhat0

    def _run(self, problem):
        if self.forward_map not in ("resample", "ddpm"):
            raise ValueError(f"unknown forward_map {self.forward_map!r}")
        times, x, etas = self._grid(problem)
        sched = self.schedule
        steps = []
        for i in range(self.n_steps, 0, -1):
            t = times[i]
            tick = time.perf_counter()
            inner = inner_optimize(x, t, problem.y, problem.operator, self.model, sched,
                                   self.n_inner, self.lam, self.delta, self.gamma,
                                   self.optimizer, x_true=problem.x_true)
            xhat0 = self._denoise_final(inner.v, t, inner)
            if self.forward_map == "resample":
                x = resample(xhat0, times[i - 1], etas[i], sched)
            else:
                x = _strided_ancestral(x, xhat0, times[i], times[i - 1], etas[i], sched)
            steps.append(StepDiagnostics(i, t, inner.data_sq, inner.reg, inner.iterations,
                                         inner.break_reason, time.perf_counter() - tick,
                                         inner.data_trace, inner.psnr_trace))
        return x, steps


class OdeTripleConsistentSampler(TripleConsistentSampler):
    """Triple-consistent sampler whose final per-step denoising runs the
    probability-flow ODE instead of the one-step formula. The inner
    objective keeps the one-step denoiser so its gradients stay cheap."""

    variant = "triple-ode"

    def __init__(self, model=None, schedule=None, n_steps=20, n_inner=30, lam=0.0,
                 delta=0.0, gamma=0.01, optimizer="adam", forward_map="resample",
                 seed=0, n_ode=5):
        super().__init__(model=model, schedule=schedule, n_steps=n_steps, n_inner=n_inner,
                         lam=lam, delta=delta, gamma=gamma, optimizer=optimizer,
                         forward_map=forward_map, seed=seed)
        self.n_ode = n_ode

    def _denoise_final(self, v_hat, t, inner):
        return pf_ode_denoise(v_hat, t, self.model, self.schedule, self.n_ode)


class NoBackwardSampler(_SamplerBase):
    """Ablation dropping backward consistency: optimize the image itself.

    Per step the clean estimate is initialized by denoising the iterate
    once, then refined by exactly n_inner least-squares updates on the
    measurements. The model is never differentiated through (it only
    provides the initialization), so each inner step is cheaper.
    """

    variant = "no-backward"

    def __init__(self, model=None, schedule=None, n_steps=20, n_inner=30,
                 gamma=0.01, optimizer="adam", seed=0):
        self.model = model
        self.schedule = schedule
        self.n_steps = n_steps
        self.n_inner = n_inner
        self.gamma = gamma
        self.optimizer = optimizer
        self.seed = seed

    def _run(self, problem):
        times, x, etas = self._grid(problem)
        sched = self.schedule
        y_const = ad.constant(problem.y)
        steps = []
        for i in range(self.n_steps, 0, -1):
            t = times[i]
            tick = time.perf_counter()
            xh = tweedie_denoise(x, t, self.model, sched)
            state = AdamState.like(xh) if self.optimizer == "adam" else None
            data_trace, psnr_trace = [], []
            for _ in range(self.n_inner):
                leaf = ad.Tensor(xh, requires_grad=True)
                data = ad.sq_norm(ad.sub(problem.operator.apply(leaf), y_const))
                data_trace.append(data.item())
                if problem.x_true is not None:
                    psnr_trace.append(psnr(xh, problem.x_true))
                g = ad.gradient(data, leaf).data
                xh = adam_step(state, g, xh, self.gamma) if state is not None else xh - self.gamma * g
            data_val = float(np.sum((problem.operator.apply(xh) - problem.y) ** 2))
            data_trace.append(data_val)
            x = resample(xh, times[i - 1], etas[i], sched)
            steps.append(StepDiagnostics(i, t, data_val, 0.0, self.n_inner, "budget",
                                         time.perf_counter() - tick, data_trace, psnr_trace))
        return x, steps


def _strided_ancestral(x_t, xhat0, t: int, t_prev: int, eta, sched: NoiseSchedule):
    """Ancestral update between two (possibly non-adjacent) schedule times.

    Uses the effective coefficients of the subsampled alpha_bar sequence;
    the trailing noise term is dropped on the final step to time 0.
    """
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t_prev]
    alpha_eff = ab_t / ab_prev
    beta_eff = 1.0 - alpha_eff
    c_xt = math.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_x0 = math.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)
    out = c_xt * x_t + c_x0 * xhat0
    if t_prev > 0:
        out = out + math.sqrt(beta_eff) * eta
    return out


class DPSSampler(_SamplerBase):
    """Posterior-sampling baseline: ancestral step plus one gradient
    correction on the measurement misfit of the denoised iterate.

    zeta_schedule "constant" uses zeta0 directly; "residual" rescales it
    by the current misfit norm, the customary practical choice.
    """

    variant = "dps"

    def __init__(self, model=None, schedule=None, n_steps=20, zeta0=1.0,
                 zeta_schedule="residual", seed=0):
        self.model = model
        self.schedule = schedule
        self.n_steps = n_steps
        self.zeta0 = zeta0
        self.zeta_schedule = zeta_schedule
        self.seed = seed

    def _guidance(self, x, t, problem):
        leaf = ad.Tensor(x, requires_grad=True)
        xhat0 = tweedie_denoise(leaf, t, self.model, self.schedule)
        data = ad.sq_norm(ad.sub(problem.operator.apply(xhat0), ad.constant(problem.y)))
        grad = ad.gradient(data, leaf).data
        if self.zeta_schedule == "constant":
            zeta = self.zeta0
        elif self.zeta_schedule == "residual":
            zeta = self.zeta0 / max(math.sqrt(data.item()), 1e-12)
        else:
            raise ValueError(f"unknown zeta schedule {self.zeta_schedule!r}")
        return xhat0.data, grad, zeta, data.item()

    def _run(self, problem):
        times, x, etas = self._grid(problem)
        steps = []
        for i in range(self.n_steps, 0, -1):
            t = times[i]
            tick = time.perf_counter()
            xhat0, grad, zeta, data_val = self._guidance(x, t, problem)
            x_prime = _strided_ancestral(x, xhat0, t, times[i - 1], etas[i], self.schedule)
            x = x_prime - zeta * grad
            steps.append(StepDiagnostics(i, t, data_val, 0.0, 1, "budget",
                                         time.perf_counter() - tick))
        return x, steps


class DPSResampleSampler(DPSSampler):
    """DPS variant that re-noises the denoised corrected iterate instead of
    taking the ancestral step. One gradient update per sampling step."""

    variant = "dps-resample"

    def _run(self, problem):
        times, x, etas = self._grid(problem)
        sched = self.schedule
        steps = []
        for i in range(self.n_steps, 0, -1):
            t = times[i]
            tick = time.perf_counter()
            _, grad, zeta, data_val = self._guidance(x, t, problem)
            v = x - zeta * grad
            xhat0_v = tweedie_denoise(v, t, self.model, sched)
            x = resample(xhat0_v, times[i - 1], etas[i], sched)
            steps.append(StepDiagnostics(i, t, data_val, 0.0, 1, "budget",
                                         time.perf_counter() - tick))
        return x, steps


class DDPMSampler(_SamplerBase):
    """Unconditional ancestral sampling; ignores the measurements."""

    variant = "ddpm"

    def __init__(self, model=None, schedule=None, n_steps=20, seed=0):
        self.model = model
        self.schedule = schedule
        self.n_steps = n_steps
        self.seed = seed

    def _run(self, problem):
        times, x, etas = self._grid(problem)
        steps = []
        for i in range(self.n_steps, 0, -1):
            t = times[i]
            tick = time.perf_counter()
            xhat0 = tweedie_denoise(x, t, self.model, self.schedule)
            x = _strided_ancestral(x, xhat0, t, times[i - 1], etas[i], self.schedule)
            steps.append(StepDiagnostics(i, t, float("nan"), 0.0, 0, "budget",
                                         time.perf_counter() - tick))
        return x, steps


SAMPLER_VARIANTS = {
    "triple": TripleConsistentSampler,
    "triple-ode": OdeTripleConsistentSampler,
    "no-backward": NoBackwardSampler,
    "dps": DPSSampler,
    "dps-resample": DPSResampleSampler,
    "ddpm": DDPMSampler,
}


def make_sampler(variant: str, model, schedule, **params):
    """Instantiate a sampler by its config name."""
    if variant not in SAMPLER_VARIANTS:
        raise ValueError(f"unknown sampler variant {variant!r} (valid: {sorted(SAMPLER_VARIANTS)})")
    return SAMPLER_VARIANTS[variant](model=model, schedule=schedule, **params)
