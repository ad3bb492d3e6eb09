"""Noise-predictor models: a trainable MLP and analytic mixture oracles.

Every model exposes eps(x, t) (the predicted noise content of x at
schedule time t) and the derived score accessor. Models accept either
plain arrays or autodiff tensors; tensor inputs keep the computation
differentiable with respect to x, which the samplers rely on.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg as sla
from sklearn.base import BaseEstimator

from . import autodiff as ad
from . import fileio
from .diffusion import train_score_model
from .schedule import NoiseSchedule
from .validation import ShapeError

__all__ = ["ScoreModel", "ScoreMLP", "GMMScoreOracle", "load_gmm_prior", "parse_gmm_prior"]


class ScoreModel:
    """Interface shared by all noise predictors."""

    schedule: NoiseSchedule
    dim: int
    differentiable: bool = True

    def eps(self, x, t):
        raise NotImplementedError

    def score(self, x, t):
        """Score of the diffused density, derived from eps by construction."""
        t = self.schedule.check_t(t, lo=1)
        ab = self.schedule.alpha_bar[t]
        return (-1.0 / math.sqrt(1.0 - ab)) * self.eps(x, t)


def _sinusoidal_embedding(times: np.ndarray, T: int, n_freqs: int) -> np.ndarray:
    """Fixed time features: sin/cos of geometrically spaced frequencies of t/T."""
    s = np.atleast_1d(np.asarray(times, dtype=np.float64)) / float(T)
    freqs = 2.0 ** np.arange(n_freqs)
    angles = math.pi * s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class ScoreMLP(ScoreModel, BaseEstimator):
    """Small fully connected noise predictor with a sinusoidal time embedding.

    fit(X) runs score-matching training on a dataset of clean samples,
    re-initializing the weights from the seed first, so fitting is
    deterministic. The output layer starts at zero, so an unfitted model
    predicts zero noise everywhere.
    """

    def __init__(self, schedule=None, dim=2, hidden=128, depth=3, time_freqs=8,
                 iters=2000, batch_size=64, lr=1e-3, seed=0):
        self.schedule = schedule
        self.dim = dim
        self.hidden = hidden
        self.depth = depth
        self.time_freqs = time_freqs
        self.iters = iters
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self._params = None
        self.loss_curve_ = None

    # -- weights ----------------------------------------------------------

    def _init_params(self):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))
        emb_dim = 2 * self.time_freqs
        names, arrays = [], []

        def he(fan_in, shape):
            return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)

        names += ["w_in_x", "w_in_t", "b_in"]
        arrays += [he(self.dim + emb_dim, (self.dim, self.hidden)),
                   he(self.dim + emb_dim, (emb_dim, self.hidden)),
                   np.zeros(self.hidden)]
        for layer in range(1, self.depth):
            names += [f"w_{layer}", f"b_{layer}"]
            arrays += [he(self.hidden, (self.hidden, self.hidden)), np.zeros(self.hidden)]
        names += ["w_out", "b_out"]
        arrays += [np.zeros((self.hidden, self.dim)), np.zeros(self.dim)]
        self._params = {n: ad.Tensor(a, requires_grad=True) for n, a in zip(names, arrays)}

    def parameters(self):
        if self._params is None:
            self._init_params()
        return list(self._params.values())

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ShapeError(f"fit: data has {X.shape[1]} features, model expects {self.dim}")
        self._init_params()
        self.loss_curve_ = train_score_model(
            self, X, self.schedule, self.iters, self.batch_size, self.lr, seed=self.seed
        )
        return self

    # -- forward ------------------------------------------------------------

    def eps(self, x, t):
        if self._params is None:
            self._init_params()
        is_tensor = isinstance(x, ad.Tensor)
        xt = x if is_tensor else ad.constant(np.asarray(x, dtype=np.float64))
        in_shape = xt.shape
        if xt.size == self.dim and in_shape != (self.dim,):
            xt = ad.reshape(xt, (self.dim,))  # a single signal in image layout
        elif xt.ndim != 2 or xt.shape[1] != self.dim:
            if in_shape != (self.dim,):
                raise ShapeError(f"eps: input shape {in_shape} incompatible with dim {self.dim}")
        batched = xt.ndim == 2
        n_rows = xt.shape[0] if batched else 1
        emb = _sinusoidal_embedding(t, self.schedule.T, self.time_freqs)
        if emb.shape[0] == 1 and n_rows > 1:
            emb = np.repeat(emb, n_rows, axis=0)
        if emb.shape[0] != n_rows:
            raise ShapeError(f"eps: {emb.shape[0]} times for {n_rows} input rows")
        if not batched:
            emb = emb[0]

        p = self._params
        h = ad.add(ad.matmul(xt, p["w_in_x"]),
                   ad.affine(ad.constant(emb), p["w_in_t"], p["b_in"]))
        h = ad.silu(h)
        for layer in range(1, self.depth):
            h = ad.silu(ad.affine(h, p[f"w_{layer}"], p[f"b_{layer}"]))
        out = ad.affine(h, p["w_out"], p["b_out"])
        if out.shape != in_shape:
            out = ad.reshape(out, in_shape)
        return out if is_tensor else out.data

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        if self._params is None:
            self._init_params()
        meta = {
            "kind": "score-mlp",
            "dim": self.dim,
            "hidden": self.hidden,
            "depth": self.depth,
            "time_freqs": self.time_freqs,
            "T": self.schedule.T,
        }
        fileio.save_checkpoint(path, {n: p.data for n, p in self._params.items()}, meta)

    @classmethod
    def load(cls, path, schedule: NoiseSchedule) -> "ScoreMLP":
        arrays, meta = fileio.load_checkpoint(path)
        if meta.get("kind") != "score-mlp":
            raise ValueError(f"checkpoint at {path} is not a score-mlp checkpoint")
        if int(meta["T"]) != schedule.T:
            raise ValueError(f"checkpoint trained for T={meta['T']}, schedule has T={schedule.T}")
        model = cls(schedule=schedule, dim=int(meta["dim"]), hidden=int(meta["hidden"]),
                    depth=int(meta["depth"]), time_freqs=int(meta["time_freqs"]))
        model._init_params()
        for name, tensor in model._params.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing array {name}")
            if arrays[name].shape != tensor.data.shape:
                raise ShapeError(
                    f"checkpoint array {name} has shape {arrays[name].shape}, expected {tensor.data.shape}"
                )
            tensor.data = np.ascontiguousarray(arrays[name])
        return model


class GMMScoreOracle(ScoreModel):
    """Exact noise predictor for a Gaussian-mixture prior.

    Under the VP forward kernel the diffused density stays a mixture with
    means sqrt(ab)*mu_k and covariances ab*Sigma_k + (1-ab)*I, so its
    score is available in closed form. Responsibilities are evaluated in
    log space. The backward rule is the mixture score's Hessian applied
    to the upstream gradient, so the oracle is differentiable through its
    input like the network models.
    """

    differentiable = True

    def __init__(self, weights, means, covariances, schedule: NoiseSchedule):
        self.schedule = schedule
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.k, self.dim = means.shape
        if w.size != self.k:
            raise ValueError(f"{w.size} weights for {self.k} components")
        covs = []
        for c in covariances:
            c = np.asarray(c, dtype=np.float64)
            if c.ndim == 1:
                c = np.diag(c)
            if c.shape != (self.dim, self.dim):
                raise ShapeError(f"covariance shape {c.shape}, expected {(self.dim, self.dim)}")
            if not np.allclose(c, c.T) or np.any(np.linalg.eigvalsh(c) <= 0):
                raise ValueError("covariances must be symmetric positive definite")
            covs.append(c)
        self.log_w = np.log(w)
        self.means = means
        self.covs = np.stack(covs)
        self._factor_cache: dict[int, list] = {}

    def _factors(self, t: int):
        """Cholesky factors and log-dets of the diffused covariances at t."""
        if t not in self._factor_cache:
            ab = self.schedule.alpha_bar[t]
            eye = np.eye(self.dim)
            entries = []
            for k in range(self.k):
                c = ab * self.covs[k] + (1.0 - ab) * eye
                cho = sla.cho_factor(c, lower=True)
                logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
                entries.append((cho, logdet))
            self._factor_cache[t] = entries
        return self._factor_cache[t]

    def _score_parts(self, x_row: np.ndarray, t: int):
        """Responsibilities and per-component score directions at one point."""
        ab = self.schedule.alpha_bar[t]
        factors = self._factors(t)
        diffs = x_row[None, :] - math.sqrt(ab) * self.means
        s = np.empty_like(diffs)
        logp = np.empty(self.k)
        for k in range(self.k):
            cho, logdet = factors[k]
            sol = sla.cho_solve(cho, diffs[k])
            s[k] = -sol
            logp[k] = self.log_w[k] - 0.5 * (diffs[k] @ sol) - 0.5 * logdet
        logp -= logp.max()
        r = np.exp(logp)
        r /= r.sum()
        return r, s, factors

    def score_value(self, x: np.ndarray, t: int) -> np.ndarray:
        """Closed-form score of the diffused mixture, as a plain array."""
        t = self.schedule.check_t(t)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            r, s, _ = self._score_parts(x, t)
            return r @ s
        return np.stack([self.score_value(row, t) for row in x])

    def _hessian_vec(self, x_row: np.ndarray, t: int, g: np.ndarray) -> np.ndarray:
        r, s, factors = self._score_parts(x_row, t)
        s_bar = r @ s
        out = np.zeros_like(x_row)
        for k in range(self.k):
            cho, _ = factors[k]
            out += r[k] * (s[k] * (s[k] @ g) - sla.cho_solve(cho, g))
        out -= s_bar * (s_bar @ g)
        return out

    def eps(self, x, t):
        t = self.schedule.check_t(t)
        ab = self.schedule.alpha_bar[t]
        coeff = -math.sqrt(1.0 - ab)
        is_tensor = isinstance(x, ad.Tensor)
        x_val = x.data if is_tensor else np.asarray(x, dtype=np.float64)
        in_shape = x_val.shape
        if x_val.size == self.dim:
            flat = x_val.reshape(self.dim)
        elif x_val.ndim == 2 and x_val.shape[1] == self.dim:
            flat = x_val
        else:
            raise ShapeError(f"eps: input shape {in_shape} incompatible with dim {self.dim}")
        value = (coeff * self.score_value(flat, t)).reshape(in_shape)
        if not is_tensor:
            return value

        def vjp(g):
            if flat.ndim == 1:
                return (coeff * self._hessian_vec(flat, t, g.reshape(self.dim)).reshape(in_shape),)
            rows = [coeff * self._hessian_vec(flat[i], t, g[i]) for i in range(flat.shape[0])]
            return (np.stack(rows),)

        return ad.custom_vjp(value, (x,), vjp, "gmm_eps")

    def score(self, x, t):
        t = self.schedule.check_t(t, lo=1)
        ab = self.schedule.alpha_bar[t]
        return (-1.0 / math.sqrt(1.0 - ab)) * self.eps(x, t)


def parse_gmm_prior(text: str):
    """Parse the mixture text format: one 'weight | mean | diag variances' line per component."""
    weights, means, covs = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("|")]
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'weight | mean | variances', got {raw!r}")
        weights.append(float(parts[0]))
        means.append(np.fromstring(parts[1], sep=" "))
        covs.append(np.fromstring(parts[2], sep=" "))
    if not weights:
        raise ValueError("mixture config contains no components")
    dims = {m.size for m in means} | {c.size for c in covs}
    if len(dims) != 1:
        raise ValueError(f"inconsistent component dimensions: {sorted(dims)}")
    return np.array(weights), np.stack(means), [np.diag(c) for c in covs]


def load_gmm_prior(path, schedule: NoiseSchedule) -> GMMScoreOracle:
    with open(path, "r", encoding="utf-8") as fh:
        weights, means, covs = parse_gmm_prior(fh.read())
    return GMMScoreOracle(weights, means, covs, schedule)
