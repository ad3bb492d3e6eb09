"""Measurement operators, adjoints, and noisy measurement synthesis.

Operators map a signal of shape `signal_shape` to a flat measurement
vector of length m. apply() accepts plain arrays or autodiff tensors;
tensor inputs record the graph, so objectives can differentiate through
any operator (including the nonlinear ones). Linear operators also
provide an explicit adjoint, written directly rather than derived from
the autodiff rules, so the dot-product test is a real cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal as ss

from . import autodiff as ad
from .validation import ShapeError

__all__ = [
    "ForwardOperator",
    "box_mask",
    "random_mask",
    "blur",
    "downsample",
    "fourier_mask",
    "phase_retrieval",
    "dynamic_range_clip",
    "gaussian_kernel",
    "anisotropic_kernel",
    "ProblemInstance",
    "synthesize_measurements",
    "operator_from_config",
]


class ForwardOperator:
    """Base class; concrete operators implement _apply_tensor (and _adjoint)."""

    is_linear = False

    def __init__(self, signal_shape):
        self.signal_shape = tuple(int(s) for s in signal_shape)
        self.n = int(np.prod(self.signal_shape))
        self.m = None  # set by subclasses

    def _check_input(self, shape):
        if tuple(shape) != self.signal_shape:
            raise ShapeError(
                f"{type(self).__name__}.apply: input shape {tuple(shape)} "
                f"!= signal shape {self.signal_shape}"
            )

    def apply(self, x):
        if isinstance(x, ad.Tensor):
            self._check_input(x.shape)
            return self._apply_tensor(x)
        arr = np.asarray(x, dtype=np.float64)
        self._check_input(arr.shape)
        return self._apply_tensor(ad.constant(arr)).data

    def __call__(self, x):
        return self.apply(x)

    def _apply_tensor(self, x: ad.Tensor) -> ad.Tensor:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if not self.is_linear:
            raise NotImplementedError(f"{type(self).__name__} is nonlinear, no adjoint")
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.size != self.m:
            raise ShapeError(f"adjoint: measurement length {y.size} != m = {self.m}")
        return self._adjoint(y)

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _MaskOperator(ForwardOperator):
    """Selection of a fixed subset of pixels (flat indices)."""

    is_linear = True

    def __init__(self, signal_shape, keep_idx):
        super().__init__(signal_shape)
        self.keep_idx = np.asarray(keep_idx, dtype=np.intp)
        if self.keep_idx.size == 0:
            raise ValueError("mask keeps zero pixels")
        self.m = int(self.keep_idx.size)

    def _apply_tensor(self, x):
        return ad.gather(x, self.keep_idx)

    def _adjoint(self, y):
        out = np.zeros(self.n)
        out[self.keep_idx] = y
        return out.reshape(self.signal_shape)


def box_mask(signal_shape, box) -> ForwardOperator:
    """Inpainting operator: measurements are the pixels outside a box.

    box is (row, col, height, width); a zero-area box keeps everything.
    """
    h, w = signal_shape
    r0, c0, bh, bw = (int(v) for v in box)
    if r0 < 0 or c0 < 0 or bh < 0 or bw < 0 or r0 + bh > h or c0 + bw > w:
        raise ValueError(f"box {box} not inside image of shape {tuple(signal_shape)}")
    masked = np.zeros((h, w), dtype=bool)
    masked[r0:r0 + bh, c0:c0 + bw] = True
    return _MaskOperator(signal_shape, np.flatnonzero(~masked.ravel()))


def random_mask(signal_shape, keep_prob: float, seed: int) -> ForwardOperator:
    """Inpainting operator with a fixed Bernoulli(keep_prob) pixel mask."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob={keep_prob} must lie in (0, 1]")
    n = int(np.prod(signal_shape))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    keep = rng.random(n) < keep_prob
    if not keep.any():
        raise ValueError(f"random mask with keep_prob={keep_prob} kept zero pixels")
    return _MaskOperator(signal_shape, np.flatnonzero(keep))


class _BlurOperator(ForwardOperator):
    is_linear = True

    def __init__(self, signal_shape, kernel):
        super().__init__(signal_shape)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError(f"blur kernel must be odd-sized 2D, got shape {kernel.shape}")
        if abs(kernel.sum() - 1.0) > 1e-9:
            raise ValueError(f"blur kernel must sum to 1, sums to {kernel.sum():.6g}")
        self.kernel = kernel
        self.pad = (kernel.shape[0] // 2, kernel.shape[1] // 2)
        h, w = self.signal_shape
        if self.pad[0] >= h or self.pad[1] >= w:
            raise ValueError(f"kernel {kernel.shape} too large for image {self.signal_shape}")
        # flat source index of every padded pixel; reflect padding is linear,
        # its transpose folds border contributions back onto the sources
        self.pad_idx = np.pad(
            np.arange(self.n).reshape(h, w),
            ((self.pad[0], self.pad[0]), (self.pad[1], self.pad[1])),
            mode="reflect",
        )
        self.m = self.n

    def _apply_tensor(self, x):
        padded_shape = self.pad_idx.shape
        padded = ad.reshape(ad.gather(x, self.pad_idx.ravel()), padded_shape)
        return ad.reshape(ad.conv2d(padded, ad.constant(self.kernel)), (self.m,))

    def _adjoint(self, y):
        g = y.reshape(self.signal_shape)
        gpad = ss.convolve2d(g, self.kernel, mode="full")
        folded = np.bincount(self.pad_idx.ravel(), weights=gpad.ravel(), minlength=self.n)
        return folded.reshape(self.signal_shape)


def blur(signal_shape, kernel) -> ForwardOperator:
    """Convolution with a normalized odd-sized kernel under reflect padding."""
    return _BlurOperator(signal_shape, kernel)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def anisotropic_kernel(size: int, sigma_long: float, sigma_short: float,
                       angle: float = 0.6) -> np.ndarray:
    """Fixed elongated Gaussian standing in for a motion-blur kernel."""
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    r = np.arange(size) - size // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    u = np.cos(angle) * xx + np.sin(angle) * yy
    v = -np.sin(angle) * xx + np.cos(angle) * yy
    k = np.exp(-0.5 * ((u / sigma_long) ** 2 + (v / sigma_short) ** 2))
    return k / k.sum()


class _DownsampleOperator(ForwardOperator):
    is_linear = True

    def __init__(self, signal_shape, factor):
        super().__init__(signal_shape)
        f = int(factor)
        if f < 1:
            raise ValueError(f"factor must be >= 1, got {factor}")
        h, w = self.signal_shape
        if h % f or w % f:
            raise ShapeError(f"image shape {self.signal_shape} not divisible by factor {f}")
        self.factor = f
        self.out_shape = (h // f, w // f)
        self.m = self.out_shape[0] * self.out_shape[1]

    def _apply_tensor(self, x):
        return ad.reshape(ad.block_mean(x, self.factor), (self.m,))

    def _adjoint(self, y):
        f = self.factor
        g = y.reshape(self.out_shape)
        return np.kron(g, np.ones((f, f))) / (f * f)


def downsample(signal_shape, factor: int) -> ForwardOperator:
    """Block-average pooling by an integer factor."""
    return _DownsampleOperator(signal_shape, factor)


def _dft_matrix(n: int) -> np.ndarray:
    """Orthonormal complex DFT matrix."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / math.sqrt(n)


class _FourierMaskOperator(ForwardOperator):
    """Row-subsampled orthonormal 2D DFT, measurements interleaved re/im."""

    is_linear = True

    def __init__(self, signal_shape, rows):
        super().__init__(signal_shape)
        h, w = self.signal_shape
        self.rows = np.asarray(sorted(set(int(r) for r in rows)), dtype=np.intp)
        if self.rows.size == 0:
            raise ValueError("fourier mask selects no rows")
        if self.rows.min() < 0 or self.rows.max() >= h:
            raise ValueError(f"mask rows out of range for height {h}")
        fh = _dft_matrix(h)[self.rows]
        fw = _dft_matrix(w)
        # one matrix row per (frequency row u, frequency col v)
        g_complex = np.einsum("ui,vj->uvij", fh, fw).reshape(self.rows.size * w, self.n)
        self.m = 2 * self.rows.size * w
        g = np.empty((self.m, self.n))
        g[0::2] = g_complex.real
        g[1::2] = g_complex.imag
        self.matrix = g

    def _apply_tensor(self, x):
        return ad.matmul(ad.constant(self.matrix), ad.reshape(x, (self.n,)))

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.signal_shape)


def fourier_mask(signal_shape, pattern: str, acceleration: int, seed: int = 0) -> ForwardOperator:
    """Undersampled Fourier measurements keeping 1/acceleration of the rows.

    pattern 'uniform-rows' keeps every acceleration-th row; 'gaussian-rows'
    draws rows with density concentrated at low frequencies (row 0 always
    kept). acceleration 1 keeps every row.
    """
    h = int(signal_shape[0])
    acceleration = int(acceleration)
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    n_rows = max(1, h // acceleration)
    if pattern == "uniform-rows":
        rows = np.arange(0, h, acceleration)
    elif pattern == "gaussian-rows":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        dist = np.minimum(np.arange(h), h - np.arange(h))  # distance to DC, wrap-around
        p = np.exp(-0.5 * (dist / (h / 4.0)) ** 2)
        p /= p.sum()
        rows = rng.choice(h, size=min(n_rows, h), replace=False, p=p)
        rows = np.union1d(rows, [0])
    else:
        raise ValueError(f"unknown fourier mask pattern {pattern!r} "
                         "(valid: uniform-rows, gaussian-rows)")
    return _FourierMaskOperator(signal_shape, rows)


class _PhaseRetrievalOperator(ForwardOperator):
    """Magnitude of the oversampled DFT. Nonlinear; sign information is lost."""

    is_linear = False

    def __init__(self, signal_shape, oversample):
        super().__init__(signal_shape)
        if oversample < 1.0:
            raise ValueError(f"oversample must be >= 1, got {oversample}")
        shape = self.signal_shape
        if len(shape) == 1:
            np_len = int(round(oversample * shape[0]))
            self.padded_shape = (np_len,)
            g_complex = _dft_matrix(np_len)
            pad_pos = np.arange(shape[0])
        elif len(shape) == 2:
            hp = int(round(oversample * shape[0]))
            wp = int(round(oversample * shape[1]))
            self.padded_shape = (hp, wp)
            g_complex = np.einsum("ui,vj->uvij", _dft_matrix(hp), _dft_matrix(wp))
            g_complex = g_complex.reshape(hp * wp, hp * wp)
            rr, cc = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
            pad_pos = (rr * wp + cc).ravel()
        else:
            raise ShapeError(f"phase retrieval supports 1D/2D signals, got shape {shape}")
        self.pad_pos = pad_pos
        self.g_re = np.ascontiguousarray(g_complex.real)
        self.g_im = np.ascontiguousarray(g_complex.imag)
        self.m = int(np.prod(self.padded_shape))

    def _apply_tensor(self, x):
        flat = ad.reshape(x, (self.n,))
        padded = ad.scatter(flat, self.pad_pos, (self.m,))
        re = ad.matmul(ad.constant(self.g_re), padded)
        im = ad.matmul(ad.constant(self.g_im), padded)
        return ad.magnitude(re, im)


def phase_retrieval(signal_shape, oversample: float = 2.0) -> ForwardOperator:
    """Oversampled DFT-magnitude operator (zero-padded, orthonormal DFT)."""
    return _PhaseRetrievalOperator(signal_shape, oversample)


class _DynamicRangeClipOperator(ForwardOperator):
    is_linear = False

    def __init__(self, signal_shape, factor):
        super().__init__(signal_shape)
        if factor <= 0:
            raise ValueError(f"factor must be positive, got {factor}")
        self.factor = float(factor)
        self.m = self.n

    def _apply_tensor(self, x):
        return ad.reshape(ad.clip(ad.mul(x, self.factor), -1.0, 1.0), (self.m,))


def dynamic_range_clip(signal_shape, factor: float) -> ForwardOperator:
    """Saturating range reduction: clip(factor * x, -1, 1), elementwise."""
    return _DynamicRangeClipOperator(signal_shape, factor)


# -- problems ----------------------------------------------------------------


@dataclass
class ProblemInstance:
    """One inverse problem: measurements, noise description, operator."""

    y: np.ndarray
    operator: ForwardOperator
    sigma_y: float = 0.0
    noise_model: str = "gaussian"
    x_true: np.ndarray | None = None
    seed: int = 0
    lambda_y: float | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.y.size != self.operator.m:
            raise ShapeError(
                f"measurements have length {self.y.size}, operator expects m = {self.operator.m}"
            )
        if self.sigma_y < 0:
            raise ValueError(f"sigma_y={self.sigma_y} must be >= 0")
        if self.noise_model not in ("gaussian", "poisson"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")

    @property
    def m(self) -> int:
        return self.operator.m


def synthesize_measurements(x_true, operator: ForwardOperator, sigma_y: float = 0.0,
                            noise_model: str = "gaussian", seed: int = 0,
                            lambda_y: float | None = None) -> ProblemInstance:
    """Build a problem instance y = A(x) + noise from a ground truth.

    Gaussian: y = A(x) + sigma_y * eta. Poisson: values are mapped onto
    rates through the affine range map u = (v - lo)/(hi - lo) with
    lo = min(v_min, -1), hi = max(v_max, 1); then
    y = lo + (hi - lo) * Poisson(lambda_y * u)/lambda_y. For measurements
    within [-1, 1] this is the usual convention
    y = 2 * Poisson(lambda_y (v+1)/2)/lambda_y - 1, and values outside the
    range shift the map instead of being clipped.
    """
    x_true = np.asarray(x_true, dtype=np.float64)
    clean = operator.apply(x_true)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if noise_model == "gaussian":
        if sigma_y < 0:
            raise ValueError(f"sigma_y={sigma_y} must be >= 0")
        y = clean if sigma_y == 0.0 else clean + sigma_y * rng.standard_normal(clean.shape)
    elif noise_model == "poisson":
        if not lambda_y or lambda_y <= 0:
            raise ValueError(f"poisson noise requires lambda_y > 0, got {lambda_y}")
        lo = min(float(clean.min()), -1.0)
        hi = max(float(clean.max()), 1.0)
        u = (clean - lo) / (hi - lo)
        counts = rng.poisson(lambda_y * u)
        y = lo + (hi - lo) * counts / lambda_y
    else:
        raise ValueError(f"unknown noise model {noise_model!r}")
    return ProblemInstance(y=y, operator=operator, sigma_y=float(sigma_y),
                           noise_model=noise_model, x_true=x_true, seed=seed,
                           lambda_y=lambda_y)


def operator_from_config(spec: dict, signal_shape) -> ForwardOperator:
    """Build an operator from its config dict (field 'type' plus parameters)."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    makers = {
        "box-mask": lambda: box_mask(signal_shape, spec.pop("box")),
        "random-mask": lambda: random_mask(signal_shape, spec.pop("keep_prob"),
                                           spec.pop("seed", 0)),
        "blur": lambda: blur(signal_shape, gaussian_kernel(spec.pop("size", 7),
                                                           spec.pop("sigma", 1.5))),
        "motion-blur": lambda: blur(signal_shape, anisotropic_kernel(
            spec.pop("size", 7), spec.pop("sigma_long", 2.0),
            spec.pop("sigma_short", 0.5), spec.pop("angle", 0.6))),
        "downsample": lambda: downsample(signal_shape, spec.pop("factor", 2)),
        "fourier-mask": lambda: fourier_mask(signal_shape, spec.pop("pattern", "uniform-rows"),
                                             spec.pop("acceleration", 2), spec.pop("seed", 0)),
        "phase-retrieval": lambda: phase_retrieval(signal_shape, spec.pop("oversample", 2.0)),
        "dynamic-range-clip": lambda: dynamic_range_clip(signal_shape, spec.pop("factor", 2.0)),
    }
    if kind not in makers:
        raise ValueError(f"unknown operator type {kind!r} (valid: {sorted(makers)})")
    op = makers[kind]()
    if spec:
        raise ValueError(f"unknown keys in operator config: {sorted(spec)}")
    return op
