"""Toy datasets: 2D mixture points and small blob images."""

from __future__ import annotations

import numpy as np

__all__ = ["generate_dataset", "DATASET_KINDS", "default_gmm_params"]

DATASET_KINDS = ("gmm-2d", "blobs-8x8", "blobs-16x16")


def default_gmm_params() -> dict:
    return {
        "weights": [0.35, 0.35, 0.3],
        "means": [[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]],
        "variances": [[0.3, 0.3], [0.3, 0.3], [0.25, 0.25]],
    }


def _gmm_points(params: dict, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(params["weights"], dtype=np.float64)
    means = np.asarray(params["means"], dtype=np.float64)
    variances = np.asarray(params["variances"], dtype=np.float64)
    comp = rng.choice(w.size, size=n_samples, p=w / w.sum())
    eps = rng.standard_normal((n_samples, means.shape[1]))
    return means[comp] + np.sqrt(variances[comp]) * eps


def _blob_images(side: int, n_samples: int, rng: np.random.Generator,
                 max_bumps: int = 3) -> np.ndarray:
    """Images of 1..max_bumps anisotropic Gaussian bumps, scaled to [-1, 1].

    Background sits at -1; the brightest point of each image is +1.
    """
    grid = np.arange(side, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((n_samples, side * side))
    for s in range(n_samples):
        field = np.zeros((side, side))
        for _ in range(int(rng.integers(1, max_bumps + 1))):
            cy, cx = rng.uniform(1.0, side - 2.0, size=2)
            ang = rng.uniform(0.0, np.pi)
            s_long = rng.uniform(side / 6.0, side / 3.0)
            s_short = rng.uniform(side / 10.0, side / 5.0)
            amp = rng.uniform(0.5, 1.0)
            u = np.cos(ang) * (xx - cx) + np.sin(ang) * (yy - cy)
            v = -np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
            field += amp * np.exp(-0.5 * ((u / s_long) ** 2 + (v / s_short) ** 2))
        out[s] = (2.0 * field / field.max() - 1.0).ravel()
    return out


def generate_dataset(kind: str, n_samples: int, seed: int = 0,
                     params: dict | None = None) -> np.ndarray:
    """Draw a dataset of flattened samples; rows are individual signals."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if kind == "gmm-2d":
        return _gmm_points(params or default_gmm_params(), n_samples, rng)
    if kind == "blobs-8x8":
        return _blob_images(8, n_samples, rng)
    if kind == "blobs-16x16":
        return _blob_images(16, n_samples, rng)
    raise ValueError(f"unknown dataset kind {kind!r} (valid: {', '.join(DATASET_KINDS)})")


def signal_shape_for(kind: str) -> tuple:
    if kind == "gmm-2d":
        return (2,)
    if kind == "blobs-8x8":
        return (8, 8)
    if kind == "blobs-16x16":
        return (16, 16)
    raise ValueError(f"unknown dataset kind {kind!r} (valid: {', '.join(DATASET_KINDS)})")
