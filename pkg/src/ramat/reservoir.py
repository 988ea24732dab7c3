"""Fixed echo-state reservoir used to embed patches.

The reservoir is never trained: its matrices are plain read-only arrays and
no tape ever sees them, so no gradient can reach them.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .numerics import DimensionError

log = logging.getLogger(__name__)

POWER_ITERATIONS = 200
POWER_TOL = 1e-6


class ReservoirError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class ReservoirConfig:
    reservoir_size: int = 256
    spectral_radius: float = 0.9
    leak_rate: float = 0.5
    input_scale: float = 0.1
    sparsity: float = 0.9

    def __post_init__(self):
        if self.reservoir_size < 1:
            raise ValueError("reservoir_size must be >= 1")
        if self.spectral_radius <= 0:
            raise ValueError("spectral_radius must be > 0")
        if not 0 < self.leak_rate <= 1:
            raise ValueError("leak_rate must lie in (0, 1]")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must lie in [0, 1)")


@dataclasses.dataclass(frozen=True, eq=False)
class ReservoirSpec:
    """Frozen reservoir weights. ``w_in`` is [size, input_dim], ``w_res`` [size, size]."""

    input_dim: int
    reservoir_size: int
    w_in: np.ndarray
    w_res: np.ndarray
    spectral_radius: float
    leak_rate: float
    input_scale: float
    seed: int

    def __post_init__(self):
        for arr in (self.w_in, self.w_res):
            arr.setflags(write=False)
        if self.w_in.shape != (self.reservoir_size, self.input_dim):
            raise DimensionError(f"w_in shape {self.w_in.shape}")
        if self.w_res.shape != (self.reservoir_size, self.reservoir_size):
            raise DimensionError(f"w_res shape {self.w_res.shape}")

    def tobytes(self) -> bytes:
        return self.w_in.tobytes() + self.w_res.tobytes()


def power_iteration(w: np.ndarray, iterations: int = POWER_ITERATIONS,
                    tol: float = POWER_TOL) -> float:
    """Estimate the dominant eigenvalue magnitude of ``w`` in 64-bit.

    Raises ReservoirError when the growth-ratio estimate is still moving by
    more than ``tol`` (relative) after ``iterations`` steps.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    x = np.full(n, 1.0 / np.sqrt(n))
    prev = est = 0.0
    for _ in range(iterations):
        y = w @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        prev, est = est, norm
        x = y / norm
    if abs(est - prev) > tol * est:
        raise ReservoirError(
            f"power iteration did not converge after {iterations} iterations "
            f"(relative change {abs(est - prev) / est:.2e}); try a different seed")
    return float(est)


def build_reservoir(config: ReservoirConfig, input_dim: int, seed: int) -> ReservoirSpec:
    """Draw ``w_in`` and a rescaled sparse ``w_res`` from ``seed``.

    Recurrent entries are nonnegative sparse-uniform, which gives the matrix a
    real dominant (Perron) eigenvalue that power iteration resolves quickly.
    """
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    rng = np.random.Generator(np.random.PCG64(seed))
    n = config.reservoir_size
    w_in = rng.uniform(-config.input_scale, config.input_scale, size=(n, input_dim))
    w = rng.uniform(0.0, 1.0, size=(n, n))
    keep = rng.random((n, n)) >= config.sparsity
    if not keep.any():
        keep[rng.integers(n), rng.integers(n)] = True
    w = w * keep
    rho = power_iteration(w)
    if rho == 0.0:
        raise ReservoirError("recurrent matrix is nilpotent; try a different seed or lower sparsity")
    w_res = w * (config.spectral_radius / rho)
    return ReservoirSpec(
        input_dim=input_dim,
        reservoir_size=n,
        w_in=w_in.astype(np.float32),
        w_res=w_res.astype(np.float32),
        spectral_radius=config.spectral_radius,
        leak_rate=config.leak_rate,
        input_scale=config.input_scale,
        seed=seed,
    )


def step(spec: ReservoirSpec, state: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One leaky update ``h' = (1-a) h + a tanh(W_in u + W h)``.

    Works on a single state ``[size]`` or a batch ``[B, size]``.
    """
    u = np.asarray(u)
    if u.shape[-1] != spec.input_dim:
        raise DimensionError(f"input length {u.shape[-1]} != input_dim {spec.input_dim}")
    if state.shape[-1] != spec.reservoir_size:
        raise DimensionError(f"state length {state.shape[-1]} != {spec.reservoir_size}")
    dtype = np.result_type(state.dtype, u.dtype, np.float32)
    a = dtype.type(spec.leak_rate)
    w_in = spec.w_in.astype(dtype, copy=False)
    w_res = spec.w_res.astype(dtype, copy=False)
    drive = u @ w_in.T + state @ w_res.T
    return (1 - a) * state + a * np.tanh(drive)


def run_patches(spec: ReservoirSpec, patches: np.ndarray,
                initial: np.ndarray | None = None) -> np.ndarray:
    """Feed patches ``[..., P, input_dim]`` in order; returns states ``[..., P, size]``.

    State i is taken after consuming patch i. The initial state defaults to zeros.
    """
    patches = np.asarray(patches)
    if patches.shape[-1] != spec.input_dim:
        raise DimensionError(f"patch length {patches.shape[-1]} != input_dim {spec.input_dim}")
    lead, P = patches.shape[:-2], patches.shape[-2]
    dtype = np.result_type(patches.dtype, np.float32)
    out = np.empty(lead + (P, spec.reservoir_size), dtype=dtype)
    h = (np.zeros(lead + (spec.reservoir_size,), dtype=dtype) if initial is None
         else np.broadcast_to(np.asarray(initial, dtype=dtype),
                              lead + (spec.reservoir_size,)).copy())
    for i in range(P):
        h = step(spec, h, patches[..., i, :])
        out[..., i, :] = h
    return out
