"""Seeded synthetic signals used by the benchmarks and demos.

* ``sinusoid``: each channel is a sum of sinusoids with fixed random
  frequencies and phases, plus a little white noise.
* ``ar2``: independent second-order autoregressive channels.
* ``bursty``: a 13-KPI stream on a 20 ms grid shaped like the testbed
  telemetry, with dropped rows, missing cells, heavy-tailed delay spikes and
  injected outliers. Meant to exercise preprocessing.
"""

from __future__ import annotations

import numpy as np

from .pipeline import TABLE1, KpiFrame, KpiSchema

KINDS = ("sinusoid", "ar2", "bursty")

# (phi1, phi2) per channel; all stationary, with persistence clearly suboptimal.
AR2_COEFFS = ((0.6, -0.3), (1.1, -0.5), (0.2, 0.5))


def sinusoid(n: int = 50_000, channels: int = 3, components: int = 3, noise: float = 0.01,
             seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    out = np.zeros((n, channels))
    for c in range(channels):
        periods = rng.uniform(8.0, 96.0, size=components)
        phases = rng.uniform(0, 2 * np.pi, size=components)
        amps = rng.uniform(0.5, 1.5, size=components)
        for p, ph, a in zip(periods, phases, amps):
            out[:, c] += a * np.sin(2 * np.pi * t / p + ph)
    out += noise * rng.standard_normal(out.shape)
    return out.astype(np.float32)


def ar2(n: int = 20_000, coeffs=AR2_COEFFS, burn_in: int = 500, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    K = len(coeffs)
    x = np.zeros((n + burn_in, K))
    eps = rng.standard_normal((n + burn_in, K))
    phi1 = np.array([c[0] for c in coeffs])
    phi2 = np.array([c[1] for c in coeffs])
    for t in range(2, n + burn_in):
        x[t] = phi1 * x[t - 1] + phi2 * x[t - 2] + eps[t]
    return x[burn_in:].astype(np.float32)


def bursty(rows: int = 1000, seed: int = 0, schema: KpiSchema = TABLE1,
           drop_rate: float = 0.02, missing_rate: float = 0.01,
           delay_missing_rate: float = 0.03, outlier_rate: float = 0.005,
           step_ms: int = 20) -> KpiFrame:
    """Raw KPI frame; timestamps jitter by a few ms inside each 20 ms slot."""
    rng = np.random.default_rng(seed)
    K = len(schema)
    lo = np.array([c.low for c in schema.channels])
    hi = np.array([c.high for c in schema.channels])
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    # smooth AR(1) drift around the middle of each observed range
    z = np.zeros((rows, K))
    e = rng.standard_normal((rows, K))
    for t in range(1, rows):
        z[t] = 0.95 * z[t - 1] + 0.3 * e[t]
    values = mid + 0.35 * half * np.tanh(z)
    for j, c in enumerate(schema.channels):
        if c.kind == "discrete-index":
            values[:, j] = np.round(values[:, j])
    names = schema.names
    if "Packet Delay" in names:
        j = names.index("Packet Delay")
        base = rng.exponential(40.0, size=rows)
        spikes = rng.random(rows) < 0.01
        base[spikes] += rng.uniform(500, 3000, size=spikes.sum())
        values[:, j] = base
    out_cells = rng.random((rows, K)) < outlier_rate
    values[out_cells] = (mid + 50 * (half + 1) * rng.choice([-1, 1], size=(rows, K)))[out_cells]
    miss = rng.random((rows, K)) < missing_rate
    if "Packet Delay" in names:
        j = names.index("Packet Delay")
        miss[:, j] |= rng.random(rows) < delay_missing_rate
    values[miss] = np.nan
    keep = rng.random(rows) >= drop_rate
    keep[0] = True
    ts = np.arange(rows, dtype=np.int64) * step_ms + rng.integers(0, 5, size=rows)
    ts[0] = 0
    return KpiFrame(ts[keep], names, values[keep])


def generate(kind: str, seed: int = 0, **kw):
    if kind == "sinusoid":
        return sinusoid(seed=seed, **kw)
    if kind == "ar2":
        return ar2(seed=seed, **kw)
    if kind == "bursty":
        return bursty(seed=seed, **kw)
    raise ValueError(f"unknown synthetic kind {kind!r}; choose from {KINDS}")
