#!/usr/bin/env python3
# Masked reconstruction on a sum of sinusoids. Short run, loss should fall fast.

import numpy as np

from ramat.model import ModelConfig, init_params, patchify, sample_mask
from ramat.reservoir import ReservoirConfig, build_reservoir
from ramat.synthetic import sinusoid
from ramat.train import TrainConfig, pretrain

cfg = ModelConfig(window_length=64, patch_length=8, num_channels=3)
series = sinusoid(n=20_000, seed=0)           # (20000, 3) float32

# what one masked window looks like
rng = np.random.default_rng(0)
patches = patchify(series[None, :64], cfg.patch_length)
patches.shape                                 # (1, 8, 24): 8 patches of 8 steps x 3 channels
print("mask for one window", sample_mask(patches.shape[1], cfg.mask_ratio, rng).astype(int))

spec = build_reservoir(ReservoirConfig(), cfg.patch_dim, seed=1)
params = init_params(cfg, spec.reservoir_size, rng)
res = pretrain([series], params, spec, cfg,
               TrainConfig(max_steps=300, batch_size=16, warmup_steps=30, lr_peak=3e-3), rng)

loss = np.array([r["metric"] for r in res.trace])
print("first 30 steps", loss[:30].mean().round(4))
print("last 30 steps ", loss[-30:].mean().round(4))
print("lr at step 1, 30, 300", [res.trace[i]["lr"] for i in (0, 29, 299)])
