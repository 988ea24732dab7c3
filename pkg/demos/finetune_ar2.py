#!/usr/bin/env python3
# Next-step forecasting on an AR(2) process, compared with two naive baselines.

import numpy as np

from ramat.model import ModelConfig, init_params
from ramat.pipeline import KpiFrame, build_sequences, fit_scalers
from ramat.reservoir import ReservoirConfig, build_reservoir
from ramat.synthetic import ar2
from ramat.train import FreezePlan, TrainConfig, channel_mse, finetune, predict, pretrain

n_seq, n_train = 8, 8_000
series = ar2(n=10_000, seed=0)
cfg = ModelConfig(window_length=n_seq, patch_length=4, num_channels=3)
spec = build_reservoir(ReservoirConfig(), cfg.patch_dim, seed=1)
rng = np.random.default_rng(0)

pre = pretrain([series[:n_train]], init_params(cfg, spec.reservoir_size, rng), spec, cfg,
               TrainConfig(max_steps=400, batch_size=16, lr_peak=3e-3), rng)

# 20 ms rows, no gaps, so every window of n_seq rows is a sample
ds = build_sequences(KpiFrame(np.arange(len(series)) * 20, ["a", "b", "c"], series), n_seq, 20)
scalers = fit_scalers(series[:n_train], ds.channels)
X, y = scalers.apply(ds.X), scalers.apply(ds.y)
train, test = ds.target_index < n_train, ds.target_index >= n_train

ft = finetune(pre.params, spec, cfg, TrainConfig(finetune_lr=3e-3, finetune_epochs=10),
              X[train], y[train], FreezePlan("head_only"), np.random.default_rng(1))
print("stopped after epoch", ft.stopped_epoch, "best", ft.best_epoch, "early", ft.early_stopped)

print("model      ", channel_mse(predict(ft.params, spec, cfg, X[test]), y[test]).round(3))
print("persistence", channel_mse(X[test][:, -1], y[test]).round(3))
print("mean       ", channel_mse(np.zeros_like(y[test]), y[test]).round(3))
