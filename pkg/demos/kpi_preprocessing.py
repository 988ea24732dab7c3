#!/usr/bin/env python3
# Raw KPI log -> aligned, padded, outlier-pruned sequences.

import numpy as np

from ramat.pipeline import TABLE1, fit_dataset_scalers, iqr_bounds, preprocess_frames
from ramat.synthetic import bursty

raw = bursty(rows=1000, seed=17)              # 13 KPI columns with gaps, NaNs and spikes
raw.columns[:4]
print("missing cells per column", np.isnan(raw.values).sum(axis=0))

# the outlier rule on a toy column: 10th/90th quantiles, 1.5 x their spread
b = iqr_bounds(np.arange(100.0))
print("toy bounds", b.lower, b.upper)

ds, _, summary = preprocess_frames([raw], TABLE1, n_seq=8, t_step=20)
print(summary)
ds.X.shape, ds.y.shape                        # (M, 8, 13), (M, 13)
scalers = fit_dataset_scalers(ds)
print("first channel scaler", scalers.items[0])
