"""
Benchmark table across missing rates
====================================

Baselines only, so this runs in seconds. The command line tool
(`ctaimpute benchmark`) adds trained chains to the same table.
"""

import numpy as np

from ctaimpute.data import make_synthetic, prepare_dataset
from ctaimpute.evaluation import mean_imputer, run_benchmark, spline_imputer

ds = prepare_dataset(make_synthetic(seed=0), None, seed=0)
report = run_benchmark(ds, {"spline": spline_imputer, "mean": mean_imputer(np.zeros(4))},
                       [0.3, 0.5, 0.7], trials=5, seed=0)
print(report.to_text())
