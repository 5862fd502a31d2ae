"""Regenerate adf_reference.json with statsmodels' adfuller (constant, no trend)."""
import json

import numpy as np
from statsmodels.tsa.stattools import adfuller

rng = np.random.default_rng(20240611)
cases = []
for i in range(50):
    n = int(rng.integers(40, 220))
    kind = i % 3
    e = rng.standard_normal(n)
    if kind == 0:
        x = e
    elif kind == 1:
        x = np.cumsum(e)
    else:
        x = np.zeros(n)
        for t in range(1, n):
            x[t] = 0.8 * x[t - 1] + e[t]
    x = x * float(rng.uniform(0.5, 3.0)) + float(rng.uniform(-2, 2))
    lag = int(rng.integers(0, 6))
    fixed = adfuller(x, maxlag=lag, regression="c", autolag=None)
    maxlag = int(round((n - 1) ** (1.0 / 3.0)))
    while maxlag ** 3 > n - 1:
        maxlag -= 1
    auto = adfuller(x, maxlag=maxlag, regression="c", autolag="AIC")
    cases.append(
        {
            "series": [float(v) for v in x],
            "lag": lag,
            "statistic": float(fixed[0]),
            "p_value": float(fixed[1]),
            "max_lag": maxlag,
            "auto_statistic": float(auto[0]),
            "auto_p_value": float(auto[1]),
            "auto_lag": int(auto[2]),
        }
    )

with open("adf_reference.json", "w") as fh:
    json.dump(cases, fh)
