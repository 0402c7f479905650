"""Regenerates stats_oracle.json from scipy, scikit-learn and mpmath.

Run from this directory: python3 gen_stats_oracle.py
"""

import json

import mpmath
import numpy as np
from scipy import stats
from sklearn.metrics import mean_absolute_error, r2_score

rng = np.random.default_rng(20240611)
mpmath.mp.dps = 60


def rounded(xs):
    return [round(float(x), 3) for x in xs]


report_cases = []
for i in range(30):
    n = int(rng.integers(3, 250))
    y_true = rounded(rng.uniform(20, 1500, n))
    noise = rng.normal(0, rng.uniform(5, 300), n)
    y_pred = rounded(np.array(y_true) + noise)
    err = np.abs(np.array(y_pred) - np.array(y_true))
    report_cases.append(
        {
            "y_true": y_true,
            "y_pred": y_pred,
            "mae": float(mean_absolute_error(y_true, y_pred)),
            "abs_err_std": float(np.std(err, ddof=1)),
            "r2": float(r2_score(y_true, y_pred)),
        }
    )

ttest_cases = []
for i in range(30):
    n = 100 if i < 10 else int(rng.integers(2, 700))
    a = rounded(np.abs(rng.normal(80, 60, n)))
    shift = rng.normal(0, 8)
    b = rounded(np.abs(np.array(a) - shift + rng.normal(0, 40, n)))
    res = stats.ttest_rel(a, b, alternative="greater")
    ttest_cases.append(
        {"errors_a": a, "errors_b": b, "t": float(res.statistic), "p": float(res.pvalue), "df": n - 1}
    )


def upper_tail(t, df):
    t = mpmath.mpf(t)
    nu = mpmath.mpf(df)
    x = nu / (nu + t * t)
    half = mpmath.betainc(nu / 2, mpmath.mpf(1) / 2, 0, x, regularized=True) / 2
    return half if t >= 0 else 1 - half


tail_cases = []
for df in [1, 2, 3, 5, 10, 30, 100, 652, 1000, 10_000, 100_000, 1_000_000]:
    for t in [-50.0, -5.0, -1.0, 0.0, 0.1, 0.6339, 1.0, 2.5, 10.0, 50.0]:
        tail_cases.append({"t": t, "df": df, "p": float(upper_tail(t, df))})

with open("stats_oracle.json", "w") as f:
    json.dump(
        {"report_cases": report_cases, "ttest_cases": ttest_cases, "tail_cases": tail_cases},
        f,
        indent=1,
    )
    f.write("\n")
