"""Regenerate ``earnings.csv``: a fixed synthetic weighted earnings sample.

Run from this directory with ``python make_earnings.py``.  The file is
committed so tests never depend on this script's output changing.
"""
from pathlib import Path

import numpy as np

from augswee.population import SurveySample, write_sample_csv

N_ROWS = 956


def make(seed: int = 20240607) -> SurveySample:
    rng = np.random.default_rng(seed)
    # lognormal body with a Pareto upper tail, in thousands of dollars
    body = np.exp(rng.normal(3.6, 0.7, N_ROWS))
    tail = rng.random(N_ROWS) < 0.08
    body[tail] *= 1.0 + rng.pareto(2.5, tail.sum())
    z = np.round(body, 2)
    # unequal weights loosely tied to income, as in oversampled surveys
    w = np.round(rng.uniform(600, 1800, N_ROWS) / (1.0 + 0.3 * tail), 1)
    stratum = rng.integers(1, 6, N_ROWS)
    return SurveySample(z=z, pi=1.0 / w, N=float(w.sum()), stratum=stratum)


if __name__ == "__main__":
    write_sample_csv(make(), Path(__file__).with_name("earnings.csv"), as_weights=True)
