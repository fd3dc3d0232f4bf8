"""Small statistics helpers shared by the harness, theory fits and streaming study."""
from __future__ import annotations

import math
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import stats as sstats


def z_for(confidence: float = 0.95) -> float:
    return float(sstats.norm.ppf(0.5 + confidence / 2.0))


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion. (0, 1) when trials == 0."""
    if trials <= 0:
        return 0.0, 1.0
    if successes < 0 or successes > trials:
        raise ValueError(f'successes {successes} outside [0, {trials}]')
    z = z_for(confidence)
    phat = successes / trials
    denom = 1 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def wilson_half_width(successes: int, trials: int, confidence: float = 0.95) -> float:
    lo, hi = wilson_interval(successes, trials, confidence)
    return (hi - lo) / 2.0


def per_cycle(ler_total: float, rounds: int) -> float:
    """1 - (1 - L)^(1/T)."""
    if rounds < 1:
        raise ValueError('rounds must be >= 1')
    ler_total = min(max(ler_total, 0.0), 1.0)
    return 1.0 - (1.0 - ler_total) ** (1.0 / rounds)


def percentiles(samples_ns: Sequence[int], qs: Sequence[float] = (50, 90, 99, 99.9)) -> Dict[str, float]:
    if len(samples_ns) == 0:
        return {f'p{q:g}': float('nan') for q in qs}
    arr = np.asarray(samples_ns, dtype=np.float64)
    return {f'p{q:g}': float(np.percentile(arr, q)) for q in qs}


def weighted_r2(observed: Sequence[float], predicted: Sequence[float], weights: Sequence[float]) -> float:
    y = np.asarray(observed, dtype=float); f = np.asarray(predicted, dtype=float); w = np.asarray(weights, dtype=float)
    if w.sum() <= 0:
        raise ValueError('weights must have positive sum')
    ybar = float(np.average(y, weights=w))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * (y - f) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)


def coefficient_of_variation(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=float)
    m = float(arr.mean()) if len(arr) else 0.0
    return float(arr.std(ddof=1) / m) if len(arr) > 1 and m != 0 else 0.0


__all__ = ['z_for', 'wilson_interval', 'wilson_half_width', 'per_cycle', 'percentiles', 'weighted_r2',
           'coefficient_of_variation']
