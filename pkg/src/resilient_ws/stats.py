"""Summary statistics used by the experiment reports."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import stats as _st


def mean_ci(samples: Sequence[float], level: float = 0.95) -> tuple[float, Optional[float]]:
    """Sample mean and Student-t confidence half-width.

    The half-width is ``None`` (undefined) with fewer than two samples.
    """
    if len(samples) == 0:
        raise ValueError("mean_ci needs at least one sample")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    x = np.asarray(samples, dtype=float)
    mean = float(x.mean())
    n = len(x)
    if n < 2:
        return mean, None
    sd = float(x.std(ddof=1))
    q = float(_st.t.ppf(0.5 + level / 2, n - 1))
    return mean, q * sd / math.sqrt(n)


def geo_mean(factors: Sequence[float]) -> float:
    """exp(mean(log(factors))); every factor must be positive."""
    x = np.asarray(factors, dtype=float)
    if x.size == 0:
        raise ValueError("geo_mean of an empty sequence")
    if np.any(~(x > 0)):
        raise ValueError("geo_mean requires positive factors")
    return float(np.exp(np.mean(np.log(x))))


def checkpoint_model(n_failures: int) -> float:
    """Expected slowdown of checkpoint/restart under ``n`` uniform failures.

    Each failure loses on average half of the run, so T becomes (1 + n/2) T.
    """
    if n_failures < 0:
        raise ValueError("n_failures must be >= 0")
    return 1 + n_failures / 2


def ci_overlap(a: tuple[float, Optional[float]], b: tuple[float, Optional[float]]) -> bool:
    """True when two (mean, half-width) intervals intersect; undefined widths always overlap."""
    (ma, ha), (mb, hb) = a, b
    if ha is None or hb is None:
        return True
    return abs(ma - mb) <= ha + hb
