"""Statistical primitives: Student-t quantiles, the one-sided Grubbs test, and
the per-sample entropy / cosine-similarity statistics used by the baselines.

Everything here is a pure function of its arguments. The t distribution is
evaluated through the regularized incomplete beta function, so no
special-function library is needed at runtime.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from trainprove.errors import (
    DomainError,
    InsufficientBatches,
    InvalidLogits,
    ZeroVariance,
    ZeroVector,
)

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 20000


class Direction(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class SignificanceConfig:
    alpha: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha!r}")


@dataclass(frozen=True)
class GrubbsResult:
    g: float
    g0: float
    n: int
    is_outlier: bool
    direction: Direction
    alpha: float = 0.05

    def to_dict(self) -> dict:
        return {
            "g": self.g,
            "g0": self.g0,
            "n": self.n,
            "is_outlier": self.is_outlier,
            "direction": self.direction.value,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GrubbsResult":
        return cls(
            g=float(d["g"]),
            g0=float(d["g0"]),
            n=int(d["n"]),
            is_outlier=bool(d["is_outlier"]),
            direction=Direction(d["direction"]),
            alpha=float(d.get("alpha", 0.05)),
        )


# ---------------------------------------------------------------------------
# Student t distribution
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise DomainError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise DomainError("incomplete beta needs a > 0 and b > 0")
    if x < 0.0 or x > 1.0:
        raise DomainError(f"x must lie in [0, 1], got {x!r}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _check_df(df: float) -> None:
    if not (df > 0) or not math.isfinite(df):
        raise DomainError(f"degrees of freedom must be positive and finite, got {df!r}")


def t_cdf(x: float, df: float) -> float:
    _check_df(df)
    if math.isnan(x):
        raise DomainError("t_cdf of NaN")
    if x == 0.0:
        return 0.5
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    # Tail mass P(|T| > |x|) = I_{df/(df+x^2)}(df/2, 1/2).
    z = df / (df + x * x)
    tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, z)
    return 1.0 - tail if x > 0 else tail


def t_pdf(x: float, df: float) -> float:
    _check_df(df)
    log_norm = (
        math.lgamma(0.5 * (df + 1.0)) - math.lgamma(0.5 * df)
        - 0.5 * math.log(df * math.pi)
    )
    return math.exp(log_norm - 0.5 * (df + 1.0) * math.log1p(x * x / df))


def t_quantile(p: float, df: float) -> float:
    """Inverse CDF of Student's t with ``df`` degrees of freedom.

    Safeguarded Newton iteration inside an expanding bracket; the result
    satisfies ``|t_cdf(x, df) - p| <= 1e-10``.
    """
    _check_df(df)
    if not (0.0 < p < 1.0):
        raise DomainError(f"p must lie in (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -_upper_quantile(1.0 - p, df)
    return _upper_quantile(p, df)


def _upper_quantile(p: float, df: float) -> float:
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            raise DomainError(f"quantile bracket overflow for p={p}, df={df}")
    x = 0.5 * (lo + hi)
    for _ in range(200):
        resid = t_cdf(x, df) - p
        if resid > 0:
            hi = x
        else:
            lo = x
        dens = t_pdf(x, df)
        step = resid / dens if dens > 0 else math.inf
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= 1e-15 * max(1.0, abs(x)):
            x = x_new
            break
        x = x_new
    if abs(t_cdf(x, df) - p) > 1e-10:
        raise DomainError(f"t quantile failed to converge for p={p}, df={df}")
    return x


# ---------------------------------------------------------------------------
# Grubbs test
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _grubbs_critical(n: int, alpha: float) -> float:
    t = t_quantile(1.0 - alpha / n, n - 2)
    t2 = t * t
    return (n - 1) / math.sqrt(n) * math.sqrt(t2 / (n - 2 + t2))


def grubbs_critical(n: int, config: SignificanceConfig | None = None) -> float:
    """One-sided Grubbs critical value G0 for a reference set of size ``n``."""
    config = config or SignificanceConfig()
    if n < 3:
        raise InsufficientBatches(f"Grubbs test needs n >= 3 reference values, got {n}")
    return _grubbs_critical(int(n), float(config.alpha))


def grubbs_one_sided(
    reference: Sequence[float],
    candidate_mean: float,
    direction: Direction = Direction.LOW,
    config: SignificanceConfig | None = None,
) -> GrubbsResult:
    """Test whether ``candidate_mean`` is a one-sided outlier of ``reference``.

    LOW asks whether the candidate is unusually small, HIGH whether it is
    unusually large. The sample standard deviation uses the n-1 denominator.
    """
    config = config or SignificanceConfig()
    direction = Direction(direction)
    ref = np.asarray(reference, dtype=np.float64)
    n = ref.size
    if n < 3:
        raise InsufficientBatches(f"Grubbs test needs n >= 3 reference values, got {n}")
    if not (np.all(np.isfinite(ref)) and math.isfinite(candidate_mean)):
        raise DomainError("Grubbs test inputs must be finite")
    mean = float(ref.mean())
    std = float(ref.std(ddof=1))
    if not std > 0:
        raise ZeroVariance(
            "reference set has zero sample standard deviation",
            reference_mean=mean,
            candidate_mean=float(candidate_mean),
        )
    if direction is Direction.LOW:
        g = (mean - candidate_mean) / std
    else:
        g = (candidate_mean - mean) / std
    g0 = grubbs_critical(n, config)
    return GrubbsResult(
        g=float(g), g0=g0, n=n, is_outlier=bool(g > g0),
        direction=direction, alpha=config.alpha,
    )


# ---------------------------------------------------------------------------
# Logit statistics
# ---------------------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_entropies(logits) -> np.ndarray:
    """Row-wise Shannon entropy (nats) of softmax(logits) for an N x K array."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise InvalidLogits(f"expected an N x K logit matrix with K >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidLogits("logits contain non-finite values")
    logp = _log_softmax(z)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    return np.clip(ent, 0.0, math.log(z.shape[1]))


def shannon_entropy(logits) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidLogits(f"expected a logit vector, got shape {z.shape}")
    return float(softmax_entropies(z[None, :])[0])


def cosine_similarity(u, v) -> float:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"vectors must share one dimension, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(a / na, b / nb))


def mean_pairwise_cosine(vectors) -> float | None:
    """Mean cosine similarity over all unordered pairs of rows; None if < 2 rows."""
    x = np.asarray(vectors, dtype=np.float64)
    m = x.shape[0]
    if m < 2:
        return None
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    unit = x / norms[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(m, k=1)
    return float(gram[iu].mean())


def class_mean_cosine(vectors, labels) -> float | None:
    """Average over classes of the mean pairwise cosine within that class.

    Classes with fewer than two rows are ignored; None if no class qualifies.
    """
    x = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels)
    classes, inv, counts = np.unique(y, return_inverse=True, return_counts=True)
    if counts.max(initial=0) < 2:
        return None
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    unit = x / norms[:, None]
    onehot = np.zeros((x.shape[0], classes.size))
    onehot[np.arange(x.shape[0]), inv] = 1.0
    summed = onehot.T @ unit  # per-class sum of unit vectors
    self_dot = np.bincount(inv, weights=np.einsum("ij,ij->i", unit, unit), minlength=classes.size)
    pair_sums = (np.einsum("ij,ij->i", summed, summed) - self_dot) / 2.0
    ok = counts >= 2
    means = pair_sums[ok] / (counts[ok] * (counts[ok] - 1) / 2.0)
    return float(means.mean())
