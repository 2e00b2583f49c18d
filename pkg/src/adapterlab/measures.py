"""Distribution-difference measures between two next-token distributions.

Orientation follows the usual precision/recall reading: with a fixed
reference ``r`` and an evaluated distribution ``q``, the *forward*
variant puts the reference first (``H(r, q)``, recall-emphasizing) and
the *reverse* variant puts it second (``H(q, r)``, precision-emphasizing).

Cross-entropy and KL return ``inf`` rather than raising when the second
argument misses part of the first one's support. TVD is the unhalved sum
of absolute differences, so it ranges over [0, 2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dist import CondDist, InvalidParameter, InvalidToken, entropy, epsilon_smooth

DEFAULT_EPSILON = 1e-6

MEASURE_KINDS = ("cross_entropy", "kl", "tvd", "js", "entropy", "coverage")
ORIENTATIONS = ("forward", "reverse", "symmetric")


def _check_eps(eps):
    if eps is not None and (not eps > 0 or not math.isfinite(eps)):
        raise InvalidParameter(f"smoothing epsilon must be positive, got {eps!r}")


def _same_size(p1: CondDist, p2: CondDist):
    if len(p1) != len(p2):
        raise ValueError(f"distributions over different vocabularies ({len(p1)} vs {len(p2)})")


def cross_entropy(p1: CondDist, p2: CondDist, eps: float | None = None) -> float:
    """``-sum p1 log p2`` in nats, smoothing ``p2`` first when ``eps`` is given."""
    _check_eps(eps)
    _same_size(p1, p2)
    if eps is not None:
        p2 = epsilon_smooth(p2, eps)
    mask = p1.probs > 0
    lp2 = p2.logp[mask]
    if np.isneginf(lp2).any():
        return math.inf
    return float(-np.dot(p1.probs[mask], lp2))


def kl(p1: CondDist, p2: CondDist, eps: float | None = None) -> float:
    """``KL(p1 || p2) = H(p1, p2) - H(p1)``."""
    ce = cross_entropy(p1, p2, eps)
    if math.isinf(ce):
        return ce
    return ce - entropy(p1)


def tvd(p1: CondDist, p2: CondDist) -> float:
    _same_size(p1, p2)
    return float(np.sum(np.abs(p1.probs - p2.probs)))


def _kl_to_mixture(p: np.ndarray, m: np.ndarray) -> float:
    mask = p > 0
    return float(np.dot(p[mask], np.log(p[mask]) - np.log(m[mask])))


def js(p1: CondDist, p2: CondDist) -> float:
    """Jensen-Shannon divergence against the pointwise mean; never needs smoothing."""
    _same_size(p1, p2)
    m = (p1.probs + p2.probs) / 2.0
    val = (_kl_to_mixture(p1.probs, m) + _kl_to_mixture(p2.probs, m)) / 2.0
    return max(val, 0.0)


def coverage(p_adapted: CondDist, observed: int) -> int:
    """1 if the observed token kept non-zero probability, else 0."""
    if not 0 <= int(observed) < len(p_adapted):
        raise InvalidToken(f"observed token {observed} outside vocabulary of size {len(p_adapted)}")
    return int(p_adapted.probs[int(observed)] > 0)


@dataclass(frozen=True)
class MeasureSpec:
    kind: str
    orientation: str = "symmetric"
    smoothing: float | None = None

    def __post_init__(self):
        if self.kind not in MEASURE_KINDS:
            raise InvalidParameter(f"unknown measure {self.kind!r}")
        if self.orientation not in ORIENTATIONS:
            raise InvalidParameter(f"unknown orientation {self.orientation!r}")
        asym = self.kind in ("cross_entropy", "kl")
        if asym and self.orientation == "symmetric":
            raise InvalidParameter(f"{self.kind} needs forward or reverse orientation")
        if not asym and self.orientation != "symmetric":
            raise InvalidParameter(f"{self.kind} is symmetric-only")
        _check_eps(self.smoothing)

    @property
    def label(self) -> str:
        return self.kind if self.orientation == "symmetric" else f"{self.orientation}_{self.kind}"

    def evaluate(self, adapted: CondDist, reference: CondDist | None, observed: int | None = None) -> float:
        """Evaluate on one step. ``reference`` may be ``None`` for entropy/coverage."""
        if self.kind == "entropy":
            return entropy(adapted)
        if self.kind == "coverage":
            return float(coverage(adapted, observed))
        if self.kind == "tvd":
            return tvd(adapted, reference)
        if self.kind == "js":
            return js(adapted, reference)
        fn = cross_entropy if self.kind == "cross_entropy" else kl
        if self.orientation == "forward":
            return fn(reference, adapted, self.smoothing)
        return fn(adapted, reference, self.smoothing)


def default_measures() -> list[str]:
    """Labels of the measures a sweep reports unless told otherwise."""
    return [
        "forward_cross_entropy",
        "reverse_cross_entropy",
        "forward_kl",
        "reverse_kl",
        "tvd",
        "js",
        "entropy",
        "coverage",
    ]


def parse_measure_label(label: str) -> tuple[str, str]:
    """``reverse_kl`` -> (``kl``, ``reverse``); ``tvd`` -> (``tvd``, ``symmetric``)."""
    for orient in ("forward", "reverse"):
        prefix = orient + "_"
        if label.startswith(prefix):
            kind = label[len(prefix):]
            if kind in ("cross_entropy", "kl"):
                return kind, orient
    if label in ("tvd", "js", "entropy", "coverage"):
        return label, "symmetric"
    raise InvalidParameter(f"unknown measure label {label!r}")
