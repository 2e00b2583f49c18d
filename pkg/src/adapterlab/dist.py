"""Probability distributions over the extended vocabulary V ∪ {EOS}.

Everything downstream (adapters, measures, the generator) works on
:class:`CondDist`, a dense, immutable vector of natural-log probabilities.
Exact zeros are stored as ``-inf`` so that truncation produces real holes
in the support rather than tiny floats.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NORM_TOL = 1e-9


class InvalidDistribution(ValueError):
    """Weights or log-probabilities that do not describe a distribution."""


class InvalidParameter(ValueError):
    """A hyperparameter outside its admissible range."""


class InvalidToken(IndexError):
    """A token id outside the vocabulary."""


@dataclass(frozen=True)
class Vocab:
    """Ordered surface strings plus the reserved EOS id."""

    tokens: tuple[str, ...]
    eos_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least two entries (incl. EOS)")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary surface strings must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def eos(self) -> str:
        return self.tokens[self.eos_id]

    @property
    def fingerprint(self) -> str:
        """Stable short hash of the token table and EOS id."""
        h = hashlib.sha256()
        h.update(json.dumps([self.eos_id, list(self.tokens)], ensure_ascii=True).encode("ascii"))
        return h.hexdigest()[:16]

    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def check_id(self, token_id: int) -> int:
        if not 0 <= int(token_id) < len(self.tokens):
            raise InvalidToken(f"token id {token_id} outside vocabulary of size {len(self)}")
        return int(token_id)


class CondDist:
    """A next-token distribution stored as natural-log probabilities.

    Instances are immutable; the underlying arrays are flagged read-only.
    Use :func:`normalize` or :meth:`from_probs` to build one from raw
    weights.
    """

    __slots__ = ("_logp", "_probs", "_support", "_memo")

    def __init__(self, logp, *, check: bool = True):
        logp = np.array(logp, dtype=np.float64)
        if logp.ndim != 1 or logp.size == 0:
            raise InvalidDistribution("log-probabilities must be a non-empty vector")
        if np.isnan(logp).any() or (logp == np.inf).any():
            raise InvalidDistribution("log-probabilities contain NaN or +inf")
        if (logp > 0).any():
            raise InvalidDistribution("log-probability above 0")
        probs = np.exp(logp)
        if check:
            total = float(np.sum(probs))
            if abs(total - 1.0) > NORM_TOL:
                raise InvalidDistribution(f"probabilities sum to {total!r}, not 1")
        logp.flags.writeable = False
        probs.flags.writeable = False
        self._logp = logp
        self._probs = probs
        self._support = int(np.count_nonzero(np.isfinite(logp)))
        self._memo = {}

    @classmethod
    def _trusted(cls, logp: np.ndarray, probs: np.ndarray) -> "CondDist":
        """Wrap arrays already known to be a valid distribution (no copies, no checks)."""
        self = cls.__new__(cls)
        logp.flags.writeable = False
        probs.flags.writeable = False
        self._logp = logp
        self._probs = probs
        self._support = int(np.count_nonzero(probs))
        self._memo = {}
        return self

    def memo(self, key: str, fn):
        """Cache a value derived from this (immutable) distribution."""
        try:
            return self._memo[key]
        except KeyError:
            val = self._memo[key] = fn(self)
            return val

    @classmethod
    def from_probs(cls, probs, *, check: bool = True) -> "CondDist":
        probs = np.asarray(probs, dtype=np.float64)
        if (probs < 0).any():
            raise InvalidDistribution("negative probability")
        with np.errstate(divide="ignore"):
            return cls(np.log(probs), check=check)

    @property
    def logp(self) -> np.ndarray:
        return self._logp

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def support_size(self) -> int:
        return self._support

    @property
    def support(self) -> np.ndarray:
        """Token ids with non-zero probability, ascending."""
        return np.flatnonzero(self._probs > 0)

    def __len__(self) -> int:
        return self._logp.size

    def __getitem__(self, token_id: int) -> float:
        return float(self._probs[token_id])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CondDist):
            return NotImplemented
        return np.array_equal(self._logp, other._logp)

    def __hash__(self):
        return hash(self._logp.tobytes())

    def __repr__(self) -> str:
        shown = np.array2string(self._probs[:8], precision=6, separator=", ")
        more = ", ..." if len(self) > 8 else ""
        return f"CondDist(n={len(self)}, support={self._support}, probs={shown[:-1]}{more}])"

    @classmethod
    def uniform(cls, n: int) -> "CondDist":
        return cls(np.full(n, -math.log(n)))

    @classmethod
    def one_hot(cls, n: int, token_id: int) -> "CondDist":
        logp = np.full(n, -np.inf)
        logp[token_id] = 0.0
        return cls(logp)


def logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(m + math.log(np.sum(np.exp(x - m))))


def normalize(weights: Sequence[float] | np.ndarray, *, log: bool = False) -> CondDist:
    """Turn non-negative weights (or log-weights with ``log=True``) into a CondDist.

    Normalization happens in log space via log-sum-exp, so very small or
    very large weights keep their relative proportions.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidDistribution("weights must be a non-empty vector")
    if np.isnan(w).any():
        raise InvalidDistribution("weights contain NaN")
    if log:
        if (w == np.inf).any():
            raise InvalidDistribution("log-weight of +inf")
        logw = w
    else:
        if (w < 0).any() or np.isinf(w).any():
            raise InvalidDistribution("weights must be finite and non-negative")
        with np.errstate(divide="ignore"):
            logw = np.log(w)
    z = logsumexp(logw)
    if not np.isfinite(z):
        raise InvalidDistribution("no strictly positive weight")
    logp = logw - z
    # a single surviving entry must be exactly log 1
    np.minimum(logp, 0.0, out=logp)
    return CondDist(logp)


def entropy(p: CondDist) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    return p.memo("entropy", _entropy)


def _entropy(p: CondDist) -> float:
    mask = p.probs > 0
    return float(-np.dot(p.probs[mask], p.logp[mask]))


def epsilon_smooth(p: CondDist, eps: float) -> CondDist:
    """Mix ``eps`` into every entry: ``(p + eps) / (1 + |V| * eps)``."""
    if not eps > 0 or not math.isfinite(eps):
        raise InvalidParameter(f"smoothing epsilon must be positive, got {eps!r}")
    n = len(p)
    q = (p.probs + eps) / (1.0 + n * eps)
    return CondDist._trusted(np.log(q), q)


def as_dist(p: CondDist | Iterable[float]) -> CondDist:
    """Accept either a CondDist or a probability vector (handy in tests and the CLI)."""
    if isinstance(p, CondDist):
        return p
    return CondDist.from_probs(list(p))
