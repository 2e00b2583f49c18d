"""Sampling adapters: maps from one next-token distribution to another.

Six kinds are supported: the identity (``ancestral``), temperature scaling,
and four truncation rules (``top_k``, ``top_pi``, ``typical``, ``eta``).
A truncation adapter keeps a criterion set of tokens, zeroes the rest and
renormalizes what is left.

All rankings break ties by ascending token id, so every criterion set is
a deterministic function of the input distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dist import CondDist, InvalidParameter, entropy

KINDS = ("ancestral", "temperature", "top_k", "top_pi", "typical", "eta")
TRUNCATION_KINDS = ("top_k", "top_pi", "typical", "eta")

# textual prefix <-> kind
_PREFIX = {
    "ancestral": "ancestral",
    "temp": "temperature",
    "topk": "top_k",
    "toppi": "top_pi",
    "typical": "typical",
    "eta": "eta",
}
_KIND_PREFIX = {v: k for k, v in _PREFIX.items()}

# slack for "mass >= threshold" comparisons, absorbs cumulative-sum rounding
MASS_SLACK = 1e-12


@dataclass(frozen=True)
class AdapterSpec:
    """An adapter kind and its hyperparameter.

    ``param`` is T for temperature, k for top-k, the mass threshold for
    top-pi and typical, epsilon for eta, and ``None`` for ancestral.
    """

    kind: str
    param: float | int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown adapter kind {self.kind!r}")
        p = self.param
        if self.kind == "ancestral":
            if p is not None:
                raise InvalidParameter("ancestral takes no hyperparameter")
            return
        if p is None or isinstance(p, bool):
            raise InvalidParameter(f"{self.kind} requires a hyperparameter")
        if self.kind == "top_k":
            if int(p) != p or p < 1:
                raise InvalidParameter(f"top_k needs an integer k >= 1, got {p!r}")
            object.__setattr__(self, "param", int(p))
            return
        p = float(p)
        object.__setattr__(self, "param", p)
        if not math.isfinite(p):
            raise InvalidParameter(f"{self.kind} hyperparameter must be finite")
        if self.kind in ("temperature", "eta") and not p > 0:
            raise InvalidParameter(f"{self.kind} hyperparameter must be > 0, got {p!r}")
        if self.kind in ("top_pi", "typical") and not 0 < p <= 1:
            raise InvalidParameter(f"{self.kind} mass must lie in (0, 1], got {p!r}")

    @classmethod
    def parse(cls, text: str) -> "AdapterSpec":
        """Parse ``ancestral``, ``temp:T``, ``topk:k``, ``toppi:pi``, ``typical:tau`` or ``eta:eps``."""
        text = text.strip()
        head, sep, tail = text.partition(":")
        kind = _PREFIX.get(head)
        if kind is None:
            raise InvalidParameter(f"cannot parse adapter {text!r}")
        if kind == "ancestral":
            if sep:
                raise InvalidParameter("ancestral takes no hyperparameter")
            return cls("ancestral")
        if not tail:
            raise InvalidParameter(f"adapter {text!r} is missing its hyperparameter")
        try:
            value = int(tail) if kind == "top_k" else float(tail)
        except ValueError as exc:
            raise InvalidParameter(f"bad hyperparameter in {text!r}") from exc
        return cls(kind, value)

    def __str__(self) -> str:
        if self.kind == "ancestral":
            return "ancestral"
        return f"{_KIND_PREFIX[self.kind]}:{self.param!r}"

    @property
    def is_truncation(self) -> bool:
        return self.kind in TRUNCATION_KINDS

    def strength_key(self) -> float:
        """Larger means the adapted distribution moves further from the input.

        Only comparable between specs of the same kind.
        """
        if self.kind == "ancestral":
            return 0.0
        if self.kind == "temperature":
            return abs(self.param - 1.0)
        if self.kind == "eta":
            return float(self.param)
        return -float(self.param)


def parse_chain(text: str) -> list[AdapterSpec]:
    """``temp:0.9+toppi:0.95`` style chains; a bare spec is a chain of one."""
    return [AdapterSpec.parse(part) for part in text.split("+") if part.strip()]


def format_chain(chain: Sequence[AdapterSpec]) -> str:
    return "+".join(str(s) for s in chain)


@dataclass(frozen=True)
class CriterionSet:
    """Kept token ids (ascending) and the probability mass they carry."""

    ids: np.ndarray
    kept_mass: float

    @property
    def kept(self) -> frozenset[int]:
        return frozenset(int(i) for i in self.ids)

    def __contains__(self, token_id) -> bool:
        i = int(token_id)
        j = int(np.searchsorted(self.ids, i))
        return j < self.ids.size and int(self.ids[j]) == i

    def __len__(self) -> int:
        return int(self.ids.size)


def _by_probability(p: CondDist) -> np.ndarray:
    return _ranked_support(-p.logp, p)


def _ranked_support(key: np.ndarray, p: CondDist) -> np.ndarray:
    """Support token ids sorted by ascending ``key``, ties by ascending id."""
    support = p.support
    order = np.argsort(key[support], kind="stable")
    return support[order]


def _greedy_prefix(ranked: np.ndarray, p: CondDist, mass: float) -> np.ndarray:
    if mass >= 1.0:
        return ranked
    cum = np.cumsum(p.probs[ranked])
    idx = int(np.searchsorted(cum, mass - MASS_SLACK, side="left"))
    return ranked[: min(idx + 1, ranked.size)]


def _make_set(ids: np.ndarray, p: CondDist) -> CriterionSet:
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    ids.flags.writeable = False
    return CriterionSet(ids, float(np.sum(p.probs[ids])))


def criterion_top_k(k: int, p: CondDist) -> CriterionSet:
    """The k most probable tokens.

    When fewer than k tokens have non-zero probability the whole support
    is returned, since zero-probability tokens can never be kept.
    """
    if int(k) != k or not 1 <= k <= len(p):
        raise InvalidParameter(f"k must lie in [1, {len(p)}], got {k!r}")
    ranked = p.memo("by_probability", _by_probability)
    return _make_set(ranked[: int(k)], p)


def criterion_top_pi(pi: float, p: CondDist) -> CriterionSet:
    """Smallest most-probable-first set reaching mass ``pi``."""
    if not 0 < pi <= 1:
        raise InvalidParameter(f"pi must lie in (0, 1], got {pi!r}")
    ranked = p.memo("by_probability", _by_probability)
    return _make_set(_greedy_prefix(ranked, p, pi), p)


def typicality_scores(p: CondDist) -> np.ndarray:
    """``|H(p) + log p(y)|``; ``inf`` outside the support."""
    return np.abs(entropy(p) + p.logp)


def criterion_typical(tau: float, p: CondDist) -> CriterionSet:
    """Locally typical set: rank by distance of surprisal to entropy, take mass ``tau``."""
    if not 0 < tau <= 1:
        raise InvalidParameter(f"tau must lie in (0, 1], got {tau!r}")
    ranked = p.memo("by_typicality", lambda d: _ranked_support(typicality_scores(d), d))
    return _make_set(_greedy_prefix(ranked, p, tau), p)


def eta_threshold(eps: float, p: CondDist) -> float:
    return min(eps, math.sqrt(eps) * math.exp(-entropy(p)))


def criterion_eta(eps: float, p: CondDist) -> CriterionSet:
    """Tokens with probability above ``min(eps, sqrt(eps) * exp(-H(p)))``.

    Falls back to the single most probable token if nothing clears the bar.
    """
    if not eps > 0:
        raise InvalidParameter(f"eta epsilon must be > 0, got {eps!r}")
    eta = eta_threshold(eps, p)
    kept = np.flatnonzero(p.probs > eta)
    if kept.size == 0:
        kept = np.array([int(np.argmax(p.logp))])
    return _make_set(kept, p)


def criterion_set(spec: AdapterSpec, p: CondDist) -> CriterionSet:
    if spec.kind == "top_k":
        return criterion_top_k(spec.param, p)
    if spec.kind == "top_pi":
        return criterion_top_pi(spec.param, p)
    if spec.kind == "typical":
        return criterion_typical(spec.param, p)
    if spec.kind == "eta":
        return criterion_eta(spec.param, p)
    raise InvalidParameter(f"{spec.kind} is not a truncation adapter")


def truncate(p: CondDist, kept: CriterionSet) -> CondDist:
    """Zero everything outside ``kept`` and divide the rest by the kept mass."""
    ids = kept.ids
    if ids.size == p.support_size:
        return p
    probs = np.zeros(len(p))
    probs[ids] = p.probs[ids] / kept.kept_mass
    logp = np.full(len(p), -np.inf)
    logp[ids] = np.minimum(np.log(probs[ids]), 0.0)
    return CondDist._trusted(logp, probs)


def apply(spec: AdapterSpec, p: CondDist) -> CondDist:
    """The adapted distribution ``alpha(p)``."""
    if spec.kind == "ancestral":
        return p
    if spec.kind == "temperature":
        if spec.param == 1.0:
            return p
        scaled = p.logp / spec.param
        m = np.max(scaled)
        with np.errstate(invalid="ignore"):
            z = m + math.log(np.sum(np.exp(scaled - m)))
        logq = np.minimum(scaled - z, 0.0)
        return CondDist(logq)
    if spec.kind == "top_k" and spec.param > len(p):
        raise InvalidParameter(f"top_k k={spec.param} exceeds vocabulary size {len(p)}")
    return truncate(p, criterion_set(spec, p))


def compose(specs: Sequence[AdapterSpec], p: CondDist) -> CondDist:
    """Apply ``specs`` left to right."""
    for spec in specs:
        p = apply(spec, p)
    return p
