"""Sampling adapters for autoregressive language models and the measures used to evaluate them."""

from .adapters import AdapterSpec, apply, compose, criterion_set, parse_chain
from .dist import CondDist, InvalidDistribution, InvalidParameter, InvalidToken, Vocab, epsilon_smooth
from .measures import MeasureSpec, coverage, cross_entropy, js, kl, tvd

__version__ = "0.1.0"

__all__ = [
    "AdapterSpec", "CondDist", "InvalidDistribution", "InvalidParameter", "InvalidToken",
    "MeasureSpec", "Vocab", "apply", "compose", "coverage", "criterion_set", "cross_entropy",
    "epsilon_smooth", "js", "kl", "parse_chain", "tvd",
]
