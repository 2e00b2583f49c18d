"""Seeded ancestral sampling through an adapter chain.

Randomness comes from NumPy's PCG64 bit generator. Every sequence draws
from its own stream, seeded by the pair ``(seed, sequence_index)`` through
:class:`numpy.random.SeedSequence`, so a batch of samples is reproducible
no matter how it is split across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .adapters import AdapterSpec, compose
from .dist import CondDist
from .trace import TraceRecord

# protocol constants of the reference experimental setup
DEFAULT_PROMPT_LEN = 35
DEFAULT_MAX_LEN = 512
DEFAULT_N_SAMPLES = 1000
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


class LanguageModel(Protocol):
    vocab: object

    def cond_dist(self, context: Sequence[int]) -> CondDist: ...


@dataclass(frozen=True)
class GenConfig:
    prompt_len: int = DEFAULT_PROMPT_LEN
    max_len: int = DEFAULT_MAX_LEN
    n_samples: int = DEFAULT_N_SAMPLES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    adapter_chain: tuple[AdapterSpec, ...] = field(default_factory=lambda: (AdapterSpec("ancestral"),))

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "adapter_chain", tuple(self.adapter_chain))
        if not 0 <= self.prompt_len < self.max_len:
            raise ValueError(f"need 0 <= prompt_len < max_len (got {self.prompt_len}, {self.max_len})")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")


def stream(seed: int, index: int) -> np.random.Generator:
    """Independent generator for sequence ``index`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def inverse_cdf(p: CondDist, u: float) -> int:
    """Token whose cumulative-probability interval (ascending id order) contains ``u``."""
    cdf = np.cumsum(p.probs)
    i = int(np.searchsorted(cdf, u, side="right"))
    if i >= cdf.size or p.probs[i] == 0:
        # u beyond the rounded total: fall back to the last token with mass
        i = int(p.support[-1])
    return i


def sample_token(p: CondDist, rng: np.random.Generator) -> int:
    """Draw one token with a single uniform variate."""
    return inverse_cdf(p, float(rng.random()))


def generate(model: LanguageModel, cfg: GenConfig, prompt: Sequence[int], seed: int, index: int = 0,
             audit: list[TraceRecord] | None = None) -> list[int]:
    """Continue ``prompt`` until EOS or ``cfg.max_len`` tokens; EOS itself is not returned.

    When ``audit`` is a list, one :class:`TraceRecord` of the adapted
    distribution is appended per sampled step.
    """
    rng = stream(seed, index)
    eos = model.vocab.eos_id
    out = [int(t) for t in prompt]
    step = 0
    while len(out) < cfg.max_len:
        p = compose(cfg.adapter_chain, model.cond_dist(out))
        tok = sample_token(p, rng)
        step += 1
        if audit is not None:
            audit.append(TraceRecord.from_dist(f"{seed}-{index}", step, tok, p))
        if tok == eos:
            break
        out.append(tok)
    return out


def select_prompts(seqs: Sequence[Sequence[int]], prompt_len: int) -> tuple[list[list[int]], int]:
    """Prompts are the first ``prompt_len`` tokens of sequences long enough; returns (prompts, skipped)."""
    prompts = [list(s[:prompt_len]) for s in seqs if len(s) >= prompt_len]
    return prompts, len(seqs) - len(prompts)


def generate_samples(model: LanguageModel, cfg: GenConfig, prompts: Sequence[Sequence[int]], seed: int,
                     workers: int = 1,
                     progress: Callable[[int], None] | None = None) -> list[list[int]]:
    """``cfg.n_samples`` continuations; sample ``i`` uses prompt ``i mod len(prompts)``."""
    if not prompts:
        raise ValueError("no usable prompts")

    def one(i: int) -> list[int]:
        res = generate(model, cfg, prompts[i % len(prompts)], seed, i)
        if progress is not None:
            progress(i)
        return res

    if workers <= 1:
        return [one(i) for i in range(cfg.n_samples)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(cfg.n_samples)))
