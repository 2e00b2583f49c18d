"""Sweeps over adapter grids: token-level measures plus sequence-level quality.

For every evaluation position ``t`` of every held-out sequence ``y`` the
model's next-token distribution is adapted and compared with two
references: the one-hot distribution on the observed ``y_t`` (empirical)
and a reference model's distribution for the same context. Each position
is visited once and every grid cell is evaluated there, so the model and
reference distributions are computed a single time per position.

Smoothing follows the usual convention: a cross-entropy or KL whose second
argument may have holes in its support (the adapted model, the one-hot
empirical reference, a densified trace) is computed against the
epsilon-smoothed second argument; a full-support reference model is used
as is.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .adapters import AdapterSpec, apply
from .dist import CondDist, entropy, epsilon_smooth
from .generator import (
    DEFAULT_MAX_LEN,
    DEFAULT_N_SAMPLES,
    DEFAULT_PROMPT_LEN,
    DEFAULT_SEEDS,
    GenConfig,
    generate_samples,
    select_prompts,
)
from .measures import DEFAULT_EPSILON, default_measures, js, parse_measure_label, tvd
from .ngram import NGramModel, Tokenizer, read_corpus
from .quality import FeatureSpec, TooFewSamples, quality_score
from .report import SweepReport, correlate, strength_ranks
from .trace import TraceHeader, TraceRecord, densify, read_trace, write_trace

log = logging.getLogger(__name__)

DEFAULT_GRID = (
    "ancestral",
    "temp:0.5", "temp:0.7", "temp:0.9", "temp:1.0", "temp:1.2", "temp:1.5", "temp:2.0",
    "topk:1", "topk:2", "topk:5", "topk:10", "topk:30", "topk:50", "topk:100",
    "toppi:0.5", "toppi:0.7", "toppi:0.8", "toppi:0.9", "toppi:0.95", "toppi:0.99", "toppi:1.0",
    "typical:0.2", "typical:0.5", "typical:0.7", "typical:0.9", "typical:0.95",
    "eta:0.0001", "eta:0.0006", "eta:0.002", "eta:0.004", "eta:0.09",
)
REFERENCES = ("empirical", "reference_model")
REFERENCE_FREE = ("entropy", "coverage")


class VocabMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Position:
    """One evaluation step: the model's distribution, an optional reference one, the observed token."""

    model: CondDist
    observed: int
    reference: CondDist | None = None


def ngram_positions(model, reference, seq: Sequence[int]) -> Iterator[Position]:
    for t in range(len(seq)):
        ctx = seq[:t]
        ref = reference.cond_dist(ctx) if reference is not None else None
        yield Position(model.cond_dist(ctx), int(seq[t]), ref)


def trace_positions(model_group: Sequence[TraceRecord], reference_group: Sequence[TraceRecord] | None = None,
                    policy: str = "uniform_rest") -> Iterator[Position]:
    if reference_group is not None and len(reference_group) != len(model_group):
        raise ValueError(f"reference trace has {len(reference_group)} steps for "
                         f"sequence {model_group[0].seq_id!r}, model trace {len(model_group)}")
    for i, rec in enumerate(model_group):
        ref = None
        if reference_group is not None:
            rrec = reference_group[i]
            if rrec.observed != rec.observed:
                raise ValueError(f"traces disagree on the observed token at {rec.seq_id}:{rec.step}")
            ref = densify(rrec, policy)
        yield Position(densify(rec, policy), rec.observed, ref)


def measure_layout(measures: Sequence[str], references: Sequence[str]) -> list[tuple[str, str]]:
    """Ordered (reference, measure label) pairs a sweep fills in."""
    layout = []
    for label in measures:
        parse_measure_label(label)
        if label in REFERENCE_FREE:
            layout.append(("none", label))
    for ref in references:
        for label in measures:
            if label not in REFERENCE_FREE:
                layout.append((ref, label))
    return layout


def step_values(adapted: CondDist, pos: Position, layout: Sequence[tuple[str, str]], eps: float) -> list[float]:
    """All configured measures for one adapted distribution at one position.

    Shares intermediate results (smoothed distributions, entropies) across
    measures; :meth:`MeasureSpec.evaluate` is the unshared reference path.
    """
    n = len(adapted)
    cache: dict = {}

    def adapted_eps() -> CondDist:
        if "q_eps" not in cache:
            cache["q_eps"] = epsilon_smooth(adapted, eps)
        return cache["q_eps"]

    def h_adapted() -> float:
        if "h" not in cache:
            cache["h"] = entropy(adapted)
        return cache["h"]

    out = []
    for ref_name, label in layout:
        if label == "entropy":
            out.append(h_adapted())
            continue
        if label == "coverage":
            out.append(float(adapted.probs[pos.observed] > 0))
            continue
        if ref_name == "empirical":
            y = pos.observed
            if label in ("forward_cross_entropy", "forward_kl"):
                # H(onehot) = 0, so forward CE and forward KL coincide
                out.append(-float(adapted_eps().logp[y]))
            elif label in ("reverse_cross_entropy", "reverse_kl"):
                lo = math.log(eps / (1.0 + n * eps))
                hi = math.log((1.0 + eps) / (1.0 + n * eps))
                py = float(adapted.probs[y])
                ce = -(py * hi + (1.0 - py) * lo)
                out.append(ce if label == "reverse_cross_entropy" else ce - h_adapted())
            elif label == "tvd":
                out.append(2.0 - 2.0 * float(adapted.probs[y]))
            elif label == "js":
                out.append(_js_one_hot(float(adapted.probs[y])))
            continue

        ref = pos.reference
        if ref is None:
            raise ValueError("reference-model measures requested but no reference distribution available")
        if label == "tvd":
            out.append(tvd(adapted, ref))
        elif label == "js":
            out.append(js(adapted, ref))
        else:
            kind, orient = parse_measure_label(label)
            if orient == "forward":
                q = adapted_eps()
                mask = ref.probs > 0
                ce = float(-np.dot(ref.probs[mask], q.logp[mask]))
                out.append(ce if kind == "cross_entropy" else ce - _cached_ref_entropy(cache, ref))
            else:
                r = ref if ref.support_size == n else _smoothed_ref(cache, ref, eps)
                mask = adapted.probs > 0
                lr = r.logp[mask]
                ce = math.inf if np.isneginf(lr).any() else float(-np.dot(adapted.probs[mask], lr))
                out.append(ce if kind == "cross_entropy" or math.isinf(ce) else ce - h_adapted())
    return out


def _js_one_hot(py: float) -> float:
    """JS divergence between any distribution giving ``py`` to ``y`` and the one-hot on ``y``."""
    to_mix = (1.0 - py) * math.log(2.0) + (py * math.log(2.0 * py / (1.0 + py)) if py > 0 else 0.0)
    from_one_hot = math.log(2.0 / (1.0 + py))
    return max((to_mix + from_one_hot) / 2.0, 0.0)


def _cached_ref_entropy(cache, ref):
    if "h_ref" not in cache:
        cache["h_ref"] = entropy(ref)
    return cache["h_ref"]


def _smoothed_ref(cache, ref, eps):
    if "r_eps" not in cache:
        cache["r_eps"] = epsilon_smooth(ref, eps)
    return cache["r_eps"]


def _eval_sequence(positions: Iterable[Position], cells: Sequence[AdapterSpec],
                   layout: Sequence[tuple[str, str]], eps: float) -> np.ndarray:
    """values[cell, measure, step] for one sequence; NaN marks a failed cell."""
    rows = []
    for pos in positions:
        per_cell = []
        for spec in cells:
            try:
                per_cell.append(step_values(apply(spec, pos.model), pos, layout, eps))
            except ValueError:
                per_cell.append([math.nan] * len(layout))
        rows.append(per_cell)
    if not rows:
        return np.zeros((len(cells), len(layout), 0))
    return np.transpose(np.asarray(rows, dtype=np.float64), (1, 2, 0))


def eval_token_measures(model, adapter: AdapterSpec, reference, eval_corpus: Sequence[Sequence[int]],
                        eps: float = DEFAULT_EPSILON, measures: Sequence[str] | None = None
                        ) -> dict[tuple[str, str], list[np.ndarray]]:
    """Per-(sequence, step) values of each measure for a single adapter.

    ``reference`` is ``"empirical"`` or a model with ``cond_dist``; keys of
    the result are ``(reference name, measure label)`` and each value is a
    list of per-sequence arrays.
    """
    ref_model = None if reference == "empirical" else reference
    if ref_model is not None:
        check_vocab(model, ref_model)
    refs = ("empirical",) if ref_model is None else ("reference_model",)
    layout = measure_layout(measures or default_measures(), refs)
    out: dict[tuple[str, str], list[np.ndarray]] = {key: [] for key in layout}
    for seq in eval_corpus:
        vals = _eval_sequence(ngram_positions(model, ref_model, seq), [adapter], layout, eps)
        for j, key in enumerate(layout):
            out[key].append(vals[0, j])
    return out


def check_vocab(model, reference) -> None:
    mv, rv = getattr(model, "vocab", None), getattr(reference, "vocab", None)
    if mv is None or rv is None:
        return
    if mv != rv:
        raise VocabMismatch("model and reference use different vocabularies")


@dataclass(frozen=True)
class SweepConfig:
    """Everything a sweep needs; mirrors the key-value config file (see :func:`load_config`)."""

    grid: tuple[AdapterSpec, ...] = tuple(AdapterSpec.parse(s) for s in DEFAULT_GRID)
    measures: tuple[str, ...] = tuple(default_measures())
    references: tuple[str, ...] = REFERENCES
    epsilon: float = DEFAULT_EPSILON
    prompt_len: int = DEFAULT_PROMPT_LEN
    max_len: int = DEFAULT_MAX_LEN
    n_samples: int = DEFAULT_N_SAMPLES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    quality: bool = True
    eval_limit: int = 0
    model: str = ""
    reference_model: str = ""
    eval_corpus: str = ""
    model_trace: str = ""
    reference_trace: str = ""
    densify: str = "uniform_rest"
    output_json: str = ""
    output_csv: str = ""
    parallelism: int = 1
    permutations: int = 10_000
    perm_seed: int = 0
    ngram_order: int = 3
    hash_dim: int = 1024
    n_clusters: int = 32
    scaling_c: float = 5.0
    grid_size: int = 99
    kmeans_seed: int = 0

    def __post_init__(self):
        if not self.grid:
            raise ValueError("adapter grid is empty")
        if not self.measures:
            raise ValueError("measure list is empty")
        for label in self.measures:
            parse_measure_label(label)
        for ref in self.references:
            if ref not in REFERENCES:
                raise ValueError(f"unknown reference {ref!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.gen_config()  # validates the protocol fields

    def gen_config(self, spec: AdapterSpec | None = None) -> GenConfig:
        chain = (spec,) if spec is not None else (AdapterSpec("ancestral"),)
        return GenConfig(self.prompt_len, self.max_len, self.n_samples, self.seeds, chain)

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(self.ngram_order, self.hash_dim, self.n_clusters, self.scaling_c,
                           self.grid_size, self.kmeans_seed)

    def echo(self) -> dict:
        """Config fields that determine results (parallelism and output paths excluded)."""
        skip = {"parallelism", "output_json", "output_csv"}
        out = {}
        for f in fields(self):
            if f.name in skip:
                continue
            out[f.name] = _format_value(getattr(self, f.name))
        return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, AdapterSpec):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, text: str, default):
    text = text.strip()
    if name == "grid":
        return tuple(AdapterSpec.parse(s) for s in text.split(",") if s.strip())
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if name == "seeds":
            return tuple(int(s) for s in items)
        return tuple(items)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def dump_config(cfg: SweepConfig) -> str:
    lines = ["# adapterlab sweep configuration"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: SweepConfig | None = None) -> SweepConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma-separated."""
    base = base or SweepConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValueError(f"config line {lineno}: expected key = value")
        if key not in known:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        updates[key] = _parse_value(key, value, known[key])
    return replace(base, **updates)


def load_config(path: str | Path, base: SweepConfig | None = None) -> SweepConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def tokenizer_for(model: NGramModel) -> Tokenizer:
    return Tokenizer(model.tokenizer_mode or "word", model.vocab)


def _chunks(n: int, k: int) -> list[range]:
    size = max(1, math.ceil(n / k))
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def _continuation(seq: Sequence[int], prompt_len: int, eos_id: int) -> list[int]:
    cont = list(seq[prompt_len:])
    # the empty continuation is represented by EOS alone
    return cont or [eos_id]


@dataclass
class SweepInputs:
    """Already-loaded models and corpora; lets tests and the CLI share :func:`run_sweep`."""

    model: NGramModel | None = None
    reference: NGramModel | None = None
    eval_seqs: list[list[int]] = field(default_factory=list)
    model_trace: list[tuple[str, list[TraceRecord]]] | None = None
    reference_trace: list[tuple[str, list[TraceRecord]]] | None = None


def load_inputs(cfg: SweepConfig) -> SweepInputs:
    inputs = SweepInputs()
    if cfg.model_trace:
        vocab = None
        if cfg.model:
            inputs.model = NGramModel.load(cfg.model)
            vocab = inputs.model.vocab
        inputs.model_trace = list(read_trace(cfg.model_trace, vocab=vocab))
        if cfg.reference_trace:
            reader = read_trace(cfg.reference_trace, vocab_hash=read_trace(cfg.model_trace).header.vocab_hash)
            inputs.reference_trace = list(reader)
        return inputs
    if not cfg.model or not cfg.eval_corpus:
        raise ValueError("a sweep needs a model and an eval corpus (or a model trace)")
    inputs.model = NGramModel.load(cfg.model)
    if cfg.reference_model:
        inputs.reference = NGramModel.load(cfg.reference_model)
    tok = tokenizer_for(inputs.model)
    inputs.eval_seqs = [tok.encode(t) for t in read_corpus(cfg.eval_corpus)]
    return inputs


def _position_sources(cfg: SweepConfig, inputs: SweepInputs) -> list[tuple[str, object]]:
    """(sequence id, thunk producing positions) in a fixed order."""
    if inputs.model_trace is not None:
        refs = dict(inputs.reference_trace) if inputs.reference_trace is not None else {}
        srcs = []
        for sid, group in inputs.model_trace:
            if inputs.reference_trace is not None and sid not in refs:
                raise ValueError(f"reference trace lacks sequence {sid!r}")
            srcs.append((sid, lambda g=group, r=refs.get(sid): trace_positions(g, r, cfg.densify)))
        return srcs
    seqs = inputs.eval_seqs
    if cfg.eval_limit:
        seqs = seqs[: cfg.eval_limit]
    return [(str(i), lambda s=s: ngram_positions(inputs.model, inputs.reference, s)) for i, s in enumerate(seqs)]


def run_sweep(cfg: SweepConfig, inputs: SweepInputs | None = None) -> SweepReport:
    """Evaluate every grid cell; add quality scores and the correlation table when enabled."""
    if inputs is None:
        inputs = load_inputs(cfg)
    references = tuple(cfg.references)
    has_ref = inputs.reference is not None or inputs.reference_trace is not None
    if not has_ref:
        references = tuple(r for r in references if r != "reference_model")
    if inputs.model is not None and inputs.reference is not None:
        check_vocab(inputs.model, inputs.reference)
    layout = measure_layout(cfg.measures, references)
    cells = list(cfg.grid)
    sources = _position_sources(cfg, inputs)

    def run_chunk(idx: range) -> list[np.ndarray]:
        return [_eval_sequence(sources[i][1](), cells, layout, cfg.epsilon) for i in idx]

    chunks = _chunks(len(sources), cfg.parallelism * 4) if sources else []
    if cfg.parallelism > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            per_seq = [a for part in pool.map(run_chunk, chunks) for a in part]
    else:
        per_seq = [a for part in map(run_chunk, chunks) for a in part]

    report = SweepReport(config=cfg.echo())
    ranks = strength_ranks(cells)
    for c, spec in enumerate(cells):
        for j, (ref, label) in enumerate(layout):
            report.add_row(spec, ranks[c], ref, label, [a[c, j] for a in per_seq])

    if cfg.quality and inputs.model is not None and inputs.eval_seqs:
        _add_quality(cfg, inputs, cells, ranks, report)
        try:
            correlate(report, n_perm=cfg.permutations, seed=cfg.perm_seed)
        except ValueError as exc:
            report.notes.append(f"correlation table not computed: {exc}")
    elif cfg.quality:
        report.notes.append("quality scores need an in-process model and an eval corpus; none computed")
    return report


def _add_quality(cfg, inputs, cells, ranks, report: SweepReport) -> None:
    model = inputs.model
    eos = model.vocab.eos_id
    usable = [s for s in inputs.eval_seqs if len(s) > cfg.prompt_len]
    report.meta["prompts_skipped"] = len(inputs.eval_seqs) - len(usable)
    prompts, _ = select_prompts(usable[: cfg.n_samples], cfg.prompt_len)
    report.meta["prompts_used"] = len(prompts)
    refs = [_continuation(s[: cfg.max_len], cfg.prompt_len, eos) for s in usable[: cfg.n_samples]]
    fspec = cfg.feature_spec()
    for c, spec in enumerate(cells):
        per_seed = []
        try:
            for seed in cfg.seeds:
                samples = generate_samples(model, cfg.gen_config(spec), prompts, seed, workers=cfg.parallelism)
                conts = [_continuation(s, cfg.prompt_len, eos) for s in samples]
                per_seed.append(quality_score(conts, refs, fspec).value)
        except (TooFewSamples, ValueError) as exc:
            report.add_failure(spec, f"quality: {exc}")
            continue
        report.add_quality(spec, ranks[c], per_seed)
        log.info("quality %s = %.4f", spec, float(np.mean(per_seed)))


def export_trace(model, seqs: Sequence[Sequence[int]], path: str | Path, top: int | None = None,
                 adapter: Sequence[AdapterSpec] = (), producer: str = "adapterlab") -> int:
    """Write the (optionally adapted) next-token distributions of ``model`` along ``seqs``.

    Sequence ``i`` gets the id ``str(i)``; returns the number of records.
    """
    def records():
        for i, seq in enumerate(seqs):
            for t in range(len(seq)):
                p = model.cond_dist(seq[:t])
                for spec in adapter:
                    p = apply(spec, p)
                yield TraceRecord.from_dist(str(i), t + 1, int(seq[t]), p, top=top)

    return write_trace(path, TraceHeader.for_vocab(model.vocab, producer), records())
