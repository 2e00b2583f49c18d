"""Line-delimited distribution traces from external models.

A trace file is one header line followed by one record per generation
step. Fields are tab-separated ``key:value`` pairs::

    #adapterlab-trace	format_version:1	vocab_hash:3f2a...	vocab_size:50257	eos_id:50256	producer:gpt2
    seq:doc0	step:1	obs:464	rest_mass:0.0123	rest_count:50157	dist:11=-2.0312...,13=-1.99...

``dist`` lists ``id=logprob`` pairs with ids strictly ascending. Tokens not
listed share ``rest_mass`` between them (``rest_count`` of them). Records
of one sequence are contiguous and numbered from step 1. The full format
description lives in ``docs/trace-format.md``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dist import CondDist, Vocab

FORMAT_VERSION = 1
MAGIC = "#adapterlab-trace"
MASS_TOL = 1e-6
LOSSY_REST = 0.01
FLOAT_FMT = "%.17g"


class TraceError(ValueError):
    """A malformed or inconsistent trace; ``record_index`` is 1-based (0 for the header)."""

    def __init__(self, message: str, record_index: int = 0, line: int | None = None):
        where = "header" if record_index == 0 else f"record {record_index}"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")
        self.record_index = record_index
        self.line = line


class LossyDensification(UserWarning):
    """``zero_rest`` discarded a noticeable amount of tail mass."""


@dataclass(frozen=True)
class TraceHeader:
    vocab_hash: str
    vocab_size: int
    eos_id: int
    producer: str = "unknown"
    format_version: int = FORMAT_VERSION

    @classmethod
    def for_vocab(cls, vocab: Vocab, producer: str = "adapterlab") -> "TraceHeader":
        return cls(vocab.fingerprint, len(vocab), vocab.eos_id, producer)

    def to_line(self) -> str:
        producer = self.producer.replace("\t", " ").replace("\n", " ")
        return "\t".join([
            MAGIC,
            f"format_version:{self.format_version}",
            f"vocab_hash:{self.vocab_hash}",
            f"vocab_size:{self.vocab_size}",
            f"eos_id:{self.eos_id}",
            f"producer:{producer}",
        ])


@dataclass(frozen=True)
class TraceRecord:
    seq_id: str
    step: int
    observed: int
    ids: tuple[int, ...]
    logprobs: tuple[float, ...]
    rest_mass: float = 0.0
    rest_count: int = 0

    @classmethod
    def from_dist(cls, seq_id: str, step: int, observed: int, dist: CondDist,
                  top: int | None = None) -> "TraceRecord":
        """Sparse record of ``dist``: its whole support, or only the ``top`` most probable tokens."""
        support = dist.support
        if top is not None and top < support.size:
            order = np.argsort(-dist.logp[support], kind="stable")[:top]
            support = np.sort(support[order])
        listed = dist.probs[support]
        rest = max(0.0, 1.0 - math.fsum(listed)) if top is not None else 0.0
        return cls(
            seq_id=seq_id,
            step=step,
            observed=int(observed),
            ids=tuple(int(i) for i in support),
            logprobs=tuple(float(x) for x in dist.logp[support]),
            rest_mass=rest,
            rest_count=len(dist) - support.size,
        )

    @property
    def listed_mass(self) -> float:
        return math.fsum(math.exp(x) for x in self.logprobs)

    def to_line(self) -> str:
        pairs = ",".join(f"{i}={FLOAT_FMT % lp}" for i, lp in zip(self.ids, self.logprobs))
        return "\t".join([
            f"seq:{self.seq_id}",
            f"step:{self.step}",
            f"obs:{self.observed}",
            f"rest_mass:{FLOAT_FMT % self.rest_mass}",
            f"rest_count:{self.rest_count}",
            f"dist:{pairs}",
        ])


def densify(record: TraceRecord, policy: str = "uniform_rest") -> CondDist:
    """Dense distribution from a sparse record.

    ``uniform_rest`` spreads the rest mass evenly over the unlisted tokens;
    ``zero_rest`` gives them probability zero and renormalizes the listed
    mass (warning with :class:`LossyDensification` if that drops more
    than 1% of the mass).
    """
    if policy not in ("uniform_rest", "zero_rest"):
        raise ValueError(f"unknown densify policy {policy!r}")
    n = len(record.ids) + record.rest_count
    probs = np.zeros(n)
    ids = np.asarray(record.ids, dtype=np.int64)
    if policy == "uniform_rest" and record.rest_count:
        probs[:] = record.rest_mass / record.rest_count
    elif policy == "zero_rest" and record.rest_mass > LOSSY_REST:
        warnings.warn(
            f"zero_rest drops rest mass {record.rest_mass:.4g} at {record.seq_id}:{record.step}",
            LossyDensification,
            stacklevel=2,
        )
    probs[ids] = np.exp(np.asarray(record.logprobs, dtype=np.float64))
    total = math.fsum(probs)
    if abs(total - 1.0) > 1e-12:
        probs /= total
    return CondDist.from_probs(probs)


def _fields(line: str, index: int, lineno: int) -> dict[str, str]:
    out = {}
    for part in line.split("\t"):
        key, sep, value = part.partition(":")
        if not sep:
            raise TraceError(f"field {part[:40]!r} is not key:value", index, lineno)
        if key in out:
            raise TraceError(f"duplicate field {key!r}", index, lineno)
        out[key] = value
    return out


def _parse_header(line: str, lineno: int) -> TraceHeader:
    if not line.startswith(MAGIC + "\t"):
        raise TraceError("missing trace header line", 0, lineno)
    f = _fields(line[len(MAGIC) + 1:], 0, lineno)
    try:
        version = int(f["format_version"])
        header = TraceHeader(
            vocab_hash=f["vocab_hash"],
            vocab_size=int(f["vocab_size"]),
            eos_id=int(f["eos_id"]),
            producer=f.get("producer", "unknown"),
            format_version=version,
        )
    except KeyError as exc:
        raise TraceError(f"header lacks field {exc.args[0]!r}", 0, lineno) from None
    except ValueError as exc:
        raise TraceError(f"bad header value ({exc})", 0, lineno) from None
    if version != FORMAT_VERSION:
        raise TraceError(f"format_version {version} unsupported (expected {FORMAT_VERSION})", 0, lineno)
    if header.vocab_size < 2 or not 0 <= header.eos_id < header.vocab_size:
        raise TraceError("header vocab_size/eos_id inconsistent", 0, lineno)
    return header


def parse_record(line: str, header: TraceHeader, index: int = 1, lineno: int | None = None) -> TraceRecord:
    f = _fields(line, index, lineno)
    missing = [k for k in ("seq", "step", "obs", "rest_mass", "rest_count", "dist") if k not in f]
    if missing:
        raise TraceError(f"missing field(s) {', '.join(missing)}", index, lineno)
    try:
        step = int(f["step"])
        obs = int(f["obs"])
        rest_mass = float(f["rest_mass"])
        rest_count = int(f["rest_count"])
        ids, lps = [], []
        if f["dist"]:
            for pair in f["dist"].split(","):
                i, sep, lp = pair.partition("=")
                if not sep:
                    raise ValueError(f"dist entry {pair!r} is not id=logprob")
                ids.append(int(i))
                lps.append(float(lp))
    except ValueError as exc:
        raise TraceError(f"unparseable value ({exc})", index, lineno) from None
    seq = f["seq"]
    if not seq or any(c.isspace() for c in seq):
        raise TraceError("seq id must be non-empty without whitespace", index, lineno)
    V = header.vocab_size
    if not 0 <= obs < V:
        raise TraceError(f"observed token {obs} outside vocabulary", index, lineno)
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise TraceError("dist ids must be unique and ascending", index, lineno)
    if ids and (ids[0] < 0 or ids[-1] >= V):
        raise TraceError("dist id outside vocabulary", index, lineno)
    if any(not math.isfinite(x) or x > 0 for x in lps):
        raise TraceError("dist log-probabilities must be finite and <= 0", index, lineno)
    if not (math.isfinite(rest_mass) and rest_mass >= 0):
        raise TraceError("rest_mass must be a finite non-negative number", index, lineno)
    if rest_count < 0 or rest_count + len(ids) != V:
        raise TraceError(f"rest_count {rest_count} + {len(ids)} listed != vocab size {V}", index, lineno)
    if rest_count == 0 and rest_mass > MASS_TOL:
        raise TraceError("rest_mass > 0 but no unlisted tokens", index, lineno)
    total = math.fsum(math.exp(x) for x in lps) + rest_mass
    if abs(total - 1.0) > MASS_TOL:
        raise TraceError(f"listed mass + rest_mass = {total:.9g}, not 1", index, lineno)
    return TraceRecord(seq, step, obs, tuple(ids), tuple(lps), rest_mass, rest_count)


class TraceReader:
    """Iterate ``(seq_id, [TraceRecord, ...])`` groups; the header is checked on open.

    Pass ``vocab`` (or ``vocab_hash``) to reject traces made with a
    different vocabulary.
    """

    def __init__(self, path: str | Path, vocab: Vocab | None = None, vocab_hash: str | None = None):
        self.path = Path(path)
        with open(self.path, encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
        self.header = _parse_header(first, 1)
        expected = vocab.fingerprint if vocab is not None else vocab_hash
        if expected is not None and self.header.vocab_hash != expected:
            raise TraceError(f"vocab_hash {self.header.vocab_hash} does not match evaluation vocab {expected}")
        if vocab is not None and (self.header.vocab_size != len(vocab) or self.header.eos_id != vocab.eos_id):
            raise TraceError("vocab_size/eos_id do not match evaluation vocab")

    def records(self) -> Iterator[TraceRecord]:
        seen: set[str] = set()
        current, last_step = None, 0
        with open(self.path, encoding="utf-8") as fh:
            fh.readline()
            index = 0
            for lineno, raw in enumerate(fh, start=2):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                index += 1
                rec = parse_record(line, self.header, index, lineno)
                if rec.seq_id != current:
                    if rec.seq_id in seen:
                        raise TraceError(f"records of sequence {rec.seq_id!r} are not contiguous", index, lineno)
                    seen.add(rec.seq_id)
                    current, last_step = rec.seq_id, 0
                if rec.step != last_step + 1:
                    raise TraceError(
                        f"step {rec.step} of {rec.seq_id!r} follows step {last_step} (steps must be contiguous from 1)",
                        index, lineno)
                last_step = rec.step
                yield rec

    def __iter__(self) -> Iterator[tuple[str, list[TraceRecord]]]:
        group: list[TraceRecord] = []
        for rec in self.records():
            if group and rec.seq_id != group[0].seq_id:
                yield group[0].seq_id, group
                group = []
            group.append(rec)
        if group:
            yield group[0].seq_id, group


def read_trace(path: str | Path, vocab: Vocab | None = None, vocab_hash: str | None = None) -> TraceReader:
    return TraceReader(path, vocab=vocab, vocab_hash=vocab_hash)


@dataclass
class TraceSummary:
    header: TraceHeader
    n_sequences: int = 0
    n_records: int = 0
    max_rest_mass: float = 0.0


def check_trace(path: str | Path, vocab: Vocab | None = None) -> TraceSummary:
    """Read a whole trace, raising :class:`TraceError` at the first defect."""
    reader = read_trace(path, vocab=vocab)
    summary = TraceSummary(reader.header)
    for _, group in reader:
        summary.n_sequences += 1
        summary.n_records += len(group)
        summary.max_rest_mass = max([summary.max_rest_mass] + [r.rest_mass for r in group])
    return summary


def write_trace(path: str | Path, header: TraceHeader, records: Sequence[TraceRecord] | Iterator[TraceRecord]) -> int:
    """Write ``records`` after ``header``; returns the number of records written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header.to_line() + "\n")
        for rec in records:
            if rec.rest_count + len(rec.ids) != header.vocab_size:
                raise TraceError("record does not cover the header vocabulary", n + 1)
            fh.write(rec.to_line() + "\n")
            n += 1
    return n
