"""Count-based n-gram language models over a fixed vocabulary.

These serve both as the generation model and as the (stronger) reference
model. Every sequence is terminated by EOS during training, so the model
defines a distribution over finite strings; contexts are left-padded with
an internal BOS id that never appears in a :class:`CondDist`.

Two smoothing schemes are available. ``add_k`` is plain additive
smoothing on the top order. ``interpolated`` mixes the maximum-likelihood
estimate of each order with the next lower order::

    P_m(y | h) = (1 - lam_m) * c(h, y) / c(h) + lam_m * P_{m-1}(y | h')   if c(h) > 0
    P_m(y | h) = P_{m-1}(y | h')                                        otherwise

bottoming out in the uniform distribution, which keeps the support full.
"""

from __future__ import annotations

import gzip
import io
import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dist import CondDist, Vocab

EOS = "</s>"
UNK = "<unk>"
MODEL_FORMAT = "adapterlab-ngram"
MODEL_VERSION = 1
DEFAULT_LAMBDA = 0.4


class Tokenizer:
    """Byte-level or whitespace-word tokenization onto a :class:`Vocab`.

    Byte mode maps each UTF-8 byte to its own token (surface string is the
    latin-1 character with that code). Word mode keeps the most frequent
    words up to a cap and sends everything else to ``<unk>``.
    """

    def __init__(self, mode: str, vocab: Vocab):
        if mode not in ("byte", "word"):
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        self.mode = mode
        self.vocab = vocab
        self._index = vocab.index()
        self.unk_id = self._index.get(UNK) if mode == "word" else None

    @classmethod
    def bytes(cls) -> "Tokenizer":
        return cls("byte", Vocab(tuple(chr(i) for i in range(256)) + (EOS,), eos_id=256))

    @classmethod
    def build_word(cls, texts: Iterable[str], max_vocab: int = 4096) -> "Tokenizer":
        """Vocabulary of the ``max_vocab - 2`` most frequent words plus UNK and EOS."""
        if max_vocab < 3:
            raise ValueError("word vocabulary needs room for at least one word, UNK and EOS")
        counts = Counter(w for t in texts for w in t.split())
        for special in (UNK, EOS):
            counts.pop(special, None)
        words = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max_vocab - 2]
        tokens = tuple(w for w, _ in words) + (UNK, EOS)
        return cls("word", Vocab(tokens, eos_id=len(tokens) - 1))

    def encode(self, text: str) -> list[int]:
        if self.mode == "byte":
            return list(text.encode("utf-8"))
        idx, unk = self._index, self.unk_id
        return [idx.get(w, unk) for w in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        ids = [int(i) for i in ids if int(i) != self.vocab.eos_id]
        if self.mode == "byte":
            return bytes(ids).decode("utf-8", errors="replace")
        return " ".join(self.vocab.tokens[i] for i in ids)

    def to_dict(self) -> dict:
        return {"mode": self.mode}


@dataclass(frozen=True)
class Smoothing:
    kind: str = "interpolated"
    k: float = 1.0
    lambdas: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("add_k", "interpolated"):
            raise ValueError(f"unknown smoothing {self.kind!r}")
        if self.kind == "add_k" and not self.k >= 0:
            raise ValueError("add_k needs k >= 0")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if any(not 0 <= lam <= 1 for lam in self.lambdas):
            raise ValueError("interpolation weights must lie in [0, 1]")

    @classmethod
    def add_k(cls, k: float = 1.0) -> "Smoothing":
        return cls("add_k", k=float(k))

    @classmethod
    def interpolated(cls, order: int, lam: float = DEFAULT_LAMBDA) -> "Smoothing":
        return cls("interpolated", lambdas=(lam,) * order)

    def describe(self) -> str:
        if self.kind == "add_k":
            return f"add_k {self.k!r}"
        return "interpolated " + " ".join(repr(x) for x in self.lambdas)

    @classmethod
    def from_description(cls, text: str) -> "Smoothing":
        head, *rest = text.split()
        if head == "add_k":
            return cls.add_k(float(rest[0]))
        return cls("interpolated", lambdas=tuple(float(x) for x in rest))


class _OrderTable:
    """Counts of one order: sorted context keys with CSR-style token rows."""

    __slots__ = ("ctx_keys", "offsets", "tokens", "counts", "totals")

    def __init__(self, ctx_keys, offsets, tokens, counts):
        self.ctx_keys = ctx_keys
        self.offsets = offsets
        self.tokens = tokens
        self.counts = counts
        self.totals = np.add.reduceat(counts, offsets[:-1]) if counts.size else np.zeros(0, np.int64)

    def lookup(self, key: int):
        i = int(np.searchsorted(self.ctx_keys, key))
        if i < self.ctx_keys.size and self.ctx_keys[i] == key:
            lo, hi = self.offsets[i], self.offsets[i + 1]
            return self.tokens[lo:hi], self.counts[lo:hi], int(self.totals[i])
        return None

    @classmethod
    def from_pairs(cls, ctx: np.ndarray, tok: np.ndarray, cnt: np.ndarray) -> "_OrderTable":
        """``ctx``/``tok`` must already be sorted by (ctx, tok)."""
        if ctx.size == 0:
            empty = np.zeros(0, np.int64)
            return cls(empty, np.zeros(1, np.int64), empty, empty)
        keys, starts = np.unique(ctx, return_index=True)
        offsets = np.append(starts, ctx.size).astype(np.int64)
        return cls(keys.astype(np.int64), offsets, tok.astype(np.int64), cnt.astype(np.int64))


class NGramModel:
    """An order-n model; immutable once trained.

    Build with :func:`train` or :meth:`load`.
    """

    def __init__(self, order: int, vocab: Vocab, smoothing: Smoothing, tables: list[_OrderTable],
                 tokenizer_mode: str | None = None, cache_size: int = 2048):
        if order < 1:
            raise ValueError("order must be >= 1")
        if smoothing.kind == "interpolated" and len(smoothing.lambdas) != order:
            raise ValueError(f"need {order} interpolation weights, got {len(smoothing.lambdas)}")
        self.order = order
        self.vocab = vocab
        self.smoothing = smoothing
        self.tokenizer_mode = tokenizer_mode
        self._tables = tables
        self._base = len(vocab) + 1
        self.bos_id = len(vocab)
        self._cached = lru_cache(maxsize=cache_size)(self._compute)

    def __repr__(self) -> str:
        return f"NGramModel(order={self.order}, |V|={len(self.vocab)}, smoothing={self.smoothing.describe()!r})"

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _key(self, ctx: Sequence[int]) -> int:
        key = 0
        for t in ctx:
            key = key * self._base + int(t)
        return key

    def _history(self, context: Sequence[int]) -> tuple[int, ...]:
        n1 = self.order - 1
        if n1 == 0:
            return ()
        tail = tuple(int(t) for t in context[-n1:]) if len(context) else ()
        return (self.bos_id,) * (n1 - len(tail)) + tail

    def counts(self, context: Sequence[int], order: int | None = None) -> dict[int, int]:
        """Raw next-token counts after ``context`` at ``order`` (default: model order)."""
        m = self.order if order is None else order
        hist = self._history(context)
        hit = self._tables[m - 1].lookup(self._key(hist[len(hist) - (m - 1):] if m > 1 else ()))
        if hit is None:
            return {}
        toks, cnts, _ = hit
        return {int(t): int(c) for t, c in zip(toks, cnts)}

    def relative_frequencies(self, context: Sequence[int]) -> np.ndarray:
        """Unsmoothed maximum-likelihood next-token probabilities (all zero if unseen)."""
        out = np.zeros(self.vocab_size)
        c = self.counts(context)
        total = sum(c.values())
        for t, n in c.items():
            out[t] = n / total
        return out

    def cond_dist(self, context: Sequence[int]) -> CondDist:
        return self._cached(self._history(context))

    def _compute(self, hist: tuple[int, ...]) -> CondDist:
        V = self.vocab_size
        if self.smoothing.kind == "add_k":
            k = self.smoothing.k
            probs = np.full(V, k, dtype=np.float64)
            hit = self._tables[-1].lookup(self._key(hist))
            total = 0
            if hit is not None:
                toks, cnts, total = hit
                probs[toks] += cnts
            denom = total + k * V
            if denom == 0:
                return CondDist.uniform(V)
            return CondDist.from_probs(probs / denom)

        probs = np.full(V, 1.0 / V)
        for m in range(1, self.order + 1):
            ctx = hist[len(hist) - (m - 1):] if m > 1 else ()
            hit = self._tables[m - 1].lookup(self._key(ctx))
            if hit is None:
                continue
            toks, cnts, total = hit
            lam = self.smoothing.lambdas[m - 1]
            probs = lam * probs
            probs[toks] += (1.0 - lam) * cnts / total
        return CondDist.from_probs(probs)

    def sequence_logprob(self, ids: Sequence[int]) -> float:
        """``log p(EOS | y) + sum_t log p(y_t | y_<t)`` in nats."""
        ids = [int(t) for t in ids]
        total = 0.0
        for t, tok in enumerate(ids):
            total += float(self.cond_dist(ids[:t]).logp[tok])
        total += float(self.cond_dist(ids).logp[self.vocab.eos_id])
        return total

    # serialization

    def dump(self, fh) -> None:
        header = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "order": self.order,
            "smoothing": self.smoothing.describe(),
            "tokenizer": self.tokenizer_mode,
            "eos_id": self.vocab.eos_id,
            "vocab_size": self.vocab_size,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tok in self.vocab.tokens:
            fh.write(json.dumps(tok) + "\n")
        base = self._base
        for m, table in enumerate(self._tables, start=1):
            fh.write(f"order {m} {table.tokens.size}\n")
            for i, key in enumerate(table.ctx_keys):
                ctx = _unkey(int(key), m - 1, base)
                ctx_txt = ",".join(str(c) for c in ctx)
                lo, hi = table.offsets[i], table.offsets[i + 1]
                for tok, cnt in zip(table.tokens[lo:hi], table.counts[lo:hi]):
                    fh.write(f"{ctx_txt}\t{int(tok)}\t{int(cnt)}\n")

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            self.dump(fh)

    def dumps(self) -> str:
        buf = io.StringIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, path_or_fh) -> "NGramModel":
        if isinstance(path_or_fh, (str, Path)):
            with open(path_or_fh, encoding="utf-8") as fh:
                return cls._read(fh)
        return cls._read(path_or_fh)

    @classmethod
    def loads(cls, text: str) -> "NGramModel":
        return cls._read(io.StringIO(text))

    @classmethod
    def _read(cls, fh) -> "NGramModel":
        header = json.loads(fh.readline())
        if header.get("format") != MODEL_FORMAT:
            raise ValueError("not an n-gram model file")
        if header.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model file version {header.get('version')!r}")
        order, V = int(header["order"]), int(header["vocab_size"])
        tokens = tuple(json.loads(fh.readline()) for _ in range(V))
        vocab = Vocab(tokens, eos_id=int(header["eos_id"]))
        base = V + 1
        tables = []
        for m in range(1, order + 1):
            tag, m_read, nrows = fh.readline().split()
            if tag != "order" or int(m_read) != m:
                raise ValueError(f"malformed count section for order {m}")
            ctx, tok, cnt = np.zeros(int(nrows), np.int64), np.zeros(int(nrows), np.int64), np.zeros(int(nrows), np.int64)
            for i in range(int(nrows)):
                c_txt, t_txt, n_txt = fh.readline().rstrip("\n").split("\t")
                ctx[i] = _key_of([int(c) for c in c_txt.split(",")] if c_txt else [], base)
                tok[i], cnt[i] = int(t_txt), int(n_txt)
            tables.append(_OrderTable.from_pairs(ctx, tok, cnt))
        return cls(order, vocab, Smoothing.from_description(header["smoothing"]), tables,
                   tokenizer_mode=header.get("tokenizer"))


def _key_of(ctx: Sequence[int], base: int) -> int:
    key = 0
    for t in ctx:
        key = key * base + t
    return key


def _unkey(key: int, length: int, base: int) -> list[int]:
    out = []
    for _ in range(length):
        key, r = divmod(key, base)
        out.append(r)
    return out[::-1]


def train(corpus: Sequence[Sequence[int]], order: int, vocab: Vocab,
          smoothing: Smoothing | None = None, tokenizer_mode: str | None = None) -> NGramModel:
    """Count n-grams of every order up to ``order``; EOS is appended to each sequence.

    ``corpus`` holds token-id sequences without EOS. Default smoothing is
    interpolation with weight 0.4 at every order.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    if smoothing is None:
        smoothing = Smoothing.interpolated(order)
    V = len(vocab)
    base = V + 1
    bos = V
    if base ** order >= 2 ** 62:
        raise ValueError(f"order {order} with |V|={V} overflows 64-bit n-gram keys")

    pad = order - 1
    pieces = []
    for seq in corpus:
        arr = np.asarray(seq, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= V):
            raise ValueError("token id outside vocabulary in training corpus")
        if np.any(arr == vocab.eos_id):
            raise ValueError("training sequences must not contain EOS; it is appended automatically")
        pieces.append(np.concatenate([np.full(pad, bos, np.int64), arr, [vocab.eos_id]]))
    stream = np.concatenate(pieces)
    pos = np.flatnonzero(stream != bos)
    targets = stream[pos]

    tables = []
    for m in range(1, order + 1):
        ctx = np.zeros(pos.size, dtype=np.int64)
        for i in range(m - 1):
            ctx = ctx * base + stream[pos - (m - 1) + i]
        combined = ctx * base + targets
        uniq, cnt = np.unique(combined, return_counts=True)
        tables.append(_OrderTable.from_pairs(uniq // base, uniq % base, cnt))
    return NGramModel(order, vocab, smoothing, tables, tokenizer_mode=tokenizer_mode)


def read_corpus(path: str | Path) -> list[str]:
    """One sequence per non-empty line; ``.gz`` files are decompressed transparently."""
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            return [line.rstrip("\n") for line in fh if line.strip()]
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def encode_corpus(tokenizer: Tokenizer, texts: Iterable[str]) -> list[list[int]]:
    return [tokenizer.encode(t) for t in texts]

