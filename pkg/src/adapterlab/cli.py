"""Command-line entry point: ``adapterlab <command> ...``.

Exit status is 0 on success, 1 when the input is rejected (bad file,
invalid parameter, failed check) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace

import numpy as np

from .adapters import apply, format_chain, parse_chain
from .generator import GenConfig, generate, select_prompts
from .harness import (
    SweepConfig,
    check_vocab,
    eval_token_measures,
    export_trace,
    load_config,
    measure_layout,
    run_sweep,
    step_values,
    tokenizer_for,
    trace_positions,
)
from .measures import DEFAULT_EPSILON, default_measures
from .ngram import NGramModel, Smoothing, Tokenizer, read_corpus, train
from .report import correlate, emit_report, load_report
from .trace import TraceError, TraceHeader, check_trace, read_trace, write_trace

log = logging.getLogger("adapterlab")


def _smoothing(text: str, order: int) -> Smoothing:
    kind, _, val = text.partition(":")
    if kind == "addk":
        return Smoothing.add_k(float(val or 1.0))
    if kind == "interp":
        return Smoothing.interpolated(order, float(val or 0.4))
    raise ValueError(f"unknown smoothing {text!r} (use addk:K or interp:LAMBDA)")


def cmd_train_lm(args) -> int:
    texts = read_corpus(args.corpus)
    if args.head:
        texts = texts[: args.head]
    if args.vocab_from:
        tok = tokenizer_for(NGramModel.load(args.vocab_from))
    elif args.tokenizer == "byte":
        tok = Tokenizer.bytes()
    else:
        tok = Tokenizer.build_word(read_corpus(args.vocab_corpus) if args.vocab_corpus else texts, args.max_vocab)
    seqs = [tok.encode(t) for t in texts]
    model = train(seqs, args.order, tok.vocab, _smoothing(args.smoothing, args.order), tokenizer_mode=tok.mode)
    model.save(args.out)
    print(f"trained {args.order}-gram on {len(seqs)} sequences, |V|={len(tok.vocab)} -> {args.out}")
    return 0


def cmd_generate(args) -> int:
    model = NGramModel.load(args.model)
    tok = tokenizer_for(model)
    seqs = [tok.encode(t) for t in read_corpus(args.prompts)]
    prompts, skipped = select_prompts(seqs, args.prompt_len)
    if not prompts:
        raise ValueError(f"no prompt corpus line has {args.prompt_len} tokens")
    cfg = GenConfig(args.prompt_len, args.max_len, args.n, (args.seed,), tuple(parse_chain(args.adapter)))
    audit = [] if args.trace else None
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i in range(cfg.n_samples):
            ids = generate(model, cfg, prompts[i % len(prompts)], args.seed, i, audit)
            out.write(tok.decode(ids[args.prompt_len:] if args.continuation_only else ids) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    if audit is not None:
        write_trace(args.trace, TraceHeader.for_vocab(model.vocab), audit)
    if skipped:
        print(f"skipped {skipped} prompt lines shorter than {args.prompt_len} tokens", file=sys.stderr)
    return 0


def _print_table(rows: list[tuple[str, str, float, float, int]]) -> None:
    print(f"{'reference':<16} {'measure':<24} {'mean':>12} {'ci':>10} {'n':>8}")
    for ref, label, mean, ci, n in rows:
        print(f"{ref:<16} {label:<24} {mean:>12.6g} {ci:>10.3g} {n:>8d}")


def _summarize(per_seq: list[np.ndarray]) -> tuple[float, float, int]:
    pooled = np.concatenate(per_seq) if per_seq else np.zeros(0)
    means = np.array([a.mean() for a in per_seq if a.size])
    ci = 1.96 * means.std(ddof=1) / math.sqrt(means.size) if means.size >= 2 else math.nan
    return (float(pooled.mean()) if pooled.size else math.nan), float(ci), int(pooled.size)


def cmd_eval(args) -> int:
    chain = parse_chain(args.adapter)
    measures = args.measures.split(",") if args.measures else default_measures()
    if args.model_trace:
        groups = list(read_trace(args.model_trace))
        ref_groups = None
        refs = ("empirical",)
        if args.reference_trace:
            header = read_trace(args.model_trace).header
            ref_groups = dict(read_trace(args.reference_trace, vocab_hash=header.vocab_hash))
            refs = ("empirical", "reference_model")
        layout = measure_layout(measures, refs)
        collected = {key: [] for key in layout}
        for sid, group in groups:
            rg = ref_groups[sid] if ref_groups is not None else None
            vals = []
            for pos in trace_positions(group, rg, args.densify):
                p = pos.model
                for spec in chain:
                    p = apply(spec, p)
                vals.append(step_values(p, pos, layout, args.epsilon))
            arr = np.asarray(vals).reshape(len(vals), len(layout))
            for j, key in enumerate(layout):
                collected[key].append(arr[:, j])
        _print_table([(r, l, *_summarize(v)) for (r, l), v in collected.items()])
        return 0

    if not args.model or not args.corpus:
        raise ValueError("eval needs --model and --corpus (or --model-trace)")
    if len(chain) != 1:
        raise ValueError("eval over a corpus takes a single adapter spec")
    model = NGramModel.load(args.model)
    seqs = [tokenizer_for(model).encode(t) for t in read_corpus(args.corpus)]
    if args.limit:
        seqs = seqs[: args.limit]
    results = {}
    results.update(eval_token_measures(model, chain[0], "empirical", seqs, args.epsilon, measures))
    if args.reference:
        ref = NGramModel.load(args.reference)
        check_vocab(model, ref)
        only_ref = [m for m in measures if m not in ("entropy", "coverage")]
        if only_ref:
            results.update(eval_token_measures(model, chain[0], ref, seqs, args.epsilon, only_ref))
    _print_table([(r, l, *_summarize(v)) for (r, l), v in results.items()])
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else SweepConfig()
    overrides = {}
    for key in ("model", "reference_model", "eval_corpus", "output_json", "output_csv"):
        if getattr(args, key, None):
            overrides[key] = getattr(args, key)
    if args.parallelism:
        overrides["parallelism"] = args.parallelism
    if args.no_quality:
        overrides["quality"] = False
    if overrides:
        cfg = replace(cfg, **overrides)
    report = run_sweep(cfg)
    wrote = False
    if cfg.output_json:
        emit_report(report, cfg.output_json, "json")
        wrote = True
    if cfg.output_csv:
        emit_report(report, cfg.output_csv, "csv")
        wrote = True
    if not wrote:
        sys.stdout.write(report.to_csv())
    for f in report.failures:
        print(f"cell {f['spec']} failed: {f['reason']}", file=sys.stderr)
    # the report is still written, but a partial sweep is not a success
    return 1 if report.failures else 0


def cmd_correlate(args) -> int:
    report = load_report(args.report)
    table = correlate(report, n_perm=args.permutations, seed=args.seed)
    print(f"{'reference':<16} {'measure':<24} {'rho':>8} {'p':>10} {'cells':>6}")
    for row in table:
        print(f"{row['reference']:<16} {row['label']:<24} {row['rho']:>8.3f} {row['p_value']:>10.4g} "
              f"{row['n_cells']:>6d}")
    if args.out:
        emit_report(report, args.out, "json")
    return 0


def cmd_trace_check(args) -> int:
    vocab = NGramModel.load(args.model).vocab if args.model else None
    summary = check_trace(args.path, vocab=vocab)
    print(f"ok: {summary.n_sequences} sequences, {summary.n_records} records, "
          f"|V|={summary.header.vocab_size}, max rest mass {summary.max_rest_mass:.3g}")
    return 0


def cmd_export_trace(args) -> int:
    model = NGramModel.load(args.model)
    seqs = [tokenizer_for(model).encode(t) for t in read_corpus(args.corpus)]
    if args.limit:
        seqs = seqs[: args.limit]
    chain = parse_chain(args.adapter) if args.adapter else []
    n = export_trace(model, seqs, args.out, top=args.top, adapter=chain)
    print(f"wrote {n} records for {len(seqs)} sequences ({format_chain(chain) or 'unadapted'}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapterlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-lm", help="train an n-gram model on a one-sequence-per-line corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--order", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tokenizer", choices=("word", "byte"), default="word")
    s.add_argument("--max-vocab", type=int, default=4096)
    s.add_argument("--vocab-corpus", help="build the word vocabulary from this corpus instead")
    s.add_argument("--vocab-from", help="reuse the vocabulary of an existing model file")
    s.add_argument("--head", type=int, default=0, help="train on the first N lines only")
    s.add_argument("--smoothing", default="interp:0.4", help="interp:LAMBDA or addk:K")
    s.set_defaults(fn=cmd_train_lm)

    s = sub.add_parser("generate", help="sample continuations of corpus prompts")
    s.add_argument("--model", required=True)
    s.add_argument("--prompts", required=True)
    s.add_argument("--adapter", default="ancestral", help="adapter chain, e.g. temp:0.9+toppi:0.95")
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prompt-len", type=int, default=35)
    s.add_argument("--max-len", type=int, default=512)
    s.add_argument("--continuation-only", action="store_true")
    s.add_argument("--out")
    s.add_argument("--trace", help="also write the adapted distributions of every sampled step")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("eval", help="token-level measures for one adapter")
    s.add_argument("--model")
    s.add_argument("--corpus")
    s.add_argument("--reference", help="reference model file (the empirical reference is always reported)")
    s.add_argument("--model-trace")
    s.add_argument("--reference-trace")
    s.add_argument("--densify", choices=("uniform_rest", "zero_rest"), default="uniform_rest")
    s.add_argument("--adapter", default="ancestral")
    s.add_argument("--measures", help="comma-separated measure labels")
    s.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="run an adapter grid sweep from a config file")
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--reference-model")
    s.add_argument("--eval-corpus")
    s.add_argument("--output-json")
    s.add_argument("--output-csv")
    s.add_argument("--parallelism", type=int, default=0)
    s.add_argument("--no-quality", action="store_true")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("correlate", help="Spearman table of measures against quality from a JSON report")
    s.add_argument("report")
    s.add_argument("--permutations", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="write the report with its correlation table as JSON")
    s.set_defaults(fn=cmd_correlate)

    s = sub.add_parser("trace-check", help="validate a trace file")
    s.add_argument("path")
    s.add_argument("--model", help="also check the header against this model's vocabulary")
    s.set_defaults(fn=cmd_trace_check)

    s = sub.add_parser("export-trace", help="write a model's distributions along a corpus as a trace")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--top", type=int, help="list only the N most probable tokens per step")
    s.add_argument("--adapter", help="adapt the distributions before writing")
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(fn=cmd_export_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
