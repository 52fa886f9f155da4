"""Scalar evaluation and similarity functions.

`sim` (smoothed sentence BLEU-2) doubles as the grounding-rate supervision
signal and the corpus-filter relevance check, so its exact definition is
pinned here: geometric mean of 1- and 2-gram modified precision, add-one
smoothing on zero match counts, times the standard brevity penalty.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .text import tokenize

_PUNCT_RE = re.compile(r"[^\w\s]")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sim(a: str, b: str) -> float:
    """Smoothed sentence BLEU-2 of hypothesis `a` against reference `b`."""
    hyp = tokenize(a)
    ref = tokenize(b)
    if not hyp:
        return 0.0
    log_p = 0.0
    for n in (1, 2):
        hyp_grams = _ngrams(hyp, n)
        total = sum(hyp_grams.values())
        if total == 0:
            return 0.0
        ref_grams = _ngrams(ref, n)
        match = sum(min(c, ref_grams[g]) for g, c in hyp_grams.items())
        p = (match + 1) / (total + 1) if match == 0 else match / total
        log_p += 0.5 * math.log(p)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_p)


def _normalize_f1(text: str) -> list[str]:
    return _PUNCT_RE.sub(" ", text.lower()).split()


def unigram_f1(hypothesis: str, reference: str) -> float:
    """Harmonic mean of unigram precision and recall (multiset overlap)."""
    hyp = Counter(_normalize_f1(hypothesis))
    ref = Counter(_normalize_f1(reference))
    overlap = sum((hyp & ref).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(hyp.values())
    recall = overlap / sum(ref.values())
    return 2 * precision * recall / (precision + recall)


def corpus_bleu(hyps: list[str], refs: list[str], max_n: int = 4) -> dict[int, float]:
    """Cumulative corpus BLEU-1..max_n with brevity penalty.

    BLEU-n is the geometric mean of the corpus-pooled modified precisions
    p_1..p_n times the brevity penalty; any zero precision zeroes the score.
    """
    if len(hyps) != len(refs) or not hyps:
        raise ValueError(f"corpus size mismatch: {len(hyps)} vs {len(refs)}")
    hyp_len = 0
    ref_len = 0
    matches = [0] * (max_n + 1)
    totals = [0] * (max_n + 1)
    for h, r in zip(hyps, refs):
        ht = tokenize(h)
        rt = tokenize(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_n + 1):
            hg = _ngrams(ht, n)
            rg = _ngrams(rt, n)
            totals[n] += sum(hg.values())
            matches[n] += sum(min(c, rg[g]) for g, c in hg.items())
    if hyp_len == 0:
        return {n: 0.0 for n in range(1, max_n + 1)}
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    out: dict[int, float] = {}
    for n in range(1, max_n + 1):
        ps = [matches[k] / totals[k] if totals[k] else 0.0 for k in range(1, n + 1)]
        if any(p == 0.0 for p in ps):
            out[n] = 0.0
        else:
            out[n] = bp * math.exp(sum(math.log(p) for p in ps) / n)
    return out


def perplexity(generator, packed_inputs) -> float:
    """exp(total response NLL / total response tokens) under `generator`.

    `generator` must expose ``response_log_probs(packed) -> np.ndarray`` of
    per-target-token log probabilities (the same teacher-forced masking the
    training loss uses, terminal separator included).
    """
    total_nll = 0.0
    total_tokens = 0
    for packed in packed_inputs:
        lp = np.asarray(generator.response_log_probs(packed), dtype=np.float64)
        total_nll -= float(lp.sum())
        total_tokens += lp.size
    if total_tokens == 0:
        raise ValueError("perplexity needs at least one response token")
    return math.exp(total_nll / total_tokens)


@dataclass
class ExampleRecord:
    index: int
    nll: float
    n_tokens: int
    f1: float
    bleu: dict[int, float]


@dataclass
class MetricReport:
    """Aggregate metrics plus the per-example rows behind them."""

    ppl: float
    f1: float
    bleu: dict[int, float]
    records: list[ExampleRecord] = field(default_factory=list)

    def to_tsv(self) -> str:
        ns = sorted(self.bleu)
        header = ["example", "ppl", "nll", "n_tokens", "f1"] + [f"bleu{n}" for n in ns]
        lines = ["\t".join(header)]
        for r in self.records:
            ppl = math.exp(r.nll / r.n_tokens) if r.n_tokens else float("nan")
            row = [str(r.index), repr(ppl), repr(r.nll), str(r.n_tokens), repr(r.f1)]
            row += [repr(r.bleu.get(n, 0.0)) for n in ns]
            lines.append("\t".join(row))
        total_nll = sum(r.nll for r in self.records)
        total_tokens = sum(r.n_tokens for r in self.records)
        agg = ["aggregate", repr(self.ppl), repr(total_nll), str(total_tokens), repr(self.f1)]
        agg += [repr(self.bleu[n]) for n in ns]
        lines.append("\t".join(agg))
        return "\n".join(lines) + "\n"
