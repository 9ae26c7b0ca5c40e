"""Word-overlap generation metrics: token F1, BLEU-4, ROUGE-L and their sum.

All metrics share :func:`normalize` so that the guidance signal used during
retriever training and the evaluation numbers agree on what a token is.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

MAX_ORDER = 4
SMOOTH_EPSILON = 0.1


def normalize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def _as_tokens(x: str | Sequence[str]) -> list[str]:
    return normalize(x) if isinstance(x, str) else list(x)


def _harmonic(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def token_f1(hyp: str, ref: str) -> float:
    h, r = normalize(hyp), normalize(ref)
    if not h or not r:
        return 0.0
    overlap = sum((Counter(h) & Counter(r)).values())
    if overlap == 0:
        return 0.0
    return _harmonic(overlap / len(h), overlap / len(r))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # two-row DP, O(|a|*|b|) time
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: str, ref: str) -> float:
    h, r = normalize(hyp), normalize(ref)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    return _harmonic(lcs / len(h), lcs / len(r))


def ngram_stats(hyp: Sequence[str], ref: Sequence[str], max_order: int = MAX_ORDER):
    """Clipped n-gram matches and hypothesis n-gram totals for n = 1..max_order."""
    matches = [0] * max_order
    totals = [0] * max_order
    for n in range(1, max_order + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        totals[n - 1] = sum(h.values())
    return matches, totals


def _bleu_from_stats(matches, totals, hyp_len, ref_len, smoothing=False,
                     epsilon=SMOOTH_EPSILON) -> float:
    if hyp_len == 0 or ref_len == 0:
        return 0.0
    # effective order: n-gram orders the hypothesis is too short to contain are skipped
    log_p = []
    for m, t in zip(matches, totals):
        if t == 0:
            continue
        if m == 0:
            if not smoothing:
                return 0.0
            log_p.append(math.log(epsilon / (t + epsilon)))
        else:
            log_p.append(math.log(m / t))
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(log_p) / len(log_p))


def sentence_bleu(hyp: str | Sequence[str], ref: str | Sequence[str],
                  smoothing: bool = False) -> float:
    """Sentence-level BLEU-4 on a 0-100 scale.

    With ``smoothing`` on, an n-gram order with zero clipped matches contributes
    ``eps / (total + eps)`` instead of zeroing the whole score.
    """
    h, r = _as_tokens(hyp), _as_tokens(ref)
    matches, totals = ngram_stats(h, r)
    return _bleu_from_stats(matches, totals, len(h), len(r), smoothing=smoothing)


def corpus_bleu(hyps: Sequence[str], refs: Sequence[str]) -> float:
    """Corpus BLEU-4 (0-100): n-gram counts and lengths pooled before scoring."""
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("corpus_bleu needs at least one pair")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h, r = normalize(hyp), normalize(ref)
        m, t = ngram_stats(h, r)
        for i in range(MAX_ORDER):
            matches[i] += m[i]
            totals[i] += t[i]
        hyp_len += len(h)
        ref_len += len(r)
    return _bleu_from_stats(matches, totals, hyp_len, ref_len)


def guidance_metric(hyp: str, ref: str) -> float:
    """F1 + smoothed BLEU / 100 + ROUGE-L, each summand in [0, 1]."""
    return token_f1(hyp, ref) + sentence_bleu(hyp, ref, smoothing=True) / 100.0 + rouge_l(hyp, ref)


@dataclass(frozen=True)
class MetricBundle:
    f1: float
    bleu: float
    rouge_l: float
    guidance: float

    def to_dict(self) -> dict:
        return asdict(self)


def corpus_eval(hyps: Sequence[str], refs: Sequence[str]) -> MetricBundle:
    if len(hyps) != len(refs):
        raise ValueError(f"length mismatch: {len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("corpus_eval needs at least one pair")
    n = len(hyps)
    pairs = list(zip(hyps, refs))
    return MetricBundle(
        f1=sum(token_f1(h, r) for h, r in pairs) / n,
        bleu=corpus_bleu(hyps, refs),
        rouge_l=sum(rouge_l(h, r) for h, r in pairs) / n,
        guidance=sum(guidance_metric(h, r) for h, r in pairs) / n,
    )
