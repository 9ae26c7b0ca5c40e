"""Deliberately naive reference computations used only by the tests."""
import math
from itertools import combinations


def multiset_overlap(a, b):
    rest = list(b)
    n = 0
    for tok in a:
        if tok in rest:
            rest.remove(tok)
            n += 1
    return n


def f1_bruteforce(h, r):
    if not h or not r:
        return 0.0
    o = multiset_overlap(h, r)
    if o == 0:
        return 0.0
    p, rc = o / len(h), o / len(r)
    return 2 * p * rc / (p + rc)


def lcs_dp(a, b):
    # full table, no space tricks
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def lcs_enumerate(a, b):
    """Exponential LCS by enumerating subsequences of the shorter sequence."""
    if len(a) > len(b):
        a, b = b, a
    for k in range(len(a), 0, -1):
        for idx in combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return k
    return 0


def rouge_l_bruteforce(h, r):
    if not h or not r:
        return 0.0
    lcs = lcs_dp(h, r)
    if lcs == 0:
        return 0.0
    p, rc = lcs / len(h), lcs / len(r)
    return 2 * p * rc / (p + rc)


def ngrams_list(tokens, n):
    return [" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_counts(h, r, n):
    hg, rg = ngrams_list(h, n), ngrams_list(r, n)
    matched = 0
    for g in set(hg):
        matched += min(hg.count(g), rg.count(g))
    return matched, len(hg)


def bleu_bruteforce(h, r, smoothing=False, eps=0.1):
    if not h or not r:
        return 0.0
    logs = []
    for n in range(1, 5):
        m, t = clipped_counts(h, r, n)
        if t == 0:
            continue
        if m == 0:
            if not smoothing:
                return 0.0
            logs.append(math.log(eps / (t + eps)))
        else:
            logs.append(math.log(m / t))
    bp = 1.0 if len(h) > len(r) else math.exp(1 - len(r) / len(h))
    return 100 * bp * math.exp(sum(logs) / len(logs))
