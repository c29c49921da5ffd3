"""Sentence-level BLEU-4, METEOR-lite, ROUGE-L and paired bootstrap resampling.

METEOR-lite aligns by exact match, then by a suffix-stripping stem; it has no
synonym or paraphrase stage, so its numbers are not comparable to full METEOR.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METRICS = ("bleu4", "meteor_lite", "rouge_l")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4_sentence(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Geometric mean of clipped 1..4-gram precisions times the brevity penalty.

    Orders 2-4 use add-one smoothing, ``(matches + 1) / (total + 1)``; the
    unigram precision is unsmoothed, so no overlap at all scores 0.
    """
    if not hyp or not ref:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        h, r = ngrams(hyp, n), ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if n == 1:
            if matches == 0:
                return 0.0
            p = matches / total
        else:
            p = (matches + 1) / (total + 1)
        log_sum += math.log(p)
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_sum / 4.0)


_SUFFIXES = ("ing", "es", "ed", "ly", "s")


def stem(token: str) -> str:
    """Strip the first matching suffix of ing/es/ed/ly/s if 3+ characters remain."""
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of alignment pairs contiguous in both hypothesis and reference."""
    chunks = 0
    prev = None
    for h, r in sorted(pairs):
        if prev is None or h != prev[0] + 1 or r != prev[1] + 1:
            chunks += 1
        prev = (h, r)
    return chunks


def _max_matching(keys_h: Sequence[str], keys_r: Sequence[str], free_h: set[int], free_r: set[int]) -> int:
    ch = Counter(keys_h[i] for i in free_h)
    cr = Counter(keys_r[j] for j in free_r)
    return sum(min(c, cr[k]) for k, c in ch.items())


def meteor_alignment(hyp: Sequence[str], ref: Sequence[str], node_limit: int = 200_000) -> list[tuple[int, int]]:
    """Maximal two-stage alignment (exact, then stem) with the fewest chunks.

    Searched depth-first over hypothesis positions with pruning; if the search
    exceeds ``node_limit`` the best alignment found so far is returned.
    """
    n_exact = _max_matching(hyp, ref, set(range(len(hyp))), set(range(len(ref))))
    hs, rs = [stem(t) for t in hyp], [stem(t) for t in ref]
    # stem matches are counted among tokens the exact stage leaves unmatched;
    # which positions remain does not change the count, so any maximal
    # exact matching gives the same total
    total = n_exact + _leftover_stem_matches(hyp, ref)
    best: dict = {"chunks": math.inf, "pairs": []}
    nodes = 0

    def options(i, used):
        exact = [j for j in range(len(ref)) if j not in used and ref[j] == hyp[i]]
        stems = [j for j in range(len(ref)) if j not in used and ref[j] != hyp[i] and rs[j] == hs[i]]
        return exact, stems

    def search(i, used, pairs, n_ex, chunks, last):
        nonlocal nodes
        nodes += 1
        if nodes > node_limit or chunks >= best["chunks"]:
            return
        remaining = len(hyp) - i
        if len(pairs) + remaining < total:
            return
        if i == len(hyp):
            if len(pairs) == total and n_ex == n_exact:
                best["chunks"], best["pairs"] = chunks, list(pairs)
            return
        exact, stems = options(i, used)
        cands = [(j, True) for j in exact] + [(j, False) for j in stems]
        # try contiguous continuation first, then left to right
        cands.sort(key=lambda c: (not (last is not None and last == (i - 1, c[0] - 1)), not c[1], c[0]))
        for j, is_exact in cands:
            cont = last is not None and last == (i - 1, j - 1)
            used.add(j)
            pairs.append((i, j))
            search(i + 1, used, pairs, n_ex + is_exact, chunks + (0 if cont else 1), (i, j))
            pairs.pop()
            used.discard(j)
        search(i + 1, used, pairs, n_ex, chunks, last)

    search(0, set(), [], 0, 0, None)
    return best["pairs"]


def _leftover_stem_matches(hyp: Sequence[str], ref: Sequence[str]) -> int:
    ch, cr = Counter(hyp), Counter(ref)
    left_h: Counter = Counter()
    left_r: Counter = Counter()
    for tok, c in ch.items():
        left_h[stem(tok)] += c - min(c, cr[tok])
    for tok, c in cr.items():
        left_r[stem(tok)] += c - min(c, ch[tok])
    return sum(min(c, left_r[k]) for k, c in left_h.items())


def meteor_lite(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """``F_mean * (1 - 0.5 * (chunks / matches) ** 3)`` with ``F_mean = 10PR / (R + 9P)``."""
    if not hyp or not ref:
        return 0.0
    pairs = meteor_alignment(hyp, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return f_mean * (1.0 - penalty)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[str], ref: Sequence[str], beta: float = 1.2) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    b2 = beta * beta
    return (1 + b2) * p * r / (r + b2 * p)


_SCORERS = {"bleu4": bleu4_sentence, "meteor_lite": meteor_lite, "rouge_l": rouge_l}


@dataclass
class EvalReport:
    per_sentence: dict[str, list[float]]
    means: dict[str, float]
    n: int

    def table_row(self, model: str, cxt: int | str) -> str:
        return f"{model} | {cxt} | {self.means['bleu4']:.4f} | {self.means['meteor_lite']:.4f} | {self.means['rouge_l']:.4f}"

    def to_dict(self) -> dict:
        return {"n": self.n, "means": self.means, "per_sentence": self.per_sentence}


TABLE_HEADER = "Model | Cxt | BLEU-4 | METEOR-lite | ROUGE-L"


def corpus_eval(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> EvalReport:
    """Arithmetic mean of sentence scores over ``(hypothesis, reference)`` pairs."""
    if not pairs:
        raise ValueError("corpus_eval needs at least one pair")
    per = {name: [fn(h, r) for h, r in pairs] for name, fn in _SCORERS.items()}
    return EvalReport(per, {k: float(np.mean(v)) for k, v in per.items()}, len(pairs))


@dataclass
class BootstrapVerdict:
    score_a: float
    score_b: float
    win_fraction_a: float
    win_fraction_b: float
    n_resamples: int
    significant: bool
    better: str | None = None  # "A", "B" or None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "score_a": self.score_a,
            "score_b": self.score_b,
            "win_fraction_a": self.win_fraction_a,
            "win_fraction_b": self.win_fraction_b,
            "n_resamples": self.n_resamples,
            "significant": self.significant,
            "better": self.better,
        }


def bootstrap_compare(scores_a: Sequence[float], scores_b: Sequence[float], n_resamples: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapVerdict:
    """Paired bootstrap: resample sentence indices, count strict wins of each side."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired score lists differ in length: {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ValueError("bootstrap_compare needs at least one pair")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(a), size=(n_resamples, len(a)))
    mean_a = a[idx].mean(axis=1)
    mean_b = b[idx].mean(axis=1)
    win_a = float((mean_a > mean_b).sum()) / n_resamples
    win_b = float((mean_b > mean_a).sum()) / n_resamples
    better = "A" if win_a >= level else "B" if win_b >= level else None
    return BootstrapVerdict(float(a.mean()), float(b.mean()), win_a, win_b, n_resamples, better is not None, better)
