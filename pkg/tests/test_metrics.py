import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhred.metrics import (
    TABLE_HEADER,
    bleu4_sentence,
    bootstrap_compare,
    corpus_eval,
    count_chunks,
    lcs_length,
    meteor_lite,
    rouge_l,
    stem,
)


def brute_bleu(hyp, ref):
    """List-based reference: clip by deleting matched reference n-grams one at a time."""
    if not hyp or not ref:
        return 0.0
    logs = []
    for n in range(1, 5):
        hyp_grams = [tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1)]
        pool = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
        hits = 0
        for g in hyp_grams:
            if g in pool:
                pool.remove(g)
                hits += 1
        if n == 1:
            if hits == 0:
                return 0.0
            logs.append(math.log(hits / len(hyp_grams)))
        else:
            logs.append(math.log((hits + 1) / (len(hyp_grams) + 1)))
    bp = min(1.0, math.exp(1 - len(ref) / len(hyp)))
    return bp * math.exp(sum(logs) / 4)


def brute_lcs(a, b):
    """Longest common subsequence by enumerating every subsequence of ``a``."""
    best = 0
    for r in range(len(a) + 1):
        for idx in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(tok in it for tok in sub):
                best = max(best, r)
    return best


def brute_rouge(hyp, ref, beta=1.2):
    if not hyp or not ref:
        return 0.0
    lcs = brute_lcs(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def brute_meteor(hyp, ref):
    """Enumerate every one-to-one alignment: most exact matches, then most matches, then fewest chunks."""
    best = None
    ref_slots = list(range(len(ref)))
    for choice in itertools.product([None] + ref_slots, repeat=len(hyp)):
        used = [j for j in choice if j is not None]
        if len(used) != len(set(used)):
            continue
        pairs = [(i, j) for i, j in enumerate(choice) if j is not None]
        if not all(hyp[i] == ref[j] or stem(hyp[i]) == stem(ref[j]) for i, j in pairs):
            continue
        exact = sum(hyp[i] == ref[j] for i, j in pairs)
        key = (exact, len(pairs), -count_chunks(pairs))
        if best is None or key > best[0]:
            best = (key, pairs)
    pairs = best[1]
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(hyp), m / len(ref)
    return 10 * p * r / (r + 9 * p) * (1 - 0.5 * (count_chunks(pairs) / m) ** 3)


TOKENS = st.lists(st.sampled_from(["a", "b", "c", "the", "cat"]), min_size=0, max_size=9)


@settings(max_examples=200, deadline=None)
@given(TOKENS, TOKENS)
def test_bleu_matches_brute_force(hyp, ref):
    assert abs(bleu4_sentence(hyp, ref) - brute_bleu(hyp, ref)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("xyz"), max_size=8), st.lists(st.sampled_from("xyz"), max_size=8))
def test_rouge_matches_brute_force(hyp, ref):
    assert lcs_length(hyp, ref) == brute_lcs(hyp, ref)
    assert abs(rouge_l(hyp, ref) - brute_rouge(hyp, ref)) <= 1e-12


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.sampled_from(["cat", "cats", "sit", "sits", "sitting", "the"]), min_size=1, max_size=5),
    st.lists(st.sampled_from(["cat", "cats", "sit", "sits", "sitting", "the"]), min_size=1, max_size=5),
)
def test_meteor_matches_exhaustive_alignment(hyp, ref):
    assert meteor_lite(hyp, ref) == pytest.approx(brute_meteor(hyp, ref), abs=1e-12)


def test_bleu_repeated_unigram_example():
    hyp, ref = "the the the cat".split(), "the cat sat".split()
    # clipped unigrams 2/4, bigrams (1+1)/(3+1), trigrams (0+1)/(2+1), 4-grams (0+1)/(1+1), no brevity penalty
    expected = math.exp((math.log(1 / 2) + math.log(1 / 2) + math.log(1 / 3) + math.log(1 / 2)) / 4)
    assert bleu4_sentence(hyp, ref) == pytest.approx(expected, abs=1e-12)
    assert bleu4_sentence(hyp, ref) == pytest.approx(brute_bleu(hyp, ref), abs=1e-12)


def test_rouge_worked_example():
    assert rouge_l(["the", "cat"], ["the", "cat", "sat"]) == pytest.approx(0.7722, abs=5e-5)


def test_meteor_stem_example():
    assert stem("cats") == "cat" and stem("sits") == "sit" and stem("is") == "is"
    assert meteor_lite(["cats", "sit"], ["cat", "sits"]) == pytest.approx(0.9375, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=12))
def test_identity_scores(sent):
    assert bleu4_sentence(sent, sent) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l(sent, sent) == pytest.approx(1.0, abs=1e-12)
    assert meteor_lite(sent, sent) == pytest.approx(1 - 0.5 / len(sent) ** 3, abs=1e-12)


def test_disjoint_and_empty():
    assert bleu4_sentence(["a"], ["b"]) == 0.0 and rouge_l(["a"], ["b"]) == 0.0 and meteor_lite(["a"], ["b"]) == 0.0
    assert bleu4_sentence([], ["a"]) == 0.0 and meteor_lite(["a"], []) == 0.0


def test_brevity_penalty():
    ref = ["a", "b", "c", "d"]
    expected = math.exp(1 - 4 / 2) * math.exp((math.log(1.0) + math.log(2 / 2) + 2 * math.log(1 / 1)) / 4)
    assert bleu4_sentence(["a", "b"], ref) == pytest.approx(expected, abs=1e-12)


def test_corpus_eval_means_and_row():
    rep = corpus_eval([(["a"], ["a"]), (["b"], ["c"])])
    assert rep.n == 2 and rep.means["bleu4"] == 0.5 and rep.means["rouge_l"] == 0.5
    assert rep.table_row("M-HRED--attn", 5).startswith("M-HRED--attn | 5 | 0.5000")
    assert TABLE_HEADER.count("|") == rep.table_row("x", 2).count("|")
    with pytest.raises(ValueError):
        corpus_eval([])


def _reference_bootstrap(a, b, n_resamples, seed, level=0.95):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(a), size=(n_resamples, len(a)))
    win_a = win_b = 0
    for row in idx:
        ma = sum(a[i] for i in row) / len(row)
        mb = sum(b[i] for i in row) / len(row)
        win_a += ma > mb
        win_b += mb > ma
    return win_a / n_resamples, win_b / n_resamples


def test_bootstrap_matches_loop_reference():
    rng = np.random.default_rng(11)
    a, b = rng.random(40), rng.random(40) * 0.9
    v = bootstrap_compare(a, b, n_resamples=300, seed=5)
    assert (v.win_fraction_a, v.win_fraction_b) == pytest.approx(_reference_bootstrap(a.tolist(), b.tolist(), 300, 5), abs=1e-15)


def test_bootstrap_identical_and_dominant():
    a = np.linspace(0, 1, 30)
    same = bootstrap_compare(a, a)
    assert not same.significant and same.win_fraction_a == 0.0 and same.better is None
    dom = bootstrap_compare(a + 0.1, a)
    assert dom.significant and dom.better == "A" and dom.win_fraction_a == 1.0
    assert bootstrap_compare(a, a + 0.1).better == "B"


def test_bootstrap_is_symmetric():
    rng = np.random.default_rng(12)
    a, b = rng.random(25), rng.random(25)
    ab, ba = bootstrap_compare(a, b, seed=3), bootstrap_compare(b, a, seed=3)
    assert ab.win_fraction_a == ba.win_fraction_b and ab.win_fraction_b == ba.win_fraction_a


def test_bootstrap_errors():
    with pytest.raises(ValueError, match="length"):
        bootstrap_compare([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        bootstrap_compare([1.0], [1.0], n_resamples=10)


def test_permuting_pairs_keeps_means_and_reindexed_bootstrap():
    rng = np.random.default_rng(13)
    a, b = rng.random(30), rng.random(30)
    perm = rng.permutation(30)
    pairs = [([str(i)], [str(i % 7)]) for i in range(30)]
    before, after = corpus_eval(pairs).means, corpus_eval([pairs[i] for i in perm]).means
    assert all(before[k] == pytest.approx(after[k], abs=1e-15) for k in before)
    # resampling the permuted lists at positions idx is resampling the originals at perm[idx]
    idx = np.random.default_rng(4).integers(0, 30, size=(200, 30))
    ref_a = (a[perm[idx]].mean(axis=1) > b[perm[idx]].mean(axis=1)).mean()
    assert bootstrap_compare(a[perm], b[perm], n_resamples=200, seed=4).win_fraction_a == ref_a
