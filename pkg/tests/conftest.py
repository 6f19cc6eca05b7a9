"""Shared oracles and helpers for the test suite.

The finite-difference oracle here is deliberately independent of the
gradient tape: it evaluates the forward computation as a black box and
perturbs raw arrays in place.
"""

import numpy as np
import pytest


def fd_gradients(f, arrays, eps=1e-5):
    """Central-difference gradients of scalar ``f()`` w.r.t. each array.

    ``f`` is a zero-argument closure that reads ``arrays`` (mutated in
    place) and returns a float.  64-bit arrays only.
    """
    grads = []
    for a in arrays:
        assert a.dtype == np.float64
        g = np.zeros_like(a)
        flat, gf = a.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, tol=1e-6):
    """Relative-error check: |a - n| <= tol * max(1, |a|, |n|) elementwise."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / scale
    assert err.max() <= tol, f"gradient mismatch: max relative error {err.max():.3e}"


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)


ACUTE, GRAVE, DOT = "́", "̀", "̇"


def toy_corpus(n_sentences, seed, mark_rate=0.35, letters="abcdef",
               words_range=(2, 4), chars_range=(1, 4)):
    """Small random diacritized sentences (marks placed independently)."""
    rng = np.random.default_rng(seed)
    marks = ["", ACUTE, GRAVE, DOT]
    sentences = []
    for _ in range(n_sentences):
        words = []
        for _ in range(rng.integers(*words_range, endpoint=True)):
            chars = []
            for _ in range(rng.integers(*chars_range, endpoint=True)):
                ch = letters[rng.integers(0, len(letters))]
                if rng.random() < mark_rate:
                    ch += marks[rng.integers(1, len(marks))]
                chars.append(ch)
            words.append("".join(chars))
        sentences.append(" ".join(words))
    return sentences
