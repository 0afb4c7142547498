"""Connectionist temporal classification with an end-of-line symbol.

Class index 0 is the blank, indices 1..|symbols| are the alphabet symbols and
the last index is EOL. Training targets are ``encode(text) + [eol]``; decoding
stops at the first EOL.
"""
from __future__ import annotations

import itertools
import string

import numpy as np

NEG_INF = -np.inf
TOY_SYMBOLS = string.ascii_uppercase + string.digits + " "


class InfeasibleAlignment(ValueError):
    pass


class Alphabet:
    def __init__(self, symbols=TOY_SYMBOLS):
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in alphabet")
        self.symbols = list(symbols)
        self.blank = 0
        self.eol = len(self.symbols) + 1
        self._index = {s: i + 1 for i, s in enumerate(self.symbols)}

    @property
    def n_classes(self):
        return len(self.symbols) + 2

    def encode(self, text, eol=True):
        try:
            ids = [self._index[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in alphabet") from None
        return ids + [self.eol] if eol else ids

    def decode(self, ids):
        return "".join(self.symbols[i - 1] for i in ids)


def min_frames(target) -> int:
    """Shortest input that can emit ``target`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _logsumexp(*arrs):
    m = np.maximum.reduce(arrs)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(sum(np.exp(a - safe) for a in arrs))


def _extended(target, blank=0):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward(logp, target, blank=0):
    """Log-space alpha/beta over the blank-augmented target.

    logp: (T, C) log posteriors. Returns (log_alpha, log_beta, ext).
    """
    T = logp.shape[0]
    ext = _extended(target, blank)
    S = len(ext)
    # s may skip from s-2 when ext[s] is a label different from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    la = np.full((T, S), NEG_INF)
    lb = np.full((T, S), NEG_INF)
    la[0, 0] = logp[0, ext[0]]
    if S > 1:
        la[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = la[t - 1]
        s1 = np.full(S, NEG_INF)
        s1[1:] = prev[:-1]
        s2 = np.full(S, NEG_INF)
        s2[2:] = prev[:-2]
        s2[~skip] = NEG_INF
        la[t] = _logsumexp(prev, s1, s2) + logp[t, ext]
    lb[T - 1, S - 1] = 0.0
    if S > 1:
        lb[T - 1, S - 2] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = lb[t + 1] + logp[t + 1, ext]
        s1 = np.full(S, NEG_INF)
        s1[:-1] = nxt[1:]
        s2 = np.full(S, NEG_INF)
        s2[:-2] = nxt[2:]
        s2[~skip_next] = NEG_INF
        lb[t] = _logsumexp(nxt, s1, s2)
    return la, lb, ext


def ctc_log_likelihood(logp, target, blank=0):
    la, _, _ = ctc_forward_backward(logp, target, blank)
    S = la.shape[1]
    tail = la[-1, S - 2:] if S > 1 else la[-1, :]
    return float(_logsumexp(*tail))


def log_softmax(scores):
    m = scores.max(axis=-1, keepdims=True)
    z = scores - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def ctc_loss_from_logits(scores, target, blank=0):
    """Negative log-likelihood and its gradient w.r.t. pre-softmax scores (T, C)."""
    target = list(target)
    T = scores.shape[0]
    if min_frames(target) > T:
        raise InfeasibleAlignment(
            f"target of length {len(target)} needs {min_frames(target)} frames, got {T}")
    logp = log_softmax(np.asarray(scores, dtype=np.float64))
    la, lb, ext = ctc_forward_backward(logp, target, blank)
    S = len(ext)
    ll = float(_logsumexp(*(la[-1, S - 2:] if S > 1 else la[-1, :])))
    if not np.isfinite(ll):
        raise InfeasibleAlignment("target has zero probability under these posteriors")
    # occupancy of each class per frame
    occ_ext = np.exp(la + lb - ll)
    occ = np.zeros_like(logp)
    for s in range(S):
        occ[:, ext[s]] += occ_ext[:, s]
    grad = np.exp(logp) - occ
    return -ll, grad


def ctc_loss(posteriors, target, blank=0):
    """CTC negative log-likelihood of ``target`` under per-frame posteriors.

    The returned gradient is with respect to the pre-softmax scores that
    produced ``posteriors`` (softmax is shift invariant, so log-posteriors
    serve as scores).
    """
    p = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return ctc_loss_from_logits(np.log(p), target, blank)


def collapse(path, blank=0):
    return [k for k, _ in itertools.groupby(path) if k != blank]


def ctc_brute_force(posteriors, target, blank=0, limit=10**6):
    """Exact likelihood by enumerating every frame labelling. Small inputs only."""
    p = np.asarray(posteriors, dtype=np.float64)
    T, C = p.shape
    if C ** T > limit:
        raise ValueError(f"{C}^{T} paths exceeds enumeration limit {limit}")
    target = list(target)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            total += float(np.prod(p[np.arange(T), path]))
    return total


def best_path(posteriors, alphabet: Alphabet):
    """Greedy decode to class ids: argmax, merge repeats, drop blanks, stop at EOL."""
    ids = collapse(np.argmax(posteriors, axis=1).tolist(), alphabet.blank)
    if alphabet.eol in ids:
        ids = ids[:ids.index(alphabet.eol)]
    return ids


def best_path_decode(posteriors, alphabet: Alphabet) -> str:
    return alphabet.decode(best_path(posteriors, alphabet))
