"""Detection F-measure with an acceptance zone, word error rate, bag-of-words F."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

ZONE_GRID = (0.003, 0.01, 0.03, 0.1)


@dataclass(frozen=True)
class AcceptanceZone:
    T: float
    K: int = 3

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("acceptance zone must be positive")
        if self.K not in (2, 3, 4):
            raise ValueError(f"K must be 2, 3 or 4, got {self.K}")


def f_measure(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def greedy_nearest_pairs(hyps, refs):
    """One-to-one pairs taken in ascending Euclidean distance order.

    Ties are broken by (reference index, hypothesis index) so the result does
    not depend on floating-point sort instability.
    """
    if len(hyps) == 0 or len(refs) == 0:
        return []
    d = np.sqrt(((hyps[:, None, :] - refs[None, :, :]) ** 2).sum(-1))
    h_idx, r_idx = np.meshgrid(np.arange(len(hyps)), np.arange(len(refs)), indexing="ij")
    order = np.lexsort((h_idx.ravel(), r_idx.ravel(), d.ravel()))
    used_h, used_r, pairs = set(), set(), []
    for flat in order:
        h, r = divmod(int(flat), len(refs))
        if h in used_h or r in used_r:
            continue
        used_h.add(h)
        used_r.add(r)
        pairs.append((h, r))
        if len(pairs) == min(len(hyps), len(refs)):
            break
    return pairs


def detection_fmeasure(hyps, refs, zone: AcceptanceZone):
    """(precision, recall, F) of hypotheses against references.

    Coordinates are normalized by page width; a matched pair is correct when
    every coordinate differs by less than ``zone.T``.
    """
    hyps = np.asarray(hyps, dtype=np.float64).reshape(-1, zone.K) if len(hyps) else np.zeros((0, zone.K))
    refs = np.asarray(refs, dtype=np.float64).reshape(-1, zone.K) if len(refs) else np.zeros((0, zone.K))
    for name, arr in (("hypotheses", hyps), ("references", refs)):
        if arr.shape[1] != zone.K:
            raise ValueError(f"{name} have {arr.shape[1]} coordinates, zone expects {zone.K}")
    pairs = greedy_nearest_pairs(hyps, refs)
    correct = sum(1 for h, r in pairs if np.all(np.abs(hyps[h] - refs[r]) < zone.T))
    p = correct / len(hyps) if len(hyps) else 0.0
    r = correct / len(refs) if len(refs) else 0.0
    return p, r, f_measure(p, r)


def edit_distance(a, b) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hypothesis: str, reference: str) -> float:
    ref = reference.split()
    if not ref:
        raise ValueError("reference has no words; WER is undefined")
    return edit_distance(hypothesis.split(), ref) / len(ref)


def bow_fmeasure(hypothesis: str, reference: str):
    hyp, ref = Counter(hypothesis.split()), Counter(reference.split())
    inter = sum((hyp & ref).values())
    n_hyp, n_ref = sum(hyp.values()), sum(ref.values())
    p = inter / n_hyp if n_hyp else 0.0
    r = inter / n_ref if n_ref else 0.0
    return p, r, f_measure(p, r)
