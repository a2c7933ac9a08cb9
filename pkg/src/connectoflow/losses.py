"""Composite training objective: classification + mask regularizers.

The forward pass always consumes masked inputs, so the classification and
mutual-information terms share one prediction; with weights (l1, l2, l3)
the total reduces to (1 + l1) * CE + l2 * SP + l3 * EN.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .diffcore import Value

_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 0.5     # mutual-information (masked CE) term
    lambda2: float = 1e-3    # L1 sparsity
    lambda3: float = 1e-4    # binary-entropy discreteness

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def _clamped(p: Value) -> Value:
    return dc.clip(p, _CLAMP, 1.0 - _CLAMP)


def ce_loss(p: Value, y: int, pos_weight: float = 1.0) -> Value:
    """Binary cross-entropy with probability clamping; optional positive-class weight."""
    p = _clamped(p)
    if y == 1:
        return dc.scale(dc.neg(dc.log(p)), pos_weight)
    return dc.neg(dc.log(dc.addc(dc.neg(p), 1.0)))


def mi_loss(p_masked: Value, y: int, pos_weight: float = 1.0) -> Value:
    """Mutual-information term: cross-entropy of the masked-input prediction."""
    return ce_loss(p_masked, y, pos_weight)


def sparsity_loss(px: Value, pa_per_subject: list[list[Value]]) -> Value:
    """||P_X||_1 + sum over existing edges of P_A, averaged per subject.

    ``pa_per_subject`` holds, for each subject, its per-timepoint edge
    probability vectors.
    """
    total = dc.sum_all(px)
    if pa_per_subject:
        pa_total = None
        for subject_edges in pa_per_subject:
            for evec in subject_edges:
                if evec.data.size == 0:
                    continue
                term = dc.sum_all(evec)
                pa_total = term if pa_total is None else dc.add(pa_total, term)
        if pa_total is not None:
            total = dc.add(total, dc.scale(pa_total, 1.0 / len(pa_per_subject)))
    return total


def binary_entropy(p: Value) -> Value:
    """Elementwise -[p log p + (1-p) log(1-p)], summed; probabilities clamped."""
    p = _clamped(p)
    one_minus = dc.addc(dc.neg(p), 1.0)
    ent = dc.neg(dc.add(dc.mul(p, dc.log(p)), dc.mul(one_minus, dc.log(one_minus))))
    return dc.sum_all(ent)


def entropy_loss(px: Value, pa_per_subject: list[list[Value]]) -> Value:
    """Discreteness pressure on P_X and P_A (P_A averaged per subject)."""
    total = binary_entropy(px)
    if pa_per_subject:
        pa_total = None
        for subject_edges in pa_per_subject:
            for evec in subject_edges:
                if evec.data.size == 0:
                    continue
                term = binary_entropy(evec)
                pa_total = term if pa_total is None else dc.add(pa_total, term)
        if pa_total is not None:
            total = dc.add(total, dc.scale(pa_total, 1.0 / len(pa_per_subject)))
    return total


def total_loss(ce: Value, mi: Value, sp: Value, en: Value, w: LossWeights) -> Value:
    """L = CE + l1 * MI + l2 * SP + l3 * EN."""
    out = ce
    if w.lambda1 != 0.0:
        out = dc.add(out, dc.scale(mi, w.lambda1))
    if w.lambda2 != 0.0:
        out = dc.add(out, dc.scale(sp, w.lambda2))
    if w.lambda3 != 0.0:
        out = dc.add(out, dc.scale(en, w.lambda3))
    return out


def batch_objective(ce_losses: list[Value], px: Value,
                    pa_per_subject: list[list[Value]], w: LossWeights,
                    ) -> Value:
    """Mean (1 + l1) * CE over the batch plus the shared mask regularizers.

    Mathematically identical to combining ``sparsity_loss`` / ``entropy_loss``
    with ``total_loss``; the P_A terms are stacked into one vector so the tape
    stays small on large batches.
    """
    ce_total = ce_losses[0]
    for term in ce_losses[1:]:
        ce_total = dc.add(ce_total, term)
    n = len(ce_losses)
    out = dc.scale(ce_total, (1.0 + w.lambda1) / n)
    if w.lambda2 == 0.0 and w.lambda3 == 0.0:
        return out
    all_edges = [evec for subject in pa_per_subject for evec in subject if evec.data.size]
    stacked = dc.concat_rows(all_edges) if all_edges else None
    n_subjects = max(len(pa_per_subject), 1)
    if w.lambda2 != 0.0:
        sp = dc.sum_all(px)
        if stacked is not None:
            sp = dc.add(sp, dc.scale(dc.sum_all(stacked), 1.0 / n_subjects))
        out = dc.add(out, dc.scale(sp, w.lambda2))
    if w.lambda3 != 0.0:
        en = binary_entropy(px)
        if stacked is not None:
            en = dc.add(en, dc.scale(binary_entropy(stacked), 1.0 / n_subjects))
        out = dc.add(out, dc.scale(en, w.lambda3))
    return out
