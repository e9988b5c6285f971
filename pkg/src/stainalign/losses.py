"""Contrastive objectives for patch-level and slide-level alignment.

Two losses drive pretraining: a weighted InfoNCE over spatially aligned
patch pairs (stage 1, trains the adapter) and a plain InfoNCE over per-stain
slide embeddings (stage 2, trains fusion + MIL). Scores are dot products of
l2-normalized embeddings so the temperature has a stable scale.

Every loss returns analytic gradients with respect to the raw (pre-
normalization) embeddings; the trainer routes them into whichever model
produced each embedding. Adaptive weights are treated as constants within an
iteration (no gradient flows through them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops

__all__ = [
    "info_nce", "info_nce_grads", "adaptive_weight",
    "ContrastiveBatch", "PatchAlignResult", "patch_alignment_loss",
    "SlideAlignResult", "slide_alignment_loss",
]


def _check_tau(tau: float) -> None:
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _nce_from_scores(pos_score: float, neg_scores: np.ndarray, tau: float):
    """Score-level InfoNCE: loss plus d/ds+ and d/ds- of the scores."""
    logits = np.concatenate([[pos_score], neg_scores]) / tau
    m = logits.max()
    e = np.exp(logits - m)
    z = e.sum()
    lse = np.log(z) + m
    loss = lse - logits[0]
    probs = e / z
    d_pos = (probs[0] - 1.0) / tau
    d_negs = probs[1:] / tau
    return loss, d_pos, d_negs


def info_nce(anchor: np.ndarray, positive: np.ndarray, negatives, tau: float) -> float:
    """InfoNCE for one anchor/positive pair against a set of negatives.

    Inputs are l2-normalized before scoring. With no negatives the loss is
    exactly 0.
    """
    return info_nce_grads(anchor, positive, negatives, tau)[0]


def info_nce_grads(anchor: np.ndarray, positive: np.ndarray, negatives, tau: float):
    """Returns (loss, g_anchor, g_positive, g_negatives) w.r.t. raw inputs."""
    _check_tau(tau)
    anchor = np.asarray(anchor)
    if anchor.size == 0:
        raise ValueError("empty anchor")
    positive = np.asarray(positive)
    negs = np.asarray(negatives, dtype=anchor.dtype)
    if negs.size == 0:
        negs = negs.reshape(0, anchor.shape[-1])

    a_hat = ops.l2_normalize(anchor)
    p_hat = ops.l2_normalize(positive)
    n_hat = ops.l2_normalize(negs) if negs.shape[0] else negs

    s_pos = float(a_hat @ p_hat)
    s_neg = n_hat @ a_hat if negs.shape[0] else np.zeros(0, dtype=anchor.dtype)
    loss, d_spos, d_sneg = _nce_from_scores(s_pos, s_neg, tau)

    g_ahat = d_spos * p_hat
    if negs.shape[0]:
        g_ahat = g_ahat + d_sneg @ n_hat
    g_phat = d_spos * a_hat
    g_nhat = d_sneg[:, None] * a_hat[None, :] if negs.shape[0] else np.zeros_like(negs)

    g_anchor = ops.l2_normalize_vjp(anchor, g_ahat)
    g_positive = ops.l2_normalize_vjp(positive, g_phat)
    g_negatives = ops.l2_normalize_vjp(negs, g_nhat) if negs.shape[0] else g_nhat
    return float(loss), g_anchor, g_positive, g_negatives


def _linear_ramp(u: float) -> float:
    return u


def _half_shifted(x) :
    return (1.0 + x) / 2.0


def adaptive_weight(
    t: int,
    total: int,
    cos_sim,
    schedule: Callable[[float], float] = _linear_ramp,
    similarity: Callable[[float], float] = _half_shifted,
):
    """Iteration-dependent pair weight: uniform early, similarity-driven late.

    ``(1 - g(t/T)) + g(t/T) * h(cos_sim)`` with the default linear ramp
    ``g(u) = u`` and affine ``h(x) = (1 + x) / 2``. Equals 1 at t=0 for any
    similarity, and h(cos_sim) at t=T. Accepts scalar or array ``cos_sim``.
    """
    if total <= 0:
        raise ValueError("total iteration count must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    u = schedule(t / total)
    return (1.0 - u) + u * similarity(cos_sim)


@dataclass
class ContrastiveBatch:
    """A patch-alignment mini-batch in pooled form.

    ``anchors`` is (K, D); ``positives`` is (C, K, D) with the aligned row of
    IHC stain c for anchor k; ``pos_mask`` marks which (c, k) pairs exist
    (cases may lack some stains). Negatives live in ``neg_pool`` (P, D) and
    are selected per anchor by ``neg_index`` (K, n), padded with -1. No
    selected negative may be an aligned positive of its anchor.
    """

    anchors: np.ndarray
    positives: np.ndarray
    neg_pool: np.ndarray
    neg_index: np.ndarray
    tau: float
    t: int
    total: int
    pos_mask: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.anchors = np.asarray(self.anchors)
        self.positives = np.asarray(self.positives)
        self.neg_pool = np.asarray(self.neg_pool)
        self.neg_index = np.asarray(self.neg_index, dtype=np.int64)
        if self.anchors.ndim != 2:
            raise ValueError("anchors must be (K, D)")
        c, k, d = self.positives.shape
        if (k, d) != self.anchors.shape or c < 1:
            raise ValueError("positives must be (C, K, D) matching anchors")
        if self.neg_index.ndim != 2 or self.neg_index.shape[0] != k:
            raise ValueError("neg_index must be (K, n)")
        if self.pos_mask is None:
            self.pos_mask = np.ones((c, k), dtype=bool)
        _check_tau(self.tau)
        if not 0 <= self.t <= self.total:
            raise ValueError(f"iteration {self.t} outside [0, {self.total}]")

    @classmethod
    def from_lists(cls, anchors, positives, negatives_per_anchor, tau, t, total):
        """Build pooled form from an explicit per-anchor negative list."""
        anchors = np.asarray(anchors)
        k = anchors.shape[0]
        pool_rows = []
        index_rows = []
        for negs in negatives_per_anchor:
            idx = []
            for v in negs:
                idx.append(len(pool_rows))
                pool_rows.append(np.asarray(v))
            index_rows.append(idx)
        n_max = max((len(r) for r in index_rows), default=0)
        neg_index = np.full((k, max(n_max, 1)), -1, dtype=np.int64)
        for i, row in enumerate(index_rows):
            neg_index[i, : len(row)] = row
        pool = (
            np.stack(pool_rows)
            if pool_rows
            else np.zeros((0, anchors.shape[1]), dtype=anchors.dtype)
        )
        return cls(
            anchors=anchors,
            positives=np.asarray(positives),
            neg_pool=pool,
            neg_index=neg_index,
            tau=tau,
            t=t,
            total=total,
        )


@dataclass
class PatchAlignResult:
    loss: float
    d_anchors: np.ndarray
    d_positives: np.ndarray
    d_neg_pool: np.ndarray
    weights: np.ndarray
    nce: np.ndarray


def patch_alignment_loss(
    batch: ContrastiveBatch, weights: Optional[np.ndarray] = None
) -> PatchAlignResult:
    """Adaptively weighted InfoNCE over aligned cross-stain patch pairs.

    For each IHC stain c the per-anchor losses are combined with weights
    normalized over the batch (``w / sum_k w``), then summed over stains; at
    t=0 all weights are 1 and the loss reduces to the sum over stains of the
    per-stain mean InfoNCE. Weights are stop-gradient; pass ``weights`` to
    pin them (finite-difference oracles need this).
    """
    a, p, pool = batch.anchors, batch.positives, batch.neg_pool
    c_stains, k, d = p.shape
    mask = batch.pos_mask

    a_hat = ops.l2_normalize(a)
    # rows of invalid (c, k) pairs may be arbitrary; substitute the anchor so
    # normalization cannot fail, then zero their weight
    p_safe = np.where(mask[:, :, None], p, a[None, :, :])
    p_hat = ops.l2_normalize(p_safe)
    have_pool = pool.shape[0] > 0
    pool_hat = ops.l2_normalize(pool) if have_pool else pool

    s_pos = np.einsum("kd,ckd->ck", a_hat, p_hat)

    idx = batch.neg_index
    valid = idx >= 0
    idx_safe = np.where(valid, idx, 0)
    if have_pool:
        s_full = a_hat @ pool_hat.T  # (K, P)
        s_neg = np.take_along_axis(s_full, idx_safe, axis=1)
    else:
        s_neg = np.zeros_like(idx_safe, dtype=a.dtype)

    dtype = a_hat.dtype
    tau = dtype.type(batch.tau)
    neg_logits = np.where(valid, s_neg / tau, dtype.type(-np.inf))
    logits = np.concatenate(
        [np.broadcast_to(s_pos[:, :, None] / tau, (c_stains, k, 1)),
         np.broadcast_to(neg_logits[None], (c_stains, k, neg_logits.shape[1]))],
        axis=2,
    )
    m = logits.max(axis=2, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=2, keepdims=True)
    lse = np.log(z[:, :, 0]) + m[:, :, 0]
    nce = lse - s_pos / tau  # (C, K)

    if weights is None:
        cos = np.clip(s_pos, -1.0, 1.0)
        w = adaptive_weight(batch.t, batch.total, cos)
    else:
        w = np.asarray(weights, dtype=a.dtype)
        if w.shape != (c_stains, k):
            raise ValueError(f"weights must be (C, K), got {w.shape}")
    w = np.where(mask, w, 0.0)

    w_sum = w.sum(axis=1)  # (C,)
    active = mask.any(axis=1)
    if np.any(active & (w_sum == 0.0)):
        raise ValueError("patch_alignment_loss: all pair weights vanished for a stain")
    coef = np.zeros_like(w)
    coef[active] = w[active] / w_sum[active, None]

    loss = float((coef * nce).sum())

    probs = e / z  # (C, K, 1+n)
    d_spos = coef * (probs[:, :, 0] - 1.0) / tau  # (C, K)
    d_sneg = np.einsum("ck,ckn->kn", coef, probs[:, :, 1:]) / tau
    d_sneg = np.where(valid, d_sneg, 0.0)

    g_ahat = np.einsum("ck,ckd->kd", d_spos, p_hat)
    g_phat = d_spos[:, :, None] * a_hat[None, :, :]
    if have_pool:
        ds_full = np.zeros_like(s_full)
        np.add.at(ds_full, (np.arange(k)[:, None], idx_safe), d_sneg)
        g_ahat = g_ahat + ds_full @ pool_hat
        g_poolhat = ds_full.T @ a_hat
        d_pool = ops.l2_normalize_vjp(pool, g_poolhat)
    else:
        d_pool = np.zeros_like(pool)

    d_anchors = ops.l2_normalize_vjp(a, g_ahat)
    d_positives = ops.l2_normalize_vjp(p_safe, g_phat)
    d_positives = np.where(mask[:, :, None], d_positives, 0.0)

    return PatchAlignResult(
        loss=loss,
        d_anchors=d_anchors,
        d_positives=d_positives,
        d_neg_pool=d_pool,
        weights=w,
        nce=nce,
    )


@dataclass
class SlideAlignResult:
    loss: float
    d_he: np.ndarray
    d_ihc: np.ndarray
    d_negatives: np.ndarray


def slide_alignment_loss(
    he_embedding: np.ndarray,
    ihc_embeddings: np.ndarray,
    negatives: np.ndarray,
    tau: float,
) -> SlideAlignResult:
    """Slide-level InfoNCE between the HE embedding and each IHC embedding.

    Returns the mean over the C stains, with the same negatives (slide
    embeddings of unrelated cases) shared across stains.
    """
    _check_tau(tau)
    he = np.asarray(he_embedding)
    ihc = np.asarray(ihc_embeddings)
    negs = np.asarray(negatives, dtype=he.dtype)
    if ihc.ndim != 2 or ihc.shape[0] < 1:
        raise ValueError("ihc_embeddings must be (C, D) with C >= 1")
    if negs.size == 0:
        negs = negs.reshape(0, he.shape[-1])
    c_stains = ihc.shape[0]

    e_hat = ops.l2_normalize(he)
    p_hat = ops.l2_normalize(ihc)
    n_hat = ops.l2_normalize(negs) if negs.shape[0] else negs

    s_pos = p_hat @ e_hat  # (C,)
    s_neg = n_hat @ e_hat if negs.shape[0] else np.zeros(0, dtype=he.dtype)

    loss = 0.0
    d_spos = np.zeros(c_stains, dtype=np.float64)
    d_sneg = np.zeros(s_neg.shape[0], dtype=np.float64)
    for c in range(c_stains):
        l_c, dp, dn = _nce_from_scores(float(s_pos[c]), s_neg, tau)
        loss += l_c
        d_spos[c] = dp
        d_sneg += dn
    loss /= c_stains
    d_spos = (d_spos / c_stains).astype(he.dtype)
    d_sneg = (d_sneg / c_stains).astype(he.dtype)

    g_ehat = d_spos @ p_hat
    if negs.shape[0]:
        g_ehat = g_ehat + d_sneg @ n_hat
    g_phat = d_spos[:, None] * e_hat[None, :]
    g_nhat = d_sneg[:, None] * e_hat[None, :] if negs.shape[0] else np.zeros_like(negs)

    d_he = ops.l2_normalize_vjp(he, g_ehat)
    d_ihc = ops.l2_normalize_vjp(ihc, g_phat)
    d_negs = ops.l2_normalize_vjp(negs, g_nhat) if negs.shape[0] else g_nhat
    return SlideAlignResult(loss=float(loss), d_he=d_he, d_ihc=d_ihc, d_negatives=d_negs)
