"""HE-only inference and the downstream evaluation protocols.

Covers slide embedding without any cross-stain machinery (the deployment
path), rank metrics (AUC, concordance index), the k-shot linear-probe
protocol, survival cross-validation with a Cox linear risk model, and
retrieval diagnostics that quantify patch- and slide-level cross-stain
alignment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .data import CaseSet, PatchBag, StainId
from .models import (
    AdapterParams, FusionParams, MilParams,
    adapter_forward, fusion_forward, mil_forward,
)

__all__ = [
    "SlideEmbedding", "EvalReport",
    "embed_he_only", "embed_cases",
    "auc", "c_index",
    "fit_logistic_probe", "kshot_probe",
    "fit_cox_risk", "survival_cv",
    "retrieval_diagnostics", "mean_pool_embeddings", "config_hash",
]

PROBE_STEPS = 500
PROBE_LR = 0.1
PROBE_WEIGHT_DECAY = 1e-4
COX_STEPS = 500
COX_LR = 0.01


@dataclass
class SlideEmbedding:
    case_id: str
    stain: StainId
    vector: np.ndarray


@dataclass
class EvalReport:
    task: str
    mean: float
    std: float
    seeds: list[int]
    values: list[float]
    params: dict
    config_hash: str

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "mean": self.mean,
            "std": self.std,
            "seeds": self.seeds,
            "values": self.values,
            "config_hash": self.config_hash,
        }
        doc.update(self.params)
        return json.dumps(doc, sort_keys=True)


def config_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def embed_he_only(
    bag: PatchBag,
    adapter: AdapterParams,
    mil: MilParams,
    case_id: Optional[str] = None,
) -> SlideEmbedding:
    """Deployment path: adapter then MIL on the HE bag alone.

    No fusion, no IHC input; the output cannot depend on any other stain.
    """
    if bag.stain is not StainId.HE:
        raise ValueError(f"embed_he_only requires an HE bag, got {bag.stain.name}")
    adapted, _ = adapter_forward(bag.embeddings, adapter)
    vector, _, _ = mil_forward(adapted, mil)
    return SlideEmbedding(
        case_id=case_id if case_id is not None else bag.slide_id,
        stain=StainId.HE,
        vector=vector,
    )


def embed_cases(
    cases: CaseSet, adapter: AdapterParams, mil: MilParams
) -> list[SlideEmbedding]:
    return [
        embed_he_only(case.he, adapter, mil, case_id=case.case_id)
        for case in cases.cases
    ]


def mean_pool_embeddings(cases: CaseSet) -> np.ndarray:
    """Raw-feature baseline: per-case mean of the HE patch embeddings."""
    return np.stack([case.he.embeddings.mean(axis=0) for case in cases.cases])


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(positive scores higher), ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc requires both classes present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def c_index(
    risks: Sequence[float], times: Sequence[float], events: Sequence[bool]
) -> float:
    """Harrell's concordance over comparable pairs.

    A pair (i, j) is comparable when subject i has an observed event and
    t_i < t_j; it is concordant when risk_i > risk_j, with ties counted half.
    Pairs whose earlier subject is censored are not comparable.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not (risks.shape == times.shape == events.shape) or risks.ndim != 1:
        raise ValueError("risks, times, events must be equal-length vectors")
    comparable = events[:, None] & (times[:, None] < times[None, :])
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise ValueError("c_index: no comparable pairs")
    concordant = ((risks[:, None] > risks[None, :]) & comparable).sum()
    tied = ((risks[:, None] == risks[None, :]) & comparable).sum()
    return float((concordant + 0.5 * tied) / n_comp)


def fit_logistic_probe(
    x: np.ndarray,
    y: np.ndarray,
    steps: int = PROBE_STEPS,
    lr: float = PROBE_LR,
    weight_decay: float = PROBE_WEIGHT_DECAY,
):
    """Full-batch gradient descent on binary cross-entropy; returns (w, b).

    The L2 penalty applies to the weights only, not the intercept.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(steps):
        p = ops.sigmoid(x @ w + b)
        err = p - y
        gw = x.T @ err / n + weight_decay * w
        gb = float(err.mean())
        w -= lr * gw
        b -= lr * gb
    return w, b


def kshot_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    k: int,
    seeds: Sequence[int],
    task: str = "kshot",
) -> EvalReport:
    """k-shot linear-probe AUC, repeated over probe seeds.

    Per seed, k cases per class train a logistic probe on the frozen
    embeddings; the held-out remainder is scored. Classes with fewer than k
    cases, or an empty/one-class test remainder, are errors.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if x.shape[0] != y.shape[0]:
        raise ValueError("embeddings and labels disagree on case count")
    idx_pos = np.nonzero(y == 1)[0]
    idx_neg = np.nonzero(y == 0)[0]
    for name, idx in (("positive", idx_pos), ("negative", idx_neg)):
        if idx.size < k:
            raise ValueError(f"{name} class has {idx.size} cases, need k={k}")

    values = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        train = np.concatenate([
            rng.choice(idx_pos, size=k, replace=False),
            rng.choice(idx_neg, size=k, replace=False),
        ])
        test = np.setdiff1d(np.arange(y.size), train)
        if test.size == 0 or len(np.unique(y[test])) < 2:
            raise ValueError(
                f"k={k} leaves a degenerate test set (seed {seed}); reduce k"
            )
        w, b = fit_logistic_probe(x[train], y[train])
        values.append(auc(x[test] @ w + b, y[test]))

    values_arr = np.array(values)
    return EvalReport(
        task=task,
        mean=float(values_arr.mean()),
        std=float(values_arr.std()),
        seeds=list(seeds),
        values=[float(v) for v in values],
        params={"k": k},
        config_hash=config_hash({"task": task, "k": k, "seeds": list(seeds)}),
    )


def fit_cox_risk(
    x: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    steps: int = COX_STEPS,
    lr: float = COX_LR,
) -> np.ndarray:
    """Linear risk score by gradient descent on the Cox partial likelihood.

    Breslow handling of tied times; the gradient is normalized by the event
    count so the step size is insensitive to cohort size.
    """
    x = np.asarray(x, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n, d = x.shape
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("cox fit: no events in training data")
    at_risk = times[None, :] >= times[:, None]  # row i: risk set of subject i
    event_rows = np.nonzero(events)[0]
    w = np.zeros(d)
    for _ in range(steps):
        r = x @ w
        r = r - r.max()
        e = np.exp(r)
        grad = np.zeros(d)
        for i in event_rows:
            mask = at_risk[i]
            denom = e[mask].sum()
            weighted = (e[mask][:, None] * x[mask]).sum(axis=0) / denom
            grad += weighted - x[i]
        w -= lr * grad / n_events
    return w


def survival_cv(
    embeddings: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    folds: int = 5,
    seed: int = 0,
    task: str = "survival",
) -> EvalReport:
    """Seeded k-fold cross-validated concordance of a linear Cox risk."""
    x = np.asarray(embeddings, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = x.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2 (one fold leaves no held-out set)")
    if n < folds:
        raise ValueError(f"{n} cases cannot fill {folds} folds")
    if int(events.sum()) < folds:
        raise ValueError("need at least one event per fold on average")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    chunks = np.array_split(perm, folds)
    values = []
    for f, test in enumerate(chunks):
        train = np.setdiff1d(perm, test)
        if not events[train].any():
            raise ValueError(f"fold {f}: training split has no events")
        if not events[test].any():
            raise ValueError(f"fold {f}: held-out split has no events")
        w = fit_cox_risk(x[train], times[train], events[train])
        values.append(c_index(x[test] @ w, times[test], events[test]))

    values_arr = np.array(values)
    return EvalReport(
        task=task,
        mean=float(values_arr.mean()),
        std=float(values_arr.std()),
        seeds=[seed],
        values=[float(v) for v in values],
        params={"folds": folds},
        config_hash=config_hash({"task": task, "folds": folds, "seed": seed}),
    )


def retrieval_diagnostics(
    cases: CaseSet,
    adapter: AdapterParams,
    mil: Optional[MilParams] = None,
    fusion: Optional[FusionParams] = None,
) -> dict:
    """Cross-stain retrieval accuracy at patch and slide level.

    Patch level: for every HE patch (after the adapter), the nearest IHC
    patch by cosine within the same case; a hit means it sits at the anchor's
    grid position. Slide level (needs ``mil``): for every HE slide embedding,
    the nearest IHC slide embedding in the whole dataset; a hit means it
    belongs to the same case. The HE side uses the fusion path when
    ``fusion`` is given, otherwise the HE-only inference path.
    """
    hits = 0
    total = 0
    for case in cases.cases:
        if not case.ihc_stains:
            raise ValueError(f"case {case.case_id}: retrieval needs IHC bags")
        adapted, _ = adapter_forward(case.he.embeddings, adapter)
        a_hat = ops.l2_normalize(adapted)
        cand = np.concatenate(
            [case.bags[s].embeddings for s in case.ihc_stains], axis=0
        )
        cand_pos = np.concatenate(
            [np.arange(case.n_patches) for _ in case.ihc_stains]
        )
        c_hat = ops.l2_normalize(cand)
        top = np.argmax(a_hat @ c_hat.T, axis=1)
        hits += int((cand_pos[top] == np.arange(case.n_patches)).sum())
        total += case.n_patches
    report = {"n_cases": len(cases), "patch_top1": hits / total}

    if mil is None:
        return report

    he_embs = []
    ihc_embs = []
    ihc_case = []
    for ci, case in enumerate(cases.cases):
        adapted, _ = adapter_forward(case.he.embeddings, adapter)
        if fusion is not None:
            stack = np.stack(
                [adapted] + [case.bags[s].embeddings for s in case.ihc_stains]
            )
            he_rows, _ = fusion_forward(stack, fusion)
        else:
            he_rows = adapted
        e_he, _, _ = mil_forward(he_rows, mil)
        he_embs.append(e_he)
        for stain in case.ihc_stains:
            e_c, _, _ = mil_forward(case.bags[stain].embeddings, mil)
            ihc_embs.append(e_c)
            ihc_case.append(ci)

    he_hat = ops.l2_normalize(np.stack(he_embs))
    ihc_hat = ops.l2_normalize(np.stack(ihc_embs))
    ihc_case_arr = np.array(ihc_case)
    sims = he_hat @ ihc_hat.T  # (n_cases, n_ihc)
    top = np.argmax(sims, axis=1)
    same = ihc_case_arr[top] == np.arange(len(cases.cases))
    own_mask = ihc_case_arr[None, :] == np.arange(len(cases.cases))[:, None]
    aligned_mean = float(sims[own_mask].mean())
    cross_mean = float(sims[~own_mask].mean()) if (~own_mask).any() else 0.0
    report.update({
        "slide_top1": float(same.mean()),
        "cosine_gap": aligned_mean - cross_mean,
        "he_path": "fused" if fusion is not None else "he_only",
    })
    return report
