"""Two-stage pretraining orchestration.

Stage 1 trains the adapter on HE patches with the weighted patch-alignment
objective; aligned IHC rows are the positives and every same-batch patch at a
different grid position is a candidate negative. Stage 2 freezes the adapter
and trains the fusion block and the MIL aggregator jointly with the
slide-alignment objective, using the other cases in the batch as negatives.

Everything is driven by explicitly seeded generators, so a fixed config
yields bitwise-identical checkpoints and logs across runs on one platform.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .data import CaseSet, IHC_STAINS
from .losses import ContrastiveBatch, patch_alignment_loss, slide_alignment_loss
from .models import (
    AdapterParams, FusionParams, MilParams, Param,
    adapter_forward, adapter_backward,
    fusion_forward, fusion_backward,
    mil_forward, mil_backward,
    init_adapter, init_fusion, init_mil,
)

__all__ = [
    "TrainConfig", "AdamState", "cosine_lr", "adamw_step",
    "Stage1Result", "Stage2Result", "train_stage1", "train_stage2",
    "write_loss_log",
]

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 120
    warmup_epochs: int = 5
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    batch_cases: int = 24
    tau: float = 0.07
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    n_neg: int = 256
    seed: int = 0
    heads: int = 4
    d_hidden: Optional[int] = None  # adapter hidden width; None = embedding dim
    l_attn: int = 256
    grad_clip: float = 5.0
    dropout: float = 0.0
    # apply the adapter to IHC rows too (default: HE only)
    adapter_shared_stains: bool = False

    def validate(self) -> None:
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if not 0.0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.batch_cases < 1 or self.n_neg < 1:
            raise ValueError("batch_cases and n_neg must be positive")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")

    @classmethod
    def from_json(cls, path: Path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_min.

    Warmup spans the first ``warmup_epochs / epochs`` fraction of
    ``total_steps``. The end of warmup evaluates to exactly ``lr_max`` and
    ``step == total_steps`` to exactly ``lr_min``.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = (cfg.warmup_epochs * total_steps) // cfg.epochs
    if warmup_steps > 0 and step <= warmup_steps:
        return cfg.lr_max * step / warmup_steps
    span = total_steps - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: list[Param], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = cfg.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in tensor {p.name}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        m, v = state.m[p.name], state.v[p.name]
        if cfg.weight_decay > 0.0:
            p.value -= lr * cfg.weight_decay * p.value
        m[...] = beta1 * m + (1.0 - beta1) * p.grad
        v[...] = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _clip_grads(params: list[Param], clip: float) -> bool:
    """Global-norm clipping; returns True when triggered."""
    if clip <= 0.0:
        return False
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > clip:
        factor = np.float32(clip / norm)
        for p in params:
            p.grad *= factor
        return True
    return False


def _coord_ids(coords: np.ndarray) -> np.ndarray:
    return coords[:, 0].astype(np.int64) * (1 << 32) + coords[:, 1].astype(np.int64)


def _epoch_batches(order: np.ndarray, batch_cases: int):
    for start in range(0, order.size, batch_cases):
        yield order[start : start + batch_cases]


def _check_training_cases(cases: CaseSet) -> None:
    if len(cases) == 0:
        raise ValueError("empty dataset")
    for case in cases.cases:
        if not case.ihc_stains:
            raise ValueError(f"case {case.case_id}: training requires >= 1 IHC stain")


def write_loss_log(path: Path, entries: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True))
            f.write("\n")


def _epoch_means(log: list[dict]) -> list[float]:
    sums: dict[int, list] = {}
    for entry in log:
        sums.setdefault(entry["epoch"], []).append(entry["loss"])
    return [float(np.mean(sums[e])) for e in sorted(sums)]


@dataclass
class Stage1Result:
    adapter: AdapterParams
    log: list[dict]
    epoch_mean_loss: list[float]


@dataclass
class Stage2Result:
    fusion: FusionParams
    mil: MilParams
    log: list[dict]
    epoch_mean_loss: list[float]


def _stage1_batch(batch, adapter, cfg, rng_neg, rng_drop, t, total):
    """Assemble the pooled contrastive batch for one optimizer step.

    Pool layout: the HE rows of every batch case first (these are the
    anchors, always adapter-transformed), then each case's IHC rows (raw by
    default, adapter-transformed when ``adapter_shared_stains``). Negatives
    are sampled per anchor from pool rows at a different grid position.
    """
    he_rows = np.concatenate([case.he.embeddings for case in batch], axis=0)
    coord_list = [_coord_ids(case.he.coords) for case in batch]
    anchor_coords = np.concatenate(coord_list)
    k_total = he_rows.shape[0]

    raw_parts = [he_rows]
    pool_coords = [anchor_coords]
    pos_index = np.full((len(IHC_STAINS), k_total), -1, dtype=np.int64)
    offset = k_total
    row_start = 0
    for case, coords in zip(batch, coord_list):
        n = case.n_patches
        for c, stain in enumerate(IHC_STAINS):
            if stain not in case.bags:
                continue
            raw_parts.append(case.bags[stain].embeddings)
            pool_coords.append(coords)
            pos_index[c, row_start : row_start + n] = np.arange(offset, offset + n)
            offset += n
        row_start += n
    raw_pool = np.concatenate(raw_parts, axis=0)
    pool_coord_ids = np.concatenate(pool_coords)

    n_adapted = raw_pool.shape[0] if cfg.adapter_shared_stains else k_total
    mask = None
    if cfg.dropout > 0.0:
        d_h = adapter.w1.value.shape[1]
        keep = (rng_drop.random((n_adapted, d_h)) >= cfg.dropout).astype(he_rows.dtype)
        mask = keep / np.float32(1.0 - cfg.dropout)
    adapted, cache = adapter_forward(raw_pool[:n_adapted], adapter, hidden_mask=mask)
    pool = adapted if cfg.adapter_shared_stains else np.concatenate(
        [adapted, raw_pool[k_total:]], axis=0
    )

    eligible = pool_coord_ids[None, :] != anchor_coords[:, None]  # (K, P)
    n_sel = min(cfg.n_neg, pool.shape[0])
    keys = rng_neg.random((k_total, pool.shape[0]), dtype=np.float32)
    keys[~eligible] = np.inf
    if n_sel < pool.shape[0]:
        neg_index = np.argpartition(keys, n_sel - 1, axis=1)[:, :n_sel]
    else:
        neg_index = np.broadcast_to(np.arange(pool.shape[0]), (k_total, pool.shape[0])).copy()
    chosen = np.take_along_axis(keys, neg_index, axis=1)
    neg_index = np.where(np.isinf(chosen), -1, neg_index)

    pos_mask = pos_index >= 0
    pos_safe = np.where(pos_mask, pos_index, 0)
    positives = pool[pos_safe]  # (C, K, D)

    contrastive = ContrastiveBatch(
        anchors=pool[:k_total],
        positives=positives,
        neg_pool=pool,
        neg_index=neg_index,
        tau=cfg.tau,
        t=t,
        total=total,
        pos_mask=pos_mask,
    )
    meta = {
        "cache": cache,
        "k_total": k_total,
        "n_adapted": n_adapted,
        "pos_index": pos_index,
        "pos_mask": pos_mask,
    }
    return contrastive, meta


def train_stage1(
    cases: CaseSet,
    cfg: TrainConfig,
    epochs: Optional[int] = None,
    verbose: bool = False,
) -> Stage1Result:
    """Adapter pretraining with the weighted patch-alignment loss."""
    cfg.validate()
    _check_training_cases(cases)
    n_epochs = cfg.epochs if epochs is None else epochs
    dim = cases.cases[0].dim
    d_hidden = cfg.d_hidden or dim

    # seed layout: 0..3 stage 1 (init, shuffle, negatives, dropout),
    # 4..6 stage 2 (init, shuffle, dropout)
    streams = np.random.SeedSequence(cfg.seed).spawn(7)
    adapter = init_adapter(dim, d_hidden, np.random.default_rng(streams[0]))
    rng_shuffle = np.random.default_rng(streams[1])
    rng_neg = np.random.default_rng(streams[2])
    rng_drop = np.random.default_rng(streams[3])

    steps_per_epoch = math.ceil(len(cases) / cfg.batch_cases)
    total_steps = n_epochs * steps_per_epoch
    state = AdamState()
    log: list[dict] = []
    step = 0
    for epoch in range(n_epochs):
        order = rng_shuffle.permutation(len(cases))
        for idx in _epoch_batches(order, cfg.batch_cases):
            batch = [cases.cases[i] for i in idx]
            contrastive, meta = _stage1_batch(
                batch, adapter, cfg, rng_neg, rng_drop, step, total_steps
            )
            result = patch_alignment_loss(contrastive)
            if not np.isfinite(result.loss):
                raise FloatingPointError(f"non-finite stage-1 loss at step {step}")

            g_pool = result.d_neg_pool
            g_pool[: meta["k_total"]] += result.d_anchors
            valid = meta["pos_mask"]
            np.add.at(g_pool, meta["pos_index"][valid], result.d_positives[valid])

            adapter.zero_grads()
            adapter_backward(meta["cache"], g_pool[: meta["n_adapted"]], adapter)
            clipped = _clip_grads(adapter.params(), cfg.grad_clip)
            lr = cosine_lr(step + 1, total_steps, cfg)
            adamw_step(adapter.params(), state, lr, cfg)

            entry = {"stage": 1, "epoch": epoch, "step": step, "lr": lr,
                     "loss": float(result.loss)}
            if clipped:
                entry["clipped"] = True
            log.append(entry)
            step += 1
        if verbose:
            print(f"stage1 epoch {epoch}: loss {_epoch_means(log)[-1]:.4f}",
                  file=sys.stderr)
    return Stage1Result(adapter=adapter, log=log, epoch_mean_loss=_epoch_means(log))


def train_stage2(
    cases: CaseSet,
    adapter: AdapterParams,
    cfg: TrainConfig,
    epochs: Optional[int] = None,
    verbose: bool = False,
) -> Stage2Result:
    """Fusion + MIL training with the slide-alignment loss; adapter frozen."""
    cfg.validate()
    _check_training_cases(cases)
    n_epochs = cfg.epochs if epochs is None else epochs
    dim = cases.cases[0].dim
    if adapter.dim != dim:
        raise ValueError(f"adapter dim {adapter.dim} != dataset dim {dim}")

    # same seed layout as train_stage1; stage 2 uses streams 4..6
    streams = np.random.SeedSequence(cfg.seed).spawn(7)
    rng_init = np.random.default_rng(streams[4])
    fusion = init_fusion(dim, cfg.heads, rng_init)
    mil = init_mil(dim, cfg.l_attn, rng_init)
    rng_shuffle = np.random.default_rng(streams[5])
    rng_drop = np.random.default_rng(streams[6])

    def gate_mask(n_rows: int):
        if cfg.dropout <= 0.0:
            return None
        keep = (rng_drop.random((n_rows, cfg.l_attn)) >= cfg.dropout)
        return keep.astype(np.float32) / np.float32(1.0 - cfg.dropout)

    steps_per_epoch = math.ceil(len(cases) / cfg.batch_cases)
    total_steps = n_epochs * steps_per_epoch
    state = AdamState()
    trainable = fusion.params() + mil.params()
    log: list[dict] = []
    step = 0
    for epoch in range(n_epochs):
        order = rng_shuffle.permutation(len(cases))
        for idx in _epoch_batches(order, cfg.batch_cases):
            batch = [cases.cases[i] for i in idx]
            # forward every case, keeping caches for the backward pass
            embeddings: list[np.ndarray] = []
            emb_case: list[int] = []
            records = []
            for b_i, case in enumerate(batch):
                he_adapted, _ = adapter_forward(case.he.embeddings, adapter)
                ihc = list(case.ihc_stains)
                stack = np.stack(
                    [he_adapted] + [case.bags[s].embeddings for s in ihc]
                )
                fused_he, f_cache = fusion_forward(stack, fusion)
                e_he, _, mc_he = mil_forward(fused_he, mil, gate_mask(fused_he.shape[0]))
                he_idx = len(embeddings)
                embeddings.append(e_he)
                emb_case.append(b_i)
                ihc_idx = []
                mil_caches = []
                for stain in ihc:
                    rows = case.bags[stain].embeddings
                    e_c, _, mc = mil_forward(rows, mil, gate_mask(rows.shape[0]))
                    ihc_idx.append(len(embeddings))
                    embeddings.append(e_c)
                    emb_case.append(b_i)
                    mil_caches.append(mc)
                records.append({
                    "he_idx": he_idx, "ihc_idx": ihc_idx,
                    "f_cache": f_cache, "mc_he": mc_he, "mil_caches": mil_caches,
                })

            emb_arr = np.stack(embeddings)
            emb_case_arr = np.array(emb_case)
            g_emb = np.zeros_like(emb_arr)
            inv_b = 1.0 / len(batch)
            loss_total = 0.0
            for b_i, rec in enumerate(records):
                neg_idx = np.nonzero(emb_case_arr != b_i)[0]
                res = slide_alignment_loss(
                    emb_arr[rec["he_idx"]],
                    emb_arr[rec["ihc_idx"]],
                    emb_arr[neg_idx],
                    cfg.tau,
                )
                loss_total += res.loss * inv_b
                g_emb[rec["he_idx"]] += inv_b * res.d_he
                g_emb[rec["ihc_idx"]] += inv_b * res.d_ihc
                g_emb[neg_idx] += inv_b * res.d_negatives
            if not np.isfinite(loss_total):
                raise FloatingPointError(f"non-finite stage-2 loss at step {step}")

            fusion.zero_grads()
            mil.zero_grads()
            for rec in records:
                g_bag = mil_backward(rec["mc_he"], g_emb[rec["he_idx"]], mil)
                fusion_backward(rec["f_cache"], g_bag, fusion)
                for j, mc in zip(rec["ihc_idx"], rec["mil_caches"]):
                    mil_backward(mc, g_emb[j], mil)

            clipped = _clip_grads(trainable, cfg.grad_clip)
            lr = cosine_lr(step + 1, total_steps, cfg)
            adamw_step(trainable, state, lr, cfg)
            entry = {"stage": 2, "epoch": epoch, "step": step, "lr": lr,
                     "loss": float(loss_total)}
            if clipped:
                entry["clipped"] = True
            log.append(entry)
            step += 1
        if verbose:
            print(f"stage2 epoch {epoch}: loss {_epoch_means(log)[-1]:.4f}",
                  file=sys.stderr)
    return Stage2Result(
        fusion=fusion, mil=mil, log=log, epoch_mean_loss=_epoch_means(log)
    )
