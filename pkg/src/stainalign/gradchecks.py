"""Finite-difference oracle suites for every differentiable component.

Each suite builds small random instances in float64 and compares the
hand-written reverse rules against central differences via
:func:`stainalign.ops.grad_check`. The CLI ``gradcheck`` command and the
acceptance tests both run these.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .losses import ContrastiveBatch, patch_alignment_loss, slide_alignment_loss
from .models import (
    AdapterParams, FusionParams, MilParams, Param,
    adapter_forward, adapter_backward,
    fusion_forward, fusion_backward,
    mil_forward, mil_backward,
)

__all__ = ["TOLERANCES", "SUITES", "run_suite", "run_all"]

TOLERANCES = {
    "primitives": 1e-6,
    "adapter": 1e-5,
    "fusion": 1e-5,
    "mil": 1e-5,
    "patch_loss": 1e-5,
    "slide_loss": 1e-5,
}


def _project(out: np.ndarray, r: np.ndarray) -> float:
    return float((out * r).sum())


def _embeddings(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Random directions with norms in [0.8, 1.6].

    Keeps softmax saturation and normalization curvature low so central
    differences at eps=1e-4 resolve every gradient component; a saturated
    instance has true gradients below the FD noise floor and the relative
    error would measure truncation, not correctness.
    """
    x = rng.standard_normal(shape)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / norms * rng.uniform(0.8, 1.6, size=norms.shape)


def _primitive_trial(rng: np.random.Generator) -> float:
    # eps=1e-5 keeps FD truncation two orders below the 1e-6 bar; the model
    # and loss suites run at the coarser eps=1e-4 of the acceptance gate
    eps = 1e-5
    worst = 0.0

    m, k, n = rng.integers(1, 5, size=3)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    r = rng.standard_normal((m, n))

    def f_matmul(p):
        out = ops.matmul(p["a"], p["b"])
        ga, gb = ops.matmul_vjp(p["a"], p["b"], r)
        return _project(out, r), {"a": ga, "b": gb}

    worst = max(worst, ops.grad_check(f_matmul, {"a": a, "b": b}, eps))

    x = rng.standard_normal((m, n))
    bias = rng.standard_normal(n)

    def f_bias(p):
        out = ops.add_bias(p["x"], p["b"])
        gx, gb = ops.add_bias_vjp(p["x"], p["b"], r)
        return _project(out, r), {"x": gx, "b": gb}

    worst = max(worst, ops.grad_check(f_bias, {"x": x, "b": bias}, eps))

    def f_tanh(p):
        y = ops.tanh(p["x"])
        return _project(y, r), {"x": ops.tanh_vjp(y, r)}

    worst = max(worst, ops.grad_check(f_tanh, {"x": x}, eps))

    def f_sigmoid(p):
        y = ops.sigmoid(p["x"])
        return _project(y, r), {"x": ops.sigmoid_vjp(y, r)}

    worst = max(worst, ops.grad_check(f_sigmoid, {"x": x}, eps))

    other = rng.standard_normal((m, n))

    def f_mul(p):
        out = ops.multiply(p["x"], p["y"])
        gx, gy = ops.multiply_vjp(p["x"], p["y"], r)
        return _project(out, r), {"x": gx, "y": gy}

    worst = max(worst, ops.grad_check(f_mul, {"x": x, "y": other}, eps))

    s = float(rng.uniform(0.5, 2.0))

    def f_scale(p):
        out = ops.scale(p["x"], s)
        return _project(out, r), {"x": ops.scale_vjp(s, r)}

    worst = max(worst, ops.grad_check(f_scale, {"x": x}, eps))

    tau = float(rng.uniform(1.0, 2.0))
    v = rng.uniform(-1.0, 1.0, size=int(rng.integers(2, 6)))
    rv = rng.standard_normal(v.shape)

    def f_softmax(p):
        y = ops.softmax(p["v"], temperature=tau)
        return _project(y, rv), {"v": ops.softmax_vjp(y, rv, temperature=tau)}

    worst = max(worst, ops.grad_check(f_softmax, {"v": v}, eps))

    xn = _embeddings(rng, (m, 4))
    rn = rng.standard_normal(xn.shape)

    def f_norm(p):
        y = ops.l2_normalize(p["x"])
        return _project(y, rn), {"x": ops.l2_normalize_vjp(p["x"], rn)}

    worst = max(worst, ops.grad_check(f_norm, {"x": xn}, eps))

    va = _embeddings(rng, (4,))
    vb = _embeddings(rng, (4,))

    def f_cos(p):
        c = ops.cosine_similarity(p["a"], p["b"])
        ga, gb = ops.cosine_similarity_vjp(p["a"], p["b"], 1.0)
        return c, {"a": ga, "b": gb}

    worst = max(worst, ops.grad_check(f_cos, {"a": va, "b": vb}, eps))

    axis = int(rng.integers(0, 2))
    rm = rng.standard_normal(np.delete(np.array(x.shape), axis))

    def f_mean(p):
        out = ops.mean_axis(p["x"], axis)
        return _project(out, rm), {"x": ops.mean_axis_vjp(x.shape, axis, rm)}

    worst = max(worst, ops.grad_check(f_mean, {"x": x}, eps))

    c1 = rng.standard_normal((2, 3))
    c2 = rng.standard_normal((4, 3))
    rc = rng.standard_normal((6, 3))

    def f_concat(p):
        out = ops.concat([p["a"], p["b"]], axis=0)
        ga, gb = ops.concat_vjp([2, 4], 0, rc)
        return _project(out, rc), {"a": ga, "b": gb}

    worst = max(worst, ops.grad_check(f_concat, {"a": c1, "b": c2}, eps))
    return worst


def _adapter_trial(rng: np.random.Generator) -> float:
    n, d, d_h = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    base = {
        "z": rng.standard_normal((n, d)),
        "w1": rng.standard_normal((d, d_h)) * 0.5,
        "b1": rng.standard_normal(d_h) * 0.2,
        "w2": rng.standard_normal((d_h, d)) * 0.5,
        "b2": rng.standard_normal(d) * 0.2,
    }
    r = rng.standard_normal((n, d))

    def f(p):
        params = AdapterParams(
            w1=Param.of("adapter.w1", p["w1"]),
            b1=Param.of("adapter.b1", p["b1"]),
            w2=Param.of("adapter.w2", p["w2"]),
            b2=Param.of("adapter.b2", p["b2"]),
        )
        out, cache = adapter_forward(p["z"], params)
        g_z = adapter_backward(cache, r, params)
        grads = {
            "z": g_z,
            "w1": params.w1.grad, "b1": params.b1.grad,
            "w2": params.w2.grad, "b2": params.b2.grad,
        }
        return _project(out, r), grads

    return ops.grad_check(f, base)


def _fusion_trial(rng: np.random.Generator) -> float:
    heads = int(rng.integers(1, 3))
    d_k = int(rng.integers(1, 3))
    d = heads * d_k
    m, n = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    base = {
        "stack": _embeddings(rng, (m, n, d)),
        "wq": rng.standard_normal((heads, d, d_k)) * 0.3,
        "wk": rng.standard_normal((heads, d, d_k)) * 0.3,
        "wv": rng.standard_normal((heads, d, d_k)) * 0.5,
        "wo": rng.standard_normal((d, d)) * 0.5,
    }
    r = rng.standard_normal((n, d))

    def f(p):
        params = FusionParams(
            wq=Param.of("fusion.wq", p["wq"]),
            wk=Param.of("fusion.wk", p["wk"]),
            wv=Param.of("fusion.wv", p["wv"]),
            wo=Param.of("fusion.wo", p["wo"]),
        )
        he_rows, cache = fusion_forward(p["stack"], params)
        g_stack = fusion_backward(cache, r, params)
        grads = {
            "stack": g_stack,
            "wq": params.wq.grad, "wk": params.wk.grad,
            "wv": params.wv.grad, "wo": params.wo.grad,
        }
        return _project(he_rows, r), grads

    return ops.grad_check(f, base)


def _mil_trial(rng: np.random.Generator) -> float:
    n, d, l_attn = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    base = {
        "bag": rng.standard_normal((n, d)),
        "v": rng.standard_normal((d, l_attn)) * 0.5,
        "u": rng.standard_normal((d, l_attn)) * 0.5,
        "w": rng.standard_normal(l_attn) * 0.5,
        "wo": rng.standard_normal((d, d)) * 0.5,
    }
    r = rng.standard_normal(d)

    def f(p):
        params = MilParams(
            v_attn=Param.of("mil.v_attn", p["v"]),
            u_attn=Param.of("mil.u_attn", p["u"]),
            w_attn=Param.of("mil.w_attn", p["w"]),
            w_out=Param.of("mil.w_out", p["wo"]),
        )
        emb, _, cache = mil_forward(p["bag"], params)
        g_bag = mil_backward(cache, r, params)
        grads = {
            "bag": g_bag,
            "v": params.v_attn.grad, "u": params.u_attn.grad,
            "w": params.w_attn.grad, "wo": params.w_out.grad,
        }
        return _project(emb, r), grads

    return ops.grad_check(f, base)


def _patch_loss_trial(rng: np.random.Generator) -> float:
    k = int(rng.integers(1, 4))
    c = int(rng.integers(1, 3))
    d = int(rng.integers(2, 5))
    p_pool = int(rng.integers(2, 6))
    n_neg = int(rng.integers(1, p_pool + 1))
    # temperatures well above the FD noise floor: curvature grows like
    # 1/tau^3 and would swamp a central difference at eps=1e-4
    tau = float(rng.uniform(1.0, 2.0))
    t, total = int(rng.integers(0, 11)), 10
    neg_index = np.stack(
        [rng.choice(p_pool, size=n_neg, replace=False) for _ in range(k)]
    )
    if rng.random() < 0.3:
        neg_index[rng.integers(0, k), rng.integers(0, n_neg)] = -1
    mask = np.ones((c, k), dtype=bool)
    if c > 1 and rng.random() < 0.3:
        mask[rng.integers(0, c), rng.integers(0, k)] = False

    base = {
        "anchors": _embeddings(rng, (k, d)),
        "positives": _embeddings(rng, (c, k, d)),
        "pool": _embeddings(rng, (p_pool, d)),
    }

    def make_batch(p):
        return ContrastiveBatch(
            anchors=p["anchors"], positives=p["positives"], neg_pool=p["pool"],
            neg_index=neg_index, tau=tau, t=t, total=total, pos_mask=mask,
        )

    frozen = patch_alignment_loss(make_batch(base)).weights

    def f(p):
        res = patch_alignment_loss(make_batch(p), weights=frozen)
        return res.loss, {
            "anchors": res.d_anchors,
            "positives": res.d_positives,
            "pool": res.d_neg_pool,
        }

    return ops.grad_check(f, base)


def _slide_loss_trial(rng: np.random.Generator) -> float:
    c = int(rng.integers(1, 4))
    d = int(rng.integers(2, 5))
    n_neg = int(rng.integers(0, 5))
    tau = float(rng.uniform(1.0, 2.0))
    base = {
        "he": _embeddings(rng, (d,)),
        "ihc": _embeddings(rng, (c, d)),
        "negs": _embeddings(rng, (n_neg, d)) if n_neg else np.zeros((0, d)),
    }

    def f(p):
        res = slide_alignment_loss(p["he"], p["ihc"], p["negs"], tau)
        return res.loss, {"he": res.d_he, "ihc": res.d_ihc, "negs": res.d_negatives}

    return ops.grad_check(f, base)


SUITES = {
    "primitives": _primitive_trial,
    "adapter": _adapter_trial,
    "fusion": _fusion_trial,
    "mil": _mil_trial,
    "patch_loss": _patch_loss_trial,
    "slide_loss": _slide_loss_trial,
}


def run_suite(name: str, trials: int = 20, seed: int = 0) -> float:
    """Worst relative error of ``trials`` random instances of one suite."""
    trial = SUITES[name]
    worst = 0.0
    for i in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        worst = max(worst, trial(rng))
    return worst


def run_all(trials: int = 20, seed: int = 0) -> dict[str, float]:
    return {name: run_suite(name, trials, seed) for name in SUITES}
