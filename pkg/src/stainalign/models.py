"""Learnable components: residual adapter, cross-stain fusion, attention MIL.

All three are plain parameter containers plus explicit forward/backward
function pairs built on the primitives in :mod:`stainalign.ops`. Backward
functions accumulate into ``Param.grad`` and return the gradient with respect
to their array inputs, so the trainer can chain them.

Initialization puts the adapter and the fusion block exactly at identity
(zero second-layer / zero output projection through the residual paths), so
an untrained model reproduces the frozen-encoder behavior bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .checkpoint import CheckpointError

__all__ = [
    "Param", "AdapterParams", "FusionParams", "MilParams",
    "init_adapter", "init_fusion", "init_mil",
    "adapter_forward", "adapter_backward",
    "fusion_forward", "fusion_backward",
    "mil_forward", "mil_backward",
]


@dataclass
class Param:
    """A named weight tensor with a same-shaped gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def of(cls, name: str, value: np.ndarray) -> "Param":
        value = np.ascontiguousarray(value)
        return cls(name=name, value=value, grad=np.zeros_like(value))


class ParamContainer:
    """Shared plumbing for the three parameter sets."""

    prefix = ""

    def params(self) -> list[Param]:
        return [getattr(self, f) for f in self._fields]

    def zero_grads(self) -> None:
        for p in self.params():
            p.grad[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in tensors:
                raise CheckpointError(f"missing checkpoint tensor {p.name}")
            incoming = np.asarray(tensors[p.name], dtype=p.value.dtype)
            if incoming.shape != p.value.shape:
                raise CheckpointError(
                    f"tensor {p.name}: shape {incoming.shape} != {p.value.shape}"
                )
            p.value[...] = incoming

    @classmethod
    def from_state(cls, tensors: dict[str, np.ndarray], **kwargs):
        inst = cls.shaped_like(tensors, **kwargs)
        inst.load_state(tensors)
        return inst


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AdapterParams(ParamContainer):
    """Residual two-layer transform placed after the frozen patch encoder."""

    w1: Param
    b1: Param
    w2: Param
    b2: Param
    _fields = ("w1", "b1", "w2", "b2")

    @property
    def dim(self) -> int:
        return self.w1.value.shape[0]

    @classmethod
    def shaped_like(cls, tensors: dict[str, np.ndarray]) -> "AdapterParams":
        if "adapter.w1" not in tensors:
            raise CheckpointError("missing checkpoint tensor adapter.w1")
        d, d_h = tensors["adapter.w1"].shape
        return init_adapter(d, d_h, rng=None)


def init_adapter(
    dim: int, d_hidden: int, rng, dtype=np.float32
) -> AdapterParams:
    """Second layer starts at zero, so the adapter is the identity at init."""
    if rng is None:
        w1 = np.zeros((dim, d_hidden), dtype=dtype)
    else:
        w1 = _xavier(rng, dim, d_hidden, (dim, d_hidden), dtype)
    return AdapterParams(
        w1=Param.of("adapter.w1", w1),
        b1=Param.of("adapter.b1", np.zeros(d_hidden, dtype=dtype)),
        w2=Param.of("adapter.w2", np.zeros((d_hidden, dim), dtype=dtype)),
        b2=Param.of("adapter.b2", np.zeros(dim, dtype=dtype)),
    )


def adapter_forward(z: np.ndarray, params: AdapterParams, hidden_mask=None):
    """Row-wise ``z + W2 tanh(z W1 + b1) + b2``; returns (out, cache).

    ``hidden_mask`` (optional, same shape as the hidden activation) applies
    inverted dropout during training.
    """
    if z.ndim != 2 or z.shape[1] != params.dim:
        raise ValueError(f"adapter input must be (N, {params.dim}), got {z.shape}")
    h_pre = ops.add_bias(ops.matmul(z, params.w1.value), params.b1.value)
    h_raw = ops.tanh(h_pre)
    h = h_raw if hidden_mask is None else h_raw * hidden_mask
    out = ops.add_bias(ops.matmul(h, params.w2.value), params.b2.value) + z
    cache = {"z": z, "h": h, "h_raw": h_raw, "mask": hidden_mask}
    return out, cache


def adapter_backward(cache, g_out: np.ndarray, params: AdapterParams) -> np.ndarray:
    z, h = cache["z"], cache["h"]
    g_h = ops.matmul(g_out, params.w2.value.T)
    params.w2.grad += ops.matmul(h.T, g_out)
    params.b2.grad += g_out.sum(axis=0)
    if cache["mask"] is not None:
        g_h = g_h * cache["mask"]
    g_hpre = ops.tanh_vjp(cache["h_raw"], g_h)
    params.w1.grad += ops.matmul(z.T, g_hpre)
    params.b1.grad += g_hpre.sum(axis=0)
    return g_out + ops.matmul(g_hpre, params.w1.value.T)


@dataclass
class FusionParams(ParamContainer):
    """Per-head q/k/v projections plus the output projection of the
    cross-stain attention block."""

    wq: Param
    wk: Param
    wv: Param
    wo: Param
    _fields = ("wq", "wk", "wv", "wo")

    @property
    def heads(self) -> int:
        return self.wq.value.shape[0]

    @property
    def dim(self) -> int:
        return self.wq.value.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.value.shape[2]

    @classmethod
    def shaped_like(cls, tensors: dict[str, np.ndarray]) -> "FusionParams":
        if "fusion.wq" not in tensors:
            raise CheckpointError("missing checkpoint tensor fusion.wq")
        heads, d, _dk = tensors["fusion.wq"].shape
        return init_fusion(d, heads, rng=None)


def init_fusion(dim: int, heads: int, rng, dtype=np.float32) -> FusionParams:
    """Zero output projection makes the residual block an exact identity."""
    if heads < 1 or dim % heads != 0:
        raise ValueError(f"head count {heads} must divide dim {dim}")
    d_k = dim // heads
    if rng is None:
        proj = lambda: np.zeros((heads, dim, d_k), dtype=dtype)  # noqa: E731
    else:
        proj = lambda: np.stack(  # noqa: E731
            [_xavier(rng, dim, d_k, (dim, d_k), dtype) for _ in range(heads)]
        )
    return FusionParams(
        wq=Param.of("fusion.wq", proj()),
        wk=Param.of("fusion.wk", proj()),
        wv=Param.of("fusion.wv", proj()),
        wo=Param.of("fusion.wo", np.zeros((dim, dim), dtype=dtype)),
    )


def fusion_forward(stack: np.ndarray, params: FusionParams):
    """Self-attention over the stain axis at each patch position.

    ``stack`` is (M, N, D) with the HE rows at stain index 0. Each position
    attends over its M stain vectors; heads are concatenated, projected, and
    residual-added. Only the updated HE rows are returned (IHC rows pass
    through unchanged downstream).
    """
    m_stains = stack.shape[0]
    if m_stains < 2:
        raise ValueError(f"fusion needs at least 2 stains, got {m_stains}")
    if stack.ndim != 3 or stack.shape[2] != params.dim:
        raise ValueError(f"stack must be (M, N, {params.dim}), got {stack.shape}")

    x = np.ascontiguousarray(stack.transpose(1, 0, 2))  # (N, M, D)
    heads, d_k = params.heads, params.d_k
    inv_sqrt = 1.0 / np.sqrt(d_k)

    qs, ks, vs, atts, head_outs = [], [], [], [], []
    for h in range(heads):
        q = ops.matmul(x, params.wq.value[h])  # (N, M, d_k)
        k = ops.matmul(x, params.wk.value[h])
        v = ops.matmul(x, params.wv.value[h])
        logits = ops.scale(q @ k.transpose(0, 2, 1), inv_sqrt)  # (N, M, M)
        att = ops.softmax(logits, axis=-1)
        head_outs.append(att @ v)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        atts.append(att)
    merged = ops.concat(head_outs, axis=-1)  # (N, M, H*d_k)
    out = ops.matmul(merged, params.wo.value) + x  # residual

    cache = {"x": x, "q": qs, "k": ks, "v": vs, "att": atts, "merged": merged}
    return out[:, 0, :].copy(), cache


def fusion_backward(cache, g_he: np.ndarray, params: FusionParams) -> np.ndarray:
    """Backward from the fused HE rows; returns gradient w.r.t. the input
    stack (M, N, D) and accumulates parameter gradients."""
    x, merged = cache["x"], cache["merged"]
    n, m_stains, d = x.shape
    heads, d_k = params.heads, params.d_k
    inv_sqrt = 1.0 / np.sqrt(d_k)

    g_out = np.zeros_like(x)
    g_out[:, 0, :] = g_he

    g_x = g_out.copy()  # residual path
    params.wo.grad += merged.reshape(-1, d).T @ g_out.reshape(-1, d)
    g_merged = ops.matmul(g_out, params.wo.value.T)

    for h in range(heads):
        q, k, v, att = cache["q"][h], cache["k"][h], cache["v"][h], cache["att"][h]
        g_head = g_merged[..., h * d_k : (h + 1) * d_k]  # (N, M, d_k)
        g_att = g_head @ v.transpose(0, 2, 1)  # (N, M, M)
        g_v = att.transpose(0, 2, 1) @ g_head
        g_logits = ops.scale(ops.softmax_vjp(att, g_att, axis=-1), inv_sqrt)
        g_q = g_logits @ k
        g_k = g_logits.transpose(0, 2, 1) @ q
        g_x += (
            ops.matmul(g_q, params.wq.value[h].T)
            + ops.matmul(g_k, params.wk.value[h].T)
            + ops.matmul(g_v, params.wv.value[h].T)
        )
        flat_x = x.reshape(-1, d)
        params.wq.grad[h] += flat_x.T @ g_q.reshape(-1, d_k)
        params.wk.grad[h] += flat_x.T @ g_k.reshape(-1, d_k)
        params.wv.grad[h] += flat_x.T @ g_v.reshape(-1, d_k)

    return g_x.transpose(1, 0, 2)


@dataclass
class MilParams(ParamContainer):
    """Gated-attention MIL aggregator shared across all stains."""

    v_attn: Param
    u_attn: Param
    w_attn: Param
    w_out: Param
    _fields = ("v_attn", "u_attn", "w_attn", "w_out")

    @property
    def dim(self) -> int:
        return self.v_attn.value.shape[0]

    @classmethod
    def shaped_like(cls, tensors: dict[str, np.ndarray]) -> "MilParams":
        if "mil.v_attn" not in tensors:
            raise CheckpointError("missing checkpoint tensor mil.v_attn")
        d, l_attn = tensors["mil.v_attn"].shape
        return init_mil(d, l_attn, rng=None)


def init_mil(dim: int, l_attn: int, rng, dtype=np.float32) -> MilParams:
    if rng is None:
        mk = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
        v, u, w, wo = mk(dim, l_attn), mk(dim, l_attn), mk(l_attn), mk(dim, dim)
    else:
        v = _xavier(rng, dim, l_attn, (dim, l_attn), dtype)
        u = _xavier(rng, dim, l_attn, (dim, l_attn), dtype)
        w = _xavier(rng, l_attn, 1, (l_attn,), dtype)
        wo = _xavier(rng, dim, dim, (dim, dim), dtype)
    return MilParams(
        v_attn=Param.of("mil.v_attn", v),
        u_attn=Param.of("mil.u_attn", u),
        w_attn=Param.of("mil.w_attn", w),
        w_out=Param.of("mil.w_out", wo),
    )


def mil_forward(bag: np.ndarray, params: MilParams, gate_mask=None):
    """Gated-attention pooling to one slide embedding.

    Attention ``a_i ∝ exp(w·(tanh(z_i V) ⊙ sigmoid(z_i U)))`` normalized over
    the bag, then ``e = (Σ a_i z_i) W_out``. Permutation-invariant up to
    float summation order. Returns (embedding, attention, cache).
    """
    if bag.ndim != 2 or bag.shape[0] < 1:
        raise ValueError(f"bag must be (N, D) with N >= 1, got {bag.shape}")
    th = ops.tanh(ops.matmul(bag, params.v_attn.value))  # (N, L)
    sg = ops.sigmoid(ops.matmul(bag, params.u_attn.value))
    gate = ops.multiply(th, sg)
    if gate_mask is not None:
        gate = gate * gate_mask
    logit = ops.matmul(gate, params.w_attn.value)  # (N,)
    attn = ops.softmax(logit)
    pooled = ops.matmul(attn, bag)  # (D,)
    embedding = ops.matmul(pooled, params.w_out.value)
    cache = {
        "bag": bag, "th": th, "sg": sg, "gate": gate,
        "attn": attn, "pooled": pooled, "mask": gate_mask,
    }
    return embedding, attn, cache


def mil_backward(cache, g_emb: np.ndarray, params: MilParams) -> np.ndarray:
    bag, th, sg, gate = cache["bag"], cache["th"], cache["sg"], cache["gate"]
    attn, pooled = cache["attn"], cache["pooled"]

    params.w_out.grad += np.outer(pooled, g_emb)
    g_pooled = ops.matmul(g_emb, params.w_out.value.T)
    g_attn = ops.matmul(cache["bag"], g_pooled)  # (N,)
    g_bag = np.outer(attn, g_pooled)
    g_logit = ops.softmax_vjp(attn, g_attn)
    g_gate = np.outer(g_logit, params.w_attn.value)
    params.w_attn.grad += ops.matmul(gate.T, g_logit)
    if cache["mask"] is not None:
        g_gate = g_gate * cache["mask"]
    g_th, g_sg = ops.multiply_vjp(th, sg, g_gate)
    g_th_pre = ops.tanh_vjp(th, g_th)
    g_sg_pre = ops.sigmoid_vjp(sg, g_sg)
    g_bag += ops.matmul(g_th_pre, params.v_attn.value.T)
    g_bag += ops.matmul(g_sg_pre, params.u_attn.value.T)
    params.v_attn.grad += ops.matmul(bag.T, g_th_pre)
    params.u_attn.grad += ops.matmul(bag.T, g_sg_pre)
    return g_bag
