"""Positional encodings: rotary (RoPE), cosine-reweighting (LRPE), and the
Toeplitz/SSM encoding (TPE), plus the executable check that RoPE composes
with scalar (or pair-duplicated vector) decay without breaking relative
position structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .recurrence import _scan, forward_sequential
from .tensor import Tensor, as_tensor


class ContractError(ValueError):
    """Raised when a compatibility precondition is violated."""


@dataclass
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.head_dim % 2 != 0:
            raise ValueError(f"rope: head dimension must be even, got {self.head_dim}")

    @property
    def thetas(self):
        half = self.head_dim // 2
        return self.base ** (-2.0 * np.arange(half) / self.head_dim)


def _rope_trig(params: RopeParams, n, positions=None):
    t = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    angles = t[:, None] * params.thetas[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x, params: RopeParams, positions=None):
    """Rotate consecutive pairs of x (..., n, d) by position-scaled angles."""
    x = as_tensor(x)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"rope: expected last dim {params.head_dim}, got {x.shape[-1]}")
    cos, sin = _rope_trig(params, x.shape[-2], positions)
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    ye = xe * cos - xo * sin
    yo = xe * sin + xo * cos
    stacked = T.concat([T.reshape(ye, ye.shape + (1,)), T.reshape(yo, yo.shape + (1,))], axis=-1)
    return T.reshape(stacked, x.shape)


@dataclass
class LrpeParams:
    thetas: np.ndarray

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=np.float64)
        if not np.all(np.isfinite(self.thetas)):
            raise ValueError("lrpe: thetas must be finite")


def lrpe_apply(x, params: LrpeParams, positions=None):
    """concat[x cos(t theta), x sin(t theta)]; doubles the head dimension.

    Inner products of encoded q/k depend on positions only through t - s.
    """
    x = as_tensor(x)
    n = x.shape[-2]
    t = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    angles = t[:, None] * params.thetas[None, :]
    return T.concat([x * np.cos(angles), x * np.sin(angles)], axis=-1)


@dataclass
class TpeParams:
    """Per-channel rank-m SSM kernel r_i = sum_nu a_nu b_nu gate_nu^i.

    ``a`` and ``b`` are (d, m); ``gate_logits`` is (d, m) and is passed
    through a sigmoid so the recurrent gates stay in (0, 1).
    """

    a: object
    b: object
    gate_logits: object

    def __post_init__(self):
        self.a = as_tensor(self.a)
        self.b = as_tensor(self.b)
        self.gate_logits = as_tensor(self.gate_logits)
        if self.a.shape != self.b.shape or self.a.shape != self.gate_logits.shape:
            raise ValueError("tpe: a, b, gate_logits must share shape (d, m)")
        if self.a.shape[-1] < 1:
            raise ValueError("tpe: state expansion m must be >= 1")


def tpe_init(d, m, rng):
    """Default TPE parameters: a, b ~ N(0, 1/sqrt(m)), gates sigmoid(U[1,3])."""
    scale = 1.0 / np.sqrt(m)
    return TpeParams(
        a=Tensor(rng.normal(0.0, scale, size=(d, m)), requires_grad=True),
        b=Tensor(rng.normal(0.0, scale, size=(d, m)), requires_grad=True),
        gate_logits=Tensor(rng.uniform(1.0, 3.0, size=(d, m)), requires_grad=True),
    )


def tpe_apply(x, params: TpeParams):
    """Causal Toeplitz mixing o_t = sum_{s<=t} r_{t-s} x_s per channel.

    Runs as an m-dimensional linear recurrence per channel via the decay
    scan; applied exactly once, right after the embedding layer.
    """
    x = as_tensor(x)
    n, d = x.shape[-2], x.shape[-1]
    m = params.a.shape[-1]
    batch = x.shape[:-2]
    # channels become a batch axis: v is (..., d, n, 1)
    perm = tuple(range(len(batch))) + (len(batch) + 1, len(batch))
    xt = T.transpose(x, perm)
    v = T.reshape(xt, batch + (d, n, 1))
    full = batch + (d, n, m)
    q = T.broadcast_to(T.reshape(params.a, (d, 1, m)), full)
    k = T.broadcast_to(T.reshape(params.b, (d, 1, m)), full)
    lam = T.broadcast_to(T.reshape(T.sigmoid(params.gate_logits), (d, 1, m)), full)
    o, _ = forward_sequential(q, k, v, lam)
    o = T.reshape(o, batch + (d, n))
    return T.transpose(o, perm)


def tpe_toeplitz_oracle(x, params: TpeParams):
    """Direct O(n^2) Toeplitz-sum evaluation. Test oracle only."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    a, b = params.a.data, params.b.data
    gates = 1.0 / (1.0 + np.exp(-params.gate_logits.data))
    n, d = x.shape[-2], x.shape[-1]
    lags = np.arange(n)
    # r[i, c] = sum_nu a[c, nu] b[c, nu] gates[c, nu]^i
    r = np.einsum("cm,cm,icm->ic", a, b, gates[None, :, :] ** lags[:, None, None])
    o = np.zeros_like(x)
    for t in range(n):
        o[..., t, :] = np.einsum("ic,...ic->...c", r[t::-1, :], x[..., : t + 1, :])
    return o


def _pairwise_lambda(lam, dk):
    """Validate and expand decay for RoPE compatibility.

    Accepts scalar-per-position (n,) or (n, 1) decay, or a vector decay
    whose consecutive pairs are duplicated; returns (n, dk)."""
    lam = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    if lam.shape[-1] == 1:
        return np.broadcast_to(lam, (lam.shape[0], dk)).copy()
    if lam.shape[-1] != dk:
        raise ContractError(f"decay last dim {lam.shape[-1]} does not match head dim {dk}")
    if not np.array_equal(lam[:, 0::2], lam[:, 1::2]):
        raise ContractError("vector decay must duplicate each pair to compose with rotary encoding")
    return lam.copy()


def rope_decay_equivalence(q, k, v, lam, params: RopeParams, positions=None):
    """Max abs deviation between the rotated-recurrence and closed relative forms.

    Path (i): apply the rotation to q and k, then run the sequential scan.
    Path (ii): o_t = q_t^T sum_j w_{tj} R_{t-j} k_j v_j^T with w_{tj} the
    telescoped product of decays over (j, t].  Requires scalar decay or
    pair-duplicated vector decay.
    """
    q, k, v = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
               for x in (q, k, v))
    n, dk = q.shape[-2], q.shape[-1]
    lam_full = _pairwise_lambda(lam, dk)
    cos, sin = _rope_trig(params, n, positions)

    def rot(x, c, s):
        y = np.empty_like(x)
        y[..., 0::2] = x[..., 0::2] * c - x[..., 1::2] * s
        y[..., 1::2] = x[..., 0::2] * s + x[..., 1::2] * c
        return y

    qr, kr = rot(q, cos, sin), rot(k, cos, sin)
    o_rec, _ = _scan(qr, kr, v, lam_full)

    t_idx = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    o_rel = np.zeros_like(o_rec)
    w = np.zeros((n, dk))
    for t in range(n):
        w[:t, :] *= lam_full[t, None, :]
        w[t, :] = 1.0
        rel = (t_idx[: t + 1] - t_idx[t])[:, None] * params.thetas[None, :]
        crel, srel = np.cos(rel), np.sin(rel)
        k_rot = rot(k[: t + 1], crel, srel)
        coef = (q[t, None, :] * w[: t + 1] * k_rot).sum(axis=-1)
        o_rel[t] = coef @ v[: t + 1]
    return float(np.max(np.abs(o_rec - o_rel)))
