"""State-update kernels for decayed linear attention.

The sequential scan is the canonical semantics; the quadratic-cost
closed-form expansion and the chunkwise-parallel variant exist to check
and accelerate it respectively.  The DPLR kernel extends the diagonal
transition with a delta-rule rank-one correction.

Shapes: ``q``/``k`` are (..., n, dk), ``v`` is (..., n, dv), ``lam`` is
(..., n, dk) or (..., n, 1) (scalar decay broadcasts across dimensions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor


def _check_shapes(q, k, v, lam):
    if q.shape != k.shape:
        raise ShapeError(f"q/k shapes differ: {q.shape} vs {k.shape}")
    if q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"q/v leading shapes differ: {q.shape} vs {v.shape}")
    if lam.shape[:-1] != q.shape[:-1] or lam.shape[-1] not in (1, q.shape[-1]):
        raise ShapeError(f"lam shape {lam.shape} incompatible with q shape {q.shape}")
    for name, arr in (("q", q), ("k", k), ("v", v), ("lam", lam)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")


def _scan(q, k, v, lam):
    """Left-to-right scan on plain arrays; returns (o, all states)."""
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    batch = np.broadcast_shapes(q.shape[:-2], v.shape[:-2])
    states = np.zeros(batch + (n, dk, dv))
    o = np.zeros(batch + (n, dv))
    s = np.zeros(batch + (dk, dv))
    for t in range(n):
        s = lam[..., t, :, None] * s + k[..., t, :, None] * v[..., t, None, :]
        states[..., t, :, :] = s
        o[..., t, :] = (q[..., t, :, None] * s).sum(axis=-2)
    return o, states


def forward_sequential(q, k, v, lam):
    """Recurrence s_t = diag(lam_t) s_{t-1} + k_t v_t^T, o_t = s_t^T q_t.

    Returns (o, final_state); ``o`` is differentiable in q, k, v and lam,
    the final state is returned detached.
    """
    q, k, v, lam = as_tensor(q), as_tensor(k), as_tensor(v), as_tensor(lam)
    _check_shapes(q.data, k.data, v.data, lam.data)
    o_data, states = _scan(q.data, k.data, v.data, lam.data)
    out = Tensor(o_data)
    final = Tensor(states[..., -1, :, :].copy()) if q.shape[-2] else Tensor(
        np.zeros(q.shape[:-2] + (q.shape[-1], v.shape[-1])))

    def bw(g):
        n = q.shape[-2]
        dq = np.zeros_like(q.data)
        dk_ = np.zeros_like(k.data)
        dv_ = np.zeros_like(v.data)
        dlam = np.zeros_like(lam.data)
        ds = np.zeros_like(states[..., 0, :, :])
        scalar_lam = lam.shape[-1] == 1
        for t in range(n - 1, -1, -1):
            st = states[..., t, :, :]
            go = g[..., t, None, :]
            dq[..., t, :] = (st * go).sum(axis=-1)
            ds = ds + q.data[..., t, :, None] * go
            s_prev = states[..., t - 1, :, :] if t > 0 else 0.0
            dl = (ds * s_prev).sum(axis=-1) if t > 0 else np.zeros(ds.shape[:-1])
            dlam[..., t, :] = dl.sum(axis=-1, keepdims=True) if scalar_lam else dl
            dk_[..., t, :] = (ds * v.data[..., t, None, :]).sum(axis=-1)
            dv_[..., t, :] = (ds * k.data[..., t, :, None]).sum(axis=-2)
            ds = lam.data[..., t, :, None] * ds
        T._accum(q, dq)
        T._accum(k, dk_)
        T._accum(v, dv_)
        T._accum(lam, dlam)

    return T._record(out, (q, k, v, lam), bw), final


def forward_oracle(q, k, v, lam):
    """Closed-form double sum o_t = sum_{j<=t} (q_t . prod_{i=j+1}^t lam_i . k_j) v_j.

    Quadratic cost; per-pair decay products are built by telescoping
    rather than via reciprocals of cumulative products, so zero decay
    values are handled exactly.  Test oracle only, plain numpy.
    """
    q, k, v, lam = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
                    for x in (q, k, v, lam))
    _check_shapes(q, k, v, lam)
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    batch = np.broadcast_shapes(q.shape[:-2], v.shape[:-2])
    lam = np.broadcast_to(lam, batch + (n, lam.shape[-1]))
    q = np.broadcast_to(q, batch + (n, dk))
    k = np.broadcast_to(k, batch + (n, dk))
    v = np.broadcast_to(v, batch + (n, dv))
    o = np.zeros(batch + (n, dv))
    # w[..., j, :] holds prod_{i=j+1}^t lam_i for the current t
    w = np.zeros(batch + (n, lam.shape[-1]))
    for t in range(n):
        w[..., :t, :] *= lam[..., t, None, :]
        w[..., t, :] = 1.0
        coef = (q[..., t, None, :] * w[..., : t + 1, :] * k[..., : t + 1, :]).sum(axis=-1)
        o[..., t, :] = (coef[..., None] * v[..., : t + 1, :]).sum(axis=-2)
    return o


def forward_chunked(q, k, v, lam, chunk):
    """Chunkwise-parallel evaluation, equivalent to the sequential scan.

    Inter-chunk state is carried through cumulative decay products;
    intra-chunk terms use a masked quadratic form with telescoped
    pair products (no divisions).  Plain numpy, forward only.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    q, k, v, lam = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
                    for x in (q, k, v, lam))
    _check_shapes(q, k, v, lam)
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    batch = np.broadcast_shapes(q.shape[:-2], v.shape[:-2])
    lam = np.broadcast_to(lam, batch + (n, lam.shape[-1]))
    if lam.shape[-1] == 1:
        lam = np.broadcast_to(lam, batch + (n, dk))
    q = np.broadcast_to(q, batch + (n, dk))
    k = np.broadcast_to(k, batch + (n, dk))
    v = np.broadcast_to(v, batch + (n, dv))
    o = np.zeros(batch + (n, dv))
    s = np.zeros(batch + (dk, dv))
    for start in range(0, n, chunk):
        end = min(start + chunk, n)
        c = end - start
        ql, kl, vl, ll = (a[..., start:end, :] for a in (q, k, v, lam))
        # pair products D[t, j] = prod_{i=j+1}^t lam_i (local indices, j <= t)
        D = np.zeros(batch + (c, c, dk))
        for t in range(c):
            if t > 0:
                D[..., t, :t, :] = ll[..., t, None, :] * D[..., t - 1, :t, :]
            D[..., t, t, :] = 1.0
        # carried state: gamma_t = prod_{i=start}^t lam_i = lam_start * D[t, 0]
        gamma = ll[..., 0, None, :] * D[..., :, 0, :]
        o[..., start:end, :] = np.einsum("...td,...de->...te", ql * gamma, s)
        scores = np.einsum("...td,...tjd,...jd->...tj", ql, D, kl)
        mask = np.tril(np.ones((c, c)))
        o[..., start:end, :] += np.einsum("...tj,...je->...te", scores * mask, vl)
        s = gamma[..., -1, :, None] * s + np.einsum(
            "...jd,...je->...de", D[..., -1, :, :] * kl, vl)
    return o


@dataclass
class DplrParams:
    """Delta-rule low-rank correction: transition diag(lam) - beta kappa kappa^T.

    ``kappa`` is (..., n, dk) with unit rows (L2-normalized unless
    ``normalize`` is disabled, in which case unit norm is asserted),
    ``beta`` is (..., n, 1) with entries in (0, 1).
    """

    kappa: object
    beta: object
    normalize: bool = True


def _normalize_rows(kappa):
    nrm = T.sqrt(T.tsum(kappa * kappa, axis=-1, keepdims=True) + 1e-12)
    return kappa / nrm


def forward_dplr(q, k, v, lam, params: DplrParams):
    """Scan with transition M_t = diag(lam_t) - beta_t kappa_t kappa_t^T.

    With beta = 0 this is exactly the diagonal recurrence; with lam = 1
    and beta = 1 it is the classical delta-rule overwrite.  Differentiable
    in all inputs including kappa and beta.
    """
    q, k, v, lam = as_tensor(q), as_tensor(k), as_tensor(v), as_tensor(lam)
    _check_shapes(q.data, k.data, v.data, lam.data)
    kappa = as_tensor(params.kappa)
    beta = as_tensor(params.beta)
    if params.normalize:
        kappa = _normalize_rows(kappa)
    else:
        nrm = np.linalg.norm(kappa.data, axis=-1)
        if not np.allclose(nrm, 1.0, atol=1e-8):
            raise ValueError("forward_dplr: kappa rows must be unit-norm when normalization is disabled")
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    batch = np.broadcast_shapes(q.data.shape[:-2], v.data.shape[:-2])
    states = np.zeros(batch + (n, dk, dv))
    o_data = np.zeros(batch + (n, dv))
    s = np.zeros(batch + (dk, dv))
    kap, bet = kappa.data, beta.data
    for t in range(n):
        u = (kap[..., t, :, None] * s).sum(axis=-2)  # kappa^T s_{t-1}
        s = (lam.data[..., t, :, None] * s
             - bet[..., t, :, None] * kap[..., t, :, None] * u[..., None, :]
             + k.data[..., t, :, None] * v.data[..., t, None, :])
        states[..., t, :, :] = s
        o_data[..., t, :] = (q.data[..., t, :, None] * s).sum(axis=-2)
    out = Tensor(o_data)

    def bw(g):
        dq = np.zeros_like(q.data)
        dk_ = np.zeros_like(k.data)
        dv_ = np.zeros_like(v.data)
        dlam = np.zeros_like(lam.data)
        dkap = np.zeros_like(kap)
        dbet = np.zeros_like(bet)
        ds = np.zeros_like(states[..., 0, :, :])
        scalar_lam = lam.shape[-1] == 1
        for t in range(n - 1, -1, -1):
            st = states[..., t, :, :]
            go = g[..., t, None, :]
            dq[..., t, :] = (st * go).sum(axis=-1)
            ds = ds + q.data[..., t, :, None] * go
            s_prev = states[..., t - 1, :, :] if t > 0 else np.zeros_like(st)
            kt = kap[..., t, :]
            bt = bet[..., t, :]
            u = (kt[..., :, None] * s_prev).sum(axis=-2)         # s_prev^T kappa, (dv,)
            w = (kt[..., :, None] * ds).sum(axis=-2)             # ds^T kappa, (dv,)
            dl = (ds * s_prev).sum(axis=-1)
            dlam[..., t, :] = dl.sum(axis=-1, keepdims=True) if scalar_lam else dl
            dbet[..., t, :] = -(w * u).sum(axis=-1, keepdims=True)
            dkap[..., t, :] = -bt * ((ds * u[..., None, :]).sum(axis=-1)
                                     + (s_prev * w[..., None, :]).sum(axis=-1))
            dk_[..., t, :] = (ds * v.data[..., t, None, :]).sum(axis=-1)
            dv_[..., t, :] = (ds * k.data[..., t, :, None]).sum(axis=-2)
            ds = lam.data[..., t, :, None] * ds - bt[..., None] * kt[..., :, None] * w[..., None, :]
        T._accum(q, dq)
        T._accum(k, dk_)
        T._accum(v, dv_)
        T._accum(lam, dlam)
        T._accum(kappa, dkap)
        T._accum(beta, dbet)

    return T._record(out, (q, k, v, lam, kappa, beta), bw)


def dplr_dense_oracle(q, k, v, lam, kappa, beta):
    """Materialize M_t and run the dense recurrence. Test oracle only."""
    q, k, v, lam, kappa, beta = (x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
                                 for x in (q, k, v, lam, kappa, beta))
    n, dk = q.shape[-2], q.shape[-1]
    dv = v.shape[-1]
    o = np.zeros(q.shape[:-1] + (dv,))
    s = np.zeros(q.shape[:-2] + (dk, dv))
    eye = np.eye(dk)
    for t in range(n):
        lt = np.broadcast_to(lam[..., t, :], q.shape[:-2] + (dk,))
        M = lt[..., :, None] * eye - beta[..., t, :, None] * (
            kappa[..., t, :, None] * kappa[..., t, None, :])
        s = np.matmul(M, s) + k[..., t, :, None] * v[..., t, None, :]
        o[..., t, :] = (q[..., t, :, None] * s).sum(axis=-2)
    return o


def cumulative_decay(lam):
    """Running elementwise product gamma_t = prod_{j<=t} lam_j along time."""
    lam = lam.data if isinstance(lam, Tensor) else np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("cumulative_decay: lam must lie in [0, 1]")
    return np.cumprod(lam, axis=-2)
