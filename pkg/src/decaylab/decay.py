"""Decay parameterization strategies for linear attention.

Implements every row of the decay taxonomy: the Mamba2 family and its
ablations, GLA, Hgrn2, LightNet's cumulative-softmax decay, the TNL
constants and their learnable variant, and the proposed Simple Decay,
together with the scalar/vector granularity split, the low-rank decay
projections, and key sharing (k = 1 - lambda).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

STRATEGIES = (
    "mamba2", "mamba2_no_a", "mamba2_no_delta", "mamba2_no_a_delta",
    "gla", "hgrn2", "lightnet", "tnl", "tnl_l", "simple", "none",
)
POINTWISE = (
    "mamba2", "mamba2_no_a", "mamba2_no_delta", "mamba2_no_a_delta",
    "gla", "hgrn2", "simple",
)
GRANULARITIES = ("scalar", "vector")
SHARINGS = ("independent", "shared")


class ConfigError(ValueError):
    """Raised for invalid or inconsistent decay configuration."""


@dataclass
class DecayConfig:
    """Strategy tag plus the knobs of the taxonomy table.

    ``tau`` is GLA's temperature, ``p`` the Simple Decay initialization
    target, ``lower_bound`` the Hgrn2 per-layer floor (depth-dependent
    default is filled in by the model).
    """

    strategy: str = "mamba2"
    granularity: str = "vector"
    sharing: str = "independent"
    tau: float = 16.0
    p: float = 0.99
    lower_bound: float | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown decay strategy {self.strategy!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.sharing not in SHARINGS:
            raise ConfigError(f"unknown sharing mode {self.sharing!r}")
        if self.strategy in ("tnl", "tnl_l"):
            if self.granularity != "scalar" or self.sharing != "independent":
                raise ConfigError(f"{self.strategy} decay is scalar-only without sharing")
        if self.sharing == "shared" and self.granularity != "vector":
            raise ConfigError("parameter sharing requires vector granularity")
        if self.strategy == "none" and self.sharing == "shared":
            raise ConfigError("parameter sharing needs a decay strategy")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 < self.p < 1.0:
            raise ConfigError("p must lie in (0, 1)")
        if self.lower_bound is not None and not 0.0 <= self.lower_bound < 1.0:
            raise ConfigError("lower_bound must lie in [0, 1)")


@dataclass
class DecayProjection:
    """Weights producing the decay activation F from the layer input.

    Exactly one weight set is populated, matching (granularity, sharing):
    ``w_scalar`` (h, d, 1) for scalar decay, ``w_low`` (d, d/h) together
    with ``w_head`` (h, d/h, d/h) for independent vector decay (low-rank),
    ``w_shared`` (h, d, d/h) for shared vector decay.
    """

    w_scalar: Tensor | None = None
    w_low: Tensor | None = None
    w_head: Tensor | None = None
    w_shared: Tensor | None = None

    def check(self, config: DecayConfig):
        if config.granularity == "scalar":
            ok = self.w_scalar is not None and self.w_low is None and self.w_shared is None
        elif config.sharing == "shared":
            ok = self.w_shared is not None and self.w_scalar is None and self.w_low is None
        else:
            ok = (self.w_low is not None and self.w_head is not None
                  and self.w_scalar is None and self.w_shared is None)
        if not ok:
            raise ConfigError(
                f"decay projection weights do not match granularity={config.granularity}, "
                f"sharing={config.sharing}")


def decay_activations(x, proj: DecayProjection, config: DecayConfig):
    """Decay activation F per head.

    ``x`` has shape (..., n, d); the result has shape (..., h, n, 1) for
    scalar decay or (..., h, n, d/h) for vector decay.
    """
    proj.check(config)
    x = as_tensor(x)
    xh = T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    if config.granularity == "scalar":
        return T.matmul(xh, proj.w_scalar)
    if config.sharing == "shared":
        return T.matmul(xh, proj.w_shared)
    return T.matmul(T.matmul(xh, proj.w_low), proj.w_head)


def pointwise_decay(f, strategy, *, a=None, delta=None, tau=None, lower_bound=None):
    """Apply a pointwise parameterization formula elementwise to F.

    ``a``, ``delta`` are the per-head learnable scalars (broadcastable to
    F), ``tau`` the temperature, ``lower_bound`` the Hgrn2 floor.  LightNet
    and TNL are not pointwise; use their dedicated entry points.
    """
    if strategy not in POINTWISE:
        raise ConfigError(f"{strategy!r} is not a pointwise decay strategy")
    f = as_tensor(f)
    if strategy == "mamba2":
        return T.power(T.sigmoid(-f - as_tensor(delta)), T.exp(as_tensor(a)))
    if strategy == "mamba2_no_a":
        return T.sigmoid(-f - as_tensor(delta))
    if strategy == "mamba2_no_delta":
        return T.power(T.sigmoid(-f), T.exp(as_tensor(a)))
    if strategy == "mamba2_no_a_delta":
        return T.sigmoid(-f)
    if strategy == "gla":
        return T.power(T.sigmoid(f), 1.0 / as_tensor(tau))
    if strategy == "hgrn2":
        lb = as_tensor(lower_bound)
        return lb + (1.0 - lb) * T.sigmoid(f)
    # simple
    return T.sigmoid(f + as_tensor(delta))


def lightnet_decay(f):
    """Cumulative-softmax decay: lambda_t = d_{t-1} / d_t, d_t = sum_{i<=t} exp(F_i).

    Time runs along axis -2.  The empty prefix gives lambda_1 = 0, and
    1 - lambda_t = exp(F_t) / d_t holds.  Computed through a running
    logsumexp, so lambda_t depends only on F_{<=t} (exact causality).
    """
    f = as_tensor(f)
    x = f.data
    if x.shape[-2] < 1:
        raise ValueError("lightnet_decay: need at least one position")
    lse = np.logaddexp.accumulate(x, axis=-2)
    lam_data = np.concatenate(
        [np.zeros_like(x[..., :1, :]),
         np.exp(lse[..., :-1, :] - lse[..., 1:, :])], axis=-2)
    out = Tensor(lam_data)
    # backward works with shifted softmax terms; every ratio below is
    # invariant to the shift
    m = x.max(axis=-2, keepdims=True)
    z = np.exp(x - m)
    d = np.cumsum(z, axis=-2)
    d_prev = np.concatenate([np.zeros_like(d[..., :1, :]), d[..., :-1, :]], axis=-2)

    def bw(g):
        # d lambda_t / dF_s = [s<=t-1] z_s/d_t - [s<=t] z_s d_{t-1}/d_t^2
        r1 = g / d
        r2 = g * d_prev / (d * d)
        # suffix sums: sum_{t>=s+1} r1_t  and  sum_{t>=s} r2_t
        s1 = np.flip(np.cumsum(np.flip(r1, axis=-2), axis=-2), axis=-2)
        s1 = np.concatenate([s1[..., 1:, :], np.zeros_like(s1[..., :1, :])], axis=-2)
        s2 = np.flip(np.cumsum(np.flip(r2, axis=-2), axis=-2), axis=-2)
        T._accum(f, z * (s1 - s2))

    return T._record(out, (f,), bw)


def tnl_decay(j, h, l, L):
    """Data-independent decay constant exp(-8j/h * (1 - l/L)).

    ``j`` and ``l`` are 1-based head and layer indices.
    """
    if not 1 <= j <= h:
        raise IndexError(f"head index {j} out of range 1..{h}")
    if not 1 <= l <= L:
        raise IndexError(f"layer index {l} out of range 1..{L}")
    return math.exp(-8.0 * j / h * (1.0 - l / L))


def simple_decay_init(p):
    """Delta = argsigmoid(p) = ln(p / (1-p)), so sigmoid(Delta) == p."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"simple_decay_init: p must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))


def shared_key(lam):
    """Parameter-sharing key: k = 1 - lambda, exact."""
    return 1.0 - as_tensor(lam)


def hgrn2_lower_bound(l, L):
    """Default depth-increasing Hgrn2 floor for 1-based layer l of L."""
    return l / (L + 1.0)
