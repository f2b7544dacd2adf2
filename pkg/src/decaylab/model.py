"""The decay linear transformer: token mixer (silu-kernel linear attention
with a configurable decay mechanism, optional positional encoding, low-rank
sigmoid output gate), GLU channel mixer, pre-norm residual blocks, byte/token
embedding and LM head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import decay as D
from . import posenc as P
from . import tensor as T
from .decay import ConfigError, DecayConfig, DecayProjection
from .recurrence import DplrParams, forward_dplr, forward_sequential
from .tensor import Tensor

POSENCS = ("none", "rope", "lrpe", "tpe")
TRANSITIONS = ("diagonal", "dplr")


@dataclass
class ModelConfig:
    n_layers: int = 2
    hidden: int = 64
    heads: int = 4
    value_dim: int | None = None
    vocab: int = 256
    decay: DecayConfig = field(default_factory=DecayConfig)
    posenc: str = "none"
    transition: str = "diagonal"
    tie_embeddings: bool = False
    seed: int = 0
    glu_ratio: int = 2
    tpe_state: int = 4
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.value_dim is None:
            self.value_dim = self.hidden
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.value_dim % self.heads != 0:
            raise ConfigError(f"value_dim {self.value_dim} not divisible by heads {self.heads}")
        if self.value_dim != self.hidden:
            # residual blocks add mixer output back to the stream; the token
            # mixer has no output projection, so the widths must agree
            raise ConfigError("value_dim must equal hidden")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.posenc not in POSENCS:
            raise ConfigError(f"unknown posenc {self.posenc!r}")
        if self.transition not in TRANSITIONS:
            raise ConfigError(f"unknown transition {self.transition!r}")
        if self.posenc == "rope" and (self.hidden // self.heads) % 2 != 0:
            raise ConfigError("rope needs an even head dimension")

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def head_value_dim(self):
        return self.value_dim // self.heads


def config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["decay"] = DecayConfig(**d.get("decay", {}))
    return ModelConfig(**d)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _trunc_normal(rng, shape, std=0.02, clip=2.0):
    """Normal(0, std^2) truncated at +-clip sigma, by rejection."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > clip * std
    while np.any(bad):
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > clip * std
    return x


def _leaf(rng, shape, std=0.02):
    return Tensor(_trunc_normal(rng, shape, std), requires_grad=True)


def mamba2_scalar_init(heads):
    """A_j = ln(a_j), a_j log-spaced in [1, 16]; Delta with sigmoid(-Delta)=0.9."""
    a = np.log(np.logspace(0.0, np.log10(16.0), heads))
    delta = np.full(heads, -np.log(9.0))  # -argsigmoid(0.9)
    return a, delta


def tnl_l_init(heads, layer, n_layers):
    """Unconstrained g with exp(-softplus(g)) equal to the TNL constant.

    The last layer's constant is exactly 1, which softplus cannot reach;
    its target is clamped so the learnable value starts at 1 - ~1e-6.
    """
    g = np.empty(heads)
    for j in range(1, heads + 1):
        c = max(8.0 * j / heads * (1.0 - layer / n_layers), 1e-6)
        g[j - 1] = np.log(np.expm1(c))
    return g


def init_params(config: ModelConfig, seed=None):
    """Full parameter set as a flat name -> Tensor dict, reproducible from seed."""
    rng = np.random.Generator(np.random.Philox(config.seed if seed is None else seed))
    d, h = config.hidden, config.heads
    dk, dv = config.head_dim, config.head_value_dim
    e = config.value_dim
    dc = config.decay
    params: dict[str, Tensor] = {}
    params["embedding"] = _leaf(rng, (config.vocab, d))
    if config.posenc == "tpe":
        m = config.tpe_state
        scale = 1.0 / np.sqrt(m)
        params["tpe.a"] = Tensor(rng.normal(0.0, scale, size=(d, m)), requires_grad=True)
        params["tpe.b"] = Tensor(rng.normal(0.0, scale, size=(d, m)), requires_grad=True)
        params["tpe.gates"] = Tensor(rng.uniform(1.0, 3.0, size=(d, m)), requires_grad=True)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        params[pre + "attn_norm"] = Tensor(np.ones(d), requires_grad=True)
        params[pre + "wq"] = _leaf(rng, (h, d, dk))
        if dc.sharing != "shared":
            params[pre + "wk"] = _leaf(rng, (h, d, dk))
        params[pre + "wv"] = _leaf(rng, (h, d, dv))
        if dc.strategy not in ("none", "tnl", "tnl_l"):
            if dc.granularity == "scalar":
                params[pre + "decay.w_scalar"] = _leaf(rng, (h, d, 1))
            elif dc.sharing == "shared":
                params[pre + "decay.w_shared"] = _leaf(rng, (h, d, dk))
            else:
                params[pre + "decay.w_low"] = _leaf(rng, (d, dk))
                params[pre + "decay.w_head"] = _leaf(rng, (h, dk, dk))
        if dc.strategy in ("mamba2", "mamba2_no_delta"):
            a, _ = mamba2_scalar_init(h)
            params[pre + "decay.a"] = Tensor(a.reshape(h, 1, 1), requires_grad=True)
        if dc.strategy in ("mamba2", "mamba2_no_a"):
            _, delta = mamba2_scalar_init(h)
            params[pre + "decay.delta"] = Tensor(delta.reshape(h, 1, 1), requires_grad=True)
        if dc.strategy == "simple":
            delta = np.full((h, 1, 1), D.simple_decay_init(dc.p))
            params[pre + "decay.delta"] = Tensor(delta, requires_grad=True)
        if dc.strategy == "tnl_l":
            g = tnl_l_init(h, i + 1, config.n_layers)
            params[pre + "decay.g"] = Tensor(g.reshape(h, 1, 1), requires_grad=True)
        if config.transition == "dplr":
            params[pre + "wkappa"] = _leaf(rng, (h, d, dk))
            params[pre + "wbeta"] = _leaf(rng, (h, d, 1))
        params[pre + "wu1"] = _leaf(rng, (d, dk))
        params[pre + "wu2"] = _leaf(rng, (dk, e))
        params[pre + "out_norm"] = Tensor(np.ones(e), requires_grad=True)
        params[pre + "glu_norm"] = Tensor(np.ones(d), requires_grad=True)
        hidden = config.glu_ratio * d
        params[pre + "glu.wg"] = _leaf(rng, (d, hidden))
        params[pre + "glu.wu"] = _leaf(rng, (d, hidden))
        params[pre + "glu.wo"] = _leaf(rng, (hidden, d))
    params["final_norm"] = Tensor(np.ones(d), requires_grad=True)
    if not config.tie_embeddings:
        params["lm_head"] = _leaf(rng, (d, config.vocab))
    return params


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; guards weight duplication across modes."""
    d, h = config.hidden, config.heads
    dk, dv, e = config.head_dim, config.head_value_dim, config.value_dim
    dc = config.decay
    n = config.vocab * d                       # embedding
    if not config.tie_embeddings:
        n += d * config.vocab                  # lm head
    n += d                                     # final norm
    if config.posenc == "tpe":
        n += 3 * d * config.tpe_state
    per_layer = 2 * d + e                      # attn/glu norms + out norm
    per_layer += h * d * dk                    # wq
    if dc.sharing != "shared":
        per_layer += h * d * dk                # wk
    per_layer += h * d * dv                    # wv
    if dc.strategy not in ("none", "tnl", "tnl_l"):
        if dc.granularity == "scalar":
            per_layer += h * d
        elif dc.sharing == "shared":
            per_layer += h * d * dk
        else:
            per_layer += d * dk + h * dk * dk
    per_layer += {"mamba2": 2 * h, "mamba2_no_a": h, "mamba2_no_delta": h,
                  "simple": h, "tnl_l": h}.get(dc.strategy, 0)
    if config.transition == "dplr":
        per_layer += h * d * dk + h * d
    per_layer += d * dk + dk * e               # output gate
    per_layer += 3 * config.glu_ratio * d * d  # glu
    return n + config.n_layers * per_layer


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _head_project(x, w):
    """(..., n, d) @ (h, d, dh) -> (..., h, n, dh)."""
    xh = T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])
    return T.matmul(xh, w)


def compute_decay(x, params, config: ModelConfig, layer_idx, n, batch):
    """Decay values lambda for one layer, shaped (..., h, n, dk) or (..., h, n, 1)."""
    dc = config.decay
    h = config.heads
    pre = f"layers.{layer_idx}."
    if dc.strategy == "none":
        return Tensor(np.ones(batch + (h, n, 1)))
    if dc.strategy == "tnl":
        const = np.array([D.tnl_decay(j, h, layer_idx + 1, config.n_layers)
                          for j in range(1, h + 1)])
        return Tensor(np.broadcast_to(const.reshape(h, 1, 1), batch + (h, n, 1)).copy())
    if dc.strategy == "tnl_l":
        lam_h = T.exp(-T.softplus(params[pre + "decay.g"]))
        return T.broadcast_to(lam_h, batch + (h, n, 1))
    proj = DecayProjection(
        w_scalar=params.get(pre + "decay.w_scalar"),
        w_low=params.get(pre + "decay.w_low"),
        w_head=params.get(pre + "decay.w_head"),
        w_shared=params.get(pre + "decay.w_shared"),
    )
    f = D.decay_activations(x, proj, dc)
    if dc.strategy == "lightnet":
        return D.lightnet_decay(f)
    lb = dc.lower_bound
    if lb is None:
        lb = D.hgrn2_lower_bound(layer_idx + 1, config.n_layers)
    return D.pointwise_decay(
        f, dc.strategy,
        a=params.get(pre + "decay.a"),
        delta=params.get(pre + "decay.delta"),
        tau=dc.tau,
        lower_bound=lb,
    )


def token_mixer_forward(x, params, config: ModelConfig, layer_idx, trace=None):
    """Per-head linear attention with decay; returns (..., n, hidden).

    ``trace``, when given, is a list receiving the per-layer lambda values
    exactly as fed to the recurrence (plain arrays, post-sharing).
    """
    dc = config.decay
    n = x.shape[-2]
    batch = x.shape[:-2]
    pre = f"layers.{layer_idx}."
    q = T.silu(_head_project(x, params[pre + "wq"]))
    lam = compute_decay(x, params, config, layer_idx, n, batch)
    if trace is not None:
        trace.append((layer_idx, lam.data.copy()))
    if dc.sharing == "shared":
        k = D.shared_key(lam)
    else:
        k = T.silu(_head_project(x, params[pre + "wk"]))
    v = _head_project(x, params[pre + "wv"])
    if config.posenc == "rope":
        rp = P.RopeParams(config.head_dim, config.rope_base)
        q, k = P.rope_apply(q, rp), P.rope_apply(k, rp)
    elif config.posenc == "lrpe":
        lp = _lrpe_params(config)
        q, k = P.lrpe_apply(q, lp), P.lrpe_apply(k, lp)
        if lam.shape[-1] != 1:
            lam = T.concat([lam, lam], axis=-1)
    if config.transition == "dplr":
        kappa = T.silu(_head_project(x, params[pre + "wkappa"]))
        beta = T.sigmoid(_head_project(x, params[pre + "wbeta"]))
        o = forward_dplr(q, k, v, lam, DplrParams(kappa=kappa, beta=beta))
    else:
        o, _ = forward_sequential(q, k, v, lam)
    # (..., h, n, dv) -> (..., n, h * dv)
    nb = len(batch)
    perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)
    o = T.reshape(T.transpose(o, perm), batch + (n, config.value_dim))
    u = T.sigmoid(T.matmul(T.matmul(x, params[pre + "wu1"]), params[pre + "wu2"]))
    return T.rmsnorm(o * u, params[pre + "out_norm"])


def _lrpe_params(config):
    rng = np.random.Generator(np.random.Philox([config.seed, 0x1e9e]))
    return P.LrpeParams(rng.normal(0.0, 1.0, size=config.head_dim))


def glu_forward(x, params, layer_idx):
    """Channel mixer: Wo(sigmoid(x Wg) * (x Wu))."""
    pre = f"layers.{layer_idx}.glu."
    gate = T.sigmoid(T.matmul(x, params[pre + "wg"]))
    return T.matmul(gate * T.matmul(x, params[pre + "wu"]), params[pre + "wo"])


def lm_forward(tokens, params, config: ModelConfig, trace=None):
    """Token ids (..., n) -> logits (..., n, vocab)."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ValueError(f"token id out of range [0, {config.vocab})")
    x = params["embedding"][tokens]
    if config.posenc == "tpe":
        x = P.tpe_apply(x, P.TpeParams(params["tpe.a"], params["tpe.b"], params["tpe.gates"]))
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        x = x + token_mixer_forward(T.rmsnorm(x, params[pre + "attn_norm"]),
                                    params, config, i, trace=trace)
        x = x + glu_forward(T.rmsnorm(x, params[pre + "glu_norm"]), params, i)
    x = T.rmsnorm(x, params["final_norm"])
    if config.tie_embeddings:
        return T.matmul(x, T.transpose(params["embedding"], (1, 0)))
    return T.matmul(x, params["lm_head"])
