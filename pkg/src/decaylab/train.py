"""Byte-level language-model training: corpus handling, deterministic
batching, cross-entropy, AdamW with decoupled weight decay, the
warmup-stable-decay learning-rate schedule, and the training loop.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .model import ModelConfig, init_params, lm_forward
from .tensor import Tape, Tensor, backward

VOCAB_BYTES = 256


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    total_steps: int = 1000
    warmup_fraction: float = 0.05
    stable_fraction: float = 0.75
    final_lr_ratio: float = 0.1
    batch_size: int = 8
    seq_len: int = 128
    seed: int = 0
    grad_clip_norm: float = 1.0
    val_every: int = 50
    checkpoint_every: int = 0  # 0: only at the end
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.warmup_fraction > 0:
            raise ValueError("warmup_fraction must be > 0")
        if self.warmup_fraction + self.stable_fraction > 1.0 + 1e-12:
            raise ValueError("warmup_fraction + stable_fraction must be <= 1")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be > 0")
        if not 0.0 < self.final_lr_ratio <= 1.0:
            raise ValueError("final_lr_ratio must lie in (0, 1]")
        if self.total_steps < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("total_steps, batch_size and seq_len must be positive")


@dataclass
class Corpus:
    """Raw bytes of a text file with a deterministic train/validation split."""

    data: np.ndarray  # uint8
    split: int        # first validation index

    @property
    def train(self):
        return self.data[: self.split]

    @property
    def val(self):
        return self.data[self.split:]


def load_corpus(path, config: TrainConfig) -> Corpus:
    with open(path, "rb") as f:
        raw = np.frombuffer(f.read(), dtype=np.uint8)
    need = config.batch_size * (config.seq_len + 1)
    if len(raw) < need:
        raise ValueError(f"corpus too small: {len(raw)} bytes, need at least {need}")
    split = max(need, int(len(raw) * (1.0 - config.val_fraction)))
    return Corpus(data=raw.copy(), split=min(split, len(raw)))


def make_corpus(path, size=200_000, seed=0):
    """Write a synthetic English-like byte corpus (word salad with Zipfian
    frequencies and sentence structure) for smoke runs and demos."""
    rng = np.random.Generator(np.random.Philox([seed, 0xC0]))
    words = ["the", "of", "and", "to", "in", "a", "is", "that", "decay", "state",
             "linear", "attention", "model", "value", "key", "query", "layer",
             "head", "scan", "memory", "token", "signal", "gate", "norm",
             "position", "sequence", "median", "vector", "scalar", "product"]
    weights = 1.0 / np.arange(1, len(words) + 1)
    weights /= weights.sum()
    parts = []
    total = 0
    while total < size:
        length = int(rng.integers(4, 12))
        ws = rng.choice(len(words), size=length, p=weights)
        sent = " ".join(words[i] for i in ws)
        sent = sent[0].upper() + sent[1:] + (".\n" if rng.random() < 0.3 else ". ")
        parts.append(sent)
        total += len(sent)
    with open(path, "w") as f:
        f.write("".join(parts))
    return path


def next_batch(corpus: Corpus, config: TrainConfig, step, split="train"):
    """Deterministic (inputs, targets) from a counter-based generator keyed
    by (seed, step); targets are inputs shifted by one."""
    data = corpus.train if split == "train" else corpus.val
    if len(data) < config.seq_len + 1:
        raise ValueError("corpus split too small for seq_len")
    key = [config.seed, step] if split == "train" else [config.seed, step, 1]
    rng = np.random.Generator(np.random.Philox(key))
    offsets = rng.integers(0, len(data) - config.seq_len - 1, size=config.batch_size)
    idx = offsets[:, None] + np.arange(config.seq_len + 1)[None, :]
    window = data[idx].astype(np.int64)
    return window[:, :-1], window[:, 1:]


def cross_entropy(logits, targets):
    """Mean over positions of -log softmax(logits)[target], stable.

    Per-position gradient is (softmax(logits) - onehot(target)) / count.
    """
    logits = T.as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ValueError(f"target out of range [0, {V})")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = np.exp(x - m)
    s = z.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(s)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    count = picked.size
    out = Tensor(-picked.sum() / count)

    def bw(g):
        soft = z / s
        np.subtract.at(soft, tuple(np.indices(targets.shape)) + (targets,), 1.0)
        T._accum(logits, g * soft / count)

    return T._record(out, (logits,), bw)


def wsd_lr(step, config: TrainConfig):
    """Warmup-stable-decay schedule: linear ramp to peak, hold, linear decay
    down to final_lr_ratio * peak."""
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} out of range [0, {config.total_steps})")
    warm = max(1, int(round(config.warmup_fraction * config.total_steps)))
    stable_end = warm + int(round(config.stable_fraction * config.total_steps))
    stable_end = min(stable_end, config.total_steps)
    peak = config.peak_lr
    if step < warm:
        return peak * (step + 1) / warm
    if step < stable_end:
        return peak
    decay_steps = config.total_steps - stable_end
    frac = (step - stable_end + 1) / max(1, decay_steps)
    return peak * (1.0 - (1.0 - config.final_lr_ratio) * frac)


def decays_weight(name):
    """Weight decay applies to linear weights but not norm gains, decay
    scalars, or recurrent gates."""
    if "norm" in name:
        return False
    for suffix in ("decay.a", "decay.delta", "decay.g", "tpe.gates"):
        if name.endswith(suffix):
            return False
    return True


class AdamW:
    """Decoupled-weight-decay Adam over a flat parameter dict."""

    def __init__(self, params: dict, config: TrainConfig):
        self.config = config
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr):
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise T.ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            upd = mhat / (np.sqrt(vhat) + cfg.eps)
            if cfg.weight_decay and decays_weight(name):
                upd = upd + cfg.weight_decay * p.data
            p.data = p.data - lr * upd


def adamw_step(params, grads, opt: AdamW, lr):
    """Functional wrapper around :meth:`AdamW.step`."""
    opt.step(params, grads, lr)
    return params, opt


def clip_gradients(grads: dict, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm."""
    total = 0.0
    for name in sorted(grads):
        total += float((grads[name] ** 2).sum())
    norm = np.sqrt(total)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def loss_on_batch(params, config: ModelConfig, inputs, targets):
    logits = lm_forward(inputs, params, config)
    return cross_entropy(logits, targets)


def evaluate(params, config: ModelConfig, corpus, tcfg: TrainConfig, step):
    inputs, targets = next_batch(corpus, tcfg, step, split="val")
    return loss_on_batch(params, config, inputs, targets).item()


def train_loop(model_config: ModelConfig, train_config: TrainConfig, corpus: Corpus,
               out_dir, log=None):
    """Run training; writes metrics.txt and checkpoints under out_dir.

    Returns the metrics records as a list of dicts.  Fully reproducible
    from the seeds in the configs.
    """
    os.makedirs(out_dir, exist_ok=True)
    params = init_params(model_config)
    opt = AdamW(params, train_config)
    records = []
    metrics_path = os.path.join(out_dir, "metrics.txt")
    with open(metrics_path, "w") as mf:
        for step in range(train_config.total_steps):
            inputs, targets = next_batch(corpus, train_config, step)
            lr = wsd_lr(step, train_config)
            with Tape():
                loss = loss_on_batch(params, model_config, inputs, targets)
                backward(loss)
            grads = {}
            for name, p in params.items():
                grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.grad = None
            clip_gradients(grads, train_config.grad_clip_norm)
            opt.step(params, grads, lr)
            rec = {"step": step, "lr": lr, "train_loss": loss.item()}
            line = f"{step},{lr:.10g},{loss.item():.10g}"
            if train_config.val_every and (step + 1) % train_config.val_every == 0:
                vl = evaluate(params, model_config, corpus, train_config, step)
                rec["val_loss"] = vl
                line += f",{vl:.10g}"
            records.append(rec)
            mf.write(line + "\n")
            if log is not None and (step % 20 == 0 or step == train_config.total_steps - 1):
                log(f"step {step} lr {lr:.3g} loss {loss.item():.4f}")
            if (train_config.checkpoint_every
                    and (step + 1) % train_config.checkpoint_every == 0
                    and step + 1 < train_config.total_steps):
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step + 1:06d}.bin"),
                                params, model_config)
    save_checkpoint(os.path.join(out_dir, "ckpt_final.bin"), params, model_config)
    return records
