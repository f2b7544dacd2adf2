"""Decay-distribution instrumentation: run a model over a probe text,
record the decay values each layer actually feeds into its recurrence, and
summarize per-layer medians as tables and a small SVG chart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decay import ConfigError
from .model import ModelConfig, lm_forward


@dataclass
class LayerStats:
    layer: int
    count: int
    min: float
    median: float
    mean: float
    max: float


@dataclass
class DecayTrace:
    """Sampled decay values per layer with summary statistics.

    Medians aggregate over positions, heads, and dimensions jointly; the
    aggregation scope is recorded in ``meta`` for export.
    """

    samples: dict[int, np.ndarray] = field(default_factory=dict)
    meta: str = "aggregated over position x head x dim"

    def stats(self):
        out = []
        for layer in sorted(self.samples):
            vals = self.samples[layer]
            out.append(LayerStats(layer=layer, count=vals.size,
                                  min=float(vals.min()), median=median(vals),
                                  mean=float(vals.mean()), max=float(vals.max())))
        return out


def median(values):
    """Middle order statistic; mean of the two middle values for even counts."""
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("median of empty input")
    n = vals.size
    if n % 2:
        return float(np.partition(vals, n // 2)[n // 2])
    part = np.partition(vals, [n // 2 - 1, n // 2])
    return float((part[n // 2 - 1] + part[n // 2]) / 2.0)


def capture_trace(params, config: ModelConfig, tokens) -> DecayTrace:
    """One forward pass with tracing; returns the per-layer decay samples.

    Capture happens outside any gradient tape and does not perturb the
    forward computation.
    """
    if config.decay.strategy == "none":
        raise ConfigError("cannot probe a model with decay disabled")
    raw: list = []
    lm_forward(tokens, params, config, trace=raw)
    trace = DecayTrace()
    for layer_idx, lam in raw:
        flat = np.asarray(lam, dtype=np.float64).ravel()
        if layer_idx in trace.samples:
            flat = np.concatenate([trace.samples[layer_idx], flat])
        trace.samples[layer_idx] = flat
    return trace


def export_table(trace: DecayTrace, path):
    """CSV with header layer,count,min,median,mean,max at 9 significant digits."""
    lines = ["layer,count,min,median,mean,max"]
    for s in trace.stats():
        lines.append(f"{s.layer},{s.count},{s.min:.9g},{s.median:.9g},{s.mean:.9g},{s.max:.9g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def export_raw(trace: DecayTrace, shapes, path):
    """Optional raw dump layer,position,head,dim,value (can be large)."""
    with open(path, "w") as f:
        f.write("layer,position,head,dim,value\n")
        for layer in sorted(trace.samples):
            vals = trace.samples[layer]
            shape = shapes[layer]  # (..., h, n, dim)
            arr = vals.reshape(shape)
            flatb = arr.reshape(-1, *shape[-3:])
            for b in range(flatb.shape[0]):
                for h in range(shape[-3]):
                    for t in range(shape[-2]):
                        for c in range(shape[-1]):
                            f.write(f"{layer},{t},{h},{c},{flatb[b, h, t, c]:.9g}\n")


_SVG_W, _SVG_H = 640, 420
_MARGIN = 50
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#e377c2", "#17becf"]


def export_plot(traces: dict, path):
    """Layer index vs per-layer median for each named trace, as a single
    self-contained SVG with legend and a fixed [0, 1] y-range."""
    if not traces:
        raise ValueError("export_plot: need at least one trace")
    max_layer = max(max(t.samples) for t in traces.values())
    px0, px1 = _MARGIN, _SVG_W - _MARGIN
    py0, py1 = _SVG_H - _MARGIN, _MARGIN

    def xpix(layer):
        span = max(max_layer, 1)
        return px0 + (px1 - px0) * layer / span

    def ypix(v):
        v = min(max(v, 0.0), 1.0)
        return py0 + (py1 - py0) * v

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>',
        f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>',
        f'<text x="{(px0 + px1) / 2:.0f}" y="{_SVG_H - 12}" text-anchor="middle" '
        f'font-size="13">layer</text>',
        f'<text x="14" y="{(py0 + py1) / 2:.0f}" font-size="13" '
        f'transform="rotate(-90 14 {(py0 + py1) / 2:.0f})" text-anchor="middle">median decay</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = ypix(frac)
        parts.append(f'<text x="{px0 - 8}" y="{y:.1f}" text-anchor="end" '
                     f'font-size="11">{frac:g}</text>')
        parts.append(f'<line x1="{px0 - 4}" y1="{y:.1f}" x2="{px0}" y2="{y:.1f}" stroke="black"/>')
    for i, (name, trace) in enumerate(sorted(traces.items())):
        color = _COLORS[i % len(_COLORS)]
        pts = [(s.layer, s.median) for s in trace.stats()]
        coords = " ".join(f"{xpix(l):.2f},{ypix(m):.2f}" for l, m in pts)
        if len(pts) > 1:
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                         f'stroke-width="1.5"/>')
        for l, m in pts:
            parts.append(f'<circle cx="{xpix(l):.2f}" cy="{ypix(m):.2f}" r="3" '
                         f'fill="{color}"/>')
        ly = _MARGIN + 16 * i
        parts.append(f'<rect x="{px1 - 130}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{px1 - 115}" y="{ly}" font-size="12">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
