"""Post-hoc diagnostics: activity and cell-state histograms, the preactivation
expectation check, and sparsity/perplexity/MAC summary tables.

CSV files are the output contract; the SVG bar charts are for a quick look.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import batchify, windows
from .egru import SurrogateCfg
from .lm import LmModel, lm_forward


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    total: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.counts.sum()) != self.total:
            raise ValueError("histogram counts do not add up to total")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("histogram edges must be strictly increasing")

    def mean(self):
        centers = (self.edges[:-1] + self.edges[1:]) / 2
        return float((centers * self.counts).sum() / self.total)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(c)])


def histogram(values, bins, lo, hi, **meta) -> Histogram:
    """Uniform histogram on ``[lo, hi]``; out-of-range values land in the end bins."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=bins, range=(lo, hi))
    return Histogram(edges, counts, values.size, meta)


@dataclass
class Trace:
    """Per-layer outputs ``y`` and post-step cell states ``c`` over a stream, shaped (steps, hidden)."""

    y: list
    c: list
    a: list   # gate inputs [x; y_prev] per layer
    rz: list  # r * y_prev per layer (EGRU)


def collect_trace(model: LmModel, ids, bptt_len=70, cfg: SurrogateCfg | None = None) -> Trace:
    ids = np.asarray(ids)
    if ids.size < 2:
        raise ValueError("empty stream")
    stream = batchify(ids, 1)
    states = model.zero_states(1)
    L = model.config.n_layers
    ys, cs, acts, rzs = ([[] for _ in range(L)] for _ in range(4))
    for inp, _ in windows(stream, bptt_len):
        fwd = lm_forward(model, inp, states, train_mode=False, cfg=cfg)
        for k, tape in enumerate(fwd.tape["cells"]):
            steps = tape.steps
            ys[k].append(fwd.tape["ys"][k][:, 0])
            cs[k].append(_cell_states(model.layers[k], tape, fwd.states[k]))
            y_prev = np.stack([s.y_prev[0] for s in steps])
            acts[k].append(np.concatenate([tape.x[:, 0], y_prev], axis=1))
            if tape.mode != "lstm":
                ry = np.stack([s.r[0] * s.y_prev[0] for s in steps])
                rzs[k].append(np.concatenate([tape.x[:, 0], ry], axis=1))
        states = fwd.states
    cat = lambda parts: [np.concatenate(p) if p else None for p in parts]
    return Trace(cat(ys), cat(cs), cat(acts), cat(rzs))


def _cell_states(layer, tape, final):
    """Post-step local state ``c`` for every step of a batch-1 tape."""
    steps = tape.steps
    if tape.mode == "lstm":
        return np.stack([s.c_prev[0] for s in steps[1:]] + [final.c[0]])
    c_hat = np.stack([s.c_hat[0] for s in steps])
    if tape.mode == "dense":
        return c_hat
    return c_hat - layer.theta * np.stack([s.h[0] for s in steps])


def activity_histogram(model: LmModel, ids, bins=50, trace: Trace | None = None):
    """Per-neuron fraction of steps with nonzero output, binned on [0, 1], one per layer."""
    trace = trace or collect_trace(model, ids)
    out = []
    for k, y in enumerate(trace.y):
        if model.config.cell == "egru" and model.config.mode == "event":
            act = (y != 0).mean(axis=0)
        else:
            act = np.ones(y.shape[1])
        out.append(histogram(act, bins, 0.0, 1.0, layer=k + 1, quantity="activity"))
    return out


def cell_state_histogram(model: LmModel, ids, bins=50, trace: Trace | None = None):
    """Post-step ``c - theta`` over all neurons and steps, binned on mean +- 3 std."""
    trace = trace or collect_trace(model, ids)
    out = []
    for k, c in enumerate(trace.c):
        theta = getattr(model.layers[k], "theta", np.zeros(c.shape[1]))
        v = (c - theta).astype(np.float64)
        mu, sd = float(v.mean()), float(v.std())
        sd = sd if sd > 0 else 1.0
        out.append(histogram(v, bins, mu - 3 * sd, mu + 3 * sd, layer=k + 1, quantity="cell_state"))
    return out


@dataclass
class ExpectationCheck:
    mean_w: float
    mean_a: float
    mean_b: float
    fan_in: int
    predicted: float
    measured: float

    @property
    def gap(self):
        return self.measured - self.predicted

    @property
    def relative_gap(self):
        return abs(self.gap) / abs(self.measured) if self.measured else abs(self.gap)


def expectation_identity(W, a_samples, b) -> ExpectationCheck:
    """Compare the mean preactivation with ``mean(W) * mean(a) * fan_in + mean(b)``.

    ``a_samples`` is (n_samples, fan_in). The prediction holds when weights and
    activations are independent.
    """
    W = np.asarray(W, dtype=np.float64)
    a = np.asarray(a_samples, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    fan_in = W.shape[1]
    mw, ma, mb = float(W.mean()), float(a.mean()), float(b.mean())
    # mean over samples and rows of W a + b, without forming every product
    measured = float(W.sum(axis=0) @ a.mean(axis=0)) / W.shape[0] + mb
    return ExpectationCheck(mw, ma, mb, fan_in, mw * ma * fan_in + mb, measured)


def preactivation_diagnostic(model: LmModel, ids, trace: Trace | None = None):
    """Per layer and gate: both sides of the expectation identity on real activations."""
    trace = trace or collect_trace(model, ids)
    rows = []
    for k, layer in enumerate(model.layers):
        for wname, bname in zip(layer.weight_names, layer.bias_names):
            a = trace.rz[k] if wname == "W_z" and trace.rz[k] is not None else trace.a[k]
            chk = expectation_identity(getattr(layer, wname), a, getattr(layer, bname))
            rows.append({"layer": k + 1, "gate": wname, **chk.__dict__,
                         "gap": chk.gap})
    return rows


def write_diagnostic_csv(rows, path):
    keys = ["layer", "gate", "mean_w", "mean_a", "mean_b", "fan_in", "predicted", "measured", "gap"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] for k in keys])


def svg_bars(hist: Histogram, title="") -> str:
    """Minimal self-contained SVG bar chart of a histogram."""
    W, H, pad = 480, 240, 30
    n = len(hist.counts)
    top = max(int(hist.counts.max()), 1)
    bw = (W - 2 * pad) / n
    bars = []
    for i, c in enumerate(hist.counts):
        h = (H - 2 * pad) * c / top
        bars.append(f'<rect x="{pad + i * bw:.1f}" y="{H - pad - h:.1f}" width="{max(bw - 1, 0.5):.1f}" '
                    f'height="{h:.1f}" fill="#4477aa"/>')
    lo, hi = hist.edges[0], hist.edges[-1]
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">'
            f'<text x="{pad}" y="18" font-size="12">{title}</text>'
            + "".join(bars)
            + f'<text x="{pad}" y="{H - 10}" font-size="10">{lo:.3g}</text>'
            f'<text x="{W - pad}" y="{H - 10}" font-size="10" text-anchor="end">{hi:.3g}</text>'
            "</svg>")


def write_histograms(hists, out_dir):
    """``{out_dir}/{quantity}_{layer}.csv`` plus a matching ``.svg``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for h in hists:
        stem = f"{h.meta['quantity']}_{h.meta['layer']}"
        h.to_csv(out_dir / f"{stem}.csv")
        (out_dir / f"{stem}.svg").write_text(svg_bars(h, stem), encoding="utf-8")
        paths.append(out_dir / f"{stem}.csv")
    return paths


# ---------------------------------------------------------------- summary tables

RESULT_FIELDS = ("model", "weight_sparsity", "macs", "valid_ppl", "test_ppl", "seed")


def write_results(path, rows):
    """Append result rows (dicts with ``RESULT_FIELDS``) to a run's ``results.csv``."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RESULT_FIELDS})


class NoRunsError(FileNotFoundError):
    pass


def emit_tables(run_dir, out_dir=None):
    """Aggregate every ``results.csv`` below ``run_dir`` by model and weight sparsity.

    Writes ``summary.csv`` and ``summary.txt`` (min and mean +- population std of
    validation and test perplexity over seeds) and returns the summary rows.
    """
    run_dir = Path(run_dir)
    files = sorted(run_dir.rglob("results.csv")) if run_dir.exists() else []
    groups = defaultdict(list)
    for f in files:
        with open(f, newline="") as fh:
            for r in csv.DictReader(fh):
                key = (r["model"], round(float(r["weight_sparsity"]), 4))
                groups[key].append(r)
    if not groups:
        raise NoRunsError(f"no runs found under {run_dir}")
    summary = []
    for (model, sp), rows in sorted(groups.items()):
        valid = np.array([float(r["valid_ppl"]) for r in rows])
        test = np.array([float(r["test_ppl"]) for r in rows])
        macs = np.array([float(r["macs"]) for r in rows])
        summary.append({
            "model": model, "weight_sparsity": sp, "macs": float(macs.mean()), "n_runs": len(rows),
            "valid_min": float(valid.min()), "valid_mean": float(valid.mean()), "valid_std": float(valid.std()),
            "test_min": float(test.min()), "test_mean": float(test.mean()), "test_std": float(test.std()),
        })
    out_dir = Path(out_dir) if out_dir else run_dir
    keys = list(summary[0])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(summary)
    lines = [f"{'model':<8} {'sparsity':>8} {'MAC':>10} {'valid min':>10} {'valid mean+-std':>18} "
             f"{'test min':>10} {'test mean+-std':>18}"]
    for s in summary:
        lines.append(f"{s['model']:<8} {s['weight_sparsity'] * 100:>7.0f}% {_fmt_macs(s['macs']):>10} "
                     f"{s['valid_min']:>10.2f} {s['valid_mean']:>10.2f} +- {s['valid_std']:<5.2f} "
                     f"{s['test_min']:>10.2f} {s['test_mean']:>10.2f} +- {s['test_std']:<5.2f}")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary


def _fmt_macs(v):
    if v >= 1e6:
        return f"{v / 1e6:.1f}M"
    if v >= 1e3:
        return f"{v / 1e3:.1f}k"
    return f"{v:.0f}" if math.isfinite(v) else "-"
