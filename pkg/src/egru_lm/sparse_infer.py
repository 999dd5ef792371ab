"""Event-driven inference over pruned models with exact MAC accounting.

Each gate matrix is stored as two CSC blocks: the input block (columns acting
on ``x``) and the recurrent block (columns acting on ``y_prev``). A step reads
only the columns of nonzero inputs, so its multiply-accumulate count is the sum
of stored entries over the active columns. Layer 1 sees dense embeddings and
reads every input column; higher layers read only columns of neurons that
fired in the layer below.

Only gate matrix work inside the recurrent layers is counted. The decoder
cost is reported separately for information.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core_math import CscMatrix, csc_from_dense, csc_matvec_active
from .egru import CellState, heaviside_output, sigmoid
from .lm import LmConfig, LmModel

GATES = {"egru": 3, "lstm": 4}


@dataclass(frozen=True)
class CompiledLayer:
    cell: str
    n_in: int
    hidden: int
    weight_names: tuple
    blocks: dict          # name -> (input CscMatrix, recurrent CscMatrix)
    stacked_in: CscMatrix  # all gates stacked row-wise, input block
    stacked_rec: CscMatrix  # gates acting on y_prev directly (u, r for EGRU; all for LSTM)
    rec_z: CscMatrix | None  # EGRU candidate gate, acts on r * y_prev
    bias: np.ndarray
    theta: np.ndarray | None


@dataclass(frozen=True)
class CompiledModel:
    config: LmConfig
    embedding: np.ndarray
    layers: tuple

    @property
    def event_driven(self):
        return self.config.cell == "egru" and self.config.mode == "event"


def _vstack_csc(blocks):
    dense = np.concatenate([b.to_dense() for b in blocks])
    return csc_from_dense(dense)


def compile_model(model: LmModel) -> CompiledModel:
    c = model.config
    layers = []
    for k, layer in enumerate(model.layers):
        n_in, H = layer.n_in, layer.hidden
        blocks = {}
        for name in layer.weight_names:
            W = getattr(layer, name)
            if W.shape != (H, n_in + H):
                raise ValueError(f"layer {k} {name} has shape {W.shape}")
            mask = None if model.masks is None else model.masks.get(f"layers.{k}.{name}")
            full = csc_from_dense(W, mask)
            blocks[name] = (full.column_block(0, n_in), full.column_block(n_in, n_in + H))
        names = layer.weight_names
        stacked_in = _vstack_csc([blocks[n][0] for n in names])
        if c.cell == "egru":
            stacked_rec = _vstack_csc([blocks["W_u"][1], blocks["W_r"][1]])
            rec_z = blocks["W_z"][1]
            theta = layer.theta.copy()
        else:
            stacked_rec = _vstack_csc([blocks[n][1] for n in names])
            rec_z = None
            theta = None
        bias = np.concatenate([getattr(layer, n) for n in layer.bias_names])
        layers.append(CompiledLayer(c.cell, n_in, H, names, blocks, stacked_in, stacked_rec,
                                    rec_z, bias, theta))
    return CompiledModel(c, model.embedding.copy(), tuple(layers))


def decompile(cm: CompiledModel) -> dict:
    """Dense gate matrices rebuilt from the CSC blocks, keyed like ``LmModel.named_tensors``."""
    out = {}
    for k, layer in enumerate(cm.layers):
        for name, (bin_, brec) in layer.blocks.items():
            out[f"layers.{k}.{name}"] = np.concatenate([bin_.to_dense(), brec.to_dense()], axis=1)
    return out


def _active(v, event):
    return np.flatnonzero(v) if event else np.arange(v.shape[0])


@dataclass
class StepMacs:
    input_macs: np.ndarray      # per layer
    recurrent_macs: np.ndarray  # per layer
    active_in: np.ndarray       # per layer, number of active input columns
    active_rec: np.ndarray      # per layer, number of active recurrent columns

    @property
    def total(self):
        return self.input_macs + self.recurrent_macs


def infer_step(cm: CompiledModel, x, states):
    """Advance every layer by one token given the embedded input ``x``.

    Returns ``(new_states, StepMacs)``. States are unbatched ``CellState``s.
    """
    event = cm.event_driven
    L = len(cm.layers)
    mi, mr = np.zeros(L, np.int64), np.zeros(L, np.int64)
    ai, ar = np.zeros(L, np.int64), np.zeros(L, np.int64)
    new_states = []
    for k, layer in enumerate(cm.layers):
        H = layer.hidden
        prev = states[k]
        act_in = np.arange(layer.n_in) if k == 0 else _active(x, event)
        act_rec = _active(prev.y, event)
        pre_in, m_in = csc_matvec_active(layer.stacked_in, x, act_in)
        pre_in += layer.bias
        pre_rec, m_rec = csc_matvec_active(layer.stacked_rec, prev.y, act_rec)
        if layer.cell == "egru":
            u = sigmoid(pre_in[:H] + pre_rec[:H])
            r = sigmoid(pre_in[H:2 * H] + pre_rec[H:])
            # r * y keeps the zero pattern of y, so the same columns suffice
            zr, m_z = csc_matvec_active(layer.rec_z, r * prev.y, act_rec)
            m_rec += m_z
            z = np.tanh(pre_in[2 * H:] + zr)
            c_hat = u * z + (1 - u) * prev.c
            if cm.config.mode == "dense":
                st = CellState(c_hat, c_hat)
            else:
                y, spike = heaviside_output(c_hat, layer.theta)
                st = CellState(c_hat - layer.theta * spike.astype(c_hat.dtype), y)
        else:
            a = pre_in + pre_rec
            i, f = sigmoid(a[:H]), sigmoid(a[H:2 * H])
            g, o = np.tanh(a[2 * H:3 * H]), sigmoid(a[3 * H:])
            cc = f * prev.c + i * g
            st = CellState(cc, o * np.tanh(cc))
        new_states.append(st)
        mi[k], mr[k] = m_in, m_rec
        ai[k], ar[k] = len(act_in), len(act_rec)
        x = st.y
    return new_states, StepMacs(mi, mr, ai, ar)


def zero_states(cm: CompiledModel):
    dt = cm.embedding.dtype
    return [CellState(np.zeros(l.hidden, dt), np.zeros(l.hidden, dt)) for l in cm.layers]


@dataclass
class SparseRun:
    logits: np.ndarray  # (T, V)
    macs: list          # StepMacs per step
    states: list


def run_tokens(cm: CompiledModel, tokens, states=None, with_logits=True) -> SparseRun:
    states = states or zero_states(cm)
    logits, macs = [], []
    for tok in np.asarray(tokens):
        states, m = infer_step(cm, cm.embedding[int(tok)], states)
        macs.append(m)
        if with_logits:
            logits.append(cm.embedding @ states[-1].y)
    return SparseRun(np.array(logits), macs, states)


# ------------------------------------------------------------------ MAC reports

def layer_dims(cell, embed_dim, hidden_dims):
    ins = (embed_dim,) + tuple(hidden_dims[:-1])
    return [(GATES[cell], n_in, h) for n_in, h in zip(ins, hidden_dims)]


@dataclass
class StructuralMacs:
    per_layer: list
    total: float


def count_macs_structural(cell="lstm", embed_dim=400, hidden_dims=(1150, 1150, 400),
                          sparsity=0.0) -> StructuralMacs:
    """Per-token gate MACs of the recurrent layers, scaled by weight density.

    Embedding lookup and decoder are not counted.
    """
    if isinstance(cell, LmConfig):
        cfg = cell
        cell, embed_dim, hidden_dims = cfg.cell, cfg.embed_dim, cfg.hidden_dims
    density = 1.0 - sparsity
    per = [g * (n_in + h) * h * density for g, n_in, h in layer_dims(cell, embed_dim, hidden_dims)]
    return StructuralMacs(per, sum(per))


@dataclass
class LayerMacs:
    layer: int
    dense_macs: int
    effective_macs: float
    lambda_a: float          # activity of this layer's own outputs (recurrent block input)
    lambda_w: float          # density of the whole gate matrices
    input_dense: int
    input_effective: float
    input_lambda_a: float
    input_lambda_w: float
    rec_dense: int
    rec_effective: float
    rec_lambda_w: float

    @property
    def rec_predicted(self):
        return self.lambda_a * self.rec_lambda_w * self.rec_dense

    @property
    def predicted(self):
        return self.input_lambda_a * self.input_lambda_w * self.input_dense + self.rec_predicted

    @property
    def rec_gap(self):
        return (self.rec_effective - self.rec_predicted) / self.rec_predicted if self.rec_predicted else 0.0

    @property
    def gap(self):
        return (self.effective_macs - self.predicted) / self.predicted if self.predicted else 0.0

    @property
    def reduction(self):
        return self.dense_macs / self.effective_macs if self.effective_macs else float("inf")


@dataclass
class MacReport:
    layers: list
    decoder_macs: int
    n_tokens: int
    notes: list = field(default_factory=list)

    @property
    def total_dense(self):
        return sum(l.dense_macs for l in self.layers)

    @property
    def total_effective(self):
        return sum(l.effective_macs for l in self.layers)

    @property
    def reduction_factor(self):
        return self.total_dense / self.total_effective if self.total_effective else float("inf")

    def rows(self):
        for l in self.layers:
            yield [l.layer, l.dense_macs, l.lambda_w, l.lambda_a, l.effective_macs, l.reduction,
                   l.rec_predicted, l.rec_effective, l.rec_gap]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["layer", "dense_macs", "lambda_w", "lambda_a", "effective_macs", "reduction",
                    "rec_predicted_macs", "rec_effective_macs", "rec_relative_gap"])
        for r in self.rows():
            w.writerow(r)
        w.writerow(["total", self.total_dense, "", "", self.total_effective, self.reduction_factor,
                    "", "", ""])
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'layer':>6} {'dense_macs':>12} {'lambda_w':>9} {'lambda_a':>9} {'effective_macs':>15} {'reduction':>10}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(f"{l.layer:>6} {l.dense_macs:>12,} {l.lambda_w:>9.3f} {l.lambda_a:>9.3f} "
                         f"{l.effective_macs:>15,.1f} {l.reduction:>9.2f}x")
        lines.append(f"{'total':>6} {self.total_dense:>12,} {'':>9} {'':>9} "
                     f"{self.total_effective:>15,.1f} {self.reduction_factor:>9.2f}x")
        lines.append(f"decoder (not in totals): {self.decoder_macs:,} MAC/token")
        lines += self.notes
        return "\n".join(lines)


def measure_effective_macs(cm: CompiledModel, tokens) -> MacReport:
    """Exact per-token MACs over a token stream, next to the ``lambda_a * lambda_w`` estimate."""
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("empty token stream")
    run = run_tokens(cm, tokens, with_logits=False)
    T = len(run.macs)
    mi = np.array([m.input_macs for m in run.macs], dtype=np.float64)
    mr = np.array([m.recurrent_macs for m in run.macs], dtype=np.float64)
    ai = np.array([m.active_in for m in run.macs], dtype=np.float64)
    ar = np.array([m.active_rec for m in run.macs], dtype=np.float64)
    layers = []
    for k, layer in enumerate(cm.layers):
        g, H, n_in = len(layer.weight_names), layer.hidden, layer.n_in
        nnz_in = sum(b[0].nnz for b in layer.blocks.values())
        nnz_rec = sum(b[1].nnz for b in layer.blocks.values())
        in_dense, rec_dense = g * n_in * H, g * H * H
        layers.append(LayerMacs(
            layer=k + 1,
            dense_macs=in_dense + rec_dense,
            effective_macs=float((mi[:, k] + mr[:, k]).mean()),
            lambda_a=float(ar[:, k].mean() / H),
            lambda_w=(nnz_in + nnz_rec) / (in_dense + rec_dense),
            input_dense=in_dense,
            input_effective=float(mi[:, k].mean()),
            input_lambda_a=float(ai[:, k].mean() / n_in),
            input_lambda_w=nnz_in / in_dense,
            rec_dense=rec_dense,
            rec_effective=float(mr[:, k].mean()),
            rec_lambda_w=nnz_rec / rec_dense,
        ))
    V, E = cm.embedding.shape
    notes = ["layer-1 input block counted with every embedding column active"]
    return MacReport(layers, V * E, T, notes)
