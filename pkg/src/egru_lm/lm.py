"""Stacked recurrent language model with a tied decoder.

Embedding lookup, ``n_layers`` recurrent layers without skip connections, and
logits computed as ``embedding @ y_top`` (the decoder *is* the embedding, no
bias, no extra projection). Training mode adds DropConnect on the recurrent
weight blocks and locked (per-window) inverted dropout on layer inputs/outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core_math import DTYPE, Rng, ShapeError
from .egru import CELLS, CellState, SurrogateCfg


@dataclass
class LmConfig:
    vocab_size: int = 10000
    embed_dim: int = 128
    hidden_dims: tuple = (128, 128, 128)
    cell: str = "egru"
    mode: str = "event"
    dropconnect_p: float = 0.0
    dropout_p: float = 0.0
    theta_low: float = 0.0
    theta_high: float = 1.0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.mode not in ("event", "dense"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.hidden_dims[-1] != self.embed_dim:
            raise ValueError("last hidden size must equal embed_dim for tied weights")
        for name in ("dropconnect_p", "dropout_p"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")

    @property
    def n_layers(self):
        return len(self.hidden_dims)

    def layer_inputs(self):
        return (self.embed_dim,) + self.hidden_dims[:-1]

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


class LmModel:
    def __init__(self, config: LmConfig, embedding, layers, masks=None):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.masks = masks  # {tensor name: bool array} or None

    @classmethod
    def init(cls, config: LmConfig, rng: Rng):
        params_cls = CELLS[config.cell][0]
        emb = rng.child("embedding").uniform(-0.1, 0.1, (config.vocab_size, config.embed_dim))
        layers = []
        for k, (n_in, h) in enumerate(zip(config.layer_inputs(), config.hidden_dims)):
            sub = rng.child(f"layer{k}")
            if config.cell == "egru":
                layers.append(params_cls.init(n_in, h, sub, (config.theta_low, config.theta_high)))
            else:
                layers.append(params_cls.init(n_in, h, sub))
        return cls(config, emb, layers)

    @property
    def decoder(self):
        return self.embedding

    def named_tensors(self) -> dict:
        out = {"embedding": self.embedding}
        for k, layer in enumerate(self.layers):
            for name, t in layer.tensors().items():
                out[f"layers.{k}.{name}"] = t
        return out

    def set_tensor(self, name, value):
        if name == "embedding":
            self.embedding = value
            return
        _, k, attr = name.split(".")
        setattr(self.layers[int(k)], attr, value)

    def tensor_kind(self, name) -> str:
        """'weight', 'bias' or 'threshold' (decides weight decay)."""
        if name == "embedding":
            return "weight"
        attr = name.rsplit(".", 1)[1]
        layer = self.layers[0]
        if attr in layer.weight_names:
            return "weight"
        if attr in layer.bias_names:
            return "bias"
        return "threshold"

    def maskable_names(self):
        """Recurrent gate matrices, in stable layer-then-gate order."""
        return [f"layers.{k}.{w}" for k, layer in enumerate(self.layers) for w in layer.weight_names]

    def zero_states(self, batch=None):
        return [layer.zero_state(batch) for layer in self.layers]

    def astype(self, dtype):
        out = LmModel(self.config, self.embedding.astype(dtype), [], self.masks)
        params_cls = CELLS[self.config.cell][0]
        out.layers = [params_cls(**{k: v.astype(dtype) for k, v in l.tensors().items()})
                      for l in self.layers]
        return out

    def copy(self):
        out = self.astype(self.embedding.dtype)
        out.embedding = self.embedding.copy()
        out.masks = None if self.masks is None else {k: v.copy() for k, v in self.masks.items()}
        return out


@dataclass
class DropMask:
    """Pre-scaled DropConnect masks over the recurrent block, one dict per layer."""

    layers: list
    scale: float = 1.0

    def kept_fraction(self):
        kept = sum(int((m != 0).sum()) for d in self.layers for m in d.values())
        total = sum(m.size for d in self.layers for m in d.values())
        return kept / total if total else 1.0


def sample_dropconnect(model: LmModel, p: float, rng: Rng) -> DropMask:
    if not 0.0 <= p < 1.0:
        raise ValueError("dropconnect probability must be in [0, 1)")
    scale = 1.0 / (1.0 - p)
    layers = []
    for k, layer in enumerate(model.layers):
        d = {}
        for name in layer.weight_names:
            shape = (layer.hidden, layer.hidden)
            if p == 0.0:
                d[name] = np.ones(shape, model.embedding.dtype)
            else:
                keep = rng.child(f"{k}.{name}").bernoulli(1.0 - p, shape)
                d[name] = (keep * scale).astype(model.embedding.dtype)
        layers.append(d)
    return DropMask(layers, scale)


def _locked_dropout(rng: Rng, p, shape, dtype):
    return (rng.bernoulli(1.0 - p, shape) / (1.0 - p)).astype(dtype)


@dataclass
class ForwardResult:
    logits: np.ndarray            # (T, B, V)
    states: list
    activity: np.ndarray          # (L, T) fraction of nonzero y per layer and step
    neuron_counts: list           # per layer (hidden,) count of nonzero y over steps and batch
    tape: dict = field(repr=False, default_factory=dict)


def lm_forward(model: LmModel, tokens, states=None, train_mode=False, rng: Rng | None = None,
               cfg: SurrogateCfg | None = None, mode=None, drop: DropMask | None = None):
    """Run the model over a window of token ids shaped ``(T,)`` or ``(T, B)``.

    ``mode`` overrides the configured cell mode (``"smooth"`` for gradient checks).
    In training mode ``rng`` seeds dropout; DropConnect masks come from ``drop``
    or are sampled from ``rng``.
    """
    c = model.config
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[:, None]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab_size):
        raise ValueError("token id out of range")
    T, B = tokens.shape
    mode = mode or c.mode
    forward = CELLS[c.cell][1]
    if states is None:
        states = model.zero_states(B)
    if len(states) != c.n_layers or states[0].y.shape != (B, c.hidden_dims[0]):
        raise ShapeError("initial states do not match the model")
    dtype = model.embedding.dtype
    regularize = train_mode and rng is not None
    if train_mode and drop is None and rng is not None and c.dropconnect_p > 0:
        drop = sample_dropconnect(model, c.dropconnect_p, rng.child("dropconnect"))
    if not train_mode:
        drop = None

    x = model.embedding[tokens]
    tape = {"tokens": tokens, "drop": drop, "in_masks": [], "cells": [], "ys": []}
    new_states, activity, counts = [], [], []
    for k, layer in enumerate(model.layers):
        m = None
        if regularize and c.dropout_p > 0:
            m = _locked_dropout(rng.child(f"dropout{k}"), c.dropout_p, (B, x.shape[-1]), dtype)
            x = x * m
        tape["in_masks"].append(m)
        ys, st, cell_tape = forward(layer, x, states[k], mode, cfg, drop.layers[k] if drop else None)
        tape["cells"].append(cell_tape)
        tape["ys"].append(ys)
        new_states.append(st)
        nz = ys != 0
        if c.cell == "egru" and mode != "dense":
            activity.append(nz.mean(axis=(1, 2)))
            counts.append(nz.sum(axis=(0, 1)))
        else:
            # dense computation: every neuron is communicated every step
            activity.append(np.ones(T))
            counts.append(np.full(layer.hidden, T * B))
        x = ys
    m = None
    if regularize and c.dropout_p > 0:
        m = _locked_dropout(rng.child("dropout_out"), c.dropout_p, (B, x.shape[-1]), dtype)
        x = x * m
    tape["out_mask"] = m
    tape["top"] = x
    logits = x @ model.embedding.T
    if squeeze:
        logits = logits[:, 0]
    return ForwardResult(logits, new_states, np.array(activity), counts, tape)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def lm_loss(logits, targets) -> float:
    """Mean next-token cross-entropy in nats."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("logits and targets disagree in length")
    lp = log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def lm_loss_and_grad(logits, targets):
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    n = targets.size
    grad = np.exp(lp)
    np.put_along_axis(grad, targets[..., None],
                      np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
    return float(-picked.astype(np.float64).sum() / n), (grad / n).astype(logits.dtype)


def lm_backward(model: LmModel, fwd: ForwardResult, grad_logits, cfg: SurrogateCfg | None = None):
    """Gradients of a loss with ``d loss / d logits = grad_logits`` for every named tensor."""
    c = model.config
    tape = fwd.tape
    backward = CELLS[c.cell][2]
    tokens = tape["tokens"]
    if grad_logits.ndim == 2:
        grad_logits = grad_logits[:, None]
    top = tape["top"]
    E = model.embedding
    g_emb = grad_logits.reshape(-1, E.shape[0]).T @ top.reshape(-1, E.shape[1])
    gy = grad_logits @ E
    if tape["out_mask"] is not None:
        gy = gy * tape["out_mask"]
    grads = {}
    drop = tape["drop"]
    for k in range(c.n_layers - 1, -1, -1):
        g, gx, _ = backward(model.layers[k], tape["cells"][k], gy, None, cfg,
                            drop.layers[k] if drop else None)
        for name, v in g.items():
            grads[f"layers.{k}.{name}"] = v
        if tape["in_masks"][k] is not None:
            gx = gx * tape["in_masks"][k]
        gy = gx
    np.add.at(g_emb, tokens.reshape(-1), gy.reshape(-1, E.shape[1]))
    grads["embedding"] = g_emb
    return {name: grads[name] for name in model.named_tensors()}
