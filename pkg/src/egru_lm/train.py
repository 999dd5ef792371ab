"""Truncated-BPTT training with AdamW, evaluation and the weight-decay sweep."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .core_math import Rng
from .data import Corpus, batchify, windows
from .egru import CELLS, CellState, DivergenceError, SurrogateCfg
from .lm import LmConfig, LmModel, lm_backward, lm_forward, lm_loss_and_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    wd_weights: float = 0.14
    wd_bias: float = 0.01
    bptt_len: int = 70
    batch_size: int = 20
    eval_batch_size: int = 10
    epochs: int = 20
    grad_clip_norm: float = 0.25
    seed: int = 0
    lambda_s: float = 0.3
    epsilon: float = 1.0
    keep_best: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.wd_weights < 0 or self.wd_bias < 0:
            raise ValueError("weight decay must be non-negative")

    @property
    def surrogate(self):
        return SurrogateCfg(self.lambda_s, self.epsilon)


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict):
        return cls({k: np.zeros_like(t) for k, t in tensors.items()},
                   {k: np.zeros_like(t) for k, t in tensors.items()}, 0)


def adamw_step(params: dict, grads: dict, opt: OptimState, cfg: TrainConfig,
               kinds: dict | None = None, masks: dict | None = None, lr=None):
    """One AdamW update, in place.

    Decay is decoupled: ``p <- p - lr * wd * p`` with ``wd_weights`` for matrices,
    ``wd_bias`` for bias vectors and zero for thresholds. Entries with mask 0
    get no update and stay exactly zero.
    """
    lr = cfg.lr if lr is None else lr
    kinds = kinds or {}
    masks = masks or {}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}")
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1 - b1 ** opt.step
    bc2 = 1 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        mask = masks.get(name)
        if mask is not None:
            g = g * mask
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        kind = kinds.get(name, "weight")
        wd = {"weight": cfg.wd_weights, "bias": cfg.wd_bias}.get(kind, 0.0)
        if wd:
            p *= p.dtype.type(1 - lr * wd)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)
        if mask is not None:
            p *= mask
    return params


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads.values():
            g *= scale
    return total


def _detach(states):
    return [CellState(s.c.copy(), s.y.copy()) for s in states]


@dataclass
class EpochStats:
    train_loss: float
    lambda_a: list
    grad_norm: float
    n_windows: int

    @property
    def train_ppl(self):
        return math.exp(self.train_loss)


def train_epoch(model: LmModel, stream, cfg: TrainConfig, opt: OptimState, rng: Rng,
                lr=None) -> EpochStats:
    """One pass over ``stream`` in contiguous BPTT windows.

    Hidden state is carried from one window to the next but gradients stop at
    the window boundary. DropConnect is resampled for every window.
    """
    params = model.named_tensors()
    kinds = {k: model.tensor_kind(k) for k in params}
    masks = model.masks
    surrogate = cfg.surrogate
    states = model.zero_states(stream.batch_size)
    loss_sum = 0.0
    n_tok = 0
    act_sum = np.zeros(model.config.n_layers)
    act_steps = 0
    norms = []
    for w, (inp, tgt) in enumerate(windows(stream, cfg.bptt_len)):
        wrng = rng.child(f"window{w}")
        fwd = lm_forward(model, inp, states, train_mode=True, rng=wrng, cfg=surrogate)
        loss, g_logits = lm_loss_and_grad(fwd.logits, tgt)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss in window {w} (step {opt.step})")
        grads = lm_backward(model, fwd, g_logits, surrogate)
        norms.append(clip_grad_norm(grads, cfg.grad_clip_norm))
        adamw_step(params, grads, opt, cfg, kinds, masks, lr)
        states = _detach(fwd.states)
        loss_sum += loss * tgt.size
        n_tok += tgt.size
        act_sum += fwd.activity.sum(axis=1)
        act_steps += fwd.activity.shape[1]
    return EpochStats(loss_sum / max(n_tok, 1), list(act_sum / max(act_steps, 1)),
                      float(np.mean(norms)) if norms else 0.0, len(norms))


@dataclass
class EvalResult:
    ppl: float
    nll: float
    n_tokens: int
    lambda_a: list
    neuron_activity: list  # per layer (hidden,) fraction of steps with nonzero output


def evaluate(model: LmModel, ids, batch_size=10, bptt_len=70, cfg: SurrogateCfg | None = None) -> EvalResult:
    """Perplexity over ``ids`` with state carried across windows; activity from ``y`` only."""
    stream = batchify(ids, batch_size)
    states = model.zero_states(batch_size)
    nll = 0.0
    n = 0
    counts = [np.zeros(h, dtype=np.int64) for h in model.config.hidden_dims]
    act_sum = np.zeros(model.config.n_layers)
    steps = 0
    for inp, tgt in windows(stream, bptt_len):
        fwd = lm_forward(model, inp, states, train_mode=False, cfg=cfg)
        loss, _ = lm_loss_and_grad(fwd.logits, tgt)
        nll += loss * tgt.size
        n += tgt.size
        for k, c in enumerate(fwd.neuron_counts):
            counts[k] += c
        act_sum += fwd.activity.sum(axis=1)
        steps += fwd.activity.shape[1]
        states = fwd.states
    mean = nll / max(n, 1)
    return EvalResult(math.exp(mean), mean, n, list(act_sum / max(steps, 1)),
                      [c / max(steps * batch_size, 1) for c in counts])


LOG_FIELDS = ("epoch", "train_loss", "valid_ppl", "grad_norm")


def fit(model: LmModel, corpus: Corpus, cfg: TrainConfig, opt: OptimState | None = None,
        log_path=None, epochs=None, lr=None, rng_label="train"):
    """Train for ``epochs`` (default ``cfg.epochs``) and return ``(opt, history)``.

    With ``cfg.keep_best`` the parameters with the best validation perplexity
    are restored at the end. Rows are appended to ``log_path`` as CSV.
    """
    opt = opt or OptimState.zeros_like(model.named_tensors())
    epochs = cfg.epochs if epochs is None else epochs
    rng = Rng(cfg.seed).child(rng_label)
    stream = batchify(corpus.train, cfg.batch_size)
    L = model.config.n_layers
    fields_ = list(LOG_FIELDS[:3]) + [f"lambda_a_layer{k + 1}" for k in range(L)] + ["grad_norm"]
    writer = None
    fh = None
    if log_path is not None:
        new = not _exists_nonempty(log_path)
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(fields_)
    history = []
    best = None
    try:
        for ep in range(epochs):
            stats = train_epoch(model, stream, cfg, opt, rng.child(f"epoch{ep}"), lr=lr)
            ev = evaluate(model, corpus.valid, cfg.eval_batch_size, cfg.bptt_len, cfg.surrogate)
            row = {"epoch": ep + 1, "train_loss": stats.train_loss, "valid_ppl": ev.ppl,
                   "lambda_a": ev.lambda_a, "grad_norm": stats.grad_norm}
            history.append(row)
            log.info("epoch %d train_ppl %.2f valid_ppl %.2f lambda_a %s", ep + 1,
                     stats.train_ppl, ev.ppl, np.round(ev.lambda_a, 3))
            if writer:
                writer.writerow([ep + 1, f"{stats.train_loss:.6f}", f"{ev.ppl:.4f}"]
                                + [f"{a:.6f}" for a in ev.lambda_a] + [f"{stats.grad_norm:.6f}"])
                fh.flush()
            if cfg.keep_best and (best is None or ev.ppl < best[0]):
                best = (ev.ppl, {k: v.copy() for k, v in model.named_tensors().items()})
    finally:
        if fh:
            fh.close()
    if best is not None:
        for k, v in best[1].items():
            model.named_tensors()[k][...] = v
    return opt, history


def _exists_nonempty(path):
    import os
    return os.path.exists(path) and os.path.getsize(path) > 0


# ------------------------------------------------------------- gradient check

def relative_error(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(cell="egru", hidden=8, seq_len=4, n_in=5, batch=2, seed=0, step=1e-4,
                   cfg: SurrogateCfg | None = None, mode="smooth"):
    """Compare analytic BPTT gradients with central differences.

    Runs in float64. EGRU uses ``mode`` (``"smooth"`` replaces the step by the
    ramp whose derivative is the surrogate, so both sides describe one function).
    Returns ``{tensor name: max relative error}``.
    """
    cfg = cfg or SurrogateCfg(lambda_s=1.0, epsilon=1.0)
    params_cls, forward, backward = CELLS[cell]
    rng = Rng(seed).child("gradcheck")
    p = params_cls.init(n_in, hidden, rng.child("params"))
    p = params_cls(**{k: v.astype(np.float64) for k, v in p.tensors().items()})
    for name in p.bias_names:
        getattr(p, name)[:] = rng.child(name).normal(0.5, hidden)
    if cell == "egru":
        p.theta[:] = rng.child("theta").uniform(-0.3, 0.3, hidden)
    x = rng.child("x").normal(1.0, (seq_len, batch, n_in)).astype(np.float64)
    wy = rng.child("wy").normal(1.0, (seq_len, batch, hidden)).astype(np.float64)
    wc = rng.child("wc").normal(1.0, (batch, hidden)).astype(np.float64)
    c0 = rng.child("c0").normal(0.3, (batch, hidden)).astype(np.float64)

    def loss():
        ys, st, tape = forward(p, x, CellState(c0.copy(), np.zeros_like(c0)), mode, cfg)
        return float((ys * wy).sum() + (st.c * wc).sum()), tape

    _, tape = loss()
    grads, _, _ = backward(p, tape, wy, wc, cfg)
    report = {}
    for name, t in p.tensors().items():
        num = np.zeros_like(t)
        for i in np.ndindex(t.shape):
            orig = t[i]
            t[i] = orig + step
            lp, _ = loss()
            t[i] = orig - step
            lm, _ = loss()
            t[i] = orig
            num[i] = (lp - lm) / (2 * step)
        report[name] = float(relative_error(grads[name], num).max())
    return report


# ------------------------------------------------------------ weight decay sweep

@dataclass
class SweepPoint:
    wd_weights: float
    wd_bias: float
    valid_ppl: float
    lambda_a: list
    weight_mean: float
    weight_std: float
    bias_mean: float
    bias_std: float
    error: str = ""


def distribution_summary(model: LmModel):
    """Mean/std over all recurrent weight entries and all bias entries."""
    w, b = [], []
    for layer in model.layers:
        w += [getattr(layer, n).ravel() for n in layer.weight_names]
        b += [getattr(layer, n).ravel() for n in layer.bias_names]
    w = np.concatenate(w).astype(np.float64)
    b = np.concatenate(b).astype(np.float64)
    return float(w.mean()), float(w.std()), float(b.mean()), float(b.std())


def weight_decay_sweep(model_cfg: LmConfig, train_cfg: TrainConfig, corpus: Corpus, grid):
    """Train one model per ``(wd_weights, wd_bias)`` pair from the same seed and data."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    results = []
    for wd_w, wd_b in grid:
        cfg = replace(train_cfg, wd_weights=wd_w, wd_bias=wd_b)
        model = LmModel.init(model_cfg, Rng(cfg.seed).child("model"))
        try:
            fit(model, corpus, cfg)
        except DivergenceError as exc:
            log.warning("sweep point wd=(%s, %s) diverged: %s", wd_w, wd_b, exc)
            results.append(SweepPoint(wd_w, wd_b, math.inf, [math.nan] * model_cfg.n_layers,
                                      math.nan, math.nan, math.nan, math.nan, str(exc)))
            continue
        ev = evaluate(model, corpus.valid, cfg.eval_batch_size, cfg.bptt_len, cfg.surrogate)
        results.append(SweepPoint(wd_w, wd_b, ev.ppl, ev.lambda_a, *distribution_summary(model)))
    return results


def write_sweep_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        L = max(len(r.lambda_a) for r in results)
        w.writerow(["wd_weights", "wd_bias", "valid_ppl"] + [f"lambda_a_layer{k + 1}" for k in range(L)]
                   + ["weight_mean", "weight_std", "bias_mean", "bias_std", "error"])
        for r in results:
            w.writerow([r.wd_weights, r.wd_bias, r.valid_ppl] + list(r.lambda_a)
                       + [r.weight_mean, r.weight_std, r.bias_mean, r.bias_std, r.error])
