"""Event-based GRU and LSTM cells with hand-written BPTT.

All functions work on batches: inputs are ``(B, n_in)``, states ``(B, hidden)``
and sequences ``(T, B, ...)``. Weight matrices act on the concatenation
``[x; y_prev]``, so columns ``:n_in`` form the input block and the rest the
recurrent block.

EGRU step (spike then reset)::

    u = sigmoid(W_u [x; y_prev] + b_u)
    r = sigmoid(W_r [x; y_prev] + b_r)
    z = tanh(W_z [x; r * y_prev] + b_z)
    c_hat = u * z + (1 - u) * c_prev
    y = c_hat * H(c_hat - theta)
    c = c_hat - theta * H(c_hat - theta)

The Heaviside step has no useful derivative; backward substitutes the
triangular pseudo-derivative ``lambda * max(0, 1 - |c_hat - theta| / eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core_math import DTYPE, Rng, ShapeError

MODES = ("event", "dense", "smooth")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SurrogateCfg:
    lambda_s: float = 0.3
    epsilon: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("surrogate epsilon must be positive")
        if self.lambda_s < 0:
            raise ValueError("surrogate slope must be non-negative")


def surrogate_pd(v, cfg: SurrogateCfg):
    """Triangular pseudo-derivative of the step, centered at the threshold."""
    return cfg.lambda_s * np.maximum(0.0, 1.0 - np.abs(v) / cfg.epsilon)


def smooth_step(v, cfg: SurrogateCfg):
    """Piecewise-quadratic ramp whose exact derivative is ``surrogate_pd``.

    Used in place of the hard step when gradients are checked against finite
    differences, so that forward and backward describe the same function.
    """
    lam, eps = cfg.lambda_s, cfg.epsilon
    v = np.clip(v, -eps, eps)
    neg = lam * (v + eps) ** 2 / (2 * eps)
    pos = lam * eps / 2 + lam * (v - v * v / (2 * eps))
    return np.where(v < 0, neg, pos)


def heaviside_output(c_hat, theta):
    """Threshold the pre-reset state. ``H(0) = 1``: a value equal to its threshold fires."""
    c_hat = np.asarray(c_hat)
    theta = np.asarray(theta)
    if c_hat.shape[-1] != theta.shape[-1]:
        raise ShapeError(f"state width {c_hat.shape[-1]} != threshold width {theta.shape[-1]}")
    spike = c_hat >= theta
    return np.where(spike, c_hat, 0).astype(c_hat.dtype), spike


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite value in recurrent state")


@dataclass
class CellState:
    """Recurrent state. ``y`` is what other neurons see; ``c`` stays local."""

    c: np.ndarray
    y: np.ndarray

    @property
    def active(self):
        """Indices with nonzero output (per row for batched states)."""
        if self.y.ndim == 1:
            return np.flatnonzero(self.y)
        return [np.flatnonzero(row) for row in self.y]

    def copy(self):
        return CellState(self.c.copy(), self.y.copy())


EgruState = CellState


def _init_matrix(rng: Rng, hidden, n_cols):
    bound = 1.0 / np.sqrt(hidden)
    return rng.uniform(-bound, bound, (hidden, n_cols))


@dataclass
class EgruParams:
    W_u: np.ndarray
    W_r: np.ndarray
    W_z: np.ndarray
    b_u: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray
    theta: np.ndarray

    weight_names = ("W_u", "W_r", "W_z")
    bias_names = ("b_u", "b_r", "b_z")
    threshold_names = ("theta",)
    n_gates = 3

    @classmethod
    def init(cls, n_in, hidden, rng: Rng, theta_range=(0.0, 1.0)):
        return cls(
            W_u=_init_matrix(rng.child("W_u"), hidden, n_in + hidden),
            W_r=_init_matrix(rng.child("W_r"), hidden, n_in + hidden),
            W_z=_init_matrix(rng.child("W_z"), hidden, n_in + hidden),
            b_u=np.zeros(hidden, DTYPE),
            b_r=np.zeros(hidden, DTYPE),
            b_z=np.zeros(hidden, DTYPE),
            theta=rng.child("theta").uniform(*theta_range, hidden),
        )

    @property
    def hidden(self):
        return self.W_u.shape[0]

    @property
    def n_in(self):
        return self.W_u.shape[1] - self.W_u.shape[0]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zero_state(self, batch=None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return CellState(np.zeros(shape, self.W_u.dtype), np.zeros(shape, self.W_u.dtype))


@dataclass
class TapeStep:
    y_prev: np.ndarray
    c_prev: np.ndarray
    u: np.ndarray
    r: np.ndarray
    z: np.ndarray
    c_hat: np.ndarray
    h: np.ndarray  # step value used in forward (hard, smooth or all-ones)


@dataclass
class Tape:
    mode: str
    x: np.ndarray  # (T, B, n_in)
    steps: list = field(default_factory=list)


def _egru_core(p: EgruParams, in_u, in_r, in_z, prev: CellState, mode, cfg):
    """One step given the input-block projections (biases included)."""
    n_in = p.n_in
    y_prev, c_prev = prev.y, prev.c
    u = sigmoid(in_u + y_prev @ p.W_u[:, n_in:].T)
    r = sigmoid(in_r + y_prev @ p.W_r[:, n_in:].T)
    z = np.tanh(in_z + (r * y_prev) @ p.W_z[:, n_in:].T)
    c_hat = u * z + (1 - u) * c_prev
    if mode == "dense":
        h = np.ones_like(c_hat)
        y = c_hat
        c = c_hat
    else:
        if mode == "event":
            y, spike = heaviside_output(c_hat, p.theta)
            h = spike.astype(c_hat.dtype)
        elif mode == "smooth":
            h = smooth_step(c_hat - p.theta, cfg).astype(c_hat.dtype)
            y = c_hat * h
        else:
            raise ValueError(f"unknown mode {mode!r}")
        c = c_hat - p.theta * h
    return CellState(c, y), TapeStep(y_prev, c_prev, u, r, z, c_hat, h)


def egru_step(p: EgruParams, x, prev: CellState, mode="event", cfg: SurrogateCfg | None = None):
    """Advance one time step. Returns the new state and the cached intermediates."""
    cfg = cfg or SurrogateCfg()
    x = np.asarray(x)
    if x.shape[-1] != p.n_in or prev.y.shape[-1] != p.hidden:
        raise ShapeError("input or state width does not match parameters")
    n_in = p.n_in
    state, step = _egru_core(
        p,
        x @ p.W_u[:, :n_in].T + p.b_u,
        x @ p.W_r[:, :n_in].T + p.b_r,
        x @ p.W_z[:, :n_in].T + p.b_z,
        prev, mode, cfg,
    )
    _check_finite(state.c)
    return state, step


def apply_dropconnect(p, drop):
    """Parameters with recurrent blocks multiplied by the (pre-scaled) masks in ``drop``."""
    if not drop:
        return p
    n_in = p.n_in
    changes = {}
    for name, m in drop.items():
        W = getattr(p, name).copy()
        W[:, n_in:] *= m
        changes[name] = W
    return replace(p, **changes)


def _mask_grads(grads, drop, n_in):
    for name, m in (drop or {}).items():
        grads[name][:, n_in:] *= m
    return grads


def egru_forward(p: EgruParams, x_seq, state: CellState, mode="event",
                 cfg: SurrogateCfg | None = None, drop=None):
    """Run a whole sequence. Returns ``(y_seq, final_state, tape)``."""
    cfg = cfg or SurrogateCfg()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    pe = apply_dropconnect(p, drop)
    n_in, H = p.n_in, p.hidden
    x_seq = np.asarray(x_seq)
    if x_seq.shape[-1] != n_in:
        raise ShapeError(f"input width {x_seq.shape[-1]} != {n_in}")
    T = x_seq.shape[0]
    # input block for all steps at once
    W_in = np.concatenate([pe.W_u[:, :n_in], pe.W_r[:, :n_in], pe.W_z[:, :n_in]])
    b = np.concatenate([pe.b_u, pe.b_r, pe.b_z])
    proj = x_seq @ W_in.T + b
    tape = Tape(mode, x_seq)
    ys = np.empty(x_seq.shape[:-1] + (H,), dtype=proj.dtype)
    for t in range(T):
        state, step = _egru_core(pe, proj[t, ..., :H], proj[t, ..., H:2 * H], proj[t, ..., 2 * H:],
                                 state, mode, cfg)
        tape.steps.append(step)
        ys[t] = state.y
    _check_finite(state.c)
    return ys, state, tape


def egru_backward(p: EgruParams, tape: Tape, grad_y_seq, grad_c_final=None,
                  cfg: SurrogateCfg | None = None, drop=None, grad_y_final=None):
    """Backpropagate through a taped sequence.

    ``grad_y_seq[t]`` is the loss gradient flowing into ``y`` at step ``t`` from
    outside the cell (upper layer or decoder). Returns ``(grads, grad_x_seq,
    grad_init_state)`` where grads is keyed like ``EgruParams.tensors()``.
    """
    cfg = cfg or SurrogateCfg()
    pe = apply_dropconnect(p, drop)
    n_in, H = p.n_in, p.hidden
    T = len(tape.steps)
    grad_y_seq = np.asarray(grad_y_seq)
    if grad_y_seq.shape[0] != T or tape.x.shape[0] != T:
        raise ShapeError("tape length does not match gradient sequence")
    if tape.steps and tape.steps[0].c_hat.shape[-1] != H:
        raise ShapeError("tape was produced with different parameters")
    dtype = grad_y_seq.dtype
    Wu_y, Wr_y, Wz_y = pe.W_u[:, n_in:], pe.W_r[:, n_in:], pe.W_z[:, n_in:]
    batch_shape = grad_y_seq.shape[1:-1]
    gc = np.zeros(batch_shape + (H,), dtype) if grad_c_final is None else np.array(grad_c_final, dtype)
    gy_rec = np.zeros_like(gc) if grad_y_final is None else np.array(grad_y_final, dtype)
    g_theta = np.zeros(H, dtype)
    ga_u = np.empty_like(grad_y_seq)
    ga_r = np.empty_like(grad_y_seq)
    ga_z = np.empty_like(grad_y_seq)
    ry = np.empty_like(grad_y_seq)
    y_prev_seq = np.empty_like(grad_y_seq)
    theta = p.theta
    for t in range(T - 1, -1, -1):
        s = tape.steps[t]
        gy = grad_y_seq[t] + gy_rec
        if tape.mode == "dense":
            g_chat = gy + gc
        else:
            d = surrogate_pd(s.c_hat - theta, cfg)
            g_chat = gy * (s.h + s.c_hat * d) + gc * (1 - theta * d)
            g_theta += (-(gy * s.c_hat * d) + gc * (theta * d - s.h)).reshape(-1, H).sum(0)
        gu = g_chat * (s.z - s.c_prev)
        gz = g_chat * s.u
        gc = g_chat * (1 - s.u)
        a_z = gz * (1 - s.z * s.z)
        a_u = gu * s.u * (1 - s.u)
        g_ry = a_z @ Wz_y
        a_r = g_ry * s.y_prev * s.r * (1 - s.r)
        gy_rec = g_ry * s.r + a_u @ Wu_y + a_r @ Wr_y
        ga_u[t], ga_r[t], ga_z[t] = a_u, a_r, a_z
        ry[t] = s.r * s.y_prev
        y_prev_seq[t] = s.y_prev

    x = tape.x
    flat = lambda a: a.reshape(-1, a.shape[-1])
    xf, ypf, ryf = flat(x), flat(y_prev_seq), flat(ry)
    grads = {}
    for name, ga, rec in (("u", ga_u, ypf), ("r", ga_r, ypf), ("z", ga_z, ryf)):
        gaf = flat(ga)
        grads["W_" + name] = np.concatenate([gaf.T @ xf, gaf.T @ rec], axis=1)
        grads["b_" + name] = gaf.sum(0)
    grads["theta"] = g_theta
    grads = {k: grads[k] for k in p.tensors()}
    _mask_grads(grads, drop, n_in)
    grad_x = (ga_u @ pe.W_u[:, :n_in] + ga_r @ pe.W_r[:, :n_in] + ga_z @ pe.W_z[:, :n_in])
    return grads, grad_x, CellState(gc, gy_rec)


# ---------------------------------------------------------------- LSTM baseline

@dataclass
class LstmParams:
    W_i: np.ndarray
    W_f: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray

    weight_names = ("W_i", "W_f", "W_g", "W_o")
    bias_names = ("b_i", "b_f", "b_g", "b_o")
    threshold_names = ()
    n_gates = 4

    @classmethod
    def init(cls, n_in, hidden, rng: Rng):
        mats = {n: _init_matrix(rng.child(n), hidden, n_in + hidden) for n in cls.weight_names}
        biases = {n: np.zeros(hidden, DTYPE) for n in cls.bias_names}
        return cls(**mats, **biases)

    @property
    def hidden(self):
        return self.W_i.shape[0]

    @property
    def n_in(self):
        return self.W_i.shape[1] - self.W_i.shape[0]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def zero_state(self, batch=None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return CellState(np.zeros(shape, self.W_i.dtype), np.zeros(shape, self.W_i.dtype))


@dataclass
class LstmTapeStep:
    y_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def _lstm_core(W_rec, proj, prev: CellState):
    H = W_rec.shape[1]
    a = proj + prev.y @ W_rec.T
    i = sigmoid(a[..., :H])
    f = sigmoid(a[..., H:2 * H])
    g = np.tanh(a[..., 2 * H:3 * H])
    o = sigmoid(a[..., 3 * H:])
    c = f * prev.c + i * g
    tc = np.tanh(c)
    return CellState(c, o * tc), LstmTapeStep(prev.y, prev.c, i, f, g, o, tc)


def _stacked(p: LstmParams):
    W = np.concatenate([p.W_i, p.W_f, p.W_g, p.W_o])
    b = np.concatenate([p.b_i, p.b_f, p.b_g, p.b_o])
    return W, b


def lstm_step(p: LstmParams, x, prev: CellState):
    x = np.asarray(x)
    if x.shape[-1] != p.n_in or prev.y.shape[-1] != p.hidden:
        raise ShapeError("input or state width does not match parameters")
    W, b = _stacked(p)
    state, step = _lstm_core(W[:, p.n_in:], x @ W[:, :p.n_in].T + b, prev)
    _check_finite(state.c)
    return state, step


def lstm_forward(p: LstmParams, x_seq, state: CellState, mode=None, cfg=None, drop=None):
    """Sequence forward; ``mode``/``cfg`` are accepted for interface parity and ignored."""
    pe = apply_dropconnect(p, drop)
    W, b = _stacked(pe)
    n_in = p.n_in
    x_seq = np.asarray(x_seq)
    if x_seq.shape[-1] != n_in:
        raise ShapeError(f"input width {x_seq.shape[-1]} != {n_in}")
    W_rec = W[:, n_in:]
    proj = x_seq @ W[:, :n_in].T + b
    tape = Tape("lstm", x_seq)
    ys = np.empty(x_seq.shape[:-1] + (p.hidden,), dtype=proj.dtype)
    for t in range(x_seq.shape[0]):
        state, step = _lstm_core(W_rec, proj[t], state)
        tape.steps.append(step)
        ys[t] = state.y
    _check_finite(state.c)
    return ys, state, tape


def lstm_backward(p: LstmParams, tape: Tape, grad_y_seq, grad_c_final=None,
                  cfg=None, drop=None, grad_y_final=None):
    pe = apply_dropconnect(p, drop)
    W, _ = _stacked(pe)
    n_in, H = p.n_in, p.hidden
    T = len(tape.steps)
    grad_y_seq = np.asarray(grad_y_seq)
    if grad_y_seq.shape[0] != T:
        raise ShapeError("tape length does not match gradient sequence")
    dtype = grad_y_seq.dtype
    batch_shape = grad_y_seq.shape[1:-1]
    gc = np.zeros(batch_shape + (H,), dtype) if grad_c_final is None else np.array(grad_c_final, dtype)
    gh_rec = np.zeros_like(gc) if grad_y_final is None else np.array(grad_y_final, dtype)
    W_rec = W[:, n_in:]
    ga = np.empty(grad_y_seq.shape[:-1] + (4 * H,), dtype)
    h_prev = np.empty_like(grad_y_seq)
    for t in range(T - 1, -1, -1):
        s = tape.steps[t]
        gh = grad_y_seq[t] + gh_rec
        go = gh * s.tanh_c
        gc = gc + gh * s.o * (1 - s.tanh_c ** 2)
        gi = gc * s.g
        gf = gc * s.c_prev
        gg = gc * s.i
        gc = gc * s.f
        a = np.concatenate([gi * s.i * (1 - s.i), gf * s.f * (1 - s.f),
                            gg * (1 - s.g ** 2), go * s.o * (1 - s.o)], axis=-1)
        ga[t] = a
        h_prev[t] = s.y_prev
        gh_rec = a @ W_rec
    gaf = ga.reshape(-1, 4 * H)
    gW = np.concatenate([gaf.T @ tape.x.reshape(-1, n_in), gaf.T @ h_prev.reshape(-1, H)], axis=1)
    gb = gaf.sum(0)
    grads = {}
    for k, (wn, bn) in enumerate(zip(LstmParams.weight_names, LstmParams.bias_names)):
        grads[wn] = gW[k * H:(k + 1) * H]
        grads[bn] = gb[k * H:(k + 1) * H]
    grads = {k: grads[k] for k in p.tensors()}
    _mask_grads(grads, drop, n_in)
    grad_x = ga @ W[:, :n_in]
    return grads, grad_x, CellState(gc, gh_rec)


CELLS = {
    "egru": (EgruParams, egru_forward, egru_backward),
    "lstm": (LstmParams, lstm_forward, lstm_backward),
}
