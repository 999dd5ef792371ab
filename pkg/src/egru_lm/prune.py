"""Global unstructured magnitude pruning and the iterative prune/fine-tune pipeline.

Candidates are the recurrent gate matrices of every layer, pooled together; the
embedding (also the decoder), biases and thresholds are never pruned.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .egru import DivergenceError
from .lm import LmModel
from .train import OptimState, TrainConfig, evaluate, fit

log = logging.getLogger(__name__)


def _target_count(target, total):
    return int(round(target * total))


def _prune_selection(tensors: dict, masks: dict, target_sparsity: float):
    """Flat positions (in concatenated stable order) to prune now, and the cutoff."""
    names = list(tensors)
    mags = np.concatenate([np.abs(tensors[n]).ravel() for n in names]).astype(np.float64)
    kept = np.concatenate([masks[n].ravel() for n in names]).astype(bool)
    total = mags.size
    already = total - int(kept.sum())
    need = _target_count(target_sparsity, total) - already
    if need < 0:
        raise ValueError(f"target sparsity {target_sparsity} is below the current "
                         f"sparsity {already / total:.6f}")
    kept_pos = np.flatnonzero(kept)
    if need == 0:
        return names, kept_pos[:0], 0.0
    # stable sort: equal magnitudes keep tensor-then-index order
    order = np.argsort(mags[kept_pos], kind="stable")
    chosen = kept_pos[order[:need]]
    return names, chosen, float(mags[chosen[-1]])


def global_magnitude_cutoff(tensors: dict, masks: dict, target_sparsity: float) -> float:
    """Magnitude ``tau`` of the last entry pruned to reach ``target_sparsity``.

    Everything strictly below ``tau`` goes; the remaining quota is filled from
    entries equal to ``tau`` in tensor-then-index order, so the count is exact.
    """
    return _prune_selection(tensors, masks, target_sparsity)[2]


def prune_masks(tensors: dict, masks: dict, target_sparsity: float) -> dict:
    """New masks (the old ones are not modified) reaching ``target_sparsity``."""
    names, chosen, _ = _prune_selection(tensors, masks, target_sparsity)
    flat = np.concatenate([masks[n].ravel() for n in names]).astype(bool)
    flat[chosen] = False
    out, start = {}, 0
    for n in names:
        size = masks[n].size
        out[n] = flat[start:start + size].reshape(masks[n].shape)
        start += size
    return out


def full_masks(model: LmModel) -> dict:
    tensors = model.named_tensors()
    return {n: np.ones(tensors[n].shape, dtype=bool) for n in model.maskable_names()}


def apply_prune_step(model: LmModel, step_target: float, opt: OptimState | None = None) -> dict:
    """Prune ``model`` (in place) to ``step_target`` global sparsity.

    Zeroes the weights and any optimizer moments at newly pruned positions.
    """
    tensors = model.named_tensors()
    maskable = {n: tensors[n] for n in model.maskable_names()}
    masks = model.masks if model.masks is not None else full_masks(model)
    new = prune_masks(maskable, masks, step_target)
    for n, m in new.items():
        tensors[n] *= m
        if opt is not None and n in opt.m:
            opt.m[n] *= m
            opt.v[n] *= m
    model.masks = new
    return new


@dataclass
class SparsityReport:
    per_tensor: dict  # name -> (nnz, size)
    nnz: int
    size: int

    @property
    def sparsity(self):
        return 1.0 - self.nnz / self.size if self.size else 0.0

    @property
    def density(self):
        return 1.0 - self.sparsity


def sparsity_report(model: LmModel) -> SparsityReport:
    tensors = model.named_tensors()
    per = {}
    for n in model.maskable_names():
        t = tensors[n]
        nnz = int(np.count_nonzero(t) if model.masks is None else np.count_nonzero(t * model.masks[n]))
        per[n] = (nnz, t.size)
    nnz = sum(v[0] for v in per.values())
    size = sum(v[1] for v in per.values())
    return SparsityReport(per, nnz, size)


@dataclass
class PruneSchedule:
    target_sparsity: float
    n_steps: int = 1
    finetune_epochs: int = 3
    lr_scale: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target sparsity must be in [0, 1)")
        if self.n_steps < 1:
            raise ValueError("need at least one pruning step")
        if self.lr_scale is None:
            # low targets fine-tune best at a reduced rate, high targets at the full rate
            self.lr_scale = 0.1 if self.target_sparsity <= 0.7 else 1.0

    def step_targets(self, current=0.0):
        return [current + (self.target_sparsity - current) * (k + 1) / self.n_steps
                for k in range(self.n_steps)]


@dataclass
class PruneStepResult:
    step: int
    target_sparsity: float
    achieved_sparsity: float
    valid_ppl: float
    effective_macs: float
    masks: dict
    error: str = ""


PRUNE_LOG_FIELDS = ("step", "target_sparsity", "achieved_sparsity", "valid_ppl", "effective_macs")


def prune_pipeline(model: LmModel, corpus, schedule: PruneSchedule, cfg: TrainConfig,
                   opt: OptimState | None = None, log_path=None, on_step=None):
    """Iteratively prune a converged model and fine-tune after each step.

    ``on_step(step_result, model, opt)`` is called after every step (the CLI uses
    it to write checkpoints). Returns the list of per-step results.
    """
    from .sparse_infer import compile_model, measure_effective_macs

    opt = opt or OptimState.zeros_like(model.named_tensors())
    current = sparsity_report(model).sparsity
    results = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(PRUNE_LOG_FIELDS)
    try:
        for k, target in enumerate(schedule.step_targets(current)):
            apply_prune_step(model, target, opt)
            error = ""
            if schedule.finetune_epochs > 0:
                try:
                    fit(model, corpus, cfg, opt, epochs=schedule.finetune_epochs,
                        lr=cfg.lr * schedule.lr_scale, rng_label=f"finetune{k}")
                except DivergenceError as exc:
                    error = str(exc)
                    log.warning("fine-tune after step %d diverged: %s", k + 1, exc)
            ev = evaluate(model, corpus.valid, cfg.eval_batch_size, cfg.bptt_len, cfg.surrogate)
            report = measure_effective_macs(compile_model(model), corpus.valid[:2000])
            res = PruneStepResult(k + 1, target, sparsity_report(model).sparsity, ev.ppl,
                                  report.total_effective, {n: m.copy() for n, m in model.masks.items()},
                                  error)
            results.append(res)
            log.info("prune step %d target %.3f achieved %.4f valid_ppl %.2f macs %.0f",
                     res.step, target, res.achieved_sparsity, res.valid_ppl, res.effective_macs)
            if writer:
                writer.writerow([res.step, f"{target:.6f}", f"{res.achieved_sparsity:.6f}",
                                 f"{res.valid_ppl:.4f}", f"{res.effective_macs:.1f}"])
                fh.flush()
            if on_step:
                on_step(res, model, opt)
    finally:
        if fh:
            fh.close()
    return results
