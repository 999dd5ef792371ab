import numpy as np
import pytest

from egru_lm.core_math import Rng
from egru_lm.data import load_corpus
from egru_lm.prune import (PruneSchedule, apply_prune_step, full_masks, global_magnitude_cutoff,
                           prune_masks, prune_pipeline, sparsity_report)
from egru_lm.train import OptimState, TrainConfig
from tests.conftest import small_model


def brute_force_masks(tensors, masks, target):
    """Sort every still-kept weight by (magnitude, tensor order, flat index) and cut."""
    names = list(tensors)
    entries, total, pruned = [], 0, 0
    for ti, n in enumerate(names):
        flat, mflat = np.abs(tensors[n]).ravel(), masks[n].ravel()
        total += flat.size
        pruned += int((~mflat).sum())
        entries += [(float(flat[i]), ti, i) for i in range(flat.size) if mflat[i]]
    need = int(round(target * total)) - pruned
    out = {n: masks[n].copy().ravel() for n in names}
    for _, ti, i in sorted(entries)[:need]:
        out[names[ti]][i] = False
    return {n: out[n].reshape(masks[n].shape) for n in names}


def _ones(tensors):
    return {n: np.ones(t.shape, bool) for n, t in tensors.items()}


def test_pool_example():
    t = {"w": np.array([0.1, -0.5, 0.3, -0.2])}
    m = prune_masks(t, _ones(t), 0.5)
    np.testing.assert_array_equal(m["w"], [False, True, True, False])
    assert global_magnitude_cutoff(t, _ones(t), 0.5) == pytest.approx(0.2)


def test_target_zero_no_change():
    t = {"w": np.array([0.1, -0.5])}
    assert prune_masks(t, _ones(t), 0.0)["w"].all()


def test_random_1000_exact_count_and_oracle():
    t = {"w": Rng(0).normal(1.0, 1000)}
    m = prune_masks(t, _ones(t), 0.8)
    assert (~m["w"]).sum() == 800
    np.testing.assert_array_equal(m["w"], brute_force_masks(t, _ones(t), 0.8)["w"])


def test_ties_resolved_in_tensor_then_index_order():
    t = {"a": np.array([0.5, 0.1, 0.5]), "b": np.array([0.5, 0.2])}
    m = prune_masks(t, _ones(t), 0.6)  # 0.1, 0.2, then the first tied 0.5
    ref = brute_force_masks(t, _ones(t), 0.6)
    for n in t:
        np.testing.assert_array_equal(m[n], ref[n])
    np.testing.assert_array_equal(m["a"], [False, False, True])
    np.testing.assert_array_equal(m["b"], [True, False])


def test_global_not_per_tensor():
    t = {"big": Rng(1).normal(1.0, 50) + 10, "small": Rng(2).normal(0.01, 50)}
    m = prune_masks(t, _ones(t), 0.5)
    assert m["big"].all() and not m["small"].any()


def test_monotone_and_rejects_lower_target():
    t = {"a": Rng(3).normal(1.0, (10, 10)), "b": Rng(4).normal(1.0, (5, 7))}
    masks = _ones(t)
    for target in (0.2, 0.4, 0.6, 0.8):
        new = prune_masks(t, masks, target)
        for n in t:
            assert not np.any(new[n] & ~masks[n])
        masks = new
    same = prune_masks(t, masks, 0.8)
    assert all(np.array_equal(same[n], masks[n]) for n in t)
    with pytest.raises(ValueError):
        prune_masks(t, masks, 0.5)


def test_apply_prune_step_zeroes_weights_and_moments():
    m = small_model(hidden=(5, 6))
    opt = OptimState.zeros_like(m.named_tensors())
    for v in opt.m.values():
        v[...] = 1.0
    assert sparsity_report(m).sparsity == 0.0
    apply_prune_step(m, 0.85, opt)
    rep = sparsity_report(m)
    assert abs(rep.sparsity - 0.85) <= 1 / rep.size
    tensors = m.named_tensors()
    for n, mask in m.masks.items():
        assert not tensors[n][~mask].any()
        assert not opt.m[n][~mask].any()
        assert opt.m[n][mask].all()
    assert "embedding" not in m.masks and opt.m["embedding"].all()


def test_full_masks_names():
    m = small_model(hidden=(5, 6))
    assert sorted(full_masks(m)) == sorted(m.maskable_names())
    assert all(not n.endswith(("b_u", "theta")) for n in m.maskable_names())


def test_schedule_targets():
    s = PruneSchedule(0.8, 4)
    np.testing.assert_allclose(s.step_targets(), [0.2, 0.4, 0.6, 0.8])
    assert s.lr_scale == 1.0
    assert PruneSchedule(0.2).lr_scale == 0.1
    with pytest.raises(ValueError):
        PruneSchedule(1.0)


def test_pipeline_one_shot_and_noop(tiny_corpus_dir):
    c = load_corpus(tiny_corpus_dir)
    m = small_model(vocab=len(c.vocab), embed=8, hidden=(8,), mode="dense")
    cfg = TrainConfig(lr=1e-3, bptt_len=10, batch_size=4, eval_batch_size=2)
    res = prune_pipeline(m, c, PruneSchedule(0.2, n_steps=1, finetune_epochs=1), cfg)
    assert len(res) == 1 and abs(res[0].achieved_sparsity - 0.2) <= 1 / sparsity_report(m).size
    before = {n: v.copy() for n, v in m.named_tensors().items()}
    res = prune_pipeline(m, c, PruneSchedule(0.2, n_steps=1, finetune_epochs=0), cfg)
    for n, v in m.named_tensors().items():
        np.testing.assert_array_equal(v, before[n])
