"""Acceptance suite: the nine end-to-end criteria at their stated tolerances.

The desk-scale model (embed 128, three EGRU layers of 128, tied decoder) is
trained once per session on the bundled corpus and shared by the criteria that
need a trained network. Each criterion prints one PASS/FAIL line in the final
terminal summary.
"""
import contextlib
import math

import numpy as np
import pytest

from egru_lm.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint
from egru_lm.core_math import Rng
from egru_lm.data import load_corpus, unigram_perplexity
from egru_lm.lm import LmConfig, LmModel, lm_forward
from egru_lm.prune import (PruneSchedule, apply_prune_step, global_magnitude_cutoff, prune_masks,
                           prune_pipeline, sparsity_report)
from egru_lm.sparse_infer import (compile_model, count_macs_structural, measure_effective_macs,
                                  run_tokens)
from egru_lm.train import TrainConfig, evaluate, fit, gradient_check, weight_decay_sweep
from tests.conftest import ACCEPTANCE_LINES
from tests.test_checkpoint import GOLDEN
from tests.test_checkpoint import test_golden_fixture_decodes_stably as check_golden_fixture
from tests.test_egru import _gru_oracle

pytestmark = pytest.mark.slow

DESK_TRAIN = TrainConfig(lr=3e-3, epochs=15)


def desk_model_config(vocab_size, **kw):
    return LmConfig(vocab_size=vocab_size, embed_dim=128, hidden_dims=(128, 128, 128),
                    dropconnect_p=0.2, dropout_p=0.1, **kw)


@contextlib.contextmanager
def criterion(n, title):
    detail = []
    try:
        yield detail
    except BaseException as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        ACCEPTANCE_LINES[n] = f"FAIL  {n}. {title}: {'; '.join(detail + [msg])}"
        raise
    ACCEPTANCE_LINES[n] = f"PASS  {n}. {title}: {'; '.join(detail)}"


@pytest.fixture(scope="session")
def corpus():
    return load_corpus()


@pytest.fixture(scope="session")
def desk(corpus):
    """Dense desk-scale EGRU trained to convergence, then pruned to 80% in four steps."""
    model = LmModel.init(desk_model_config(len(corpus.vocab)), Rng(DESK_TRAIN.seed).child("model"))
    opt, history = fit(model, corpus, DESK_TRAIN)
    dense = model.copy()
    dense_ppl = evaluate(model, corpus.valid, DESK_TRAIN.eval_batch_size, DESK_TRAIN.bptt_len,
                         DESK_TRAIN.surrogate).ppl
    steps = prune_pipeline(model, corpus, PruneSchedule(0.8, n_steps=4, finetune_epochs=3),
                           DESK_TRAIN, opt)
    return {"dense": dense, "dense_ppl": dense_ppl, "history": history, "pruned": model,
            "steps": steps}


def test_c1_mac_structure():
    with criterion(1, "structural MACs of the 400/1150/1150/400 LSTM") as d:
        dense = count_macs_structural("lstm", 400, (1150, 1150, 400)).total
        sparse = count_macs_structural("lstm", 400, (1150, 1150, 400), sparsity=0.8).total
        d.append(f"dense {dense:,.0f}, 80% sparse {sparse:,.0f}")
        assert dense == 20_190_000
        assert round(dense / 1e6, 1) == 20.2
        assert sparse == pytest.approx(4_038_000)
        # quoted as 4.1M elsewhere; the exact product is 1.5% below that
        assert abs(sparse - 4.1e6) / 4.1e6 < 0.02


def test_c2_gradient_correctness():
    with criterion(2, "BPTT gradients vs central differences") as d:
        egru = gradient_check("egru", hidden=8, seq_len=4)
        lstm = gradient_check("lstm", hidden=4, seq_len=3)
        d.append(f"egru worst {max(egru.values()):.2e} over {sorted(egru)}")
        d.append(f"lstm worst {max(lstm.values()):.2e}")
        assert "theta" in egru
        assert max(egru.values()) < 1e-4
        assert max(lstm.values()) < 1e-4


def test_c3_dense_mode_equivalence():
    with criterion(3, "dense-mode EGRU vs independent GRU stack") as d:
        cfg = LmConfig(vocab_size=50, embed_dim=128, hidden_dims=(128, 128, 128), mode="dense")
        model = LmModel.init(cfg, Rng(3).child("model"))
        tokens = Rng(4).integers(0, 50, 100)
        logits = lm_forward(model, tokens).logits
        x = model.embedding[tokens].astype(np.float64)
        for layer in model.astype(np.float64).layers:
            x = _gru_oracle(layer, x, np.zeros(layer.hidden))
        ref = x @ model.embedding.astype(np.float64).T
        err = float(np.abs(logits - ref).max())
        d.append(f"max logit error {err:.2e} over 100 steps")
        assert err < 1e-5


def test_c4_sparse_engine_equivalence(desk, corpus):
    with criterion(4, "event-driven CSC inference vs masked dense forward") as d:
        model = desk["dense"].copy()
        apply_prune_step(model, 0.85)
        sp = sparsity_report(model)
        assert abs(sp.sparsity - 0.85) <= 1 / sp.size
        tokens = corpus.valid[:1000]
        ref = lm_forward(model, tokens).logits
        cm = compile_model(model)
        run = run_tokens(cm, tokens)
        err = float(np.abs(run.logits - ref).max())
        d.append(f"max logit error {err:.2e} over 1000 tokens")
        assert err < 1e-5
        # brute-force MAC count from the dense masked weights and the dense trace
        fwd = lm_forward(model, tokens)
        ys = fwd.tape["ys"]
        tensors = model.named_tensors()
        mismatches = 0
        for k, layer in enumerate(model.layers):
            n_in = layer.n_in
            nz = sum((tensors[f"layers.{k}.{w}"] != 0).astype(np.int64) for w in layer.weight_names)
            col = nz.sum(axis=0)
            y_prev = np.concatenate([np.zeros((1, layer.hidden)), ys[k][:-1, 0]])
            x_in = model.embedding[tokens] if k == 0 else ys[k - 1][:, 0]
            rec = ((y_prev != 0) * col[n_in:]).sum(axis=1)
            inp = (np.ones_like(x_in) if k == 0 else (x_in != 0)) @ col[:n_in]
            engine_rec = np.array([m.recurrent_macs[k] for m in run.macs])
            engine_in = np.array([m.input_macs[k] for m in run.macs])
            mismatches += int((engine_rec != rec).sum() + (engine_in != inp).sum())
        d.append(f"MAC mismatches {mismatches}")
        assert mismatches == 0


def _activity_nnz_coupling(model, tokens):
    """Per layer: correlation of unit activity with its recurrent column nnz, and sum_j a_j nnz_j."""
    ys = lm_forward(model, tokens).tape["ys"]
    out = []
    for k, layer in enumerate(model.layers):
        col = sum((getattr(layer, w)[:, layer.n_in:] != 0).sum(axis=0) for w in layer.weight_names)
        y_prev = np.concatenate([np.zeros((1, layer.hidden)), ys[k][:-1, 0]])
        a = (y_prev != 0).mean(axis=0)
        out.append((float(np.corrcoef(a, col)[0, 1]), float((a * col).sum())))
    return out


def test_c5_multiplicative_composition(desk, corpus):
    with criterion(5, "recurrent MACs vs lambda_a * lambda_w per layer") as d:
        report = measure_effective_macs(compile_model(desk["pruned"]), corpus.valid)
        coupling = _activity_nnz_coupling(desk["pruned"], corpus.valid)
        for l, (corr, exact) in zip(report.layers, coupling):
            d.append(f"L{l.layer} a={l.lambda_a:.3f} w={l.rec_lambda_w:.3f} gap={l.rec_gap:+.1%} "
                     f"corr(activity,col nnz)={corr:.2f}")
            # the measurement itself is exact: it equals sum over units of activity x column nnz
            assert l.rec_effective == pytest.approx(exact, rel=1e-9)
        assert sparsity_report(desk["pruned"]).sparsity == pytest.approx(0.8, abs=1e-4)
        for l in report.layers:
            assert abs(l.rec_gap) < 0.10, f"layer {l.layer} gap {l.rec_gap:+.3f}"


def test_composition_holds_for_activity_independent_masks(desk, corpus):
    # control for criterion 5: the same trained weights with a random 80% mask,
    # which cannot correlate with activity, compose within the 10% band
    model = desk["dense"].copy()
    g = np.random.default_rng(5)
    model.masks = {}
    for n in model.maskable_names():
        t = model.named_tensors()[n]
        keep = g.random(t.shape) >= 0.8
        t *= keep
        model.masks[n] = keep
    report = measure_effective_macs(compile_model(model), corpus.valid)
    for l in report.layers:
        assert abs(l.rec_gap) < 0.10, f"layer {l.layer} gap {l.rec_gap:+.3f}"


def test_c6_pruning_pipeline(desk, corpus):
    with criterion(6, "train, prune to 80% in 4 steps, fine-tune") as d:
        uni = unigram_perplexity(corpus.train, corpus.valid, len(corpus.vocab))
        final = desk["steps"][-1]
        N = sparsity_report(desk["pruned"]).size
        rel = final.valid_ppl / desk["dense_ppl"] - 1
        d.append(f"unigram {uni:.1f}, dense {desk['dense_ppl']:.2f}, pruned {final.valid_ppl:.2f} "
                 f"({rel:+.1%}), sparsity {final.achieved_sparsity:.5f}")
        assert desk["dense_ppl"] < uni
        assert len(desk["steps"]) == 4
        assert abs(final.achieved_sparsity - 0.8) <= 1 / N
        for a, b in zip(desk["steps"], desk["steps"][1:]):
            for n in a.masks:
                assert not np.any(b.masks[n] & ~a.masks[n]), f"mask of {n} regrew"
        assert rel < 0.15


def test_c7_weight_decay_activity_trend(corpus):
    with criterion(7, "weight decay raises activity and centers weights") as d:
        mc = desk_model_config(len(corpus.vocab))
        low, high = weight_decay_sweep(mc, DESK_TRAIN, corpus, [(0.0, 0.01), (0.3, 0.01)])
        act_low, act_high = float(np.mean(low.lambda_a)), float(np.mean(high.lambda_a))
        d.append(f"lambda_a {act_low:.3f} -> {act_high:.3f}, "
                 f"weight mean {low.weight_mean:+.5f} -> {high.weight_mean:+.5f}")
        assert act_high > act_low
        assert abs(high.weight_mean) < abs(low.weight_mean)


def _oracle_masks(tensors, target):
    entries = []
    for ti, (name, t) in enumerate(tensors.items()):
        entries += [(abs(float(v)), ti, i) for i, v in enumerate(t.ravel())]
    total = len(entries)
    chosen = sorted(entries)[:int(round(target * total))]
    names = list(tensors)
    out = {n: np.ones(t.size, bool) for n, t in tensors.items()}
    for _, ti, i in chosen:
        out[names[ti]][i] = False
    return {n: out[n].reshape(tensors[n].shape) for n in names}, (chosen[-1][0] if chosen else 0.0)


def test_c8_pruning_oracle():
    with criterion(8, "global magnitude cutoff vs full-sort oracle") as d:
        g = np.random.default_rng(8)
        # coarse quantization forces many exact ties, with mixed signs
        shapes = {"a": (200, 150), "b": (300, 100), "c": (100, 400)}
        tensors = {n: (g.integers(-500, 501, s) / 1000).astype(np.float32) for n, s in shapes.items()}
        assert sum(t.size for t in tensors.values()) == 100_000
        ones = {n: np.ones(t.shape, bool) for n, t in tensors.items()}
        checked = 0
        for target in (0.1, 0.5, 0.8, 0.85, 0.97):
            ref, tau = _oracle_masks(tensors, target)
            got = prune_masks(tensors, ones, target)
            assert global_magnitude_cutoff(tensors, ones, target) == pytest.approx(tau, abs=0)
            for n in tensors:
                np.testing.assert_array_equal(got[n], ref[n])
            assert sum(int((~m).sum()) for m in got.values()) == int(round(target * 100_000))
            checked += 1
        d.append(f"{checked} targets on 100,000 weights with ties, exact match")


def test_c9_determinism_and_format(corpus, tmp_path):
    with criterion(9, "same-seed training, checkpoint round trip, golden fixture") as d:
        cfg = TrainConfig(lr=3e-3, epochs=1, seed=7)
        blobs = []
        for _ in range(2):
            m = LmModel.init(desk_model_config(len(corpus.vocab)), Rng(cfg.seed).child("model"))
            opt, _ = fit(m, corpus, cfg)
            blobs.append(encode_checkpoint(Checkpoint(m, opt, corpus.vocab.content_hash, opt.step)))
        assert blobs[0] == blobs[1]
        d.append(f"two seed-7 runs identical ({len(blobs[0]):,} bytes)")
        (tmp_path / "ck.bin").write_bytes(blobs[0])
        back = load_checkpoint(tmp_path / "ck.bin")
        before = evaluate(decode_checkpoint(blobs[0]).model, corpus.valid, 10, 70).nll
        assert evaluate(back.model, corpus.valid, 10, 70).nll == before
        assert encode_checkpoint(back) == blobs[0]
        d.append("save-load-evaluate bit-identical")
        check_golden_fixture()
        d.append(f"golden {GOLDEN.name} stable")


def test_pruning_without_finetune_is_worse(desk, corpus):
    model = desk["dense"].copy()
    steps = prune_pipeline(model, corpus, PruneSchedule(0.8, n_steps=4, finetune_epochs=0), DESK_TRAIN)
    assert steps[-1].valid_ppl > desk["steps"][-1].valid_ppl
    assert math.isfinite(steps[-1].valid_ppl)
