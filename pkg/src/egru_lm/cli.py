"""``egru-lm`` command line: train, prune, eval, sweep-wd, analyze, bench, gradcheck.

Every command that produces files writes into ``{out}/{run_id}/``, together
with ``config.resolved`` (the fully merged configuration).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import analyze
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .core_math import Rng
from .data import load_corpus
from .egru import DivergenceError, SurrogateCfg
from .lm import LmModel
from .prune import prune_pipeline, sparsity_report
from .sparse_infer import compile_model, count_macs_structural, measure_effective_macs
from .train import evaluate, fit, gradient_check, weight_decay_sweep, write_sweep_csv

log = logging.getLogger("egru_lm")


class CliError(Exception):
    pass


def _run_dir(args, cfg: RunConfig, default_id):
    d = Path(args.out) / (args.run_id or default_id)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.resolved").write_text(cfg.dumps(), encoding="utf-8")
    return d


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return parse_config(args.config, overrides)


def _load(path, corpus=None) -> Checkpoint:
    ck = load_checkpoint(path)
    if corpus is not None and ck.vocab_hash and ck.vocab_hash != corpus.vocab.content_hash:
        raise CliError(f"{path}: vocabulary does not match the data directory")
    return ck


def _results_row(model, sparsity, ck_model, corpus, tc, seed):
    valid = evaluate(ck_model, corpus.valid, tc.eval_batch_size, tc.bptt_len, tc.surrogate)
    test = evaluate(ck_model, corpus.test, tc.eval_batch_size, tc.bptt_len, tc.surrogate)
    macs = measure_effective_macs(compile_model(ck_model), corpus.valid[:2000]).total_effective
    return {"model": model, "weight_sparsity": sparsity, "macs": macs,
            "valid_ppl": valid.ppl, "test_ppl": test.ppl, "seed": seed}


def cmd_train(args):
    cfg = _config(args)
    corpus = load_corpus(args.data)
    tc = cfg.train_config()
    model = LmModel.init(cfg.lm_config(len(corpus.vocab)), Rng(tc.seed).child("model"))
    run = _run_dir(args, cfg, f"train_seed{tc.seed}")
    corpus.vocab.save(run / "vocab.txt")
    opt, history = fit(model, corpus, tc, log_path=run / "train_log.csv")
    ck = Checkpoint(model, opt, corpus.vocab.content_hash, opt.step, {"kind": "dense"})
    save_checkpoint(ck, run / "ckpt_final.bin")
    row = _results_row(cfg.model.cell, 0.0, model, corpus, tc, tc.seed)
    analyze.write_results(run / "results.csv", [row])
    print(f"valid_ppl {row['valid_ppl']:.3f} test_ppl {row['test_ppl']:.3f}")
    print(f"checkpoint {run / 'ckpt_final.bin'}")
    return 0


def cmd_prune(args):
    cfg = _config(args)
    corpus = load_corpus(args.data)
    ck = _load(args.ckpt, corpus)
    tc = cfg.train_config()
    schedule = cfg.prune_schedule()
    run = _run_dir(args, cfg, f"prune_{int(round(schedule.target_sparsity * 100))}")
    model = ck.model

    def on_step(res, m, opt):
        save_checkpoint(Checkpoint(m, opt, ck.vocab_hash, opt.step,
                                   {"kind": "pruned", "sparsity": res.achieved_sparsity}),
                        run / f"ckpt_step{res.step}.bin")

    results = prune_pipeline(model, corpus, schedule, tc, ck.opt, run / "prune_log.csv", on_step)
    final = results[-1]
    row = _results_row(model.config.cell, round(final.target_sparsity, 4), model, corpus, tc, tc.seed)
    analyze.write_results(run / "results.csv", [row])
    print(f"achieved_sparsity {final.achieved_sparsity:.4f} valid_ppl {row['valid_ppl']:.3f} "
          f"test_ppl {row['test_ppl']:.3f}")
    return 0


def cmd_eval(args):
    corpus = load_corpus(args.data)
    ck = _load(args.ckpt, corpus)
    ids = {"train": corpus.train, "valid": corpus.valid, "test": corpus.test}[args.split]
    ev = evaluate(ck.model, ids, args.batch_size, args.bptt_len)
    sp = sparsity_report(ck.model)
    print(f"{args.split}_ppl {ev.ppl:.4f}")
    print("lambda_a " + " ".join(f"{a:.4f}" for a in ev.lambda_a))
    print(f"weight_sparsity {sp.sparsity:.4f}")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    corpus = load_corpus(args.data)
    tc = cfg.train_config()
    grid = [(float(w), float(b)) for w in args.wd_weights.split(",") for b in args.wd_bias.split(",")]
    run = _run_dir(args, cfg, "sweep_wd")
    results = weight_decay_sweep(cfg.lm_config(len(corpus.vocab)), tc, corpus, grid)
    write_sweep_csv(results, run / "sweep.csv")
    for r in results:
        print(f"wd_weights {r.wd_weights:g} wd_bias {r.wd_bias:g} valid_ppl {r.valid_ppl:.3f} "
              f"lambda_a {' '.join(f'{a:.3f}' for a in r.lambda_a)} weight_mean {r.weight_mean:.5f}")
    return 0


def cmd_analyze(args):
    if args.tables:
        rows = analyze.emit_tables(args.tables)
        print((Path(args.tables) / "summary.txt").read_text(), end="")
        return 0 if rows else 1
    if not args.ckpt:
        raise CliError("analyze needs --ckpt or --tables")
    corpus = load_corpus(args.data)
    ck = _load(args.ckpt, corpus)
    cfg = parse_config(None)
    run = _run_dir(args, cfg, Path(args.ckpt).stem + "_analysis")
    ids = {"valid": corpus.valid, "test": corpus.test, "train": corpus.train}[args.split]
    trace = analyze.collect_trace(ck.model, ids)
    hists = analyze.activity_histogram(ck.model, ids, args.bins, trace)
    hists += analyze.cell_state_histogram(ck.model, ids, args.bins, trace)
    analyze.write_histograms(hists, run)
    analyze.write_diagnostic_csv(analyze.preactivation_diagnostic(ck.model, ids, trace),
                                 run / "preactivation.csv")
    for h in hists:
        print(f"{h.meta['quantity']}_{h.meta['layer']}: total {h.total} mean {h.mean():.4f}")
    print(f"written to {run}")
    return 0


def cmd_bench(args):
    if args.ckpt:
        ck = _load(args.ckpt)
        model = ck.model
        mc = model.config
    else:
        raise CliError("bench needs --ckpt")
    sparsity = sparsity_report(model).sparsity
    st = count_macs_structural(mc, sparsity=sparsity)
    print(f"model {mc.cell} embed {mc.embed_dim} hidden {','.join(map(str, mc.hidden_dims))}")
    print(f"weight_sparsity {sparsity:.4f}")
    for k, m in enumerate(st.per_layer):
        print(f"layer {k + 1} structural_macs {m:,.0f}")
    print(f"total structural MAC/token {st.total:,.0f} ({st.total / 1e6:.1f}M)")
    if args.data is not None or args.measure:
        corpus = load_corpus(args.data)
        report = measure_effective_macs(compile_model(model), corpus.valid[:args.tokens])
        print(report.table())
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "mac_report.csv").write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    for cell, hidden, seq in (("egru", args.hidden, args.seq_len), ("lstm", 4, 3)):
        rep = gradient_check(cell, hidden=hidden, seq_len=seq, seed=args.seed,
                             cfg=SurrogateCfg(args.lambda_s, args.epsilon))
        for name, err in rep.items():
            print(f"{cell} {name} max_rel_err {err:.3e}")
            worst = max(worst, err)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="egru-lm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--data", help="directory with train.txt/valid.txt/test.txt "
                                       "(default: bundled corpus)")
        sp.add_argument("--out", default="runs")
        sp.add_argument("--run-id")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="train a dense model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("prune", help="iterative magnitude pruning with fine-tuning")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("eval", help="perplexity and activity of a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    sp.add_argument("--batch-size", type=int, default=10)
    sp.add_argument("--bptt-len", type=int, default=70)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-wd", help="weight decay vs activity study")
    common(sp)
    sp.add_argument("--wd-weights", default="0.0,0.3")
    sp.add_argument("--wd-bias", default="0.01")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("analyze", help="histograms, expectation diagnostic, summary tables")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    sp.add_argument("--bins", type=int, default=50)
    sp.add_argument("--out", default="runs")
    sp.add_argument("--run-id")
    sp.add_argument("--tables", metavar="RUN_DIR", help="summarize results.csv files under RUN_DIR")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("bench", help="structural and measured MAC counts")
    sp.add_argument("--ckpt")
    sp.add_argument("--data")
    sp.add_argument("--measure", action="store_true", help="measure on the bundled corpus")
    sp.add_argument("--tokens", type=int, default=2000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the BPTT gradients")
    sp.add_argument("--hidden", type=int, default=8)
    sp.add_argument("--seq-len", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lambda-s", type=float, default=1.0)
    sp.add_argument("--epsilon", type=float, default=1.0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, DivergenceError, FileNotFoundError, ValueError) as exc:
        print(f"egru-lm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
