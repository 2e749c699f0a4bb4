"""Command-line entry point: verification suites, kernel benchmark, sharding check, training, ablations."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4

log = logging.getLogger("pkmem")


class VerificationFailure(RuntimeError):
    pass


def _ints(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _strs(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def header(args_or_hash, seed) -> str:
    """One-line provenance header written at the top of every output file."""
    if isinstance(args_or_hash, str):
        h = args_or_hash
    else:
        h = hashlib.sha256(json.dumps(args_or_hash, sort_keys=True, default=str).encode()).hexdigest()[:12]
    return f"pkmem {__version__} config={h} seed={seed}"


def _arg_hash(args) -> dict:
    skip = {"func", "out", "no_plots", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, head: str, body: str):
    path.write_text(f"# {head}\n{body}" + ("" if body.endswith("\n") else "\n"))


# -- verify-topk --------------------------------------------------------------

def cmd_verify_topk(args) -> int:
    from .verify import verify_topk
    seeds = list(range(args.seed, args.seed + args.seeds)) if args.seed_list is None else args.seed_list
    if not seeds:
        log.warning("no seeds given: verification is vacuous")
        print("verify-topk: WARNING empty seed list, nothing checked (vacuous pass)")
        return EXIT_OK
    rep = verify_topk(args.half_n, args.k, seeds, key_dim=args.key_dim, inject_fault=args.inject_fault)
    lines = [f"verify-topk: {rep.cases} cases, {rep.queries} queries, {len(rep.mismatches)} mismatching "
             f"cases in {rep.elapsed_s:.1f}s"]
    for m in rep.mismatches:
        if m is not None:
            lines.append("MISMATCH " + m.describe())
    lines.append("PASS" if rep.ok else "FAIL")
    text = "\n".join(lines)
    print(text)
    out = _out_dir(args)
    if out:
        _write_text(out / "verify_topk.txt", header(_arg_hash(args), args.seed), text)
    return EXIT_OK if rep.ok else EXIT_VERIFY


# -- bench-bag ----------------------------------------------------------------

def cmd_bench_bag(args) -> int:
    from .bag_bench import ranking_summary, format_ranking, run_grid, write_csv
    from .embedding_bag import STRATEGIES
    strategies = args.strategies or list(STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    dtype = np.float64 if args.wide_precision else np.float32
    workers = args.workers_list or [args.workers]
    reports = run_grid(strategies, args.dims, args.skews, workers, args.num_values, args.batch, args.k,
                       args.repeats, args.seed, dtype=dtype)
    head = header(_arg_hash(args), args.seed)
    bad = [r for r in reports if not r.checksum_ok]
    summary = format_ranking(ranking_summary(reports)) if reports else "no measurements (zero repeats)"
    print(summary)
    print(f"checksums: {len(reports) - len(bad)}/{len(reports)} rows match the sequential oracle")
    out = _out_dir(args)
    if out:
        write_csv(reports, out / "bench_bag.csv", head)
        _write_text(out / "bench_ranking.txt", head, summary)
        if reports and not args.no_plots:
            from .plotting import plot_bench
            plot_bench(reports, out / "bench_bag.png", head)
    return EXIT_OK if not bad else EXIT_VERIFY


# -- shard-check --------------------------------------------------------------

def cmd_shard_check(args) -> int:
    from .sharded_memory import ShardConfigError
    from .verify import verify_sharding
    for G in args.groups:
        if G < 1 or args.dim % G:
            raise ShardConfigError(f"group size {G} does not divide value dim {args.dim}")
    cases = verify_sharding(args.groups, N_v=args.num_values, n=args.dim, k=args.k,
                            batch_per_worker=args.batch, seed=args.seed)
    ok = True
    report = []
    for c in cases:
        ok &= c.ok
        status = "PASS" if c.ok else "FAIL"
        line = (f"G={c.G}: {status} forward_exact={c.forward_exact} backward_exact={c.backward_exact} "
                f"bytes_exchanged={c.accounting['bytes_exchanged']} "
                f"phase3_bytes={c.accounting['phase_bytes'].get('partial_embedding', 0)} "
                f"expected_phase3={c.expected_phase3_bytes if c.G > 1 else 0} messages={c.accounting['messages']}")
        if c.G == 1:
            line += " (single shard: zero bytes exchanged)" if c.accounting["bytes_exchanged"] == 0 else ""
        if c.mismatch:
            line += f"\n  first mismatch: {c.mismatch}"
        print(line)
        report.append({"G": c.G, "ok": c.ok, "forward_exact": c.forward_exact,
                       "backward_exact": c.backward_exact, "expected_phase3_bytes": c.expected_phase3_bytes,
                       "accounting": c.accounting})
    out = _out_dir(args)
    if out:
        head = header(_arg_hash(args), args.seed)
        (out / "shard_check.json").write_text(json.dumps({"header": head, "cases": report}, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_VERIFY


# -- training -----------------------------------------------------------------

def _load_train_config(args):
    from .trainer.config import TrainConfig, load_config, load_preset
    if args.config and args.preset:
        raise ValueError("give either --config or --preset")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = TrainConfig()
    changes = {}
    if args.seed is not None:
        changes.update(seed=args.seed, data_seed=args.seed)
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.deterministic:
        changes["deterministic"] = True
    if args.wide_precision:
        changes["precision"] = "wide"
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    cfg = cfg.replace(**changes) if changes else cfg
    cfg.validate()
    return cfg


def _run_one(cfg, label, out, args, data=None):
    from .trainer.loop import load_checkpoint, run, save_checkpoint, setup
    if args.resume:
        st = load_checkpoint(args.resume)
        if st.cfg.config_hash() != cfg.config_hash() and args.config:
            log.warning("resuming with the checkpoint's own config %s", st.cfg.config_hash())
        if getattr(args, "steps", None) is not None:
            st.cfg = st.cfg.replace(steps=args.steps)
            st.opt.total_steps = args.steps
        cfg = st.cfg
    else:
        st = setup(cfg, data)
    if label is None:
        label = "memory" if cfg.memory_placement else "dense"
    head = header(cfg.config_hash(), cfg.seed)
    ckpt_every = getattr(args, "checkpoint_every", 0) or 0

    def on_eval(state, rec):
        print(f"[{label}] step {rec['step']:>6} loss {rec['train_loss']:.4f} eval_nll {rec['eval_nll']:.4f} "
              f"recall {rec['recall']:.3f}", flush=True)
        if out and ckpt_every and state.opt.step % ckpt_every == 0:
            save_checkpoint(state, out / f"{label}.step{state.opt.step}.ckpt.npz")
        return False

    log_ = run(st, on_eval=on_eval)
    if out:
        log_.write_jsonl(out / f"{label}.jsonl", head)
        log_.write_csv(out / f"{label}.csv", head)
        if ckpt_every:
            save_checkpoint(st, out / f"{label}.ckpt.npz")
    return st, log_


def compare_runs(dense_log, memory_log, threshold: float) -> dict:
    d_steps = dense_log.steps_to_recall(threshold)
    m_steps = memory_log.steps_to_recall(threshold)
    d_nll = dense_log.final()["eval_nll"]
    m_nll = memory_log.final()["eval_nll"]
    return {"threshold": threshold, "dense_steps": d_steps, "memory_steps": m_steps,
            "memory_faster": m_steps < d_steps, "dense_final_eval_nll": d_nll,
            "memory_final_eval_nll": m_nll, "memory_lower_nll": m_nll < d_nll}


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def cmd_train(args) -> int:
    if args.gradcheck:
        return cmd_gradcheck(args)
    from .trainer.data import gen_facts
    from .trainer.model import dense_baseline
    cfg = _load_train_config(args)
    out = _out_dir(args)
    if not args.paired:
        st, log_ = _run_one(cfg, None, out, args)
        cfg = st.cfg
        label = "memory" if cfg.memory_placement else "dense"
        final = log_.final()
        print(f"final: step {final.get('step')} eval_nll {final.get('eval_nll', float('nan')):.4f} "
              f"recall {final.get('recall', float('nan')):.3f}")
        if out and not args.no_plots and log_.records:
            from .plotting import plot_training
            plot_training({label: log_.records}, out / f"{label}.png", cfg.recall_threshold,
                          header(cfg.config_hash(), cfg.seed))
        return EXIT_OK
    if not cfg.memory_placement:
        raise ValueError("--paired needs a config with memory_placement set")
    if args.resume:
        raise ValueError("--resume applies to single runs")
    data = gen_facts(cfg.num_facts, cfg.vocab, cfg.data_seed, cfg.num_relations, cfg.eval_size, cfg.num_subjects)
    dense_cfg = dense_baseline(cfg)
    _, d_log = _run_one(dense_cfg, "dense", out, args, data)
    _, m_log = _run_one(cfg, "memory", out, args, data)
    summary = compare_runs(d_log, m_log, cfg.recall_threshold)
    print(json.dumps(_jsonable(summary)))
    if out:
        head = header(cfg.config_hash(), cfg.seed)
        (out / "comparison.json").write_text(json.dumps({"header": head, **_jsonable(summary)}, indent=2) + "\n")
        if not args.no_plots:
            from .plotting import plot_training
            plot_training({"dense": d_log.records, "memory": m_log.records}, out / "paired.png",
                          cfg.recall_threshold, head)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer.ablate import ablate, write_ablation_csv
    cfg = _load_train_config(args)
    if args.axis == "placement":
        values = [[int(i) for i in v.split("-") if i != ""] for v in args.values]
    else:
        values = [int(v) for v in args.values]
    seeds = args.seeds_list or [cfg.seed]

    def progress(row):
        print(f"[{row.axis}={row.value} seed={row.seed}] train_nll {row.train_nll:.4f} "
              f"eval_nll {row.eval_nll:.4f} recall {row.recall:.4f} ({row.elapsed_s:.0f}s)", flush=True)

    rows = ablate(args.axis, values, cfg, seeds, progress)
    out = _out_dir(args)
    if out:
        head = header(cfg.config_hash(), cfg.seed)
        write_ablation_csv(rows, out / f"ablate_{args.axis}.csv", head)
        if not args.no_plots:
            from .plotting import plot_ablation
            plot_ablation(rows, out / f"ablate_{args.axis}.png", head)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import verify_gradients
    rep = verify_gradients(seeds=range(args.seed or 0, (args.seed or 0) + args.grad_seeds))
    lines = [f"{name:<22} max rel err {err:.3e}  tol {rep.tolerances[name]:.0e}  "
             f"{'PASS' if err < rep.tolerances[name] else 'FAIL'}" for name, err in rep.errors.items()]
    lines.append(f"gradcheck: {'PASS' if rep.ok else 'FAIL'} in {rep.elapsed_s:.1f}s")
    text = "\n".join(lines)
    print(text)
    out = _out_dir(args)
    if out:
        _write_text(out / "gradcheck.txt", header(_arg_hash(args), args.seed), text)
    return EXIT_OK if rep.ok else EXIT_VERIFY


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="base seed, recorded in every output header")
    common.add_argument("--workers", type=int, default=None, help="threads for the bag kernels")
    common.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
    common.add_argument("--wide-precision", action="store_true", help="float64 instead of float32")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pkmem", description=__doc__)
    p.add_argument("--version", action="version", version=f"pkmem {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-topk", parents=[common], help="product-key top-k against brute force")
    s.add_argument("--half-n", type=_ints, default=[4, 16, 64])
    s.add_argument("--k", type=_ints, default=[1, 4, 16])
    s.add_argument("--seeds", type=int, default=200, help="number of seeds starting at --seed")
    s.add_argument("--seed-list", type=_ints, default=None, help="explicit seeds (may be empty)")
    s.add_argument("--key-dim", type=int, default=16)
    s.add_argument("--inject-fault", action="store_true", help="perturb one score per case (self-test)")
    s.set_defaults(func=cmd_verify_topk)

    s = sub.add_parser("bench-bag", parents=[common], help="time EmbeddingBag backward strategies")
    s.add_argument("--strategies", type=_strs, default=None)
    s.add_argument("--dims", type=_ints, default=[32, 128, 512])
    s.add_argument("--skews", type=_strs, default=["uniform", "zipf"])
    s.add_argument("--workers-list", type=_ints, default=None, help="worker counts to sweep (default: --workers)")
    s.add_argument("--num-values", type=int, default=1 << 16)
    s.add_argument("--batch", type=int, default=1024)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--repeats", type=int, default=3)
    s.set_defaults(func=cmd_bench_bag)

    s = sub.add_parser("shard-check", parents=[common], help="sharded vs unsharded bag, bit for bit")
    s.add_argument("--groups", type=_ints, default=[1, 2, 4, 8])
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--num-values", type=int, default=1024)
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--batch", type=int, default=32, help="rows per worker")
    s.set_defaults(func=cmd_shard_check)

    s = sub.add_parser("train", parents=[common], help="train one model, or a dense/memory pair")
    s.add_argument("--preset", help="shipped config: recall_speed or memory_size")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--paired", action="store_true", help="also train the FLOP-matched dense baseline")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--gradcheck", action="store_true", help="run the finite-difference suite and exit")
    s.add_argument("--grad-seeds", type=int, default=5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", parents=[common], help="sweep one axis, CSV of final NLL and recall")
    s.add_argument("--preset")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--axis", required=True,
                   choices=["placement", "num_memory_layers", "key_dim", "v_dim", "memory_size"])
    s.add_argument("--values", type=_strs, required=True,
                   help="comma-separated; placements as dash-joined layer lists, e.g. 3,1-3")
    s.add_argument("--seeds-list", type=_ints, default=None)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="wide-precision finite-difference suite")
    s.add_argument("--grad-seeds", type=int, default=5)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .pk_index import ConfigError as PkConfigError
    from .sharded_memory import ShardConfigError
    from .tensor import NumericError
    from .trainer.config import ConfigError
    from .trainer.loop import NumericAbort

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command in ("verify-topk", "bench-bag", "shard-check") and args.seed is None:
        args.seed = 0
    if args.command == "bench-bag" and args.workers is None:
        args.workers = 1
    try:
        if args.deterministic:
            from .trainer.loop import single_thread
            with single_thread(True):
                return args.func(args)
        return args.func(args)
    except (ConfigError, ShardConfigError, PkConfigError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericAbort, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
