"""Command-line harness.

Subcommands: ``generate`` (one benchmark run), ``bench`` (sweep over
structures/budgets/temperatures), ``oracle`` (ground-truth check suites),
``mask`` (block-occupancy analysis of tree-attention masks), and
``hypothesis`` (acceptance-rate versus draft-probability bins).

Flags override config-file values, which override defaults.  Exit codes:
0 success, 1 a check suite failed, 2 usage or configuration error.  The
environment variable ``DYSPEC_THREADS`` caps the worker count of sweep
commands; every command is deterministic for a fixed config and seeds,
regardless of worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import mask_opt, oracle
from .config import ConfigError, RunConfig
from .construct import CostParams, build_tree_fixed
from .engine import (
    GenConfig,
    acceptance_vs_draft_bins,
    bin_rank_correlation,
    generate,
    make_prompt,
)
from .lm import ModelPairSpec, make_model_pair
from .rng import derive_seed

DEFAULT_CONFIG: Dict = {"models": {}}


def worker_count() -> int:
    raw = os.environ.get("DYSPEC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _load_config(args: argparse.Namespace, overrides: Dict) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_dict(dict(DEFAULT_CONFIG), overrides)


def _out_dir(args: argparse.Namespace, cfg: Optional[RunConfig] = None) -> Path:
    out = getattr(args, "out", None) or (cfg.output_dir if cfg else None) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_list(text: str, cast):
    return [cast(part) for part in text.split(",") if part != ""]


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def _run_single(models: ModelPairSpec, gen: GenConfig, costs: CostParams):
    target, draft = make_model_pair(models)
    prompt = make_prompt(target.with_temperature(1.0), gen.prefix_len, gen.seed)
    return generate(target, draft, prompt, gen, costs)


def cmd_generate(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "budget": args.budget,
        "threshold": args.threshold,
        "size_cap": args.size_cap,
        "structure": args.structure,
        "k": args.k,
        "branching": _csv_list(args.branching, int) if args.branching else None,
        "gen_len": args.gen_len,
        "prefix_len": args.prefix_len,
        "target_temp": args.target_temp,
        "draft_temp": args.draft_temp,
    }
    cfg = _load_config(args, overrides)
    out = _out_dir(args, cfg)
    tokens, metrics = _run_single(cfg.models, cfg.generation, cfg.costs)

    payload = metrics.to_dict()
    payload["models"] = cfg.models.to_dict()
    payload["generated_tokens"] = tokens
    _write_json(out / "run_metrics.json", payload)
    _write_csv(
        out / "steps.csv",
        ["step", "tree_size", "tree_depth", "accepted", "modeled_latency"],
        [
            [s.step, s.tree_size, s.tree_depth, s.accepted, s.modeled_latency]
            for s in metrics.steps
        ],
    )
    print(
        f"generated {len(tokens)} tokens in {len(metrics.steps)} steps; "
        f"mean accepted/step {metrics.mean_accepted:.3f}; wrote {out}/run_metrics.json"
    )
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def _bench_cell(payload: Dict) -> Dict:
    models = ModelPairSpec(**payload["models"])
    costs = CostParams(**payload["costs"])
    accepted, sizes, latencies, rates = [], [], [], []
    for seed in range(payload["seeds"]):
        gen = GenConfig(**{**payload["gen"], "seed": seed})
        _, metrics = _run_single(models, gen, costs)
        accepted.append(metrics.mean_accepted)
        sizes.append(metrics.mean_tree_size)
        rates.append(metrics.tokens_per_modeled_second)
        total = sum(s.accepted for s in metrics.steps)
        cost = sum(s.modeled_latency * s.accepted for s in metrics.steps)
        latencies.append(cost / total)
    n = payload["seeds"]
    return {
        **payload["cell"],
        "seeds": n,
        "mean_accepted": sum(accepted) / n,
        "mean_tree_size": sum(sizes) / n,
        "latency_per_token": sum(latencies) / n,
        "tokens_per_modeled_sec": sum(rates) / n,
    }


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _load_config(args, {"seed": args.seed})
    out = _out_dir(args, cfg)
    structures = _csv_list(args.structures, str)
    budgets = _csv_list(args.budgets, int) if args.budgets else []
    thresholds = _csv_list(args.thresholds, float) if args.thresholds else []
    temps = _csv_list(args.temps, float)
    if not structures or (not budgets and not thresholds) or not temps:
        print("bench: sweep needs at least one structure, budget/threshold, and temp",
              file=sys.stderr)
        return 2

    base_gen = {
        "prefix_len": cfg.generation.prefix_len,
        "gen_len": cfg.generation.gen_len,
        "draft_temp": cfg.generation.draft_temp,
    }
    jobs = []
    for structure in structures:
        for temp in temps:
            points = [("budget", b) for b in budgets]
            if structure == "dynamic":
                points += [("threshold", c) for c in thresholds]
            for mode, value in points:
                gen = dict(base_gen)
                gen["structure"] = structure
                gen["target_temp"] = temp
                if mode == "budget":
                    gen["budget"] = value
                else:
                    gen["threshold"] = value
                    gen["size_cap"] = args.size_cap
                if structure == "k_chains":
                    gen["k"] = args.k
                if structure == "static_tree":
                    gen["branching"] = tuple(_csv_list(args.branching, int))
                cell = {
                    "structure": structure,
                    "mode": mode,
                    "budget": value if mode == "budget" else "",
                    "threshold": value if mode == "threshold" else "",
                    "size_cap": args.size_cap if mode == "threshold" else "",
                    "target_temp": temp,
                }
                jobs.append(
                    {
                        "models": {**cfg.models.to_dict(), "target_temp": temp},
                        "gen": gen,
                        "costs": {
                            "draft_cost": cfg.costs.draft_cost,
                            "target_cost": cfg.costs.target_cost,
                            "per_node_overhead": cfg.costs.per_node_overhead,
                        },
                        "seeds": args.seeds,
                        "cell": cell,
                    }
                )

    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_bench_cell, jobs))
    else:
        rows = [_bench_cell(job) for job in jobs]
    rows.sort(key=lambda r: (r["structure"], r["mode"], str(r["budget"]),
                             str(r["threshold"]), r["target_temp"]))

    header = [
        "structure", "mode", "budget", "threshold", "size_cap", "target_temp",
        "seeds", "mean_accepted", "mean_tree_size", "latency_per_token",
        "tokens_per_modeled_sec",
    ]
    if args.format == "json":
        _write_json(out / "bench.json", rows)
        print(f"wrote {out}/bench.json ({len(rows)} cells)")
    else:
        _write_csv(out / "bench.csv", header, [[r[h] for h in header] for r in rows])
        print(f"wrote {out}/bench.csv ({len(rows)} cells)")
    return 0


# --------------------------------------------------------------------------
# oracle
# --------------------------------------------------------------------------

_SUITES = {
    "unbiasedness": lambda args: [
        oracle.suite_unbiasedness_exact(instances=args.instances, seed=args.seed or 0),
        oracle.suite_unbiasedness_mc(trials=args.trials, seed=args.seed or 0),
    ],
    "optimality": lambda args: [
        oracle.suite_optimality(instances=args.instances, seed=args.seed or 0)
    ],
    "expectation": lambda args: [
        oracle.suite_expectation(
            configs=min(args.instances, 1000), trials=args.trials, seed=args.seed or 0
        )
    ],
    "threshold-equivalence": lambda args: [
        oracle.suite_threshold_equivalence(configs=args.instances, seed=args.seed or 0)
    ],
}


def cmd_oracle(args: argparse.Namespace) -> int:
    runner = _SUITES.get(args.suite)
    if runner is None:
        print(f"oracle: unknown suite {args.suite!r} "
              f"(choose from {', '.join(sorted(_SUITES))})", file=sys.stderr)
        return 2
    reports = runner(args)
    out = _out_dir(args)
    _write_json(out / "oracle_report.json", reports)
    ok = all(r["pass"] for r in reports)
    for r in reports:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['suite']}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# mask
# --------------------------------------------------------------------------


def _mask_tree(generator: str, n: int, seed: int, cfg: Optional[RunConfig]) -> List[int]:
    if generator == "random":
        return mask_opt.random_tree(n, seed)
    if generator == "chain":
        return [-1] + list(range(n - 1))
    if generator == "constructed":
        models = cfg.models if cfg else ModelPairSpec()
        target, draft = make_model_pair(models)
        draft = draft.with_temperature(models.draft_temp)
        prompt = make_prompt(target.with_temperature(1.0), 16, seed)
        return build_tree_fixed(draft, prompt, n, seed).parent_array()
    raise ValueError(f"unknown tree generator {generator!r}")


def cmd_mask(args: argparse.Namespace) -> int:
    cfg = _load_config(args, {}) if args.config else None
    out = _out_dir(args, cfg)
    orders = _csv_list(args.orders, str)
    sizes = _csv_list(args.sizes, int)
    prefixes = _csv_list(args.prefixes, int)
    if any(n < 1 for n in sizes):
        print("mask: sizes must be >= 1", file=sys.stderr)
        return 2

    per_seed_rows = []
    agg_rows = []
    for n in sizes:
        for prefix in prefixes:
            for order_name in orders:
                counts = []
                for seed in range(args.seeds):
                    parents = _mask_tree(args.generator, n, derive_seed(seed, "mask", n), cfg)
                    if order_name == "original":
                        mask = mask_opt.mask_from_tree(parents, prefix)
                    elif order_name == "dfs":
                        mask = mask_opt.apply_permutation(
                            parents, mask_opt.dfs_order(parents), prefix
                        )
                    elif order_name == "hpd":
                        mask = mask_opt.apply_permutation(
                            parents, mask_opt.hpd_order(parents), prefix
                        )
                    else:
                        print(f"mask: unknown order {order_name!r}", file=sys.stderr)
                        return 2
                    count = mask_opt.count_nonzero_blocks(mask, args.block)
                    counts.append(count)
                    per_seed_rows.append([n, prefix, args.block, order_name, count])
                    if args.dump_grids and seed == 0:
                        grid = out / f"mask_n{n}_p{prefix}_{order_name}.pbm"
                        grid.write_text(mask.to_pbm())
                mean = sum(counts) / len(counts)
                var = sum((c - mean) ** 2 for c in counts) / len(counts)
                agg_rows.append(
                    [n, prefix, args.block, order_name, mean, var ** 0.5]
                )

    _write_csv(
        out / "mask_counts.csv",
        ["n", "prefix", "block", "order", "count_mean", "count_std"],
        agg_rows,
    )
    if args.per_seed:
        _write_csv(
            out / "mask_counts_per_seed.csv",
            ["n", "prefix", "block", "order", "count"],
            per_seed_rows,
        )
    print(f"wrote {out}/mask_counts.csv ({len(agg_rows)} rows)")
    return 0


# --------------------------------------------------------------------------
# hypothesis
# --------------------------------------------------------------------------


def cmd_hypothesis(args: argparse.Namespace) -> int:
    cfg = _load_config(args, {"seed": args.seed})
    out = _out_dir(args, cfg)
    events = []
    run = 0
    while len(events) < args.min_events and run < args.max_runs:
        models = cfg.models
        spec = ModelPairSpec(**{**models.to_dict(), "target_seed": derive_seed(models.target_seed, "hyp", run)})
        target, draft = make_model_pair(spec)
        prompt = make_prompt(target.with_temperature(1.0), cfg.generation.prefix_len, run)
        gen = GenConfig(
            prefix_len=cfg.generation.prefix_len,
            gen_len=cfg.generation.gen_len,
            budget=cfg.generation.budget or 64,
            target_temp=cfg.generation.target_temp,
            draft_temp=cfg.generation.draft_temp,
            seed=run,
        )
        _, metrics = generate(target, draft, prompt, gen, cfg.costs)
        events.extend(metrics.branch_events)
        run += 1
    if not events:
        print("hypothesis: no branch events collected", file=sys.stderr)
        return 2

    rows = acceptance_vs_draft_bins(events, args.bins)
    rho = bin_rank_correlation(rows)
    _write_csv(
        out / "acceptance_bins.csv",
        ["bin_lo", "bin_hi", "acc_rate", "count"],
        [[lo, hi, rate, count] for lo, hi, rate, count in rows],
    )
    _write_json(
        out / "hypothesis_stats.json",
        {"events": len(events), "runs": run, "bins": args.bins, "spearman": rho},
    )
    print(f"{len(events)} branch events over {run} runs; spearman={rho:.4f}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyspec",
        description=(
            "Dynamic token-tree speculative decoding simulator. "
            "Precedence: command-line flags > config file > defaults. "
            "Set DYSPEC_THREADS to cap sweep workers."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run-config path")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        p.add_argument("--out", help="output directory (default '.')")
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("generate", help="run one generation benchmark")
    common(p)
    p.add_argument("--budget", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--size-cap", dest="size_cap", type=int)
    p.add_argument("--structure", choices=("dynamic", "chain", "k_chains", "static_tree"))
    p.add_argument("--k", type=int)
    p.add_argument("--branching", help="comma-separated static-tree branching")
    p.add_argument("--gen-len", dest="gen_len", type=int)
    p.add_argument("--prefix-len", dest="prefix_len", type=int)
    p.add_argument("--target-temp", dest="target_temp", type=float)
    p.add_argument("--draft-temp", dest="draft_temp", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bench", help="sweep structures x budgets x temps")
    common(p)
    p.add_argument("--structures", default="dynamic,chain,k_chains,static_tree")
    p.add_argument("--budgets", default="64")
    p.add_argument("--thresholds", default="", help="dynamic-only threshold points")
    p.add_argument("--size-cap", dest="size_cap", type=int, default=768)
    p.add_argument("--temps", default="0.0,0.6")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--branching", default="4,2,2,2")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="run a ground-truth check suite")
    common(p)
    p.add_argument("--suite", required=True)
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--trials", type=int, default=20000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("mask", help="block-occupancy of tree-attention masks")
    common(p)
    p.add_argument("--sizes", default="256")
    p.add_argument("--prefixes", default="0")
    p.add_argument("--block", type=int, default=32)
    p.add_argument("--orders", default="original,dfs,hpd")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--generator", choices=("random", "chain", "constructed"),
                   default="random")
    p.add_argument("--per-seed", dest="per_seed", action="store_true")
    p.add_argument("--dump-grids", dest="dump_grids", action="store_true")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("hypothesis", help="acceptance rate vs draft probability")
    common(p)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--min-events", dest="min_events", type=int, default=20000)
    p.add_argument("--max-runs", dest="max_runs", type=int, default=2000)
    p.set_defaults(func=cmd_hypothesis)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
