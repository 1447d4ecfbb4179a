"""Command-line entry point for experiment grids, the scaling probe, and
class-count estimation.

Exit codes: 0 success, 1 configuration error, 2 partial run failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CapabilityError, ContractViolation, DatasetFormatError
from .experiment import (ExperimentPlan, estimate_class_count, load_dataset,
                         make_class_folds, parse_config, run_experiment,
                         scaling_probe)
from .graphdata import feasible_fold_count, open_world_split


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pown",
        description="Open-world node classification experiments")
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--dataset",
                        help="dataset directory or sbm:<n>,<classes>,<p_in>,<p_out>")
    parser.add_argument("--method", action="append", default=None,
                        help="pown|gcn|dgi-kmeans|spectral (repeatable or comma list)")
    parser.add_argument("--folds", help="comma list of test-fold indices")
    parser.add_argument("--repeats", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--estimate-classes", action="store_true",
                        help="estimate the class count instead of training")
    parser.add_argument("--scaling-probe", action="store_true",
                        help="report per-epoch time at 1k/2k/4k synthetic nodes")
    parser.add_argument("--entropy-keep-mode",
                        choices=["drop_top_decile", "keep_bottom_decile"])
    parser.add_argument("--k-max", type=int, default=10,
                        help="upper bound for --estimate-classes")
    return parser


def _apply_overrides(config, plan, args):
    if args.method:
        methods = []
        for entry in args.method:
            methods.extend(m for m in entry.split(",") if m)
        plan = replace(plan, methods=tuple(methods))
    if args.folds:
        plan = replace(plan,
                       folds=tuple(int(x) for x in args.folds.split(",")))
    if args.repeats is not None:
        plan = replace(plan, repeats=args.repeats)
    if args.seed is not None:
        plan = replace(plan, base_seed=args.seed)
    if args.out:
        plan = replace(plan, out_dir=args.out)
    if args.entropy_keep_mode:
        config = replace(config, entropy_keep_mode=args.entropy_keep_mode)
    return config, plan


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config, plan = parse_config(args.config, dataset_override=args.dataset) \
            if (args.config or args.dataset) else (None, None)
        if config is None:
            raise ContractViolation("missing required `dataset`")
        config, plan = _apply_overrides(config, plan, args)
        plan.validate()
        config.validate()
    except (ContractViolation, DatasetFormatError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1

    if args.scaling_probe:
        timings, ratios = scaling_probe(config, plan.base_seed)
        out_dir = Path(plan.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "scaling.csv", "w") as handle:
            handle.write("n,epoch_seconds\n")
            for n, seconds in timings.items():
                handle.write(f"{n},{seconds!r}\n")
        for n, seconds in timings.items():
            print(f"n={n}: {seconds:.4f}s per epoch")
        print("growth ratios:", ", ".join(f"{r:.2f}" for r in ratios))
        return 0

    if args.estimate_classes:
        try:
            graph, masks = load_dataset(plan.dataset, plan)
            fold_count = feasible_fold_count(graph.num_classes, plan.ratio)
            fold_plan = make_class_folds(graph.num_classes, plan.ratio,
                                         plan.base_seed, num_folds=fold_count)
            folds = plan.folds if plan.folds is not None else (0,)
            for fold in folds:
                split = open_world_split(graph, masks, fold_plan, fold,
                                         (fold + 1) % fold_count)
                estimate = estimate_class_count(
                    graph, masks, split.known_classes, config,
                    plan.base_seed, args.k_max)
                print(f"fold {fold}: estimated classes in the unlabeled set = "
                      f"{estimate}")
        except (ContractViolation, DatasetFormatError, CapabilityError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 1
        return 0

    try:
        code, _ = run_experiment(plan, config)
    except (ContractViolation, DatasetFormatError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
