"""Command-line front end.

    trainprove [--seed N] [--config FILE] [--out DIR] [--fast | --full] COMMAND ...

Commands:

    generate    write source / shadow / validation datasets as CSV
    train       train a benchmark suspect or a defender shadow model, write a checkpoint
    serve       host a checkpoint at POST /predict until interrupted
    verify      query one suspect endpoint and write a verification report
    benchmark   run the full sweep and write CSV reports plus a manifest
    report      recompute summary.csv from a benchmark's cells.csv

``--config`` takes a JSON benchmark config (see ``BenchmarkConfig.to_dict``).
``generate``, ``train`` and ``verify`` rebuild the same simulated world as the
benchmark for ``--seed``, so a hand-run pipeline reproduces one benchmark cell.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
from dataclasses import replace
from pathlib import Path

from trainprove.bench import (
    BenchmarkConfig,
    build_world,
    derive_seed,
    run_benchmark,
    source_dataset,
    suspect_train_config,
)
from trainprove.blackbox import Endpoint, serve
from trainprove.errors import TrainProveError
from trainprove.learner import (
    MlpClassifier,
    load_checkpoint,
    save_checkpoint,
    train,
)
from trainprove.metrics import SUMMARY_COLUMNS, read_csv, summarize_cells, write_csv
from trainprove.synth import load_dataset, sample_synthetic, save_dataset
from trainprove.verifier import Variant, check_suspect, prepare_shadow

log = logging.getLogger("trainprove")


def _load_config(args) -> BenchmarkConfig:
    cfg = BenchmarkConfig.load(args.config) if args.config else BenchmarkConfig()
    if args.fast is not None:
        cfg = replace(cfg, fast=args.fast)
    return cfg


def _out(args, default: str = ".") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _shadow_seed(seed: int) -> int:
    # same derivation the benchmark uses per world
    return derive_seed(seed, 8)


def _defender_gen(world, defender: str):
    try:
        return world.generators[defender]
    except KeyError:
        raise SystemExit(f"unknown defender {defender!r}; have {sorted(world.generators)}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    world = build_world(cfg.world, args.seed, cfg.verification)
    out = _out(args)
    npc = args.n_per_class or cfg.grid.n_per_class
    names = args.source or world.source_names(cfg.defender_ids, include_mixed=cfg.include_mixed)
    for name in names:
        data = source_dataset(world, name, npc)
        path = out / f"{name.replace(':', '_')}.csv"
        save_dataset(data, path)
        print(f"{name}: {len(data)} rows -> {path}")
    for defender in args.shadow or []:
        gen = _defender_gen(world, defender)
        vcfg = cfg.verification
        shadow_prompt, val_prompt = vcfg.prompts(gen)
        seed = _shadow_seed(args.seed)
        for role, prompt, n in (("shadow", shadow_prompt, vcfg.shadow_n_per_class),
                                ("validation", val_prompt, vcfg.val_n_per_class)):
            path = out / f"{role}_{defender}.csv"
            save_dataset(sample_synthetic(gen, prompt, n, seed), path)
            print(f"{role}:{defender} -> {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    world = build_world(cfg.world, args.seed, cfg.verification)
    out = _out(args)
    if args.shadow:
        ref = prepare_shadow(_defender_gen(world, args.shadow), cfg.verification, _shadow_seed(args.seed))
        model, path = ref.shadow, out / f"shadow_{args.shadow}.ckpt"
    else:
        if args.source is None or args.grid_index is None:
            raise SystemExit("train needs --shadow DEFENDER or --source NAME --grid-index I")
        points = cfg.grid.points(cfg.fast)
        if not 0 <= args.grid_index < len(points):
            raise SystemExit(f"--grid-index must be in [0, {len(points)})")
        point = dict(points[args.grid_index])
        for key in ("hidden", "batch_size", "learning_rate", "weight_decay", "loss"):
            if getattr(args, key) is not None:
                point[key] = getattr(args, key)
        data = load_dataset(args.data) if args.data else source_dataset(world, args.source, cfg.grid.n_per_class)
        seed, tcfg = suspect_train_config(point, cfg.grid, args.seed, args.source, args.grid_index)
        if args.epochs is not None:
            tcfg = replace(tcfg, epochs=args.epochs)
        model = MlpClassifier.create(data.dim, data.num_classes, point["hidden"], seed=seed)
        model, history = train(model, data, tcfg)
        log.info("final train accuracy %.4f", history.final_train_accuracy)
        path = out / f"suspect_{args.source.replace(':', '_')}_{args.grid_index}.ckpt"
    if args.output:
        path = Path(args.output)
    save_checkpoint(model, path)
    print(path)
    return 0


def cmd_serve(args) -> int:
    model = load_checkpoint(args.checkpoint)
    handle = serve(model, args.address)
    print(f"serving on {handle.address}", flush=True)

    def stop(*_):
        handle.shutdown()

    signal.signal(signal.SIGTERM, stop)
    try:
        handle.wait()
    except KeyboardInterrupt:
        handle.shutdown()
    return 0


def cmd_verify(args) -> int:
    cfg = _load_config(args)
    world = build_world(cfg.world, args.seed, cfg.verification)
    vcfg = replace(cfg.verification, variant=Variant(args.variant))
    ref = prepare_shadow(_defender_gen(world, args.defender), vcfg, _shadow_seed(args.seed))
    report = check_suspect(ref, Endpoint(args.endpoint, args.timeout))
    path = Path(args.output) if args.output else _out(args) / "report.json"
    report.save(path)
    print(f"{report.verdict.value} G={report.grubbs.g!r} G0={report.grubbs.g0!r} -> {path}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _load_config(args)
    changes = {}
    if args.seeds:
        changes["seeds"] = args.seeds
    elif args.seed_given:
        changes["seeds"] = [args.seed]
    if args.mixed:
        changes["include_mixed"] = True
    if args.transport:
        changes["transport"] = args.transport
    if args.workers is not None:
        changes["workers"] = args.workers
    cfg = replace(cfg, **changes) if changes else cfg
    result = run_benchmark(cfg, _out(args, "benchmark-out"))
    for row in result.summary:
        if row["defender"] == "AVERAGE":
            print(f"{row['variant']:<11} accuracy={row['accuracy']:.4f} f1={row['f1']:.4f} auroc={row['auroc']:.4f}")
    print(f"{len(result.cells)} cells, {result.failed} failed -> {result.out_dir}")
    return min(result.failed, 255)


def cmd_report(args) -> int:
    out = Path(args.out or "benchmark-out")
    cells = read_csv((out / "cells.csv").read_text(encoding="utf-8"))
    text = write_csv(summarize_cells(cells), SUMMARY_COLUMNS)
    target = Path(args.output) if args.output else out / "summary.csv"
    previous = target.read_text(encoding="utf-8") if target.exists() else None
    target.write_text(text, encoding="utf-8")
    if previous is not None:
        print("summary unchanged" if previous == text else "summary differs from previous file")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        namespace.seed = values
        namespace.seed_given = True


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trainprove", description="Training-data provenance verification, desk scale.")
    p.add_argument("--seed", type=int, default=0, action=_SeedAction, help="world seed (default 0)")
    p.add_argument("--config", help="JSON benchmark config file")
    p.add_argument("--out", help="output directory")
    speed = p.add_mutually_exclusive_group()
    speed.add_argument("--fast", dest="fast", action="store_const", const=True, help="16-suspect grid (default)")
    speed.add_argument("--full", dest="fast", action="store_const", const=False, help="64-suspect grid")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fast=None, seed_given=False)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write datasets as CSV")
    g.add_argument("--source", action="append", help="source name (repeatable; default: all)")
    g.add_argument("--shadow", action="append", metavar="DEFENDER", help="also write shadow/validation sets")
    g.add_argument("--n-per-class", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a suspect or shadow model")
    t.add_argument("--shadow", metavar="DEFENDER", help="train the defender's shadow model")
    t.add_argument("--source", help="suspect data source, e.g. gen-a, real, mixed:gen-a")
    t.add_argument("--grid-index", type=int, help="suspect index in the grid")
    t.add_argument("--data", help="train on this CSV instead of regenerating the source")
    t.add_argument("--hidden", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--loss", choices=["ce", "focal"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--output", help="checkpoint path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("serve", help="host a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--address", default="127.0.0.1:8000", help="host:port (port 0 picks a free one)")
    s.set_defaults(func=cmd_serve)

    v = sub.add_parser("verify", help="verify one suspect endpoint")
    v.add_argument("--endpoint", required=True, help="host:port of the suspect")
    v.add_argument("--defender", required=True)
    v.add_argument("--variant", default="accuracy", choices=[x.value for x in Variant])
    v.add_argument("--timeout", type=float, default=10.0)
    v.add_argument("--output", help="report JSON path")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("benchmark", help="run the verification sweep")
    b.add_argument("--seeds", type=int, nargs="+", help="world seeds (overrides --seed)")
    b.add_argument("--mixed", action="store_true", help="add mixed synthetic+real sources")
    b.add_argument("--transport", choices=["in-process", "served"])
    b.add_argument("--workers", type=int)
    b.set_defaults(func=cmd_benchmark)

    r = sub.add_parser("report", help="recompute summary.csv from cells.csv in --out")
    r.add_argument("--output", help="write the summary here instead of --out/summary.csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainProveError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
