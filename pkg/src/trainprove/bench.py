"""Desk-scale benchmark: simulated generators, suspect populations, verification sweep.

For every world seed the sweep builds K-class prototypes, a set of generators
and a real-data source, trains a grid of suspect classifiers on each source,
and verifies every suspect against every defender generator. A suspect is
truly Illegal for defender ``d`` when its training data came from ``d``
(alone, or mixed half-and-half with real data).

All randomness is derived from ``(world seed, source index, suspect index)``,
so results do not depend on the worker count or scheduling.

Output directory layout::

    cells.csv               one row per (seed, defender, source, suspect, variant)
    defender_<id>.csv       the same rows restricted to one defender
    summary.csv             per-(variant, defender) metrics plus AVERAGE rows
    manifest.json           full config, seeds, failed-cell count
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from trainprove import __version__
from trainprove.blackbox import InProcessEndpoint, Prediction, query_batches, serve
from trainprove.learner import (
    CrossEntropy,
    Focal,
    MlpClassifier,
    TrainConfig,
    dataset_accuracy,
    loss_from_dict,
    train,
)
from trainprove.metrics import CELL_COLUMNS, SUMMARY_COLUMNS, summarize_cells, write_csv
from trainprove.service.schemas import Mode
from trainprove.synth import (
    GeneratorSpec,
    LabeledDataset,
    PromptSpec,
    RealSourceSpec,
    make_generator,
    make_prompt,
    make_prototypes,
    make_real_source,
    mix_datasets,
    sample_real,
    sample_synthetic,
)
from trainprove.verifier import (
    ShadowReference,
    Variant,
    VerificationConfig,
    check_suspect,
    prepare_shadow,
    random_verify,
)

log = logging.getLogger(__name__)

REAL = "real"
RANDOM = "random"
MIXED_PREFIX = "mixed:"


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class WorldConfig:
    num_classes: int = 10
    dim: int = 16
    noise_scale: float = 0.7
    prompt_shift: float = 0.2
    gamma: float = 0.45
    bias_scale: float = 0.25
    prototype_radius: float = 4.0
    heavy_tail_mix: float = 0.1
    generators: list[str] = field(default_factory=lambda: ["gen-a", "gen-b", "gen-c", "gen-d"])
    include_real: bool = True


@dataclass
class GridConfig:
    hidden: list[int] = field(default_factory=lambda: [0, 32, 64, 128])
    batch_size: list[int] = field(default_factory=lambda: [64, 128])
    learning_rate: list[float] = field(default_factory=lambda: [0.4, 0.2])
    weight_decay: list[float] = field(default_factory=lambda: [1e-2, 1e-3])
    loss: list[str] = field(default_factory=lambda: ["ce", "focal"])
    epochs: int = 20
    n_per_class: int = 200

    def points(self, fast: bool) -> list[dict]:
        """Full grid: the product of all axes. Fast grid: hidden x loss x two
        paired (batch size, learning rate, weight decay) settings."""
        if fast:
            paired = list(zip(self.batch_size, self.learning_rate, self.weight_decay))
            combos = [
                (h, bs, lr, wd, loss)
                for h in self.hidden for loss in self.loss for (bs, lr, wd) in paired
            ]
        else:
            combos = list(itertools.product(
                self.hidden, self.batch_size, self.learning_rate, self.weight_decay, self.loss
            ))
        return [
            {"hidden": h, "batch_size": bs, "learning_rate": lr, "weight_decay": wd, "loss": loss}
            for h, bs, lr, wd, loss in combos
        ]


@dataclass
class BenchmarkConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    defenders: list[str] | None = None
    # restrict the sweep to these source names (None: every source)
    sources: list[str] | None = None
    include_mixed: bool = False
    fast: bool = True
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(default_factory=lambda: [v.value for v in Variant] + [RANDOM])
    transport: str = "in-process"
    workers: int | None = None

    def __post_init__(self):
        n_sources = len(self.world.generators) + int(self.world.include_real)
        if n_sources < 2:
            raise ValueError("a benchmark needs at least two data sources")
        if self.transport not in ("in-process", "served"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not self.grid.points(self.fast):
            raise ValueError("suspect grid is empty")
        unknown = set(self.defender_ids) - set(self.world.generators)
        if unknown:
            raise ValueError(f"defenders {sorted(unknown)} are not generators")
        if self.include_mixed and not self.world.include_real:
            raise ValueError("mixed sources need the real-data source")
        if self.sources is not None:
            known = set(self.world.generators) | {REAL} | {MIXED_PREFIX + d for d in self.defender_ids}
            bad = set(self.sources) - known
            if bad:
                raise ValueError(f"unknown sources {sorted(bad)}")
            if not self.sources:
                raise ValueError("source list is empty")

    @property
    def defender_ids(self) -> list[str]:
        return list(self.world.generators if self.defenders is None else self.defenders)

    def to_dict(self) -> dict:
        return {
            "world": asdict(self.world),
            "grid": asdict(self.grid),
            "verification": self.verification.to_dict(),
            "defenders": self.defenders,
            "sources": self.sources,
            "include_mixed": self.include_mixed,
            "fast": self.fast,
            "seeds": list(self.seeds),
            "variants": list(self.variants),
            "transport": self.transport,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "world" in d:
            d["world"] = WorldConfig(**d["world"])
        if "grid" in d:
            d["grid"] = GridConfig(**d["grid"])
        if "verification" in d:
            d["verification"] = VerificationConfig.from_dict(d["verification"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "BenchmarkConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@dataclass
class World:
    seed: int
    config: WorldConfig
    prototypes: np.ndarray
    generators: dict[str, GeneratorSpec]
    real: RealSourceSpec | None
    suspect_prompt: PromptSpec

    def source_names(self, defenders: Sequence[str] = (), include_mixed: bool = False) -> list[str]:
        names = list(self.generators)
        if self.real is not None:
            names.append(REAL)
        if include_mixed:
            names += [MIXED_PREFIX + d for d in defenders]
        return names


def build_world(cfg: WorldConfig, seed: int, verification: VerificationConfig | None = None) -> World:
    protos = make_prototypes(cfg.num_classes, cfg.dim, cfg.prototype_radius, derive_seed(seed, 1))
    gens = {
        gid: make_generator(
            gid, protos, derive_seed(seed, 2, i), cfg.gamma, cfg.noise_scale, cfg.bias_scale
        )
        for i, gid in enumerate(cfg.generators)
    }
    real = None
    if cfg.include_real:
        real = make_real_source(protos, derive_seed(seed, 3), cfg.noise_scale, cfg.heavy_tail_mix)
    prompt_seed = derive_seed(seed, 4)
    if verification is not None:
        reserved = {verification.shadow_prompt_seed, verification.validation_prompt_seed}
        while prompt_seed in reserved:
            prompt_seed += 1
    prompt = make_prompt("suspect", cfg.num_classes, cfg.dim, prompt_seed, cfg.prompt_shift)
    return World(seed, cfg, protos, gens, real, prompt)


def source_dataset(world: World, name: str, n_per_class: int) -> LabeledDataset:
    """Training data for the suspect population of one source."""
    if name == REAL:
        return sample_real(world.real, n_per_class, derive_seed(world.seed, 5, 0))
    if name.startswith(MIXED_PREFIX):
        gen = name[len(MIXED_PREFIX):]
        syn = source_dataset(world, gen, n_per_class)
        return mix_datasets(syn, source_dataset(world, REAL, n_per_class), derive_seed(world.seed, 6))
    gen = world.generators[name]
    index = list(world.generators).index(name)
    return sample_synthetic(gen, world.suspect_prompt, n_per_class, derive_seed(world.seed, 5, index + 1))


def _source_key(name: str) -> int:
    # Stable per-name integer; Python's str hash is salted per process.
    return zlib.crc32(name.encode("utf-8"))


def suspect_train_config(point: dict, grid: GridConfig, world_seed: int, source: str, index: int) -> tuple[int, TrainConfig]:
    seed = derive_seed(world_seed, 7, _source_key(source), index)
    loss = loss_from_dict(point["loss"])
    cfg = TrainConfig(
        epochs=grid.epochs,
        batch_size=point["batch_size"],
        learning_rate=point["learning_rate"],
        weight_decay=point["weight_decay"],
        loss=loss,
        shuffle_seed=seed,
    )
    return seed, cfg


def train_suspect(world: World, source: str, index: int, grid: GridConfig, fast: bool,
                  data: LabeledDataset | None = None) -> MlpClassifier:
    point = grid.points(fast)[index]
    if data is None:
        data = source_dataset(world, source, grid.n_per_class)
    seed, cfg = suspect_train_config(point, grid, world.seed, source, index)
    model = MlpClassifier.create(world.config.dim, world.config.num_classes, point["hidden"], seed=seed)
    trained, _ = train(model, data, cfg)
    return trained


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _truth(defender: str, source: str) -> str:
    if source == defender or source == MIXED_PREFIX + defender:
        return "illegal"
    return "legal"


def _collect(suspect, reference: ShadowReference, modes, served: bool):
    """Predictions for every mode needed, through the configured transport."""
    out = {}
    if served:
        with serve(suspect) as handle:
            for mode in modes:
                out[mode] = query_batches(
                    handle.endpoint(), reference.validation, reference.config.inference_batch_size, mode
                )
    else:
        endpoint = InProcessEndpoint(suspect)
        for mode in modes:
            out[mode] = query_batches(endpoint, reference.validation, reference.config.inference_batch_size, mode)
    return out


def run_world(config: BenchmarkConfig, seed: int) -> list[dict]:
    """Every cell for one world seed. Failures are recorded, never raised."""
    with threadpool_limits(limits=1):
        return _run_world(config, seed)


def _run_world(config: BenchmarkConfig, seed: int) -> list[dict]:
    world = build_world(config.world, seed, config.verification)
    defenders = config.defender_ids
    points = config.grid.points(config.fast)
    variants = [v for v in config.variants if v != RANDOM]
    modes = sorted({replace(config.verification, variant=Variant(v)).mode for v in variants}, key=lambda m: m.value)

    rows: list[dict] = []
    references: dict[str, ShadowReference | Exception] = {}
    for d in defenders:
        try:
            references[d] = prepare_shadow(world.generators[d], config.verification, derive_seed(seed, 8))
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            references[d] = exc

    names = world.source_names(defenders, config.include_mixed or config.sources is not None)
    if config.sources is not None:
        names = [n for n in names if n in config.sources]
    for source in names:
        targets = defenders
        if source.startswith(MIXED_PREFIX):
            targets = [source[len(MIXED_PREFIX):]]
        try:
            data = source_dataset(world, source, config.grid.n_per_class)
        except Exception as exc:  # noqa: BLE001
            data = exc
        for index in range(len(points)):
            suspect = None
            if not isinstance(data, Exception):
                try:
                    suspect = train_suspect(world, source, index, config.grid, config.fast, data)
                    train_error = None
                except Exception as exc:  # noqa: BLE001
                    train_error = exc
            else:
                train_error = data
            for d in targets:
                base = {"seed": seed, "defender": d, "source": source, "suspect_index": index,
                        "truth": _truth(d, source)}
                ref = references[d]
                err = train_error if train_error is not None else (ref if isinstance(ref, Exception) else None)
                if err is None:
                    try:
                        responses = _collect(suspect, ref, modes, config.transport == "served")
                    except Exception as exc:  # noqa: BLE001
                        err = exc
                for v in config.variants:
                    rows.append(_cell(base, v, ref, suspect, responses if err is None else None, err, config))
    return rows


def _cell(base: dict, variant: str, ref, suspect, responses, err, config: BenchmarkConfig) -> dict:
    row = dict(base, variant=variant)
    if variant == RANDOM:
        verdict = random_verify(derive_seed(base["seed"], 9, _source_key(base["source"]),
                                            _source_key(base["defender"]), base["suspect_index"]))
        row.update(verdict=verdict.value, g="", g0="", score=1.0 if verdict.value == "illegal" else 0.0,
                   suspect_mean="", shadow_mean="", status="ok")
    elif err is not None:
        row.update(verdict="", g="", g0="", score="", suspect_mean="", shadow_mean="",
                   status=f"failed: {type(err).__name__}: {err}".replace("\n", " ")[:300])
    else:
        v = Variant(variant)
        mode = replace(config.verification, variant=v).mode
        try:
            report = check_suspect(ref, suspect, v, responses=responses[mode])
        except Exception as exc:  # noqa: BLE001
            row.update(verdict="", g="", g0="", score="", suspect_mean="", shadow_mean="",
                       status=f"failed: {type(exc).__name__}: {exc}"[:300])
            return _finish(row)
        row.update(
            verdict=report.verdict.value, g=report.grubbs.g, g0=report.grubbs.g0,
            score=report.illegality_score, suspect_mean=report.suspect_mean,
            shadow_mean=report.shadow_series.mean(), status="ok",
        )
    return _finish(row)


def _finish(row: dict) -> dict:
    row["correct"] = (row["verdict"] == row["truth"]) if row["status"] == "ok" else ""
    return row


CSV_COLUMNS = ["seed"] + CELL_COLUMNS


@dataclass
class BenchmarkResult:
    cells: list[dict]
    summary: list[dict]
    failed: int
    out_dir: Path | None = None

    def summary_row(self, variant: str, defender: str = "AVERAGE") -> dict:
        for r in self.summary:
            if r["variant"] == variant and r["defender"] == defender:
                return r
        raise KeyError((variant, defender))


def _sort_key(row: dict):
    return (row["seed"], row["defender"], row["source"], row["suspect_index"], row["variant"])


def run_benchmark(config: BenchmarkConfig, out_dir=None) -> BenchmarkResult:
    """Run the sweep; write reports to ``out_dir`` when given."""
    workers = config.workers or os.cpu_count() or 1
    workers = max(1, min(workers, len(config.seeds)))
    if workers == 1:
        per_seed = [run_world(config, s) for s in config.seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(run_world, [config] * len(config.seeds), config.seeds))
    cells = sorted((r for rows in per_seed for r in rows), key=_sort_key)
    failed = sum(1 for r in cells if r["status"] != "ok")
    summary = summarize_cells(cells)
    result = BenchmarkResult(cells, summary, failed)
    if out_dir is not None:
        result.out_dir = write_outputs(config, result, out_dir)
    return result


def write_outputs(config: BenchmarkConfig, result: BenchmarkResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cells.csv").write_text(write_csv(result.cells, CSV_COLUMNS), encoding="utf-8")
    for d in config.defender_ids:
        rows = [r for r in result.cells if r["defender"] == d]
        (out / f"defender_{d}.csv").write_text(write_csv(rows, CSV_COLUMNS), encoding="utf-8")
    (out / "summary.csv").write_text(write_csv(result.summary, SUMMARY_COLUMNS), encoding="utf-8")
    manifest = {
        "package_version": __version__,
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "suspects_per_source": len(config.grid.points(config.fast)),
        "cell_count": len(result.cells),
        "failed_cells": result.failed,
        "truth": sorted({(r["defender"], r["source"], r["truth"]) for r in result.cells}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# generalization-gap study
# ---------------------------------------------------------------------------


@dataclass
class GapStudy:
    same_generator: list[float]
    cross_generator: list[float]
    real: list[float]

    def means(self) -> dict:
        return {
            "same_generator": float(np.mean(self.same_generator)),
            "cross_generator": float(np.mean(self.cross_generator)),
            "real": float(np.mean(self.real)),
        }


def generalization_gap_study(config: BenchmarkConfig, seeds: Sequence[int]) -> GapStudy:
    """|accuracy(M) - accuracy(M_hat)| on target data from G under a third prompt.

    M trains on G under prompt T1 (the shadow prompt); M_hat trains on G under
    T2, on another generator G' under T2, or on real data.
    """
    out = GapStudy([], [], [])
    vcfg = config.verification
    grid = config.grid
    point = grid.points(config.fast)[0]
    with threadpool_limits(limits=1):
        for seed in seeds:
            world = build_world(config.world, seed, vcfg)
            names = list(world.generators)
            g, g_other = world.generators[names[0]], world.generators[names[1]]
            ref = prepare_shadow(g, vcfg, derive_seed(seed, 8))
            target = ref.validation

            def fit(data, tag):
                s, cfg = suspect_train_config(point, grid, seed, tag, 0)
                model = MlpClassifier.create(config.world.dim, config.world.num_classes, point["hidden"], seed=s)
                return train(model, data, cfg)[0]

            base = dataset_accuracy(ref.shadow, target)
            t2 = world.suspect_prompt
            same = sample_synthetic(g, t2, grid.n_per_class, derive_seed(seed, 10))
            cross = sample_synthetic(g_other, t2, grid.n_per_class, derive_seed(seed, 11))
            real = sample_real(world.real, grid.n_per_class, derive_seed(seed, 12))
            out.same_generator.append(abs(base - dataset_accuracy(fit(same, "same"), target)))
            out.cross_generator.append(abs(base - dataset_accuracy(fit(cross, "cross"), target)))
            out.real.append(abs(base - dataset_accuracy(fit(real, "real"), target)))
    return out
