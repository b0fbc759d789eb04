import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from trainprove import bench
from trainprove.bench import (
    CSV_COLUMNS,
    BenchmarkConfig,
    GridConfig,
    generalization_gap_study,
    run_benchmark,
)
from trainprove.metrics import SUMMARY_COLUMNS


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    from conftest import tiny_config

    out = tmp_path_factory.mktemp("bench")
    return tiny_config(), run_benchmark(tiny_config(), out)


def test_grid_sizes():
    g = GridConfig()
    assert len(g.points(fast=True)) == 16
    assert len(g.points(fast=False)) == 64
    assert {p["hidden"] for p in g.points(True)} == {0, 32, 64, 128}


def test_config_validation(tiny):
    with pytest.raises(ValueError):
        tiny(world=replace(tiny().world, generators=["gen-a"], include_real=False))
    with pytest.raises(ValueError):
        tiny(defenders=["gen-z"])
    with pytest.raises(ValueError):
        tiny(sources=["nowhere"])
    with pytest.raises(ValueError):
        tiny(transport="carrier-pigeon")


def test_config_file_round_trip(tmp_path, tiny):
    cfg = tiny(include_mixed=True, sources=["gen-a", "mixed:gen-b"])
    cfg.save(tmp_path / "c.json")
    assert BenchmarkConfig.load(tmp_path / "c.json") == cfg


def test_outputs_and_schema(tiny_run):
    cfg, result = tiny_run
    out = result.out_dir
    names = sorted(p.name for p in out.iterdir())
    assert names == ["cells.csv", "defender_gen-a.csv", "defender_gen-b.csv", "manifest.json", "summary.csv"]
    cells = read_rows(out / "cells.csv")
    assert list(cells[0]) == CSV_COLUMNS
    assert list(read_rows(out / "summary.csv")[0]) == SUMMARY_COLUMNS
    # 2 seeds x 3 sources x 8 suspects x 2 defenders x 4 variants
    assert len(cells) == 2 * 3 * 8 * 2 * 4 == len(result.cells)
    assert result.failed == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"] == cfg.to_dict()
    assert manifest["suspects_per_source"] == 8
    truth = {(d, s): t for d, s, t in manifest["truth"]}
    assert truth[("gen-a", "gen-a")] == "illegal" and truth[("gen-a", "gen-b")] == "legal"
    assert truth[("gen-b", "real")] == "legal"
    for row in cells:
        assert row["truth"] == ("illegal" if row["source"] == row["defender"] else "legal")


def test_average_rows_recomputed_from_blocks(tiny_run):
    _, result = tiny_run
    rows = read_rows(result.out_dir / "summary.csv")
    for variant in {r["variant"] for r in rows}:
        blocks = [r for r in rows if r["variant"] == variant and r["defender"] != "AVERAGE"]
        avg = next(r for r in rows if r["variant"] == variant and r["defender"] == "AVERAGE")
        for key in ("accuracy", "f1", "auroc"):
            vals = [float(b[key]) for b in blocks]
            expected = sum(vals) / len(vals)
            if np.isnan(expected):
                assert np.isnan(float(avg[key]))
            else:
                assert abs(float(avg[key]) - expected) <= 1e-12
        # block accuracy from its own counts
        for b in blocks:
            tp, fp, fn, tn = (int(b[k]) for k in ("tp", "fp", "fn", "tn"))
            assert abs(float(b["accuracy"]) - (tp + tn) / (tp + fp + fn + tn)) <= 1e-12


def test_per_defender_files_partition_cells(tiny_run):
    _, result = tiny_run
    all_rows = read_rows(result.out_dir / "cells.csv")
    parts = read_rows(result.out_dir / "defender_gen-a.csv") + read_rows(result.out_dir / "defender_gen-b.csv")
    assert sorted(map(tuple, (r.values() for r in parts))) == sorted(map(tuple, (r.values() for r in all_rows)))


def test_repeat_runs_identical(tmp_path, tiny_run):
    from conftest import tiny_config

    _, first = tiny_run
    again = run_benchmark(tiny_config(), tmp_path)
    for name in ("cells.csv", "summary.csv", "defender_gen-a.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (first.out_dir / name).read_bytes()


def test_worker_count_does_not_change_results(tmp_path, tiny_run):
    from conftest import tiny_config

    _, first = tiny_run
    run_benchmark(tiny_config(workers=2), tmp_path)
    assert (tmp_path / "cells.csv").read_bytes() == (first.out_dir / "cells.csv").read_bytes()


def test_failures_are_recorded_per_cell(tmp_path, tiny, monkeypatch):
    real_train = bench.train_suspect

    def flaky(world, source, index, *a, **k):
        if source == "gen-b" and index == 3:
            raise RuntimeError("disk full")
        return real_train(world, source, index, *a, **k)

    monkeypatch.setattr(bench, "train_suspect", flaky)
    result = run_benchmark(tiny(seeds=[0], sources=["gen-a", "gen-b"]), tmp_path)
    failed = [r for r in result.cells if r["status"] != "ok"]
    # the random baseline never queries the suspect, so it cannot fail
    assert len(failed) == result.failed == 2 * 3
    assert all("disk full" in r["status"] and r["correct"] == "" for r in failed)
    assert json.loads((tmp_path / "manifest.json").read_text())["failed_cells"] == 6


def test_mixed_source_rows(tiny):
    result = run_benchmark(tiny(seeds=[0], include_mixed=True, sources=["mixed:gen-a"], variants=["accuracy"]))
    assert {r["defender"] for r in result.cells} == {"gen-a"}
    assert all(r["truth"] == "illegal" for r in result.cells)
    assert len(result.cells) == 8


def test_served_transport_matches_in_process(tiny):
    cfg = tiny(seeds=[0], sources=["gen-a", "real"], defenders=["gen-a"])
    local = run_benchmark(cfg)
    remote = run_benchmark(replace(cfg, transport="served"))
    assert local.cells == remote.cells


def test_gap_study_shape(tiny):
    study = generalization_gap_study(tiny(), seeds=[0, 1])
    assert len(study.same_generator) == len(study.cross_generator) == len(study.real) == 2
    assert all(v >= 0 for v in study.same_generator + study.cross_generator + study.real)
    assert set(study.means()) == {"same_generator", "cross_generator", "real"}
