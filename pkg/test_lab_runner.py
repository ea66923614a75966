import logging

import numpy as np
import pandas as pd
import pytest

import lab_runner
from campaign_tool import CampaignRecord, CampaignStatus
from config import GenSurfacesConfig, OptimizeConfig, RegressConfig, ReportConfig
from dataset_tool import DatasetError, DescriptorDataset
from surface_tool import SurfacePair

TINY_GEMINI = {"hidden_latent": 8, "depth_latent": 1, "max_epochs": 3, "patience": 3, "learning_rate": 0.01,
               "min_steps_per_epoch": 2}


def test_gen_surfaces_writes_pairs_and_manifest(tmp_path):
    config = GenSurfacesConfig(domain={"points_per_axis": 30}, n_exp_surfaces=1, max_attempts=100, seed=4)
    manifest = lab_runner.gen_surfaces(config, tmp_path / "a")
    assert (tmp_path / "a" / "manifest.csv").exists()
    assert len(list((tmp_path / "a").glob("pair_*.csv"))) == len(manifest)
    first = SurfacePair.read((tmp_path / "a" / manifest.loc[0, "file"]).with_suffix(""))
    assert first.meta["seed"] == 4
    lab_runner.gen_surfaces(config, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_regress_on_trig_fixture(tmp_path):
    config = RegressConfig(source={"kind": "trig", "name": "linear"}, exp_sizes=[3, 5], n_splits=2,
                           gemini=TINY_GEMINI, seed=0)
    summary = lab_runner.regress(config, tmp_path)
    assert len(summary) == 2 * 4
    assert set(summary["model"]) == {"gemini", "nn_exp", "nn_cheap", "nn_both"}
    assert set(summary["n_cheap"]) == {75}
    assert {"rmsd_q1", "rmsd_median", "rmsd_q3", "r2_median", "pearson_q3"} <= set(summary.columns)
    per_split = pd.read_csv(tmp_path / "regress_splits.csv")
    assert len(per_split) == 2 * 2 * 4


def test_regress_caps_cheap_count(tmp_path, caplog):
    config = RegressConfig(source={"kind": "trig", "name": "constant"}, exp_sizes=[2], n_cheap=500, n_splits=1,
                           models=["nn_cheap"], gemini=TINY_GEMINI)
    with caplog.at_level(logging.WARNING):
        summary = lab_runner.regress(config, tmp_path)
    assert summary.loc[0, "n_cheap"] == 100
    assert "capping" in caplog.text


def test_regress_on_analytic_source(tmp_path):
    config = RegressConfig(source={"kind": "analytic", "name": "dejong", "cheap_name": "hyperellipsoid",
                                   "dim": 3, "n_points": 60},
                           exp_sizes=[4], n_splits=2, models=["gemini"], gemini=TINY_GEMINI)
    summary = lab_runner.regress(config, tmp_path)
    assert summary.loc[0, "n_cheap"] == 45


def _descriptor_file(path, n=30, width=3):
    rng = np.random.default_rng(0)
    y_exp = rng.normal(size=n)
    y_exp[12:] = np.nan
    DescriptorDataset([f"r{i}" for i in range(n)], rng.normal(size=(n, width)), rng.normal(size=n), y_exp).write_csv(path)


def test_regress_on_descriptor_csv(tmp_path):
    path = tmp_path / "descriptors.csv"
    _descriptor_file(path)
    config = RegressConfig(source={"kind": "csv", "path": str(path), "expected_width": 3},
                           exp_sizes=[4], cheap_ratio=2.0, n_splits=2, models=["nn_exp", "nn_both"], gemini=TINY_GEMINI)
    summary = lab_runner.regress(config, tmp_path / "out")
    assert list(summary["model"]) == ["nn_exp", "nn_both"]
    assert summary.loc[0, "n_cheap"] == 8


def test_regress_without_validation_rows(tmp_path):
    path = tmp_path / "descriptors.csv"
    _descriptor_file(path)
    config = RegressConfig(source={"kind": "csv", "path": str(path)}, exp_sizes=[12], n_splits=1,
                           models=["nn_exp"], gemini=TINY_GEMINI)
    with pytest.raises(DatasetError):
        lab_runner.regress(config, tmp_path / "out")


def _suite():
    return OptimizeConfig(
        campaigns=[
            {"strategy": "random", "target_percentile": 20.0, "max_expensive": 6, "seed": 0},
            {"strategy": "bo_only", "target_percentile": 20.0, "max_expensive": 6, "seed": 0,
             "planner": {"n_samples": 64, "n_refine": 5}},
        ],
        expensive={"kind": "analytic", "name": "dejong", "dim": 2},
        n_repeats=2,
    )


def test_optimize_then_report(tmp_path):
    runs = tmp_path / "runs"
    summary = lab_runner.optimize(_suite(), runs)
    assert list(summary["strategy"]) == ["random", "bo_only"]
    names = sorted(p.name for p in runs.glob("*.jsonl"))
    assert names == ["bo_only_seed0.jsonl", "bo_only_seed1.jsonl", "random_seed0.jsonl", "random_seed1.jsonl"]
    assert (runs / "suite_summary.csv").exists() and (runs / "suite_boxplot.csv").exists()

    report = lab_runner.report(runs, ReportConfig(extra_quantiles=[]))
    assert list(report["strategy"]) == ["random", "bo_only"]
    first = (runs / "report_summary.csv").read_bytes()
    lab_runner.report(runs, ReportConfig(extra_quantiles=[]))
    assert (runs / "report_summary.csv").read_bytes() == first
    assert (runs / "report_boxplot.csv").exists()


def test_optimize_bo_gemini_suite(tmp_path):
    config = OptimizeConfig(
        campaigns=[{"strategy": "bo_gemini", "r": 2, "target": -1.0, "max_expensive": 3, "seed": 0,
                    "planner": {"n_samples": 64, "n_refine": 5}, "gemini": TINY_GEMINI}],
        expensive={"kind": "analytic", "name": "dejong", "dim": 2},
        cheap={"kind": "analytic", "name": "hyperellipsoid", "dim": 2},
        n_repeats=2,
    )
    runs = tmp_path / "runs"
    summary = lab_runner.optimize(config, runs)
    assert list(summary["strategy"]) == ["bo_gemini"]
    assert list(summary["median"]) == [3.0]
    names = sorted(p.name for p in runs.glob("*.jsonl"))
    assert names == ["bo_gemini_r2_seed0.jsonl", "bo_gemini_r2_seed1.jsonl"]
    for name in names:
        record = CampaignRecord.read_jsonl(runs / name)
        assert record.status is CampaignStatus.BUDGET_EXHAUSTED
        assert (record.n_expensive, record.n_cheap) == (3, 6)
        assert record.entries[-1].rho is not None
