"""
Long-running comparisons of Gemini against the baselines.

Run with GEMINI_LAB_SLOW=1 python -m pytest -m slow
"""

import os

import numpy as np
import pytest

import lab_runner
from campaign_tool import CampaignConfig, analytic_evaluator, run_suite
from config import RegressConfig
from dataset_tool import FidelityTag
from gemini_model import BaselineVariant, GeminiHyperparams, GeminiModel, baseline_train
from stats_tool import r_squared
from surface_tool import DomainSpec, bin_index, generate_binned_pool, make_folds

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.getenv("GEMINI_LAB_SLOW") != "1", reason="set GEMINI_LAB_SLOW=1 to run"),
]


@pytest.mark.parametrize("kind", ["constant", "linear", "nonlinear"])
def test_gemini_beats_expensive_only_on_trig_pairs(kind, tmp_path):
    config = RegressConfig(source={"kind": "trig", "name": kind}, exp_sizes=[10], n_cheap=75, n_splits=10,
                           models=["gemini", "nn_exp"], seed=0)
    summary = lab_runner.regress(config, tmp_path).set_index("model")
    assert summary.loc["gemini", "r2_median"] > summary.loc["nn_exp", "r2_median"]
    if kind != "nonlinear":
        assert summary.loc["gemini", "pearson_median"] >= 0.9


def test_advantage_grows_with_correlation():
    hyper = GeminiHyperparams(max_epochs=5000)
    pool = generate_binned_pool(DomainSpec(points_per_axis=100), n_exp_surfaces=10, seed=0)
    strong, weak = bin_index(0.9), {bin_index(-0.1), bin_index(0.1)}
    gaps = {"strong": [], "weak": []}
    for i, (b, _, pair) in enumerate(pool.pairs):
        if b != strong and b not in weak:
            continue
        fold = make_folds(len(pair), 75, 5, n_folds=1, seed=i)[0]
        train = fold.to_dataset(pair)
        X_val, y_val = fold.validation(pair)
        gemini = GeminiModel(1, hyper, seed=i)
        gemini.train(train)
        baseline = baseline_train(BaselineVariant.NN_EXP, train, hyper, seed=i)
        gap = r_squared(y_val, gemini.predict_mean(X_val)) - r_squared(y_val, baseline.predict_mean(X_val))
        gaps["strong" if b == strong else "weak"].append(gap)
    assert len(gaps["strong"]) >= 10 and len(gaps["weak"]) >= 10
    assert np.mean(gaps["strong"]) > np.mean(gaps["weak"])


def test_closed_loop_ordering_on_dejong():
    def evaluators():
        return (analytic_evaluator("dejong", 2, FidelityTag.EXPENSIVE),
                analytic_evaluator("hyperellipsoid", 2, FidelityTag.CHEAP))

    common = {"target_percentile": 1.0, "max_expensive": 150, "seed": 0}
    configs = [
        CampaignConfig(strategy="random", **common),
        CampaignConfig(strategy="bo_only", **common),
        CampaignConfig(strategy="bo_gemini", r=2, **common),
        CampaignConfig(strategy="bo_gemini", r=5, **common),
    ]
    summary, _ = run_suite(configs, evaluators, n_repeats=20, n_jobs=4)
    random, bo_only, r2, r5 = summary["median"]
    assert bo_only < random
    assert r2 < bo_only
    assert r5 <= r2
    assert summary.loc[2, "p_vs_previous"] < 0.05
