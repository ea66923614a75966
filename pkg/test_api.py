#!/usr/bin/env python3
"""
Tests for the Gemini Lab API
Exercises every endpoint through the FastAPI test client
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from api_main import app
from campaign_tool import CampaignRecord, CampaignStatus

client = TestClient(app)

TINY_GEMINI = {"hidden_latent": 8, "depth_latent": 1, "max_epochs": 3, "patience": 3, "learning_rate": 0.01,
               "min_steps_per_epoch": 2}


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_root_lists_endpoints():
    endpoints = client.get("/").json()["endpoints"]
    assert endpoints["acquisition"] == "/acquisition"
    assert endpoints["gemini_defaults"] == "/defaults/gemini"


def test_gemini_defaults():
    data = client.get("/defaults/gemini").json()
    assert data["batch_size"] == 50
    assert data["learning_rate"] == 0.000272
    assert data["act_fbias"] == "softplus"


def test_acquisition_far_point_equals_half_lambda():
    payload = {"observations": [[0.0, 0.0]], "values": [1.0], "queries": [[1.0, 1.0]], "lambda": -1.0, "bandwidth": 0.02}
    response = client.post("/acquisition", json=payload)
    assert response.status_code == 200
    assert response.json()["values"][0] == pytest.approx(-0.5)


def test_acquisition_without_observations_is_half_lambda():
    payload = {"observations": [], "values": [], "queries": [[0.3, 0.7], [0.9, 0.1]], "lambda": 1.0}
    response = client.post("/acquisition", json=payload)
    assert response.status_code == 200
    assert response.json()["values"] == pytest.approx([0.5, 0.5])


def test_acquisition_with_gemini_values():
    payload = {"observations": [[0.2], [0.8]], "values": [1.0, 3.0], "queries": [[0.5], [0.9]],
               "lambda": 1.0, "rho": 0.6, "gemini_values": [3.0, 1.0]}
    plain = client.post("/acquisition", json={**payload, "rho": None}).json()["values"]
    gated = client.post("/acquisition", json=payload).json()["values"]
    assert gated[0] > plain[0]
    assert gated[1] == pytest.approx(plain[1])


def test_acquisition_shape_errors():
    payload = {"observations": [[0.2]], "values": [1.0, 2.0], "queries": [[0.5]]}
    assert client.post("/acquisition", json=payload).status_code == 400
    assert client.post("/acquisition", json={**payload, "values": [1.0], "lambda": 3.0}).status_code == 422


def test_simplex_round_trip():
    forward = client.post("/simplex/forward", json={"points": [[0.5, 0.5], [0.1, 0.9]]}).json()["points"]
    assert forward[0] == pytest.approx([0.5, 0.25, 0.25])
    back = client.post("/simplex/inverse", json={"points": forward}).json()["points"]
    np.testing.assert_allclose(back, [[0.5, 0.5], [0.1, 0.9]], atol=1e-12)
    assert client.post("/simplex/inverse", json={"points": [[0.5, 0.6]]}).status_code == 400


def test_generate_surfaces(tmp_path):
    body = {"config": {"domain": {"points_per_axis": 25}, "n_exp_surfaces": 1, "max_attempts": 50, "seed": 2},
            "out_dir": str(tmp_path)}
    response = client.post("/surfaces/generate", json=body)
    assert response.status_code == 200
    rows = response.json()["rows"]
    assert rows and all(-1.0 <= row["spearman"] <= 1.0 for row in rows)
    assert (tmp_path / "manifest.csv").exists()


def test_regress_and_invalid_body(tmp_path):
    body = {"config": {"source": {"kind": "trig", "name": "linear"}, "exp_sizes": [3], "n_splits": 1,
                       "models": ["gemini", "nn_exp"], "gemini": TINY_GEMINI},
            "out_dir": str(tmp_path)}
    response = client.post("/regress", json=body)
    assert response.status_code == 200
    assert [row["model"] for row in response.json()["rows"]] == ["gemini", "nn_exp"]
    body["config"]["source"] = {"kind": "trig"}
    assert client.post("/regress", json=body).status_code == 422


def test_optimize_and_report(tmp_path):
    body = {
        "config": {
            "campaigns": [{"strategy": "random", "target": 0.1, "max_expensive": 3},
                          {"strategy": "bo_only", "target": 0.1, "max_expensive": 3,
                           "planner": {"n_samples": 32, "n_refine": 2}}],
            "expensive": {"kind": "analytic", "name": "dejong", "dim": 2},
            "n_repeats": 2,
        },
        "out_dir": str(tmp_path / "runs"),
    }
    response = client.post("/optimize", json=body)
    assert response.status_code == 200
    assert len(response.json()["rows"]) == 2
    report = client.post("/report", json={"directory": str(tmp_path / "runs")})
    assert report.status_code == 200
    assert report.json()["rows"][0]["strategy"] == "random"


def test_report_on_empty_directory(tmp_path):
    response = client.post("/report", json={"directory": str(tmp_path)})
    assert response.status_code == 400
    assert "no campaign records" in response.json()["detail"]


def test_optimize_bo_gemini(tmp_path):
    body = {
        "config": {
            "campaigns": [{"strategy": "bo_gemini", "r": 2, "target": -1.0, "max_expensive": 4,
                           "planner": {"n_samples": 32, "n_refine": 2}, "gemini": TINY_GEMINI}],
            "expensive": {"kind": "analytic", "name": "dejong", "dim": 2},
            "cheap": {"kind": "analytic", "name": "hyperellipsoid", "dim": 2},
            "n_repeats": 2,
        },
        "out_dir": str(tmp_path),
    }
    response = client.post("/optimize", json=body)
    assert response.status_code == 200
    rows = response.json()["rows"]
    assert rows[0]["strategy"] == "bo_gemini" and rows[0]["r"] == 2
    assert rows[0]["median"] == 4.0
    assert sorted(p.name for p in tmp_path.glob("*.jsonl")) == ["bo_gemini_r2_seed0.jsonl", "bo_gemini_r2_seed1.jsonl"]
    for path in tmp_path.glob("*.jsonl"):
        record = CampaignRecord.read_jsonl(path)
        assert record.status is CampaignStatus.BUDGET_EXHAUSTED
        assert record.entries[-1].rho is not None
