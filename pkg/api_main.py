#!/usr/bin/env python3
"""
Gemini Lab API - FastAPI version
Exposes the lab commands and the acquisition/simplex helpers as REST endpoints

Optional Environment Variables (.env file):
- GEMINI_LAB_LOG_LEVEL: Optional - logging level (default INFO)
- GEMINI_LAB_THREADS: Optional - worker threads for long commands (default 1)
- GEMINI_LAB_OUT_DIR: Optional - output directory when a request gives none
- PORT: Optional - port for `python api_main.py` (default 8000)
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

import lab_runner
from config import (
    LOG_FORMAT,
    ConfigError,
    GenSurfacesConfig,
    OptimizeConfig,
    RegressConfig,
    ReportConfig,
    Settings,
)
from gemini_model import GeminiHyperparams
from planner_tool import AcquisitionConfig, KdeSurrogate, SimplexTransform, acquisition, scale_objective

# Load environment variables
load_dotenv()

logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
logger = logging.getLogger(__name__)

settings = Settings.from_env()

app = FastAPI(
    title="Gemini Lab API",
    description="Dual-fidelity surrogate modelling and optimization campaigns",
    version="1.0.0",
    docs_url="/docs",
    redoc_url="/redoc"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# Request/response models
class GenerateRequest(BaseModel):
    config: GenSurfacesConfig = Field(default_factory=GenSurfacesConfig, description="Surface pool settings")
    out_dir: Optional[str] = Field(None, description="Where pair files go")


class RegressRequest(BaseModel):
    config: RegressConfig
    out_dir: Optional[str] = None


class OptimizeRequest(BaseModel):
    config: OptimizeConfig
    out_dir: Optional[str] = None


class ReportRequest(BaseModel):
    directory: str = Field(..., description="Directory of *.jsonl campaign records")
    config: ReportConfig = Field(default_factory=ReportConfig)
    out_dir: Optional[str] = None


class TableResponse(BaseModel):
    status: str
    out_dir: str
    rows: List[Dict[str, Any]]


class AcquisitionRequest(BaseModel):
    observations: List[List[float]] = Field(..., description="Observed unit-cube points")
    values: List[float] = Field(..., description="Observed expensive values")
    queries: List[List[float]] = Field(..., min_length=1, description="Points to score")
    lam: float = Field(1.0, ge=-1, le=1, alias="lambda", description="Exploration parameter")
    rho: Optional[float] = Field(None, ge=-1, le=1, description="Gemini correlation; null ignores gemini_values")
    gemini_values: Optional[List[float]] = Field(None, description="Gemini predictions at the queries, raw units")
    bandwidth: Optional[float] = Field(None, gt=0, description="Kernel bandwidth; null picks one from the data")


class AcquisitionResponse(BaseModel):
    values: List[float]
    bandwidth: float


class SimplexRequest(BaseModel):
    points: List[List[float]] = Field(..., min_length=1)


class SimplexResponse(BaseModel):
    points: List[List[float]]


def _rows(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    # NaN -> null
    return json.loads(frame.to_json(orient="records"))


def _run_command(name: str, fn, *args) -> pd.DataFrame:
    try:
        return fn(*args)
    except (ConfigError, ValueError) as e:
        logger.error(f"{name} rejected: {e}")
        raise HTTPException(status_code=400, detail=f"{name} rejected: {str(e)}")
    except Exception as e:
        logger.error(f"{name} failed: {e}")
        raise HTTPException(status_code=500, detail=f"{name} failed: {str(e)}")


@app.get("/health", response_model=Dict[str, str])
def health_check():
    return {"status": "healthy", "message": "Gemini Lab API is running"}


@app.post("/surfaces/generate", response_model=TableResponse)
def generate_surfaces(request: GenerateRequest):
    """Generate a Spearman-binned pool of GP surface pairs."""
    out = request.out_dir or settings.out_dir
    manifest = _run_command("Surface generation", lab_runner.gen_surfaces, request.config, out, settings.threads)
    return {"status": "success", "out_dir": out, "rows": _rows(manifest)}


@app.post("/regress", response_model=TableResponse)
def regress(request: RegressRequest):
    """Learning-curve quartiles for Gemini and the single-network baselines."""
    out = request.out_dir or settings.out_dir
    summary = _run_command("Regression", lab_runner.regress, request.config, out, settings.threads)
    return {"status": "success", "out_dir": out, "rows": _rows(summary)}


@app.post("/optimize", response_model=TableResponse)
def optimize(request: OptimizeRequest):
    """Run a campaign suite and return its summary."""
    out = request.out_dir or settings.out_dir
    summary = _run_command("Optimization", lab_runner.optimize, request.config, out, settings.threads)
    return {"status": "success", "out_dir": out, "rows": _rows(summary)}


@app.post("/report", response_model=TableResponse)
def report(request: ReportRequest):
    out = request.out_dir or request.directory
    summary = _run_command("Report", lab_runner.report, request.directory, request.config, out)
    return {"status": "success", "out_dir": out, "rows": _rows(summary)}


@app.post("/acquisition", response_model=AcquisitionResponse)
def score_acquisition(request: AcquisitionRequest):
    """Acquisition values at the query points (lower is better)."""
    try:
        Q = np.asarray(request.queries, dtype=float)
        X = np.asarray(request.observations, dtype=float)
        if X.size == 0 and Q.ndim == 2:
            X = X.reshape(0, Q.shape[1])
        if X.ndim != 2 or Q.ndim != 2 or X.shape[1] != Q.shape[1]:
            raise ValueError("observations and queries must be rectangular with the same width")
        if len(request.values) != X.shape[0]:
            raise ValueError(f"{X.shape[0]} observations but {len(request.values)} values")
        gemini = None
        if request.gemini_values is not None:
            if len(request.gemini_values) != Q.shape[0]:
                raise ValueError(f"{Q.shape[0]} queries but {len(request.gemini_values)} gemini values")
            scaled = scale_objective(request.gemini_values, request.values)
            gemini = lambda _: scaled  # noqa: E731
        surrogate = KdeSurrogate.from_observations(X, request.values, Q.shape[1], request.bandwidth)
        config = AcquisitionConfig(lambdas=(request.lam,), rho=request.rho, gemini=gemini)
        values = acquisition(Q, surrogate, config)
    except ValueError as e:
        logger.error(f"Acquisition rejected: {e}")
        raise HTTPException(status_code=400, detail=f"Acquisition rejected: {str(e)}")
    return {"values": values.tolist(), "bandwidth": surrogate.bandwidth}


@app.post("/simplex/forward", response_model=SimplexResponse)
def simplex_forward(request: SimplexRequest):
    """Map hypercube points of width n-1 onto the n-simplex."""
    try:
        U = np.asarray(request.points, dtype=float)
        return {"points": SimplexTransform(U.shape[-1] + 1).forward(U).tolist()}
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"Simplex transform failed: {str(e)}")


@app.post("/simplex/inverse", response_model=SimplexResponse)
def simplex_inverse(request: SimplexRequest):
    try:
        T = np.asarray(request.points, dtype=float)
        return {"points": SimplexTransform(T.shape[-1]).inverse(T).tolist()}
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"Simplex transform failed: {str(e)}")


@app.get("/defaults/gemini", response_model=GeminiHyperparams)
def gemini_defaults():
    return GeminiHyperparams()


@app.get("/")
def root():
    """Root endpoint with API information."""
    return {
        "message": "Gemini Lab API",
        "version": "1.0.0",
        "endpoints": {
            "health": "/health",
            "generate_surfaces": "/surfaces/generate",
            "regress": "/regress",
            "optimize": "/optimize",
            "report": "/report",
            "acquisition": "/acquisition",
            "simplex_forward": "/simplex/forward",
            "simplex_inverse": "/simplex/inverse",
            "gemini_defaults": "/defaults/gemini"
        },
        "docs": "/docs",
        "redoc": "/redoc"
    }


if __name__ == "__main__":
    import uvicorn

    port = int(os.getenv("PORT", 8000))
    uvicorn.run(
        "api_main:app",
        host="0.0.0.0",
        port=port,
        log_level="info"
    )
