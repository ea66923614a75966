"""
Command implementations shared by the CLI and the HTTP service.

Each command takes a validated config and an output directory, writes its
CSV/JSON artefacts there and returns the main table as a DataFrame.
"""

import logging
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from campaign_tool import (
    CampaignRecord,
    Strategy,
    boxplot_frame,
    load_records,
    looser_targets,
    run_suite,
    summarize_records,
)
from config import GenSurfacesConfig, OptimizeConfig, RegressConfig, ReportConfig
from dataset_tool import Dataset, DatasetError, DescriptorDataset, FidelityTag
from gemini_model import BaselineVariant, GeminiModel, baseline_train
from stats_tool import regression_metrics, seed_sequence
from surface_tool import (
    RbfKernel,
    SurfacePair,
    analytic_pair,
    generate_binned_pool,
    make_folds,
    trig_pair,
)

logger = logging.getLogger(__name__)

CHEAP_SHARE = 0.75
DEFAULT_CHEAP_RATIO = 10
METRICS = ("rmsd", "r2", "pearson")


def _out(out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def gen_surfaces(config: GenSurfacesConfig, out_dir: Union[str, Path], n_jobs: int = 1) -> pd.DataFrame:
    """Write one pair file per (bin, expensive surface) plus `manifest.csv`."""
    out = _out(out_dir)
    kernel = RbfKernel(config.kernel.variance, config.kernel.lengthscale)
    pool = generate_binned_pool(config.domain, kernel, config.n_exp_surfaces, config.n_train, config.seed,
                                config.bin_width, config.max_attempts, n_jobs)
    files = []
    for b, e, pair in pool.pairs:
        pair.meta["seed"] = config.seed
        csv_path, _ = pair.write(out / f"pair_b{b}_e{e:02d}")
        files.append(csv_path.name)
    manifest = pool.manifest()
    manifest["file"] = files
    manifest.to_csv(out / "manifest.csv", index=False)
    if pool.unreachable:
        logger.warning(f"{len(pool.unreachable)} (bin, surface) slots were not filled")
    logger.info(f"Wrote {len(files)} surface pairs to {out}")
    return manifest


def _cheap_count(config: RegressConfig, n_exp: int, default: int, available: int) -> int:
    if config.n_cheap is not None:
        wanted = config.n_cheap
    elif config.cheap_ratio is not None:
        wanted = int(round(config.cheap_ratio * n_exp))
    else:
        wanted = default
    if wanted > available:
        logger.warning(f"Requested {wanted} cheap points but only {available} are available; capping")
        wanted = available
    return wanted


def _load_pair(config: RegressConfig, rng: np.random.Generator) -> SurfacePair:
    src = config.source
    if src.kind == "trig":
        return trig_pair(src.name).to_surface_pair()
    if src.kind == "pair":
        return SurfacePair.read(src.path)
    return analytic_pair(src.cheap_name, src.name, rng.uniform(size=(src.n_points, src.dim)))


def regression_splits(config: RegressConfig) -> Iterator[Tuple[int, int, int, Dataset, np.ndarray, np.ndarray]]:
    """
    Yield (n_exp, n_cheap, split, training dataset, X_val, y_val) for every size and split.

    Surfaces use random folds over the domain; descriptor files draw expensive
    training rows from the rows with expensive targets and validate on the rest.
    """
    rng = np.random.default_rng(config.seed)
    if config.source.kind == "csv":
        data = DescriptorDataset.read_csv(config.source.path, config.source.expected_width)
        cheap_rows, exp_rows = data.cheap_rows, data.exp_rows
        for n_exp in config.exp_sizes:
            if n_exp >= len(exp_rows):
                raise DatasetError(f"{n_exp} expensive training rows leave no validation rows (have {len(exp_rows)})")
            n_cheap = _cheap_count(config, n_exp, DEFAULT_CHEAP_RATIO * n_exp, len(cheap_rows))
            for split in range(config.n_splits):
                train_exp = rng.choice(exp_rows, size=n_exp, replace=False)
                train_cheap = rng.choice(cheap_rows, size=n_cheap, replace=False)
                val = np.setdiff1d(exp_rows, train_exp)
                yield n_exp, n_cheap, split, data.to_dataset(train_cheap, train_exp), data.features[val], data.y_exp[val]
        return

    pair = _load_pair(config, rng)
    for n_exp in config.exp_sizes:
        n_cheap = _cheap_count(config, n_exp, int(round(CHEAP_SHARE * len(pair))), len(pair))
        folds = make_folds(len(pair), n_cheap, n_exp, config.n_splits, seed=rng.integers(2 ** 32))
        for split, fold in enumerate(folds):
            X_val, y_val = fold.validation(pair)
            yield n_exp, n_cheap, split, fold.to_dataset(pair), X_val, y_val


def _score_split(config: RegressConfig, n_exp, n_cheap, split, train: Dataset, X_val, y_val, seq) -> List[dict]:
    rows = []
    for model_name, model_seq in zip(config.models, seq.spawn(len(config.models))):
        if model_name == "gemini":
            model = GeminiModel(train.dim, config.gemini, seed=model_seq)
            model.train(train)
        else:
            model = baseline_train(BaselineVariant(model_name), train, config.gemini, seed=model_seq)
        metrics = regression_metrics(y_val, model.predict_mean(X_val))
        rows.append({"n_exp": n_exp, "n_cheap": n_cheap, "split": split, "model": model_name, **metrics})
    return rows


def regress(config: RegressConfig, out_dir: Union[str, Path], n_jobs: int = 1) -> pd.DataFrame:
    """
    Learning curves: per training size and model, quartiles of RMSD, R^2 and Pearson r.

    Writes `regress_splits.csv` (one row per split and model) and `regress_summary.csv`.
    """
    out = _out(out_dir)
    splits = list(regression_splits(config))
    seqs = seed_sequence(config.seed).spawn(len(splits))
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_score_split)(config, *split, seq) for split, seq in zip(splits, seqs)
    )
    per_split = pd.DataFrame([row for rows in results for row in rows],
                             columns=["n_exp", "n_cheap", "split", "model", *METRICS])
    per_split.to_csv(out / "regress_splits.csv", index=False)

    summary_rows = []
    for (n_exp, n_cheap, model), group in per_split.groupby(["n_exp", "n_cheap", "model"], sort=False):
        row = {"n_exp": n_exp, "n_cheap": n_cheap, "model": model}
        for metric in METRICS:
            q1, median, q3 = np.nanpercentile(group[metric].to_numpy(dtype=float), [25, 50, 75])
            row.update({f"{metric}_q1": q1, f"{metric}_median": median, f"{metric}_q3": q3})
        summary_rows.append(row)
    summary = pd.DataFrame(summary_rows)
    summary.to_csv(out / "regress_summary.csv", index=False)
    logger.info(f"Regression report: {len(summary)} rows written to {out}")
    return summary


def _record_name(record: CampaignRecord) -> str:
    label = f"{record.strategy.value}_r{record.r}" if record.strategy is Strategy.BO_GEMINI else record.strategy.value
    return f"{label}_seed{record.seed}.jsonl"


def optimize(config: OptimizeConfig, out_dir: Union[str, Path], n_jobs: int = 1) -> pd.DataFrame:
    """Run the campaign suite; writes one JSON-lines file per run, `suite_summary.csv` and `suite_boxplot.csv`."""
    out = _out(out_dir)

    def make_evaluators():
        expensive = config.expensive.build(FidelityTag.EXPENSIVE)
        cheap = config.cheap.build(FidelityTag.CHEAP) if config.cheap else None
        return expensive, cheap

    summary, groups = run_suite(config.campaigns, make_evaluators, config.n_repeats, n_jobs)
    for group in groups:
        for record in group:
            record.write_jsonl(out / _record_name(record))
    summary.to_csv(out / "suite_summary.csv", index=False)
    boxplot_frame(groups).to_csv(out / "suite_boxplot.csv", index=False)
    return summary


def report(directory: Union[str, Path], config: Optional[ReportConfig] = None, out_dir: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Re-aggregate stored campaign records.

    Scores every group at its own target and at looser targets read from the
    traces; writes `report_summary.csv` and `report_boxplot.csv`.
    """
    config = config or ReportConfig()
    groups = load_records(directory, config.expected_seeds)
    targets = [None] + looser_targets(groups, config.extra_quantiles)
    summary = pd.concat([summarize_records(groups, t) for t in targets], ignore_index=True)
    boxplots = pd.concat([boxplot_frame(groups, t) for t in targets], ignore_index=True)
    out = _out(out_dir or directory)
    summary.to_csv(out / "report_summary.csv", index=False)
    boxplots.to_csv(out / "report_boxplot.csv", index=False)
    return summary

