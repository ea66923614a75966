"""
Closed-loop campaign runner.

Each iteration the planner proposes one expensive point, r random cheap
points are measured, then the expensive point; Gemini and rho are refreshed
once two expensive points exist. A campaign stops when a measured expensive
value reaches the target or the expensive budget runs out.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree

from dataset_tool import Dataset, DescriptorDataset, FidelityTag
from gemini_model import GeminiHyperparams
from planner_tool import Planner, PlannerSettings, to_simplex
from stats_tool import five_number_summary, seed_sequence, standard_error, wilcoxon_signed_rank
from surface_tool import SurfacePair, analytic_surface, trig_pair, unit_grid

logger = logging.getLogger(__name__)

REFERENCE_GRID_POINTS = 10000


class CampaignError(ValueError):
    """Raised for inconsistent campaign setups or summaries."""


class Strategy(str, Enum):
    RANDOM = "random"
    BO_ONLY = "bo_only"
    BO_GEMINI = "bo_gemini"


class CampaignStatus(str, Enum):
    TARGET_REACHED = "target_reached"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ERROR = "error"


@dataclass
class Evaluator:
    """
    Measurement channel over the unit hypercube.

    Args:
        fn: Maps a batch (m, P) of unit-cube points to m values
        dim: Hypercube dimension P
        fidelity: Which evaluator this is
        cost_per_eval: Bookkeeping cost of one call
        name: Label used in logs and errors
        reference: Values used to resolve percentile targets
    """

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int
    fidelity: FidelityTag
    cost_per_eval: float = 1.0
    name: str = ""
    reference: Optional[Callable[[], np.ndarray]] = None
    calls: int = 0

    def __call__(self, x) -> float:
        self.calls += 1
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        value = float(np.asarray(self.fn(x), dtype=float).ravel()[0])
        if not np.isfinite(value):
            raise CampaignError(f"{self.name or self.fidelity.value} evaluator returned {value} at {x.ravel().tolist()}")
        return value

    def reference_values(self) -> np.ndarray:
        if self.reference is None:
            raise CampaignError(f"evaluator {self.name!r} cannot resolve a percentile target")
        return np.asarray(self.reference(), dtype=float)


def _grid_for(dim: int) -> np.ndarray:
    return unit_grid(dim, max(2, int(round(REFERENCE_GRID_POINTS ** (1.0 / dim)))))


def analytic_evaluator(name: str, dim: int, fidelity: FidelityTag, cost: float = 1.0) -> Evaluator:
    surface = analytic_surface(name, dim)
    return Evaluator(surface, dim, FidelityTag(fidelity), cost, surface.name, lambda: surface(_grid_for(dim)))


def trig_evaluator(kind: str, fidelity: FidelityTag, cost: float = 1.0) -> Evaluator:
    pair = trig_pair(kind)
    fidelity = FidelityTag(fidelity)
    fn = pair.cheap if fidelity is FidelityTag.CHEAP else pair.expensive
    return Evaluator(lambda X: fn(X[:, 0]), 1, fidelity, cost, f"trig-{pair.kind.value}",
                     lambda: fn(np.linspace(0.0, 1.0, REFERENCE_GRID_POINTS)))


def lookup_evaluator(points: np.ndarray, values: np.ndarray, fidelity: FidelityTag, cost: float = 1.0,
                     simplex: bool = False, name: str = "lookup") -> Evaluator:
    """
    Nearest-row lookup table.

    Points are min-max scaled onto the unit cube, or, with `simplex`, kept as
    compositions and queried through the stick-breaking map.
    """
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float).ravel()
    keep = np.isfinite(values)
    points, values = points[keep], values[keep]
    if values.size == 0:
        raise CampaignError(f"lookup evaluator {name!r} has no {FidelityTag(fidelity).value} values")
    if simplex:
        tree = cKDTree(points)
        dim = points.shape[1] - 1
        to_space = to_simplex
    else:
        low = points.min(axis=0)
        span = points.max(axis=0) - low
        span[span == 0.0] = 1.0
        tree = cKDTree((points - low) / span)
        dim = points.shape[1]
        to_space = lambda U: U  # noqa: E731

    def fn(U):
        _, idx = tree.query(to_space(U))
        return values[idx]

    return Evaluator(fn, dim, FidelityTag(fidelity), cost, name, lambda: values)


def pair_evaluators(pair: SurfacePair, cheap_cost: float = 1.0, exp_cost: float = 1.0) -> Tuple[Evaluator, Evaluator]:
    return (lookup_evaluator(pair.domain, pair.y_exp, FidelityTag.EXPENSIVE, exp_cost, name="pair-expensive"),
            lookup_evaluator(pair.domain, pair.y_cheap, FidelityTag.CHEAP, cheap_cost, name="pair-cheap"))


class EvaluatorSpec(BaseModel):
    """Where an evaluator's values come from."""

    model_config = ConfigDict(extra="forbid")

    kind: str = Field(..., pattern="^(analytic|trig|pair|csv)$", description="analytic, trig, pair or csv")
    name: Optional[str] = Field(None, description="Analytic surface name or trig kind")
    dim: int = Field(2, ge=1, description="Dimension of analytic surfaces")
    path: Optional[str] = Field(None, description="Pair file stem or descriptor CSV path")
    simplex: bool = Field(False, description="Treat CSV features as simplex compositions")
    cost: float = Field(1.0, gt=0, description="Bookkeeping cost per evaluation")

    @model_validator(mode="after")
    def _check_source(self):
        if self.kind in ("analytic", "trig") and not self.name:
            raise ValueError(f"a {self.kind} evaluator needs a name")
        if self.kind in ("pair", "csv") and not self.path:
            raise ValueError(f"a {self.kind} evaluator needs a path")
        return self

    def build(self, fidelity: FidelityTag) -> Evaluator:
        fidelity = FidelityTag(fidelity)
        column = "y_cheap" if fidelity is FidelityTag.CHEAP else "y_exp"
        if self.kind == "analytic":
            return analytic_evaluator(self.name, self.dim, fidelity, self.cost)
        if self.kind == "trig":
            return trig_evaluator(self.name, fidelity, self.cost)
        if self.kind == "pair":
            pair = SurfacePair.read(self.path)
            return lookup_evaluator(pair.domain, getattr(pair, column), fidelity, self.cost, name=Path(self.path).name)
        data = DescriptorDataset.read_csv(self.path)
        return lookup_evaluator(data.features, getattr(data, column), fidelity, self.cost, self.simplex, Path(self.path).name)


class CampaignConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: Strategy = Field(..., description="random, bo_only or bo_gemini")
    r: int = Field(0, ge=0, description="Cheap evaluations per expensive evaluation (bo_gemini only)")
    target: Optional[float] = Field(None, description="Stop once an expensive value is at or below this")
    target_percentile: Optional[float] = Field(None, gt=0, lt=100, description="Target as a percentile of the expensive reference values")
    max_expensive: int = Field(100, ge=1, description="Expensive evaluation budget")
    seed: int = Field(0, ge=0, description="Base seed; repeat i uses seed + i")
    planner: PlannerSettings = Field(default_factory=PlannerSettings)
    gemini: GeminiHyperparams = Field(default_factory=lambda: GeminiHyperparams(max_epochs=2000, patience=100),
                                      description="Gemini settings for in-loop retraining")
    rho_jobs: int = Field(1, ge=1, description="Threads for the cross-validation folds")

    @model_validator(mode="after")
    def _check(self):
        if (self.target is None) == (self.target_percentile is None):
            raise ValueError("give exactly one of target and target_percentile")
        if self.strategy is not Strategy.BO_GEMINI and self.r:
            raise ValueError("r applies to the bo_gemini strategy only")
        return self

    @property
    def label(self) -> str:
        return f"{self.strategy.value} r={self.r}" if self.strategy is Strategy.BO_GEMINI else self.strategy.value


class IterationEntry(BaseModel):
    iteration: int
    fidelity: FidelityTag
    x: List[float]
    y: float
    lam: Optional[float] = Field(None, serialization_alias="lambda")
    rho: Optional[float] = None
    best_so_far: Optional[float] = None
    n_expensive: int
    n_cheap: int
    cumulative_cost: float


class CampaignRecord(BaseModel):
    strategy: Strategy
    r: int
    seed: int
    target: float
    max_expensive: int
    status: CampaignStatus
    error: Optional[str] = None
    entries: List[IterationEntry] = Field(default_factory=list)

    @property
    def expensive_entries(self) -> List[IterationEntry]:
        return [e for e in self.entries if e.fidelity is FidelityTag.EXPENSIVE]

    @property
    def n_expensive(self) -> int:
        return len(self.expensive_entries)

    @property
    def n_cheap(self) -> int:
        return len(self.entries) - self.n_expensive

    def evals_to(self, target: float) -> Optional[int]:
        """Expensive evaluations needed to reach `target`, None when the trace never does."""
        for entry in self.expensive_entries:
            if entry.y <= target:
                return entry.n_expensive
        return None

    def censored_evals_to(self, target: float) -> int:
        hit = self.evals_to(target)
        return self.max_expensive if hit is None else hit

    def write_jsonl(self, path: Union[str, Path]) -> None:
        header = self.model_dump(mode="json", exclude={"entries"})
        with open(path, "w") as handle:
            handle.write(json.dumps({"record": "campaign", **header}) + "\n")
            for entry in self.entries:
                handle.write(json.dumps({"record": "entry", **entry.model_dump(mode="json", by_alias=True)}) + "\n")

    @classmethod
    def read_jsonl(cls, path: Union[str, Path]) -> "CampaignRecord":
        header, entries = None, []
        with open(path) as handle:
            for line in handle:
                if not line.strip():
                    continue
                row = json.loads(line)
                kind = row.pop("record", None)
                if kind == "campaign":
                    header = row
                elif kind == "entry":
                    row["lam"] = row.pop("lambda", None)
                    entries.append(IterationEntry(**row))
        if header is None:
            raise CampaignError(f"{path}: no campaign header line")
        return cls(**header, entries=entries)


def resolve_target(config: CampaignConfig, expensive: Evaluator) -> float:
    if config.target is not None:
        return float(config.target)
    return float(np.percentile(expensive.reference_values(), config.target_percentile))


def run_campaign(config: CampaignConfig, expensive: Evaluator, cheap: Optional[Evaluator] = None) -> CampaignRecord:
    """
    Run one closed-loop campaign.

    An evaluator or planner failure ends the campaign with status "error"
    and keeps the entries recorded so far.
    """
    if expensive.fidelity is not FidelityTag.EXPENSIVE:
        raise CampaignError("the expensive evaluator must carry the expensive tag")
    if config.strategy is Strategy.BO_GEMINI and cheap is None:
        raise CampaignError("bo_gemini needs a cheap evaluator")
    if cheap is not None and cheap.dim != expensive.dim:
        raise CampaignError(f"evaluator dimensions differ: cheap {cheap.dim}, expensive {expensive.dim}")

    dim = expensive.dim
    target = resolve_target(config, expensive)
    planner_seq, random_seq, cheap_seq, model_seq = seed_sequence(config.seed).spawn(4)
    planner = None if config.strategy is Strategy.RANDOM else Planner(dim, config.planner, seed=planner_seq)
    random_rng = np.random.default_rng(random_seq)
    cheap_rng = np.random.default_rng(cheap_seq)
    dataset = Dataset(dim=dim)
    record = CampaignRecord(strategy=config.strategy, r=config.r, seed=config.seed, target=target,
                            max_expensive=config.max_expensive, status=CampaignStatus.BUDGET_EXHAUSTED)
    cost, best = 0.0, None

    def log_entry(iteration, tag, x, y, lam=None):
        record.entries.append(IterationEntry(
            iteration=iteration, fidelity=tag, x=[float(v) for v in x], y=y, lam=lam,
            rho=None if planner is None else planner.rho, best_so_far=best,
            n_expensive=dataset.n_exp, n_cheap=dataset.n_cheap, cumulative_cost=cost,
        ))

    def stop_with_error(iteration, err):
        logger.error(f"Campaign seed {config.seed} stopped at iteration {iteration}: {err}")
        record.status, record.error = CampaignStatus.ERROR, str(err)
        return record

    for iteration in range(config.max_expensive):
        if planner is None:
            x, lam = random_rng.uniform(size=dim), None
        else:
            try:
                proposal = planner.propose(1)[0]
            except Exception as err:
                return stop_with_error(iteration, err)
            x, lam = np.asarray(proposal.x), proposal.lam
        try:
            for _ in range(config.r):
                xc = cheap_rng.uniform(size=dim)
                yc = cheap(xc)
                cost += cheap.cost_per_eval
                dataset.add(xc, yc, FidelityTag.CHEAP)
                log_entry(iteration, FidelityTag.CHEAP, xc, yc)
            y = expensive(x)
        except Exception as err:
            return stop_with_error(iteration, err)

        cost += expensive.cost_per_eval
        dataset.add(x, y, FidelityTag.EXPENSIVE)
        best = y if best is None else min(best, y)
        log_entry(iteration, FidelityTag.EXPENSIVE, x, y, lam)
        if planner is not None:
            planner.observe(x, y)
        if y <= target:
            record.status = CampaignStatus.TARGET_REACHED
            break
        if config.strategy is Strategy.BO_GEMINI and dataset.n_exp >= 2:
            try:
                planner.update_rho(dataset, config.gemini, seed=model_seq.spawn(1)[0], n_jobs=config.rho_jobs)
            except Exception as err:
                return stop_with_error(iteration, err)

    logger.info(f"{config.label} seed {config.seed}: {record.status.value} after {dataset.n_exp} expensive evaluations")
    return record


EvaluatorFactory = Callable[[], Tuple[Evaluator, Optional[Evaluator]]]


def run_suite(configs: Sequence[CampaignConfig], make_evaluators: EvaluatorFactory, n_repeats: int,
              n_jobs: int = 1) -> Tuple[pd.DataFrame, List[List[CampaignRecord]]]:
    """
    Repeat every config with seeds seed..seed+n_repeats-1 and summarize.

    Evaluators are rebuilt for every run so call counters stay per campaign.
    Runs sharing a repeat index share a seed, which pairs them across configs.
    """
    if n_repeats < 2:
        raise CampaignError("a suite needs at least 2 repeats")

    def one(config, i):
        expensive, cheap = make_evaluators()
        run_config = config.model_copy(update={"seed": config.seed + i})
        return run_campaign(run_config, expensive, cheap if config.strategy is Strategy.BO_GEMINI else None)

    jobs = [(c, i) for c in configs for i in range(n_repeats)]
    flat = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(c, i) for c, i in jobs)
    groups = [flat[k * n_repeats:(k + 1) * n_repeats] for k in range(len(configs))]
    return summarize_records(groups), groups


def summarize_records(groups: Sequence[Sequence[CampaignRecord]], target: Optional[float] = None) -> pd.DataFrame:
    """
    One row per group of paired runs.

    Runs that never reach the target count as `max_expensive`. p_vs_previous
    is the paired Wilcoxon signed-rank p-value against the previous row.

    Args:
        groups: Records per strategy, each ordered by repeat index
        target: Target to score against; defaults to each record's own
    """
    rows, previous = [], None
    for group in groups:
        if not group:
            raise CampaignError("cannot summarize an empty group of records")
        counts = np.array([rec.censored_evals_to(rec.target if target is None else target) for rec in group], dtype=float)
        summary = five_number_summary(counts)
        p = float("nan")
        if previous is not None:
            if previous.shape != counts.shape:
                raise CampaignError(f"paired comparison needs equal repeat counts, got {previous.shape[0]} and {counts.shape[0]}")
            p = wilcoxon_signed_rank(counts, previous).p_value
        rows.append({
            "strategy": group[0].strategy.value,
            "r": group[0].r,
            "target": group[0].target if target is None else target,
            "mean": float(counts.mean()),
            "sem": standard_error(counts),
            "q1": summary["q1"],
            "median": summary["median"],
            "q3": summary["q3"],
            "p_vs_previous": p,
        })
        previous = counts
    return pd.DataFrame(rows, columns=["strategy", "r", "target", "mean", "sem", "q1", "median", "q3", "p_vs_previous"])


def boxplot_frame(groups: Sequence[Sequence[CampaignRecord]], target: Optional[float] = None) -> pd.DataFrame:
    rows = []
    for group in groups:
        counts = [rec.censored_evals_to(rec.target if target is None else target) for rec in group]
        rows.append({"strategy": group[0].strategy.value, "r": group[0].r,
                     "target": group[0].target if target is None else target, **five_number_summary(counts)})
    return pd.DataFrame(rows, columns=["strategy", "r", "target", "min", "q1", "median", "q3", "max"])


def looser_targets(groups: Sequence[Sequence[CampaignRecord]], quantiles: Sequence[float] = (0.05, 0.1)) -> List[float]:
    """
    Extra targets above the campaign target, read from the expensive traces.

    Each is a quantile of every expensive value measured across the suite,
    kept only when it is looser than the tightest campaign target.
    """
    values = np.array([e.y for group in groups for rec in group for e in rec.expensive_entries])
    if values.size == 0:
        return []
    base = max(rec.target for group in groups for rec in group)
    return sorted({float(t) for t in np.quantile(values, quantiles) if t > base})


def load_records(directory: Union[str, Path], expected_seeds: Optional[Dict[str, Sequence[int]]] = None) -> List[List[CampaignRecord]]:
    """
    Read `*.jsonl` campaign records grouped by strategy label.

    Raises:
        CampaignError: the directory holds no records, or expected seeds are absent
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.jsonl"))
    if not paths:
        raise CampaignError(f"no campaign records in {directory}")
    grouped: Dict[Tuple[str, int], List[CampaignRecord]] = {}
    for path in paths:
        rec = CampaignRecord.read_jsonl(path)
        grouped.setdefault((rec.strategy.value, rec.r), []).append(rec)
    order = {s.value: i for i, s in enumerate(Strategy)}
    keys = sorted(grouped, key=lambda k: (order[k[0]], k[1]))
    if expected_seeds:
        have: Dict[str, set] = {}
        for (strategy, r) in keys:
            label = f"{strategy} r={r}" if strategy == Strategy.BO_GEMINI.value else strategy
            have[label] = {rec.seed for rec in grouped[(strategy, r)]}
        missing = [f"{label}:{s}" for label, seeds in expected_seeds.items()
                   for s in seeds if s not in have.get(label, set())]
        if missing:
            raise CampaignError(f"missing campaign records for seeds {missing}")
    return [sorted(grouped[k], key=lambda rec: rec.seed) for k in keys]
