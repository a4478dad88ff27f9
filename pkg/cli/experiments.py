import argparse
import asyncio
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from cli.instances import KRule, generate_instance, instance_seeds, instance_suite
from config import (
    DEFAULT_SEED,
    DRIFT_FRACTION,
    LOG_LEVEL,
    ORACLE_CAP,
    PE_TRIALS,
    RANDOM_BUDGET,
    ROC_TRIALS,
    VERSION,
    WORKERS,
)
from core.errors import OracleCapExceededError, SensorSelectionError
from core.model import Criterion, ProblemInstance, SelectionMatrix
from models.evaluation import (
    all_selections,
    estimate_pe,
    estimate_roc,
    exhaustive_opt,
    interpolate_pd,
)
from models.fixtures import SimpleGraph, clique_bound, hardness_instance
from models.meandiff import md_c, md_kl
from models.rounding import PipelineResult, drifted_pair, r_c, r_kl, worst_case_value

logger = logging.getLogger(__name__)

NP_PFA = (0.005, 0.03, 0.1)
ENVELOPE_GRID = 201
SUMMARY_LABELS = {"max": "max", "mean": "avg", "min": "min", "std": "dev"}


class Mode(str, Enum):
    SOLVE = "solve"
    ORACLE = "oracle-compare"
    RANDOM = "random-compare"
    DETECTION = "detection-eval"
    HARDNESS = "hardness"
    SWEEP = "sweep"


class ExperimentConfig(BaseModel):
    """
    Effective settings of one command-line run; embedded in every report.
    """

    mode: Mode
    n: int = Field(default=10, ge=1)
    p: Optional[int] = Field(default=None, ge=1)
    p_frac: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    p_values: list[int] = []
    criterion: Literal["KL", "C", "both"] = "both"
    algorithm: Literal["R", "MD", "both"] = "both"
    k_rule: KRule = KRule.INFINITY
    k0: Optional[float] = None
    k1: Optional[float] = None
    drift_fraction: float = Field(default=DRIFT_FRACTION, gt=0.0)
    instances: int = Field(default=1, ge=1)
    trials: int = Field(default=PE_TRIALS, ge=1)
    roc_trials: int = Field(default=ROC_TRIALS, ge=2)
    seed: int = DEFAULT_SEED
    oracle_cap: int = Field(default=ORACLE_CAP, ge=1)
    random_budget: int = Field(default=RANDOM_BUDGET, ge=1)
    out: Optional[str] = None
    format: Literal["csv", "json"] = "csv"
    instance: Optional[str] = None
    graph: Optional[str] = None
    mismatched: bool = False
    workers: int = Field(default=WORKERS, ge=1)

    @field_validator("k_rule", mode="before")
    @classmethod
    def validate_k_rule(cls, value: Any) -> KRule:
        return KRule(value)

    @model_validator(mode="after")
    def resolve_p(self) -> "ExperimentConfig":
        if self.p is None:
            self.p = max(1, round(self.p_frac * self.n)) if self.p_frac else 1
        if self.instance is None and self.graph is None and self.p > self.n:
            raise ValueError(f"p = {self.p} exceeds n = {self.n}")
        if self.k_rule is KRule.EXPLICIT and (self.k0 is None or self.k1 is None):
            raise ValueError("--k-rule explicit needs --k0 and --k1")
        return self

    @property
    def criteria(self) -> list[Criterion]:
        return [Criterion.KL, Criterion.C] if self.criterion == "both" else [Criterion(self.criterion)]

    @property
    def k_values(self) -> Optional[tuple[float, float]]:
        return (self.k0, self.k1) if self.k0 is not None and self.k1 is not None else None


class Algorithm(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    criterion: Criterion
    solve: Callable[[ProblemInstance], PipelineResult]

    @property
    def column(self) -> str:
        return self.name.replace("-", "")


def select_algorithms(config: ExperimentConfig, exact: bool) -> list[Algorithm]:
    """Pipelines named by the config; mean-difference ones only for exact means."""
    table = {
        ("R", Criterion.KL): ("R-KL", r_kl),
        ("R", Criterion.C): ("R-C", r_c),
        ("MD", Criterion.KL): ("MD-KL", md_kl),
        ("MD", Criterion.C): ("MD-C", md_c),
    }
    families = ["R", "MD"] if config.algorithm == "both" else [config.algorithm]
    if "MD" in families and not exact:
        logger.warning("Mean-difference pipelines need exact means, running the robust ones only")
        families = [f for f in families if f != "MD"]
    algorithms = []
    for family in families:
        for criterion in config.criteria:
            name, solve = table[(family, criterion)]
            algorithms.append(Algorithm(name=name, criterion=criterion, solve=solve))
    return algorithms


def parse_graph(text: str) -> SimpleGraph:
    """
    Graph from a short description.

    Accepted forms: "K<n>" (complete), "P<n>" (path), "E<n>" (no edges) and
    "<n>:u-v,u-v,..." (explicit edge list).
    """
    text = text.strip()
    if ":" in text:
        n, _, edges = text.partition(":")
        pairs = [tuple(int(v) for v in edge.split("-")) for edge in edges.split(",") if edge]
        return SimpleGraph(n_vertices=int(n), edges=pairs)
    kind, n = text[0].upper(), int(text[1:])
    if kind == "K":
        return SimpleGraph.complete(n)
    if kind == "P":
        return SimpleGraph.path(n)
    if kind == "E":
        return SimpleGraph(n_vertices=n)
    raise ValueError(f"unknown graph description {text!r}")


def unrank_combination(rank: int, n: int, p: int) -> list[int]:
    """The rank-th p-subset of range(n) in lexicographic order."""
    combo, start = [], 0
    for slots in range(p, 0, -1):
        for value in range(start, n):
            count = math.comb(n - value - 1, slots - 1)
            if rank < count:
                combo.append(value)
                start = value + 1
                break
            rank -= count
    return combo


def random_selections(n: int, p: int, budget: int, rng: np.random.Generator) -> list[list[int]]:
    """
    Random p-subsets for the random-search baseline.

    All subsets when there are at most budget of them; budget distinct subsets
    when C(n, p) is small enough to index; otherwise budget independent draws.
    """
    total = math.comb(n, p)
    if total <= budget:
        return [unrank_combination(r, n, p) for r in range(total)]
    if total <= 50 * budget:
        ranks = rng.choice(total, size=budget, replace=False)
        return [unrank_combination(int(r), n, p) for r in ranks]
    keys = rng.random((budget, n))
    return [sorted(row) for row in np.argsort(keys, axis=1)[:, :p].tolist()]


def with_summary(frame: pd.DataFrame, columns: list[str], label: str = "instance") -> pd.DataFrame:
    """Appends max / avg / min / dev rows computed over the given columns."""
    stats = frame[columns].agg(list(SUMMARY_LABELS))
    stats.index = [SUMMARY_LABELS[name] for name in stats.index]
    stats = stats.rename_axis(label).reset_index()
    return pd.concat([frame, stats], ignore_index=True)


def selection_label(selection: SelectionMatrix) -> str:
    return "-".join(str(i) for i in selection.indices)


class Report(BaseModel):
    """Tables of a run; the first table is the main one."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    tables: dict[str, pd.DataFrame]
    details: dict[str, Any] = {}


class ExperimentRunner:
    """
    Runs one experiment mode.

    Instances are processed in a thread pool; results are gathered in
    submission order, so reports do not depend on completion order.

    Attributes:
        config (ExperimentConfig): The run settings.
        executor (ThreadPoolExecutor): Worker pool for per-instance work.
    """

    def __init__(self, config: ExperimentConfig) -> None:
        logger.info(f"Initializing runner for mode {config.mode.value}")
        self.config = config
        self.executor = ThreadPoolExecutor(max_workers=config.workers)

    async def _gather(self, fn: Callable, items: list) -> list:
        loop = asyncio.get_running_loop()
        return await asyncio.gather(*(loop.run_in_executor(self.executor, fn, item) for item in items))

    def _suite(self, p: Optional[int] = None) -> list[tuple[int, ProblemInstance]]:
        config = self.config
        if config.instance:
            instance = ProblemInstance.load(config.instance)
            return [(config.seed, instance if p is None else instance.with_p(p))]
        return instance_suite(
            config.n, p or config.p, config.instances, config.seed,
            config.k_rule, config.drift_fraction, config.k_values,
        )

    def _single(self) -> ProblemInstance:
        config = self.config
        if config.instance:
            return ProblemInstance.load(config.instance)
        seed = instance_seeds(config.seed, 1)[0]
        return generate_instance(config.n, seed, config.k_rule, config.p, config.drift_fraction, config.k_values)

    async def run(self) -> Report:
        """
        Executes the configured mode.

        Returns:
            Report: The tables of the run.
        """
        handlers = {
            Mode.SOLVE: self.solve,
            Mode.ORACLE: self.oracle_compare,
            Mode.RANDOM: self.random_compare,
            Mode.DETECTION: self.detection_eval,
            Mode.HARDNESS: self.hardness,
            Mode.SWEEP: self.sweep,
        }
        started = time.perf_counter()
        try:
            report = await handlers[self.config.mode]()
        finally:
            self.executor.shutdown(wait=True)
        logger.info(f"Mode {self.config.mode.value} finished in {time.perf_counter() - started:.2f} s")
        return report

    async def solve(self) -> Report:
        instance = self._single()
        algorithms = select_algorithms(self.config, instance.uncertainty.is_exact)
        results = await self._gather(lambda algorithm: algorithm.solve(instance), algorithms)
        rows = []
        for result in results:
            row = {
                "algorithm": result.algorithm,
                "criterion": result.criterion.value,
                "selection": selection_label(result.selection),
                "objective": result.objective,
                "stiefel_objective": result.stiefel_objective,
                "s_star": result.s_star,
            }
            row.update({f"{record.phase}_ms": record.elapsed_ms for record in result.phase_trace})
            rows.append(row)
        return Report(
            tables={"solve": pd.DataFrame(rows)},
            details={"instance": instance.to_dict(), "results": [r.to_dict() for r in results]},
        )

    def _oracle_row(self, item: tuple[int, int, ProblemInstance]) -> dict:
        index, seed, instance = item
        row = {"instance": index, "seed": seed}
        optimum: dict[Criterion, float] = {}
        for algorithm in select_algorithms(self.config, instance.uncertainty.is_exact):
            if algorithm.criterion not in optimum:
                optimum[algorithm.criterion] = exhaustive_opt(
                    instance, algorithm.criterion, self.config.oracle_cap
                ).value
            result = algorithm.solve(instance)
            best = optimum[algorithm.criterion]
            row[f"r_{algorithm.column}"] = result.objective / best if best > 0 else 1.0
        return row

    async def oracle_compare(self) -> Report:
        config = self.config
        count = math.comb(config.n, config.p)
        if not config.instance and count > config.oracle_cap:
            raise OracleCapExceededError(config.n, config.p, count, config.oracle_cap)
        suite = [(i, seed, instance) for i, (seed, instance) in enumerate(self._suite())]
        rows = await self._gather(self._oracle_row, suite)
        frame = pd.DataFrame(rows)
        columns = [c for c in frame.columns if c.startswith("r_")]
        return Report(tables={"ratios": with_summary(frame, columns)})

    def _random_row(self, item: tuple[int, int, ProblemInstance]) -> dict:
        index, seed, instance = item
        pair, uncertainty = instance.pair, instance.uncertainty
        rng = np.random.Generator(np.random.PCG64(seed))
        candidates = random_selections(instance.n, instance.p, self.config.random_budget, rng)
        row = {"instance": index, "seed": seed, "random_selections": len(candidates)}
        searched: dict[Criterion, tuple[float, float]] = {}
        for algorithm in select_algorithms(self.config, uncertainty.is_exact):
            if algorithm.criterion not in searched:
                started = time.perf_counter()
                best = max(
                    worst_case_value(SelectionMatrix.from_zero_based(instance.n, combo), pair, uncertainty,
                                     algorithm.criterion)
                    for combo in candidates
                )
                searched[algorithm.criterion] = (best, time.perf_counter() - started)
            best, random_seconds = searched[algorithm.criterion]
            started = time.perf_counter()
            result = algorithm.solve(instance)
            elapsed = time.perf_counter() - started
            row[f"rho_{algorithm.column}"] = result.objective / best if best > 0 else 1.0
            row[f"time_ratio_{algorithm.column}"] = elapsed / random_seconds if random_seconds > 0 else math.nan
        return row

    async def random_compare(self) -> Report:
        suite = [(i, seed, instance) for i, (seed, instance) in enumerate(self._suite())]
        rows = await self._gather(self._random_row, suite)
        frame = pd.DataFrame(rows)
        columns = [c for c in frame.columns if c.startswith(("rho_", "time_ratio_"))]
        return Report(tables={"ratios": with_summary(frame, columns)})

    async def detection_eval(self) -> Report:
        config = self.config
        instance = self._single()
        pair, uncertainty = instance.pair, instance.uncertainty
        count = math.comb(instance.n, instance.p)
        if count > config.oracle_cap:
            raise OracleCapExceededError(instance.n, instance.p, count, config.oracle_cap)
        selections = all_selections(instance.n, instance.p)

        def evaluate(selection: SelectionMatrix) -> dict:
            row = {
                "selection": selection_label(selection),
                "kl": worst_case_value(selection, pair, uncertainty, Criterion.KL),
                "chernoff": worst_case_value(selection, pair, uncertainty, Criterion.C),
                "pe": estimate_pe(selection, pair, config.trials, config.seed),
            }
            if config.mismatched and not uncertainty.is_exact:
                true_pair = drifted_pair(selection, pair, uncertainty)
                row["pe_mismatched"] = estimate_pe(selection, pair, config.trials, config.seed, true_pair)
            return row

        def roc(selection: SelectionMatrix):
            return estimate_roc(selection, pair, config.roc_trials, seed=config.seed)

        table = pd.DataFrame(await self._gather(evaluate, selections))
        curves = await self._gather(roc, selections)

        kl_best = int(table["kl"].idxmax())
        c_best = int(table["chernoff"].idxmax())
        summary = pd.DataFrame(
            [
                {"label": "KL-best", "selection": table.at[kl_best, "selection"], "pe": table.at[kl_best, "pe"]},
                {"label": "C-best", "selection": table.at[c_best, "selection"], "pe": table.at[c_best, "pe"]},
                {"label": "Bayes-best", "selection": table.at[int(table["pe"].idxmin()), "selection"],
                 "pe": table["pe"].min()},
                {"label": "worst", "selection": table.at[int(table["pe"].idxmax()), "selection"],
                 "pe": table["pe"].max()},
                {"label": "average", "selection": "", "pe": table["pe"].mean()},
            ]
        )

        roc_frames = []
        for selection, stats in zip(selections, curves):
            frame = stats.to_frame()
            frame.insert(0, "selection", selection_label(selection))
            roc_frames.append(frame)
        grid = np.linspace(0.0, 1.0, ENVELOPE_GRID)
        pd_grid = np.array([[interpolate_pd(stats, x).pd for x in grid] for stats in curves])
        for label, values in (("envelope", pd_grid.max(axis=0)), ("average", pd_grid.mean(axis=0))):
            roc_frames.append(pd.DataFrame({"selection": label, "threshold": np.nan, "pfa": grid, "pd": values}))

        np_rows = []
        for pfa in NP_PFA:
            at = np.array([interpolate_pd(stats, pfa).pd for stats in curves])
            np_rows.append(
                {"pfa": pfa, "KL-best": at[kl_best], "C-best": at[c_best], "NP-best": at.max(), "average": at.mean()}
            )
        logger.info(f"Detection evaluation over {len(selections)} selections done")
        return Report(
            tables={
                "pe": summary,
                "selections": table,
                "roc": pd.concat(roc_frames, ignore_index=True),
                "np": pd.DataFrame(np_rows),
            },
            details={"instance": instance.to_dict()},
        )

    async def hardness(self) -> Report:
        config = self.config
        graph = parse_graph(config.graph or f"K{config.n}")
        p = config.p
        instance = hardness_instance(graph, p)
        kl_opt, c_opt = await self._gather(
            lambda criterion: exhaustive_opt(instance, criterion, config.oracle_cap).value,
            [Criterion.KL, Criterion.C],
        )
        kl_bound = clique_bound(graph.n_vertices, p, Criterion.KL)
        row = {
            "graph": config.graph or f"K{config.n}",
            "n": graph.n_vertices,
            "p": p,
            "kl_optimum": kl_opt,
            "kl_bound": kl_bound,
            "c_optimum": c_opt,
            "c_bound": clique_bound(graph.n_vertices, p, Criterion.C),
            "clique_found": graph.has_clique(p),
            "threshold_test": kl_opt >= kl_bound - 1e-9,
        }
        logger.info(f"Hardness fixture {row['graph']}, p={p}: optimum {kl_opt:.6f}, clique {row['clique_found']}")
        return Report(tables={"hardness": pd.DataFrame([row])})

    def _sweep_row(self, item: tuple[int, int, int, ProblemInstance]) -> list[dict]:
        p, index, seed, instance = item
        rows = []
        for algorithm in select_algorithms(self.config, instance.uncertainty.is_exact):
            started = time.perf_counter()
            result = algorithm.solve(instance)
            rows.append(
                {
                    "p": p,
                    "instance": index,
                    "seed": seed,
                    "algorithm": algorithm.name,
                    "objective": result.objective,
                    "runtime_ms": (time.perf_counter() - started) * 1000.0,
                }
            )
        return rows

    async def sweep(self) -> Report:
        config = self.config
        p_values = config.p_values or list(range(1, config.p + 1))
        suite = self._suite(p_values[0])
        items = [
            (p, index, seed, instance.with_p(p))
            for p in p_values
            for index, (seed, instance) in enumerate(suite)
        ]
        batches = await self._gather(self._sweep_row, items)
        frame = pd.DataFrame([row for batch in batches for row in batch])
        summary = frame.groupby(["p", "algorithm"], sort=True)[["objective", "runtime_ms"]].mean().reset_index()
        return Report(tables={"sweep": frame, "summary": summary})


def _records(frame: pd.DataFrame) -> list[dict]:
    """Table rows as JSON-ready dicts; infinite and missing values become null."""
    return json.loads(frame.replace([np.inf, -np.inf], np.nan).to_json(orient="records"))


def report_metadata(config: ExperimentConfig) -> dict:
    return {"version": VERSION, "seed": config.seed, "config": config.model_dump(mode="json")}


def write_report(report: Report, config: ExperimentConfig) -> list[Path]:
    """
    Writes the report tables.

    CSV: the main table goes to --out, the others next to it as
    <stem>_<table>.csv, and <stem>_report.json carries the metadata. JSON: one
    file with the metadata and every table as a list of records. Without
    --out the JSON payload, or the main CSV table under a "# " metadata
    line, goes to stdout.

    Returns:
        list[Path]: Files written; empty when the main table went to stdout.
    """
    meta = report_metadata(config)
    names = list(report.tables)
    payload = {
        **meta,
        "tables": {name: _records(frame) for name, frame in report.tables.items()},
        **report.details,
    }
    if config.out is None:
        if config.format == "json":
            sys.stdout.write(json.dumps(payload, indent=2) + "\n")
        else:
            sys.stdout.write(f"# {json.dumps(meta)}\n")
            sys.stdout.write(report.tables[names[0]].to_csv(index=False))
        return []
    out = Path(config.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if config.format == "json":
        out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        written.append(out)
    else:
        report.tables[names[0]].to_csv(out, index=False, encoding="utf-8")
        written.append(out)
        for name in names[1:]:
            path = out.with_name(f"{out.stem}_{name}.csv")
            report.tables[name].to_csv(path, index=False, encoding="utf-8")
            written.append(path)
        meta_path = out.with_name(f"{out.stem}_report.json")
        summary = {name: _records(report.tables[name]) for name in names[:1]}
        meta_path.write_text(json.dumps({**meta, "summary": summary, **report.details}, indent=2), encoding="utf-8")
        written.append(meta_path)
    for path in written:
        logger.info(f"Report written to {path}")
    return written


def _p_values(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gauss-sensel",
        description="Sensor selection for Gaussian detection by (worst-case) KL and Chernoff distance.",
    )
    parser.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    parser.add_argument("--n", type=int, default=10, help="number of sensors of generated instances")
    parser.add_argument("--p", type=int, help="number of sensors to select")
    parser.add_argument("--p-frac", type=float, help="p as a fraction of n")
    parser.add_argument("--p-values", type=_p_values, default=[], help="comma-separated p list for sweep")
    parser.add_argument("--criterion", choices=["KL", "C", "both"], default="both")
    parser.add_argument("--algorithm", choices=["R", "MD", "both"], default="both")
    parser.add_argument(
        "--k-rule", type=KRule, choices=list(KRule), default=KRule.INFINITY,
        metavar="{" + ",".join(k.value for k in KRule) + "}",
        help="uncertainty sizing rule; det is short for paper-det",
    )
    parser.add_argument("--k0", type=float, help="k0 for --k-rule explicit")
    parser.add_argument("--k1", type=float, help="k1 for --k-rule explicit")
    parser.add_argument("--drift-fraction", type=float, default=DRIFT_FRACTION)
    parser.add_argument("--instances", type=int, default=1)
    parser.add_argument("--trials", type=int, default=PE_TRIALS, help="Monte Carlo trials for Pe")
    parser.add_argument("--roc-trials", type=int, default=ROC_TRIALS)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--oracle-cap", type=int, default=ORACLE_CAP)
    parser.add_argument("--random-budget", type=int, default=RANDOM_BUDGET)
    parser.add_argument("--out", help="output path; stdout when omitted")
    parser.add_argument("--format", choices=["csv", "json"], default="csv")
    parser.add_argument("--instance", help="problem instance JSON file")
    parser.add_argument("--graph", help='graph for hardness mode, e.g. "K4" or "5:1-2,2-3"')
    parser.add_argument("--mismatched", action="store_true", help="also evaluate Pe under worst-case mean drift")
    parser.add_argument("--workers", type=int, default=WORKERS)
    parser.add_argument("--verbose", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = {key: value for key, value in vars(args).items() if key != "verbose" and value is not None}
    return ExperimentConfig(**values)


def main(argv: Optional[list[str]] = None) -> int:
    """
    Command-line entry point.

    Returns:
        int: 0 on success, 1 when the run failed.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=logging.DEBUG if args.verbose else LOG_LEVEL,
    )
    try:
        config = config_from_args(args)
        report = asyncio.run(ExperimentRunner(config).run())
        write_report(report, config)
    except (SensorSelectionError, ValidationError, ValueError, OSError) as error:
        logger.error(f"Run failed: {error}")
        return 1
    return 0
