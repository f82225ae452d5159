"""Distributed publish/subscribe over spatio-textual streams, simulated
in-process: hybrid space/text workload partitioning, grid-based dispatch,
inverted-index workers, and cost-minimizing load migration."""

from .model import (
    BooleanExpr,
    CostModel,
    GeoPoint,
    MatchResult,
    Rect,
    SpatioTextualObject,
    StsQuery,
    TermDict,
    TermStats,
    WorkerLoadSample,
    index_terms,
    matches,
    worker_load,
)
from .partition import (
    KdtTree,
    PartitionAssignment,
    PartitionParams,
    baseline_space_partition,
    baseline_text_partition,
    build_partition,
    partition_workload,
    text_partition,
    text_similarity,
)
from .dispatch import GridTIndex, RoutingDecision, detect_imbalance
from .worker import CellStat, WorkerEngine
from .adjust import (
    MigrationPlan,
    compute_tau,
    phase1_adjust,
    select_cells_dp,
    select_cells_gr,
    select_cells_ra,
    select_cells_si,
)
from .runtime import MetricsReport, RunConfig, centralized_matches, merge_dedup, run

__all__ = [
    "BooleanExpr",
    "CostModel",
    "GeoPoint",
    "GridTIndex",
    "KdtTree",
    "MatchResult",
    "MetricsReport",
    "MigrationPlan",
    "PartitionAssignment",
    "PartitionParams",
    "Rect",
    "RoutingDecision",
    "RunConfig",
    "SpatioTextualObject",
    "StsQuery",
    "TermDict",
    "TermStats",
    "CellStat",
    "WorkerEngine",
    "WorkerLoadSample",
    "baseline_space_partition",
    "baseline_text_partition",
    "build_partition",
    "centralized_matches",
    "compute_tau",
    "detect_imbalance",
    "index_terms",
    "matches",
    "merge_dedup",
    "partition_workload",
    "phase1_adjust",
    "run",
    "select_cells_dp",
    "select_cells_gr",
    "select_cells_ra",
    "select_cells_si",
    "text_partition",
    "text_similarity",
    "worker_load",
]
