"""Declarative data ingestion: a small language compiled to labelled operator plans,
executed over a simulated distributed file system with replication, erasure coding
and ingestion-aware access paths."""

from .core import Granularity, IngestItem, IngestPlan, Label, Schema
from .lang import compile_text, default_registry, parse_program, render_plan
from .optimizer import optimize_plan
from .cluster import create_cluster, open_cluster
from .runtime import RuntimeConfig, SourceFile, execute_plan

__all__ = ["Granularity", "IngestItem", "IngestPlan", "Label", "Schema", "compile_text", "default_registry",
           "parse_program", "render_plan", "optimize_plan", "create_cluster", "open_cluster", "RuntimeConfig",
           "SourceFile", "execute_plan"]
