"""Temporal knowledge graph forecasting: temporal GNN path extraction, constrained path editing and a relational path transformer."""

from .config import PipelineConfig, load_config
from .graph import Quadruple, TemporalKnowledgeGraph, TemporalQuery, load_graph, load_graph_dir
from .pipeline import Pipeline

__all__ = [
    "Pipeline",
    "PipelineConfig",
    "Quadruple",
    "TemporalKnowledgeGraph",
    "TemporalQuery",
    "load_config",
    "load_graph",
    "load_graph_dir",
]

__version__ = "0.1.0"
