"""Shift-robust node classification with graph adversarial clustering."""
from .estimators import ClusterGNN, GCNClassifier, SRNCClassifier
from .exceptions import ConfigError, DivergenceError, GraphFormatError, SRNCError
from .graphstore import Graph, ShiftScenario, load_graph, make_openset_split, save_graph
from .trainer import TrainConfig, run_srnc, run_wo_phi_ablation

__version__ = "0.1.0"

__all__ = [
    "ClusterGNN", "GCNClassifier", "SRNCClassifier", "ConfigError", "DivergenceError",
    "GraphFormatError", "SRNCError", "Graph", "ShiftScenario", "load_graph",
    "make_openset_split", "save_graph", "TrainConfig", "run_srnc", "run_wo_phi_ablation",
]
