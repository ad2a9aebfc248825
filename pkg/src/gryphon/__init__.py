"""Gryphon: an information-flow message broker.

Events flow through a DAG of information spaces joined by select,
transform, merge, interpret and expand arcs, hosted on a tree of brokers.
"""

from .errors import GryphonError
from .graph import FlowGraph, load_graph

__version__ = "0.1.0"

__all__ = ["FlowGraph", "GryphonError", "__version__", "load_graph"]
