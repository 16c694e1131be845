"""Heat equation on metric graphs: P1 finite elements, random batch time
stepping with reduced active-block solves, and adjoint-based optimal control."""

from .graph import (Edge, EdgeGroup, GraphError, GroupMember, MetricGraph, build_paper_graph,
                    interval_graph, load_graph, validate)
from .fem import FemSystem, Mesh1D, assemble, assemble_interval, assemble_load, lambda_min_mass
from .rbm import Decomposition, make_decomposition, sample_schedule, trivial_decomposition, variance
from .decompose import GroupPlan, build_nonoverlapping, build_overlapping, preset
from .timestep import TimeGrid, Trajectory, run_ensemble, solve_full, solve_rbm
from .control import ControlProblem, gradient, evaluate_functional, solve_deterministic, solve_random
from .verification import ManufacturedCase, check_compatibility, exact_error, paper_case

__version__ = "0.1.0"

__all__ = [
    "Edge",
    "EdgeGroup",
    "GraphError",
    "GroupMember",
    "MetricGraph",
    "build_paper_graph",
    "interval_graph",
    "load_graph",
    "validate",
    "FemSystem",
    "Mesh1D",
    "assemble",
    "assemble_interval",
    "assemble_load",
    "lambda_min_mass",
    "Decomposition",
    "make_decomposition",
    "sample_schedule",
    "trivial_decomposition",
    "variance",
    "GroupPlan",
    "build_nonoverlapping",
    "build_overlapping",
    "preset",
    "TimeGrid",
    "Trajectory",
    "run_ensemble",
    "solve_full",
    "solve_rbm",
    "ControlProblem",
    "gradient",
    "evaluate_functional",
    "solve_deterministic",
    "solve_random",
    "ManufacturedCase",
    "check_compatibility",
    "exact_error",
    "paper_case",
]
