"""Optimal power flow for multi-frequency AC grids coupled by back-to-back converters."""
from .converter import ConverterMode, ConverterParams, converter_losses
from .formulation import ObjectiveSpec, OpfProblem
from .horizon import HorizonResult, LoadProfile, run_horizon
from .io import Case, CaseError, parse_case, write_results
from .ipm import IpmOptions, SolveReport
from .network import (Bus, Generator, Grid, Line, MultiFrequencySystem, ShuntCapacitor,
                      validate_system)
from .opf import OpfResult, run_opf
from .powerflow import PfSolution, solve_pf
from .verify import Certificate, verify_solution

__all__ = [
    "Bus", "Case", "CaseError", "Certificate", "ConverterMode", "ConverterParams", "Generator", "Grid",
    "HorizonResult", "IpmOptions", "Line", "LoadProfile", "MultiFrequencySystem", "ObjectiveSpec",
    "OpfProblem", "OpfResult", "PfSolution", "ShuntCapacitor", "SolveReport", "converter_losses",
    "parse_case", "run_horizon", "run_opf", "solve_pf", "validate_system", "verify_solution",
    "write_results",
]
