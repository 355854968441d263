"""Register machines over first-order structures.

A small toolkit for machines whose registers hold elements of an arbitrary
first-order structure: deterministic machines, nondeterministic machines with
guessed inputs, oracle machines with membership queries, and machines with a
multi-valued search-operator assignment.  The package provides exact small-step
semantics, budgeted enumeration of result sets, and the program
transformations that compile between the machine kinds.
"""

from bssvm.core import (
    Budget,
    Configuration,
    MachineSpec,
    Program,
    Signature,
    input_config,
    nd_input_config,
    output_of,
    validate_program,
)
from bssvm.structures import FiniteStructure, RationalStructure, StructureDef

__version__ = "0.1.0"

__all__ = [
    "Budget",
    "Configuration",
    "FiniteStructure",
    "MachineSpec",
    "Program",
    "RationalStructure",
    "Signature",
    "StructureDef",
    "input_config",
    "nd_input_config",
    "output_of",
    "validate_program",
]
