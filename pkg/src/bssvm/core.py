"""Machine-model data types, program validation, and input/output procedures.

Machines here are register machines over a first-order structure: an infinite
supply of Z-registers per tape holding universe elements, a finite block of
index registers per tape holding positive integers, and a labelled program.
All types in this module are immutable values and safe to share between
threads; the operations are pure functions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Sequence, Union

Value = Any
Label = int


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class MachineError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(MachineError):
    pass


class ArityMismatch(MachineError):
    pass


class UnknownSymbol(MachineError):
    pass


class KindMismatch(MachineError):
    pass


class EvaluatorCannotCertify(MachineError):
    """A query needed an answer the evaluator cannot certify (e.g. emptiness
    of a choice set backed by a semi-decider)."""


class IdentityUnavailable(MachineError):
    pass


class NoEnumerator(MachineError):
    pass


class RegisterCollision(MachineError):
    pass


class UnknownPseudo(MachineError):
    pass


class CaseMismatch(MachineError):
    pass


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Signature:
    """Symbol counts and arities of a first-order structure.

    ``constant_count`` constants, functions with arities
    ``function_arities`` and relations with arities ``relation_arities``.
    All arities are at least 1; indices into these lists are 1-based
    everywhere in the package, matching the instruction syntax.
    """

    constant_count: int
    function_arities: tuple[int, ...] = ()
    relation_arities: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.constant_count < 0:
            raise ValueError("constant_count must be nonnegative")
        for m in self.function_arities:
            if m < 1:
                raise ValueError("function arities must be >= 1")
        for k in self.relation_arities:
            if k < 1:
                raise ValueError("relation arities must be >= 1")


# ---------------------------------------------------------------------------
# Register addressing
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ZDirect:
    """Z-register with a literal index, e.g. Z3 on some tape."""

    tape: int
    index: int


@dataclass(frozen=True, slots=True)
class ZIndirect:
    """Z-register addressed through an index register of the same tape:
    Z[t, c(I[t, ireg])].  Indirect addressing exists only in copy
    instructions."""

    tape: int
    ireg: int


@dataclass(frozen=True, slots=True)
class IReg:
    """Index register ``index`` on ``tape``."""

    tape: int
    index: int


# ---------------------------------------------------------------------------
# Instructions (types 1..10)
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Compute:
    """Type 1: dest := f_i(args...), all registers addressed directly."""

    dest: ZDirect
    fn: int
    args: tuple[ZDirect, ...]


@dataclass(frozen=True, slots=True)
class SetConst:
    """Type 2: dest := c_i."""

    dest: ZDirect
    const: int


@dataclass(frozen=True, slots=True)
class IndirectCopy:
    """Type 3: Z[d1, c(I[d1,j])] := Z[d2, c(I[d2,k])]."""

    dest: ZIndirect
    src: ZIndirect


@dataclass(frozen=True, slots=True)
class RelBranch:
    """Type 4: if r_i(args...) then goto then_label else goto else_label."""

    rel: int
    args: tuple[ZDirect, ...]
    then_label: Label
    else_label: Label


@dataclass(frozen=True, slots=True)
class IndexBranch:
    """Type 5: if c(left) = c(right) then goto then_label else else_label."""

    left: IReg
    right: IReg
    then_label: Label
    else_label: Label


@dataclass(frozen=True, slots=True)
class IndexSetOne:
    """Type 6: reg := 1."""

    reg: IReg


@dataclass(frozen=True, slots=True)
class IndexIncr:
    """Type 7: reg := reg + 1."""

    reg: IReg


@dataclass(frozen=True, slots=True)
class Stop:
    """Type 8."""


@dataclass(frozen=True, slots=True)
class OracleBranch:
    """Type 9: if (Z[t,1], ..., Z[t, c(I[t,1])]) in O then ... else ...

    The queried prefix is read from ``tape``.
    """

    tape: int
    then_label: Label
    else_label: Label


@dataclass(frozen=True, slots=True)
class NuAssign:
    """Type 10: dest := one member of the oracle's choice set for the prefix
    (Z[q,1], ..., Z[q, c(I[q,1])]) read from ``query_tape``.

    An empty choice set means the machine loops forever on this instruction.
    """

    dest: ZDirect
    query_tape: int


Instruction = Union[
    Compute,
    SetConst,
    IndirectCopy,
    RelBranch,
    IndexBranch,
    IndexSetOne,
    IndexIncr,
    Stop,
    OracleBranch,
    NuAssign,
]

INSTRUCTION_TYPE = {
    Compute: 1,
    SetConst: 2,
    IndirectCopy: 3,
    RelBranch: 4,
    IndexBranch: 5,
    IndexSetOne: 6,
    IndexIncr: 7,
    Stop: 8,
    OracleBranch: 9,
    NuAssign: 10,
}


def instruction_type(instr: Instruction) -> int:
    return INSTRUCTION_TYPE[type(instr)]


def branch_targets(instr: Instruction) -> tuple[Label, ...]:
    if isinstance(instr, (RelBranch, IndexBranch, OracleBranch)):
        return (instr.then_label, instr.else_label)
    return ()


def referenced_registers(instr: Instruction) -> Iterator[Union[ZDirect, ZIndirect, IReg]]:
    """All register references of one instruction, including the index
    registers implied by indirect addressing and prefix reads."""
    if isinstance(instr, Compute):
        yield instr.dest
        yield from instr.args
    elif isinstance(instr, SetConst):
        yield instr.dest
    elif isinstance(instr, IndirectCopy):
        yield instr.dest
        yield instr.src
        yield IReg(instr.dest.tape, instr.dest.ireg)
        yield IReg(instr.src.tape, instr.src.ireg)
    elif isinstance(instr, RelBranch):
        yield from instr.args
    elif isinstance(instr, IndexBranch):
        yield instr.left
        yield instr.right
    elif isinstance(instr, (IndexSetOne, IndexIncr)):
        yield instr.reg
    elif isinstance(instr, OracleBranch):
        yield IReg(instr.tape, 1)
    elif isinstance(instr, NuAssign):
        yield instr.dest
        yield IReg(instr.query_tape, 1)


# ---------------------------------------------------------------------------
# Programs and machine descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Program:
    """A labelled instruction sequence.  Label L is ``instructions[L-1]``;
    a well-formed program ends with the stop instruction at the last label."""

    instructions: tuple[Instruction, ...]

    @property
    def last_label(self) -> Label:
        return len(self.instructions)

    def instruction(self, label: Label) -> Instruction:
        return self.instructions[label - 1]

    def __len__(self) -> int:
        return len(self.instructions)

    def labelled(self) -> Iterator[tuple[Label, Instruction]]:
        return enumerate(self.instructions, start=1)


@dataclass(frozen=True)
class Deterministic:
    pass


@dataclass(frozen=True)
class ND:
    pass


@dataclass(frozen=True)
class NuOracle:
    oracle: Any


@dataclass(frozen=True)
class OracleQuery:
    oracle: Any


MachineKind = Union[Deterministic, ND, NuOracle, OracleQuery]


def allowed_instruction_types(kind: MachineKind) -> frozenset[int]:
    base = frozenset(range(1, 9))
    if isinstance(kind, OracleQuery):
        return base | {9}
    if isinstance(kind, NuOracle):
        return base | {10}
    return base


@dataclass(frozen=True)
class Budget:
    """Finite bounds for otherwise unbounded searches.

    max_steps caps a single run, max_dovetail_s caps the fair search
    counter of choice-set evaluators, max_guess_index caps how far a
    universe enumeration is consulted, max_branch_width caps how many
    branches an exploration may schedule.
    """

    max_steps: int = 10_000
    max_dovetail_s: int = 1_000
    max_guess_index: int = 64
    max_branch_width: int = 10_000

    def __post_init__(self) -> None:
        for name in ("max_steps", "max_dovetail_s", "max_guess_index", "max_branch_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MachineSpec:
    """A machine: program, structure, kind, tape count, index-register block
    sizes per tape.

    ``index_register_counts`` may be omitted; the block size of each tape is
    then inferred as the largest index-register index the program mentions
    (at least 1, the register carrying the input length).
    """

    program: Program
    structure: Any
    kind: MachineKind = field(default_factory=Deterministic)
    tapes: int = 1
    index_register_counts: Optional[tuple[int, ...]] = None

    @property
    def kappa(self) -> tuple[int, ...]:
        if self.index_register_counts is not None:
            return self.index_register_counts
        return inferred_index_counts(self.program, self.tapes)


def inferred_index_counts(program: Program, tapes: int) -> tuple[int, ...]:
    counts = [1] * tapes
    for instr in program.instructions:
        for ref in referenced_registers(instr):
            if isinstance(ref, IReg) and 1 <= ref.tape <= tapes:
                counts[ref.tape - 1] = max(counts[ref.tape - 1], ref.index)
    return tuple(counts)


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


class Tape:
    """A finitely-supported total map from positive cell indices to values.

    Cells not in the support read as ``default``.  Instances are immutable;
    the support never stores a cell whose value equals the default, so
    equality and hashing are canonical.
    """

    __slots__ = ("cells", "default", "_hash")

    def __init__(self, cells: dict[int, Value], default: Value, _normalized: bool = False):
        if not _normalized:
            cells = {i: v for i, v in cells.items() if v != default}
        self.cells = cells
        self.default = default
        self._hash: Optional[int] = None

    def read(self, index: int) -> Value:
        return self.cells.get(index, self.default)

    def support(self) -> dict[int, Value]:
        return dict(self.cells)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Tape)
            and self.default == other.default
            and self.cells == other.cells
        )

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.default, frozenset(self.cells.items())))
        return self._hash

    def __repr__(self) -> str:
        shown = ", ".join(f"{i}:{v}" for i, v in sorted(self.cells.items()))
        return f"Tape({{{shown}}}, default={self.default!r})"


@dataclass(frozen=True)
class Configuration:
    """Total machine state: instruction label, per-tape index-register
    vectors, per-tape Z-register tapes."""

    label: Label
    index_regs: tuple[tuple[int, ...], ...]
    tapes: tuple[Tape, ...]

    def index(self, tape: int, reg: int) -> int:
        return self.index_regs[tape - 1][reg - 1]

    def cell(self, tape: int, index: int) -> Value:
        return self.tapes[tape - 1].read(index)

    def prefix(self, tape: int) -> tuple[Value, ...]:
        """The tuple (Z[t,1], ..., Z[t, c(I[t,1])]) used by oracle queries."""
        n = self.index(tape, 1)
        t = self.tapes[tape - 1]
        return tuple(t.read(i) for i in range(1, n + 1))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    label: Optional[Label]
    message: str

    def __str__(self) -> str:
        where = f" at {self.label}" if self.label is not None else ""
        return f"{self.code}{where}: {self.message}"


def validate_program(program: Program, sig: Signature, spec: MachineSpec) -> list[Diagnostic]:
    """Check every program and machine invariant; an empty list means valid.

    Diagnostics carry the offending label and the violated rule.  The checks
    cover program shape (stop last, no interior stop, all branch targets in
    range), symbol indices and arities against the signature, tape indices
    against the machine's tape count, index-register indices against the
    declared block sizes, and instruction kinds against the machine kind.
    """
    out: list[Diagnostic] = []
    n = len(program.instructions)
    if n == 0:
        return [Diagnostic("EmptyProgram", None, "program has no instructions")]
    if not isinstance(program.instructions[-1], Stop):
        out.append(Diagnostic("MissingStop", n, "last instruction must be stop"))
    for label, instr in program.labelled():
        if isinstance(instr, Stop) and label != n:
            out.append(Diagnostic("InteriorStop", label, "stop before the last label"))
        for target in branch_targets(instr):
            if not 1 <= target <= n:
                out.append(
                    Diagnostic("BadLabel", label, f"goto target {target} outside 1..{n}")
                )
        out.extend(_check_symbols(label, instr, sig))
        out.extend(_check_registers(label, instr, spec))
        itype = instruction_type(instr)
        if itype not in allowed_instruction_types(spec.kind):
            out.append(
                Diagnostic(
                    "KindMismatch",
                    label,
                    f"type-{itype} instruction not allowed for {type(spec.kind).__name__} machines",
                )
            )
    return out


def _check_symbols(label: Label, instr: Instruction, sig: Signature) -> list[Diagnostic]:
    out = []
    if isinstance(instr, Compute):
        if not 1 <= instr.fn <= len(sig.function_arities):
            out.append(Diagnostic("UnknownSymbol", label, f"no function f{instr.fn}"))
        elif len(instr.args) != sig.function_arities[instr.fn - 1]:
            out.append(
                Diagnostic(
                    "ArityMismatch",
                    label,
                    f"f{instr.fn} expects {sig.function_arities[instr.fn - 1]} arguments, got {len(instr.args)}",
                )
            )
    elif isinstance(instr, SetConst):
        if not 1 <= instr.const <= sig.constant_count:
            out.append(Diagnostic("UnknownSymbol", label, f"no constant c{instr.const}"))
    elif isinstance(instr, RelBranch):
        if not 1 <= instr.rel <= len(sig.relation_arities):
            out.append(Diagnostic("UnknownSymbol", label, f"no relation r{instr.rel}"))
        elif len(instr.args) != sig.relation_arities[instr.rel - 1]:
            out.append(
                Diagnostic(
                    "ArityMismatch",
                    label,
                    f"r{instr.rel} expects {sig.relation_arities[instr.rel - 1]} arguments, got {len(instr.args)}",
                )
            )
    return out


def _check_registers(label: Label, instr: Instruction, spec: MachineSpec) -> list[Diagnostic]:
    out = []
    kappa = spec.kappa
    for ref in referenced_registers(instr):
        tape = ref.tape
        if not 1 <= tape <= spec.tapes:
            out.append(Diagnostic("BadTape", label, f"tape {tape} outside 1..{spec.tapes}"))
            continue
        if isinstance(ref, IReg) and ref.index > kappa[tape - 1]:
            out.append(
                Diagnostic(
                    "BadIndexRegister",
                    label,
                    f"I{tape}.{ref.index} exceeds the tape's {kappa[tape - 1]} index registers",
                )
            )
        if isinstance(ref, (ZDirect,)) and ref.index < 1:
            out.append(Diagnostic("BadRegister", label, "Z index must be >= 1"))
        if isinstance(ref, ZIndirect) and ref.ireg > kappa[tape - 1]:
            out.append(
                Diagnostic(
                    "BadIndexRegister",
                    label,
                    f"I{tape}.{ref.ireg} exceeds the tape's {kappa[tape - 1]} index registers",
                )
            )
    return out


# ---------------------------------------------------------------------------
# Input and output procedures
# ---------------------------------------------------------------------------


def input_config(spec: MachineSpec, input: Sequence[Value]) -> Configuration:
    """Initial configuration for an input tuple.

    The first tape holds the input, every further cell (and every cell of
    every other tape) reads as the last input component.  I[1,1] holds the
    input length, every other index register holds 1.
    """
    xs = tuple(input)
    if not xs:
        raise EmptyInput("input tuple must be nonempty")
    structure = spec.structure
    if structure is not None:
        for x in xs:
            if not structure.contains(x):
                raise UnknownSymbol(f"input value {x!r} is not in the universe")
    default = xs[-1]
    kappa = spec.kappa
    index_regs = tuple(
        tuple(len(xs) if (t == 0 and k == 0) else 1 for k in range(kappa[t]))
        for t in range(spec.tapes)
    )
    first = Tape({i + 1: x for i, x in enumerate(xs)}, default)
    rest = tuple(Tape({}, default) for _ in range(spec.tapes - 1))
    return Configuration(label=1, index_regs=index_regs, tapes=(first,) + rest)


def nd_input_config(
    spec: MachineSpec, input: Sequence[Value], guesses: Sequence[Value]
) -> Configuration:
    """Initial configuration of a nondeterministic machine for one choice of
    guesses: the guess tuple sits on tape 1 directly after the input, the
    default fill stays the last *input* component, and I[1,1] still holds the
    input length."""
    if not isinstance(spec.kind, ND):
        raise KindMismatch("nd_input_config requires an ND machine")
    base = input_config(spec, input)
    ys = tuple(guesses)
    structure = spec.structure
    if structure is not None:
        for y in ys:
            if not structure.contains(y):
                raise UnknownSymbol(f"guess value {y!r} is not in the universe")
    if not ys:
        return base
    n = len(tuple(input))
    first = base.tapes[0]
    cells = first.support()
    for j, y in enumerate(ys):
        cells[n + 1 + j] = y
    return Configuration(
        label=base.label,
        index_regs=base.index_regs,
        tapes=(Tape(cells, first.default),) + base.tapes[1:],
    )


def output_of(config: Configuration) -> tuple[Value, ...]:
    """The output tuple of a configuration: the first c(I[1,1]) cells of the
    first tape.  Defined for any configuration; meaningful once the machine
    has stopped."""
    return config.prefix(1)
