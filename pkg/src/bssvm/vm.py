"""Small-step operational semantics for every instruction type.

The public entry points (:func:`step`, :func:`run`, :func:`trace`) are pure:
they take an immutable configuration and return new immutable values.
Internally a run drives a mutable register file for speed and freezes it only
at observation points (branching, tracing, cycle checks).

Oracle-dependent instructions (types 9 and 10) consult an injected evaluator
object rather than the oracle itself, so the semantics stay independent of
how membership or choice sets are computed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Protocol, Sequence, Union

from bssvm.core import (
    Budget,
    Compute,
    Configuration,
    EvaluatorCannotCertify,
    IndexBranch,
    IndexIncr,
    IndexSetOne,
    IndirectCopy,
    Instruction,
    MachineSpec,
    NuAssign,
    OracleBranch,
    RelBranch,
    SetConst,
    Stop,
    Tape,
    Value,
    input_config,
    output_of,
)
from bssvm.structures import eval_function, eval_relation, constant


class NuEvaluator(Protocol):
    """What the semantics needs from an oracle: membership answers for
    type-9 queries and ordered choice-set candidates for type-10."""

    def member(self, query: tuple[Value, ...]) -> bool: ...

    def candidates(self, prefix: tuple[Value, ...]) -> "NuChoices": ...


@dataclass(frozen=True)
class NuChoices:
    """The evaluated choice set for one type-10 query.

    ``values`` is the ordered candidate list (with opaque witnesses);
    ``certified_empty`` means the evaluator proved the set empty, and
    ``exhausted`` means no candidate outside ``values`` exists.
    """

    values: tuple[tuple[Value, Any], ...]
    certified_empty: bool
    exhausted: bool


# ---------------------------------------------------------------------------
# Step outcomes and run results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Next:
    config: Configuration


@dataclass(frozen=True)
class Branch:
    """A type-10 instruction with a nonempty candidate set: one successor
    configuration per candidate, in candidate order."""

    configs: tuple[Configuration, ...]
    cause: NuChoices


@dataclass(frozen=True)
class AtStop:
    """The stop instruction: executing it leaves the configuration unchanged
    and the machine halts."""

    config: Configuration


@dataclass(frozen=True)
class SelfLoop:
    """A type-10 instruction whose choice set is certified empty: the
    transition maps the configuration to itself, forever."""

    config: Configuration


StepOutcome = Union[Next, Branch, AtStop, SelfLoop]


@dataclass(frozen=True)
class Halted:
    output: tuple[Value, ...]
    steps: int


@dataclass(frozen=True)
class Diverged:
    steps: int
    last: Configuration


@dataclass(frozen=True)
class LoopCertified:
    config: Configuration
    steps: int


RunStatus = Union[Halted, Diverged, LoopCertified]


@dataclass(frozen=True)
class RunResult:
    status: RunStatus
    trace: Optional[tuple[Configuration, ...]] = None

    @property
    def halted(self) -> bool:
        return isinstance(self.status, Halted)


# ---------------------------------------------------------------------------
# Mutable register file
# ---------------------------------------------------------------------------


class _State:
    __slots__ = ("label", "iregs", "cells", "defaults")

    def __init__(self, label, iregs, cells, defaults):
        self.label = label
        self.iregs = iregs  # list[list[int]] per tape
        self.cells = cells  # list[dict[int, Value]] per tape, normalized
        self.defaults = defaults  # list[Value] per tape

    @staticmethod
    def thaw(cfg: Configuration) -> "_State":
        return _State(
            cfg.label,
            [list(v) for v in cfg.index_regs],
            [t.support() for t in cfg.tapes],
            [t.default for t in cfg.tapes],
        )

    def freeze(self) -> Configuration:
        return Configuration(
            label=self.label,
            index_regs=tuple(tuple(v) for v in self.iregs),
            tapes=tuple(
                Tape(dict(c), d, _normalized=True)
                for c, d in zip(self.cells, self.defaults)
            ),
        )

    def read_cell(self, tape: int, index: int) -> Value:
        return self.cells[tape - 1].get(index, self.defaults[tape - 1])

    def write_cell(self, tape: int, index: int, value: Value) -> None:
        if value == self.defaults[tape - 1]:
            self.cells[tape - 1].pop(index, None)
        else:
            self.cells[tape - 1][index] = value

    def prefix(self, tape: int) -> tuple[Value, ...]:
        n = self.iregs[tape - 1][0]
        get = self.cells[tape - 1].get
        d = self.defaults[tape - 1]
        return tuple(get(i, d) for i in range(1, n + 1))


class _Signal(Exception):
    """Internal control-flow marker raised by :func:`_exec`."""

    def __init__(self, kind: str, payload: Any = None):
        self.kind = kind
        self.payload = payload


def _exec(state: _State, instr: Instruction, spec: MachineSpec, nu_eval) -> None:
    """Execute one non-stop instruction in place, advancing the label.

    Raises ``_Signal('branch', NuChoices)`` for a type-10 instruction with a
    nonempty candidate set and ``_Signal('selfloop')`` for a certified-empty
    one.
    """
    s = spec.structure
    t = type(instr)
    if t is IndexIncr:
        r = instr.reg
        state.iregs[r.tape - 1][r.index - 1] += 1
        state.label += 1
    elif t is IndexBranch:
        l, r = instr.left, instr.right
        same = (
            state.iregs[l.tape - 1][l.index - 1] == state.iregs[r.tape - 1][r.index - 1]
        )
        state.label = instr.then_label if same else instr.else_label
    elif t is IndexSetOne:
        r = instr.reg
        state.iregs[r.tape - 1][r.index - 1] = 1
        state.label += 1
    elif t is IndirectCopy:
        dest, src = instr.dest, instr.src
        src_index = state.iregs[src.tape - 1][src.ireg - 1]
        dest_index = state.iregs[dest.tape - 1][dest.ireg - 1]
        state.write_cell(dest.tape, dest_index, state.read_cell(src.tape, src_index))
        state.label += 1
    elif t is Compute:
        args = tuple(state.read_cell(a.tape, a.index) for a in instr.args)
        state.write_cell(instr.dest.tape, instr.dest.index, eval_function(s, instr.fn, args))
        state.label += 1
    elif t is SetConst:
        state.write_cell(instr.dest.tape, instr.dest.index, constant(s, instr.const))
        state.label += 1
    elif t is RelBranch:
        args = tuple(state.read_cell(a.tape, a.index) for a in instr.args)
        state.label = (
            instr.then_label if eval_relation(s, instr.rel, args) else instr.else_label
        )
    elif t is OracleBranch:
        if nu_eval is None:
            raise EvaluatorCannotCertify("type-9 instruction without an oracle evaluator")
        query = state.prefix(instr.tape)
        state.label = instr.then_label if nu_eval.member(query) else instr.else_label
    elif t is NuAssign:
        if nu_eval is None:
            raise EvaluatorCannotCertify("type-10 instruction without an oracle evaluator")
        choices = nu_eval.candidates(state.prefix(instr.query_tape))
        if choices.certified_empty:
            raise _Signal("selfloop")
        if not choices.values:
            raise EvaluatorCannotCertify(
                "empty candidate set that the evaluator cannot certify as empty"
            )
        raise _Signal("branch", choices)
    else:
        raise AssertionError(f"unhandled instruction {instr!r}")


def step(spec: MachineSpec, cfg: Configuration, nu_eval: Optional[NuEvaluator] = None) -> StepOutcome:
    """One transition from ``cfg``.

    Types 1..7 yield the unique next configuration; type 8 halts; type 9
    branches on oracle membership of the queried prefix; type 10 yields one
    successor per choice-set candidate, or a self-loop when the evaluator
    certifies the set empty.
    """
    instr = spec.program.instruction(cfg.label)
    if isinstance(instr, Stop):
        return AtStop(cfg)
    state = _State.thaw(cfg)
    try:
        _exec(state, instr, spec, nu_eval)
    except _Signal as sig:
        if sig.kind == "selfloop":
            return SelfLoop(cfg)
        choices: NuChoices = sig.payload
        dest = instr.dest
        children = []
        for value, _witness in choices.values:
            child = _State.thaw(cfg)
            child.write_cell(dest.tape, dest.index, value)
            child.label += 1
            children.append(child.freeze())
        return Branch(tuple(children), choices)
    return Next(state.freeze())


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Branched:
    """A driver stopped at a type-10 instruction it was not allowed to
    resolve: exploration continues from the children."""

    configs: tuple[Configuration, ...]
    cause: NuChoices
    steps: int


DriveOutcome = Union[Halted, Diverged, LoopCertified, Branched]


def drive(
    spec: MachineSpec,
    cfg: Configuration,
    budget: Budget,
    nu_eval: Optional[NuEvaluator] = None,
    *,
    steps_used: int = 0,
    branch_policy: str = "first-candidate",
    detect_cycles: bool = False,
    capture: Optional[list[Configuration]] = None,
) -> DriveOutcome:
    """Drive a configuration until it halts, exhausts the step budget, is
    caught looping, or (with ``branch_policy='suspend'``) reaches a branching
    instruction.

    Executing the stop instruction counts as one final step that leaves the
    configuration unchanged.  With ``detect_cycles`` every visited
    configuration is remembered and a repeat is reported as
    :class:`LoopCertified`.
    """
    state = _State.thaw(cfg)
    program = spec.program.instructions
    steps = steps_used
    seen: Optional[set[Configuration]] = set() if detect_cycles else None
    if capture is not None:
        capture.append(state.freeze())
    if seen is not None:
        seen.add(cfg)
    while True:
        instr = program[state.label - 1]
        if type(instr) is Stop:
            if steps >= budget.max_steps:
                return Diverged(steps, state.freeze())
            final = state.freeze()
            if capture is not None:
                capture.append(final)
            return Halted(final.prefix(1), steps + 1)
        if steps >= budget.max_steps:
            return Diverged(steps, state.freeze())
        try:
            _exec(state, instr, spec, nu_eval)
        except _Signal as sig:
            if sig.kind == "selfloop":
                return LoopCertified(state.freeze(), steps)
            choices: NuChoices = sig.payload
            frozen = state.freeze()
            children = []
            for value, _witness in choices.values:
                child = _State.thaw(frozen)
                child.write_cell(instr.dest.tape, instr.dest.index, value)
                child.label += 1
                children.append(child.freeze())
            if branch_policy == "first-candidate":
                state = _State.thaw(children[0])
                steps += 1
                if capture is not None:
                    capture.append(children[0])
                if seen is not None:
                    if children[0] in seen:
                        return LoopCertified(children[0], steps)
                    seen.add(children[0])
                continue
            return Branched(tuple(children), choices, steps + 1)
        except EvaluatorCannotCertify:
            return Diverged(steps, state.freeze())
        steps += 1
        if capture is not None or seen is not None:
            frozen = state.freeze()
            if capture is not None:
                capture.append(frozen)
            if seen is not None:
                if frozen in seen:
                    return LoopCertified(frozen, steps)
                seen.add(frozen)


def _default_evaluator(spec: MachineSpec, budget: Budget):
    from bssvm.core import NuOracle, OracleQuery
    from bssvm import nu as _nu

    if isinstance(spec.kind, (NuOracle, OracleQuery)):
        return _nu.make_evaluator(spec.kind.oracle, spec.structure, None, budget)
    return None


def run(
    spec: MachineSpec,
    input: Sequence[Value],
    budget: Budget = Budget(),
    nu_policy: str = "first-candidate",
    *,
    nu_eval: Optional[NuEvaluator] = None,
    initial: Optional[Configuration] = None,
    detect_cycles: bool = False,
    capture_trace: bool = False,
) -> RunResult:
    """Run a machine on an input tuple.

    Intended for deterministic machine kinds; a type-10 instruction is
    resolved by ``nu_policy`` (only ``first-candidate`` is defined), which
    keeps traces reproducible.  Use the nondet module to explore every
    branch.
    """
    if nu_policy != "first-candidate":
        raise ValueError(f"unknown nu_policy {nu_policy!r}")
    if nu_eval is None:
        nu_eval = _default_evaluator(spec, budget)
    cfg = initial if initial is not None else input_config(spec, input)
    capture: Optional[list[Configuration]] = [] if capture_trace else None
    outcome = drive(
        spec,
        cfg,
        budget,
        nu_eval,
        branch_policy="first-candidate",
        detect_cycles=detect_cycles,
        capture=capture,
    )
    assert not isinstance(outcome, Branched)
    return RunResult(outcome, tuple(capture) if capture is not None else None)


def trace(
    spec: MachineSpec,
    input: Sequence[Value],
    budget: Budget = Budget(),
    *,
    nu_eval: Optional[NuEvaluator] = None,
    initial: Optional[Configuration] = None,
) -> list[Configuration]:
    """The full configuration sequence of a run: the initial configuration
    followed by one configuration per executed step, the stop step included.
    Length is at most ``budget.max_steps + 1``."""
    result = run(
        spec,
        input,
        budget,
        nu_eval=nu_eval,
        initial=initial,
        capture_trace=True,
    )
    assert result.trace is not None
    return list(result.trace)
