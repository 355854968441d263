"""Nondeterministic semantics: guess enumeration, branch scheduling, and the
budgeted result-set function.

A nondeterministic machine's result set on an input is the set of outputs
over all halting branches; for machines with guessed inputs a branch is one
guess tuple, for machines with a choice-set operator a branch is one path
through the candidate tree.  Any finite harness under-approximates the true
result set; the ``complete`` flag records whether every scheduled branch was
resolved and the searched guess space was exhausted within its stated bounds.

Branch order is canonical everywhere (guess tuples by length then
enumerator-index lexicographically, candidate values in evaluator order), so
identical bounds always produce identical result sets regardless of any
internal parallelism.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence

from bssvm import nu as _nu
from bssvm import vm
from bssvm.core import (
    Budget,
    Configuration,
    Deterministic,
    KindMismatch,
    MachineSpec,
    ND,
    NoEnumerator,
    NuOracle,
    OracleQuery,
    Value,
    input_config,
    nd_input_config,
)
from bssvm.structures import ABSENT, StructureDef, enumerate_universe


# ---------------------------------------------------------------------------
# Guess sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExplicitTuples:
    """A fixed, ordered list of guess tuples."""

    tuples: tuple[tuple[Value, ...], ...]

    def iter_tuples(self, structure: StructureDef) -> Iterator[tuple[Value, ...]]:
        for t in self.tuples:
            for v in t:
                if not structure.contains(v):
                    raise ValueError(f"guess value {v!r} is not in the universe")
        return iter(self.tuples)

    def covers_all_tuples_of_len(self, structure: StructureDef, m: int) -> bool:
        return False

    def value_stream(self, structure: StructureDef) -> tuple[list[Value], bool]:
        seen: set[Value] = set()
        out = []
        for t in self.tuples:
            if t and t[0] not in seen:
                seen.add(t[0])
                out.append(t[0])
        return out, False


@dataclass(frozen=True)
class EnumeratorDovetail:
    """Every tuple over the structure's enumerator up to the stated bounds:
    the empty tuple first, then lengths 1..max_len, tuples of one length in
    lexicographic order of enumerator indices 0..max_index-1."""

    max_len: int
    max_index: int

    def _values(self, structure: StructureDef) -> tuple[list[Value], bool]:
        if structure.enumerator is None:
            raise NoEnumerator(f"structure {structure.name} has no enumerator")
        values = []
        for k in range(self.max_index):
            v = enumerate_universe(structure, k)
            if v is ABSENT:
                return values, True
            values.append(v)
        return values, enumerate_universe(structure, self.max_index) is ABSENT

    def iter_tuples(self, structure: StructureDef) -> Iterator[tuple[Value, ...]]:
        values, _ = self._values(structure)
        yield ()
        for length in range(1, self.max_len + 1):
            yield from itertools.product(values, repeat=length)

    def covers_all_tuples_of_len(self, structure: StructureDef, m: int) -> bool:
        if m > self.max_len:
            return False
        _, exhausted = self._values(structure)
        return exhausted

    def value_stream(self, structure: StructureDef) -> tuple[list[Value], bool]:
        return self._values(structure)


GuessSource = Any  # ExplicitTuples | EnumeratorDovetail


# ---------------------------------------------------------------------------
# Result sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResultSet:
    """Outputs over all halting branches, with per-branch status counts.

    ``complete`` is claimed only when every scheduled branch halted or was
    certified looping and the guess space was exhausted within its bounds;
    a True flag therefore means the output set is exact relative to those
    bounds.
    """

    outputs: frozenset[tuple[Value, ...]]
    halted: int
    diverged: int
    looped: int
    branches: int
    complete: bool

    def sorted_outputs(self) -> list[tuple[Value, ...]]:
        try:
            return sorted(self.outputs)
        except TypeError:
            return sorted(self.outputs, key=repr)


class Verdict(enum.Enum):
    ACCEPTED = "accepted"
    UNKNOWN = "unknown"


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def run_with_guesses(
    spec: MachineSpec,
    input: Sequence[Value],
    guesses: Sequence[Value],
    budget: Budget = Budget(),
    *,
    detect_cycles: bool = False,
    capture_trace: bool = False,
) -> vm.RunResult:
    """Run a nondeterministic machine on one concrete choice of guesses.

    With the guesses fixed the machine is fully deterministic, so this is an
    ordinary run from the guessed initial configuration.
    """
    if not isinstance(spec.kind, ND):
        raise KindMismatch("run_with_guesses requires an ND machine")
    cfg = nd_input_config(spec, input, guesses)
    return vm.run(
        spec,
        input,
        budget,
        initial=cfg,
        detect_cycles=detect_cycles,
        capture_trace=capture_trace,
    )


def enumerate_results(
    spec: MachineSpec,
    input: Sequence[Value],
    guess_source: GuessSource,
    budget: Budget = Budget(),
) -> ResultSet:
    """Collect the outputs of every halting branch within the budget.

    For guessed-input machines the branches are the guess tuples of the
    source in canonical order.  Scheduling first mirrors the fair search:
    pairs (tuple rank, step slice) are visited through the same pairing
    function the choice-set dovetailer uses; branches still unresolved then
    get one full-budget run each, so a finite guess space is always swept
    completely.  For choice-operator machines the branches are the paths of
    the candidate tree, explored in candidate order.
    """
    kind = spec.kind
    if isinstance(kind, ND):
        return _enumerate_nd(spec, input, guess_source, budget)
    if isinstance(kind, NuOracle):
        return _enumerate_tree(spec, input, guess_source, budget)
    if isinstance(kind, (Deterministic, OracleQuery)):
        return _enumerate_single(spec, input, guess_source, budget)
    raise KindMismatch(f"cannot enumerate results for {type(kind).__name__}")


def _enumerate_single(
    spec: MachineSpec, input: Sequence[Value], guess_source: GuessSource, budget: Budget
) -> ResultSet:
    nu_eval = None
    if isinstance(spec.kind, OracleQuery):
        nu_eval = _nu.make_evaluator(spec.kind.oracle, spec.structure, guess_source, budget)
    result = vm.run(spec, input, budget, nu_eval=nu_eval, detect_cycles=True)
    status = result.status
    return ResultSet(
        outputs=frozenset({status.output} if result.halted else set()),
        halted=1 if result.halted else 0,
        diverged=1 if isinstance(status, vm.Diverged) else 0,
        looped=1 if isinstance(status, vm.LoopCertified) else 0,
        branches=1,
        complete=not isinstance(status, vm.Diverged),
    )


def _enumerate_nd(
    spec: MachineSpec, input: Sequence[Value], guess_source: GuessSource, budget: Budget
) -> ResultSet:
    tuples = list(guess_source.iter_tuples(spec.structure))
    outputs: set[tuple[Value, ...]] = set()
    resolved: dict[int, str] = {}

    def attempt(rank: int, max_steps: int) -> None:
        if rank in resolved:
            return
        result = run_with_guesses(
            spec, input, tuples[rank], Budget(max_steps=max_steps), detect_cycles=True
        )
        status = result.status
        if isinstance(status, vm.Halted):
            resolved[rank] = "halted"
            outputs.add(status.output)
        elif isinstance(status, vm.LoopCertified):
            resolved[rank] = "looped"

    # Fair phase: ranks and step slices interleaved through the pairing.
    for s in range(1, budget.max_dovetail_s + 1):
        m, s0 = _nu.cantor_decode_plus(s)
        if m <= len(tuples):
            attempt(m - 1, min(s0, budget.max_steps))
    # Sweep phase: every branch gets one run at the full step budget.
    for rank in range(len(tuples)):
        attempt(rank, budget.max_steps)

    halted = sum(1 for v in resolved.values() if v == "halted")
    looped = sum(1 for v in resolved.values() if v == "looped")
    diverged = len(tuples) - len(resolved)
    return ResultSet(
        outputs=frozenset(outputs),
        halted=halted,
        diverged=diverged,
        looped=looped,
        branches=len(tuples),
        complete=diverged == 0,
    )


def _enumerate_tree(
    spec: MachineSpec, input: Sequence[Value], guess_source: GuessSource, budget: Budget
) -> ResultSet:
    evaluator = _nu.make_evaluator(spec.kind.oracle, spec.structure, guess_source, budget)
    outputs: set[tuple[Value, ...]] = set()
    halted = diverged = looped = 0
    scheduled = 1
    every_choice_exhausted = True
    dropped = False

    worklist: list[tuple[Configuration, int]] = [(input_config(spec, input), 0)]
    while worklist:
        cfg, used = worklist.pop(0)
        outcome = vm.drive(
            spec,
            cfg,
            budget,
            evaluator,
            steps_used=used,
            branch_policy="suspend",
            detect_cycles=True,
        )
        if isinstance(outcome, vm.Halted):
            halted += 1
            outputs.add(outcome.output)
        elif isinstance(outcome, vm.LoopCertified):
            looped += 1
        elif isinstance(outcome, vm.Diverged):
            diverged += 1
        else:  # Branched
            if not outcome.cause.exhausted:
                every_choice_exhausted = False
            for child in outcome.configs:
                if scheduled >= budget.max_branch_width:
                    dropped = True
                    break
                scheduled += 1
                worklist.append((child, outcome.steps))
    return ResultSet(
        outputs=frozenset(outputs),
        halted=halted,
        diverged=diverged,
        looped=looped,
        branches=scheduled,
        complete=diverged == 0 and not dropped and every_choice_exhausted,
    )


def semidecides(
    spec: MachineSpec,
    input: Sequence[Value],
    budget: Budget = Budget(),
    guess_source: Optional[GuessSource] = None,
) -> Verdict:
    """ACCEPTED when some branch halts within the budget, UNKNOWN otherwise.

    Semi-decidability confirms membership only, so there is no "rejected":
    an exhausted budget says nothing about longer computations.
    """
    if guess_source is None:
        guess_source = EnumeratorDovetail(max_len=4, max_index=budget.max_guess_index)
    results = enumerate_results(spec, input, guess_source, budget)
    return Verdict.ACCEPTED if results.halted > 0 else Verdict.UNKNOWN
