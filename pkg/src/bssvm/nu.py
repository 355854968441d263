"""Choice-set evaluation for the multi-valued search operator.

For an oracle set Q and a query prefix z, the operator's choice set is every
value y1 that begins some extension (z . y1, ..., ym) lying in Q.  How much of
that set is computable depends on how Q is given; this module implements one
evaluation strategy per oracle representation:

* an explicit finite tuple table is evaluated exactly (emptiness certified);
* a fixed-arity decider is evaluated by enumerating extension tuples of the
  one matching length and running the decider on each;
* a plain decider is evaluated by enumerating extension tuples of every
  bounded length;
* a semi-decider is evaluated by the fair dovetailing search that interleaves
  extension-tuple rank and step budget through a pairing function, and can
  never certify emptiness;
* the full-universe oracle makes every universe element a candidate.

There is also the identity-delimited variant for structures with an identity
relation, where a single guess tuple carries payload values at odd positions
and run-length delimiters at even positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence

from bssvm import vm
from bssvm.core import (
    Budget,
    EvaluatorCannotCertify,
    IdentityUnavailable,
    MachineSpec,
    NoEnumerator,
    Value,
)
from bssvm.structures import StructureDef, constant, enumerate_universe, ABSENT


# ---------------------------------------------------------------------------
# Pairing
# ---------------------------------------------------------------------------
#
# The encode direction is the classical diagonal pairing written as
# s = ((m + s0)^2 + 3*s0 + m) / 2, i.e. triangle(m + s0) + s0.  Decoding
# inverts the triangle number.


def cantor_encode(m: int, s0: int) -> int:
    """Encode a pair of nonnegative integers into one; exact and bijective."""
    if m < 0 or s0 < 0:
        raise ValueError("pairing is defined on nonnegative integers")
    return ((m + s0) * (m + s0) + 3 * s0 + m) // 2


def cantor_decode(s: int) -> tuple[int, int]:
    """The unique (m, s0) with cantor_encode(m, s0) == s."""
    if s < 0:
        raise ValueError("pairing is defined on nonnegative integers")
    k = (math.isqrt(8 * s + 1) - 1) // 2  # largest k with k(k+1)/2 <= s
    s0 = s - k * (k + 1) // 2
    return k - s0, s0


def cantor_decode_plus(s: int) -> tuple[int, int]:
    """Decode, but map any pair with a zero component to (1, 1).

    This is the fallback rule the fair search uses so that every iteration
    tries at least one guess and one step.
    """
    m, s0 = cantor_decode(s)
    if m == 0 or s0 == 0:
        return 1, 1
    return m, s0


# ---------------------------------------------------------------------------
# Oracle representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExplicitFiniteSet:
    """Q as a finite set of tuples."""

    tuples: frozenset[tuple[Value, ...]]

    @property
    def max_arity(self) -> int:
        return max((len(t) for t in self.tuples), default=0)


@dataclass(frozen=True)
class FixedArityDecider:
    """Q subset of U^n_q, decided by a machine computing its characteristic
    function (first output cell c1 for members, c2 otherwise)."""

    machine: MachineSpec
    n_q: int


@dataclass(frozen=True)
class Decider:
    """Q of unbounded arity, decided by a characteristic-function machine."""

    machine: MachineSpec


@dataclass(frozen=True)
class SemiDecider:
    """Q given as the halting set of a machine: halting confirms membership,
    non-membership is never confirmed."""

    machine: MachineSpec


@dataclass(frozen=True)
class FullUniverse:
    """Q = every finite tuple over the universe."""


OracleSpec = Any  # one of the five classes above


@dataclass(frozen=True)
class NuWitness:
    """Why a candidate was emitted: the extension tuple used, the dovetail
    counter that scheduled it, and the machine steps the certificate took."""

    guesses: tuple[Value, ...]
    dovetail_s: Optional[int] = None
    steps: Optional[int] = None


# ---------------------------------------------------------------------------
# Evaluation strategies
# ---------------------------------------------------------------------------


def nu_explicit(q: ExplicitFiniteSet, prefix: Sequence[Value]) -> set[Value]:
    """The exact choice set of an explicit finite oracle."""
    z = tuple(prefix)
    n = len(z)
    return {t[n] for t in q.tuples if len(t) > n and t[:n] == z}


def nu_semidecider_stream(
    q: SemiDecider,
    prefix: Sequence[Value],
    guesses: Any,
    budget: Budget,
) -> Iterator[tuple[Value, NuWitness]]:
    """Fair search for candidates certified by a semi-decider.

    For s = 1, 2, ... decode (m, s0); interpret m as the 1-based rank of an
    extension tuple in the guess source's canonical order and run the
    semi-decider for s0 steps on (prefix . tuple).  Reaching its stop label
    in time emits the tuple's first component.  Each distinct value is
    emitted once, with the witness that found it first.  The stream never
    certifies emptiness: an exhausted budget means only "not found yet".
    """
    z = tuple(prefix)
    structure = q.machine.structure
    tuples = [t for t in guesses.iter_tuples(structure) if t]
    seen: set[Value] = set()
    for s in range(1, budget.max_dovetail_s + 1):
        m, s0 = cantor_decode_plus(s)
        if m > len(tuples):
            continue
        ext = tuples[m - 1]
        if ext[0] in seen:
            continue
        # max_steps = s0 + 1: reaching the stop label after j instruction
        # executions needs s0 >= j, and the stop itself costs one step.
        result = vm.run(q.machine, z + ext, Budget(max_steps=s0 + 1))
        if result.halted:
            seen.add(ext[0])
            yield ext[0], NuWitness(ext, dovetail_s=s, steps=result.status.steps)


def _decider_accepts(
    machine: MachineSpec, input: Sequence[Value], budget: Budget
) -> bool:
    result = vm.run(machine, input, Budget(max_steps=budget.max_steps))
    if not result.halted:
        raise EvaluatorCannotCertify(
            "decider did not halt within budget; cannot certify the query"
        )
    out = result.status.output
    c1 = constant(machine.structure, 1)
    return bool(out) and out[0] == c1


def nu_fixed_arity(
    q: FixedArityDecider,
    prefix: Sequence[Value],
    guesses: Any,
    budget: Budget,
) -> tuple[list[tuple[Value, NuWitness]], bool, bool]:
    """Choice set under a fixed-arity decidable oracle.

    Returns (emissions, certified_empty, exhausted).  A prefix at least as
    long as the oracle's arity has a certified-empty choice set, because a
    candidate always adds one more component.  Otherwise only extensions of
    the single length n_q - |prefix| can lie in Q; each is tested with the
    decider.
    """
    z = tuple(prefix)
    n0 = len(z)
    if n0 >= q.n_q:
        return [], True, True
    m = q.n_q - n0
    structure = q.machine.structure
    emissions: list[tuple[Value, NuWitness]] = []
    seen: set[Value] = set()
    for ext in guesses.iter_tuples(structure):
        if len(ext) != m:
            continue
        if ext[0] in seen:
            continue
        if _decider_accepts(q.machine, z + ext, budget):
            seen.add(ext[0])
            emissions.append((ext[0], NuWitness(ext)))
    exhausted = guesses.covers_all_tuples_of_len(structure, m)
    return emissions, (exhausted and not emissions), exhausted


def nu_decider_unbounded(
    q: Decider,
    prefix: Sequence[Value],
    guesses: Any,
    budget: Budget,
) -> list[tuple[Value, NuWitness]]:
    """Choice set under an unbounded-arity decidable oracle: test every
    extension tuple the guess source offers.  Emptiness is never certified,
    since a witness might be longer than any enumerated extension."""
    z = tuple(prefix)
    structure = q.machine.structure
    emissions: list[tuple[Value, NuWitness]] = []
    seen: set[Value] = set()
    for ext in guesses.iter_tuples(structure):
        if not ext or ext[0] in seen:
            continue
        if _decider_accepts(q.machine, z + ext, budget):
            seen.add(ext[0])
            emissions.append((ext[0], NuWitness(ext)))
    return emissions


def nu_identity_runlength(
    q: SemiDecider,
    prefix: Sequence[Value],
    paired_guesses: Any,
    budget: Budget,
) -> Iterator[tuple[Value, NuWitness]]:
    """The identity-delimited evaluation for structures with identity.

    One guess tuple carries the payload at odd positions and run-length
    delimiters at even positions: the payload length is the least m whose
    delimiter differs from the previous even value, seeded with the last
    prefix component.  The semi-decider then runs once on the delimited
    payload; a guess tuple whose delimiters never change selects no payload
    and emits nothing.
    """
    structure = q.machine.structure
    if not structure.identity_available:
        raise IdentityUnavailable(
            f"structure {structure.name} exposes no identity relation"
        )
    z = tuple(prefix)
    seen: set[Value] = set()
    for tup in paired_guesses.iter_tuples(structure):
        payload = _delimited_payload(z, tup)
        if payload is None or not payload or payload[0] in seen:
            continue
        result = vm.run(q.machine, z + payload, Budget(max_steps=budget.max_steps))
        if result.halted:
            seen.add(payload[0])
            yield payload[0], NuWitness(tup, steps=result.status.steps)


def _delimited_payload(
    prefix: tuple[Value, ...], tup: tuple[Value, ...]
) -> Optional[tuple[Value, ...]]:
    previous = prefix[-1]
    m = 1
    while True:
        delim_pos = 2 * m  # 1-based position within the guess tuple
        if delim_pos > len(tup):
            return None  # delimiter never changes within this tuple
        if tup[delim_pos - 1] != previous:
            break
        previous = tup[delim_pos - 1]
        m += 1
    return tup[0 : 2 * m - 1 : 2]


def nu_full_universe(
    prefix: Sequence[Value],
    guesses: Any,
    structure: StructureDef,
    budget: Budget,
) -> tuple[list[tuple[Value, NuWitness]], bool]:
    """Candidates under the full-universe oracle: every universe element.

    Returns (emissions, exhausted).  With an enumerator-backed source the
    stream follows enumeration order and is exhausted exactly when a finite
    universe was listed completely; an explicit tuple list contributes its
    tuples' first components in order and is never known exhausted.
    """
    emissions: list[tuple[Value, NuWitness]] = []
    seen: set[Value] = set()
    if guesses is None:
        values, exhausted = _enumerator_prefix(structure, budget.max_guess_index)
        for k, v in enumerate(values):
            if v not in seen:
                seen.add(v)
                emissions.append((v, NuWitness((v,), dovetail_s=k)))
        return emissions, exhausted
    if hasattr(guesses, "value_stream"):
        values, exhausted = guesses.value_stream(structure)
        for k, v in enumerate(values):
            if v not in seen:
                seen.add(v)
                emissions.append((v, NuWitness((v,), dovetail_s=k)))
        return emissions, exhausted
    for tup in guesses.iter_tuples(structure):
        if tup and tup[0] not in seen:
            seen.add(tup[0])
            emissions.append((tup[0], NuWitness(tup)))
    return emissions, False


def _enumerator_prefix(structure: StructureDef, bound: int) -> tuple[list[Value], bool]:
    if structure.enumerator is None:
        raise NoEnumerator(f"structure {structure.name} has no enumerator")
    values: list[Value] = []
    for k in range(bound):
        v = enumerate_universe(structure, k)
        if v is ABSENT:
            return values, True
        values.append(v)
    return values, enumerate_universe(structure, bound) is ABSENT


# ---------------------------------------------------------------------------
# Evaluator objects for the VM
# ---------------------------------------------------------------------------


def _canonical_value_order(structure: StructureDef, values: set[Value]) -> list[Value]:
    if structure.enumerator is not None:
        index: dict[Value, int] = {}
        k = 0
        remaining = set(values)
        while remaining and k < 1_000_000:
            v = enumerate_universe(structure, k)
            if v is ABSENT:
                break
            if v in remaining:
                index[v] = k
                remaining.remove(v)
            k += 1
        if not remaining:
            return sorted(values, key=lambda v: index[v])
    try:
        return sorted(values)
    except TypeError:
        return sorted(values, key=repr)


class _Evaluator:
    """Budgeted :class:`bssvm.vm.NuEvaluator` for one oracle.

    Candidate sets are memoized per prefix; with fixed bounds the evaluation
    is pure, so the cache never changes an answer.
    """

    def __init__(self, oracle: OracleSpec, structure: StructureDef, guesses: Any, budget: Budget):
        self.oracle = oracle
        self.structure = structure
        self.guesses = guesses
        self.budget = budget
        self._cache: dict[tuple[Value, ...], vm.NuChoices] = {}

    # -- membership (type 9) -------------------------------------------------

    def member(self, query: tuple[Value, ...]) -> bool:
        q = self.oracle
        if isinstance(q, ExplicitFiniteSet):
            return tuple(query) in q.tuples
        if isinstance(q, FullUniverse):
            return True
        if isinstance(q, FixedArityDecider):
            if len(query) != q.n_q:
                return False
            return _decider_accepts(q.machine, query, self.budget)
        if isinstance(q, Decider):
            return _decider_accepts(q.machine, query, self.budget)
        if isinstance(q, SemiDecider):
            result = vm.run(
                q.machine, query, Budget(max_steps=self.budget.max_steps), detect_cycles=True
            )
            if result.halted:
                return True
            if isinstance(result.status, vm.LoopCertified):
                return False
            raise EvaluatorCannotCertify(
                "semi-decider exhausted its budget; membership unknown"
            )
        raise TypeError(f"unknown oracle {q!r}")

    # -- choice sets (type 10) ------------------------------------------------

    def candidates(self, prefix: tuple[Value, ...]) -> vm.NuChoices:
        key = tuple(prefix)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        choices = self._candidates(key)
        self._cache[key] = choices
        return choices

    def _candidates(self, prefix: tuple[Value, ...]) -> vm.NuChoices:
        q = self.oracle
        if isinstance(q, ExplicitFiniteSet):
            values = nu_explicit(q, prefix)
            ordered = _canonical_value_order(self.structure, values)
            return vm.NuChoices(
                values=tuple((v, NuWitness((v,))) for v in ordered),
                certified_empty=not values,
                exhausted=True,
            )
        if isinstance(q, FullUniverse):
            emissions, exhausted = nu_full_universe(
                prefix, self.guesses, self.structure, self.budget
            )
            return vm.NuChoices(tuple(emissions), certified_empty=False, exhausted=exhausted)
        if isinstance(q, FixedArityDecider):
            emissions, certified, exhausted = nu_fixed_arity(
                q, prefix, self._guess_source_for(q), self.budget
            )
            return vm.NuChoices(tuple(emissions), certified, exhausted)
        if isinstance(q, Decider):
            emissions = nu_decider_unbounded(q, prefix, self._guess_source_for(q), self.budget)
            return vm.NuChoices(tuple(emissions), certified_empty=False, exhausted=False)
        if isinstance(q, SemiDecider):
            emissions = tuple(
                nu_semidecider_stream(q, prefix, self._guess_source_for(q), self.budget)
            )
            return vm.NuChoices(emissions, certified_empty=False, exhausted=False)
        raise TypeError(f"unknown oracle {q!r}")

    def _guess_source_for(self, q: OracleSpec) -> Any:
        if self.guesses is not None:
            return self.guesses
        from bssvm.nondet import EnumeratorDovetail

        max_len = q.n_q if isinstance(q, FixedArityDecider) else 4
        return EnumeratorDovetail(max_len=max_len, max_index=self.budget.max_guess_index)


def make_evaluator(
    oracle: OracleSpec,
    structure: StructureDef,
    guesses: Any = None,
    budget: Budget = Budget(),
) -> _Evaluator:
    """Build the evaluator the VM consults for type-9/10 instructions."""
    return _Evaluator(oracle, structure, guesses, budget)
