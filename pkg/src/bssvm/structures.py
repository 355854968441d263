"""Pluggable first-order structures.

A structure supplies the constants, total functions, and relations that
instructions refer to by index, plus two optional capabilities: an identity
relation (needed by some transformations) and an injective enumeration of a
countable universe (needed to search guess spaces).  Structures are immutable
after construction and all evaluation is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Optional, Sequence

from bssvm.core import ArityMismatch, Signature, UnknownSymbol, Value

ABSENT = object()


@dataclass(frozen=True)
class StructureDef:
    """A first-order structure.

    ``functions`` and ``relations`` are Python callables over universe
    elements; they must be total on the represented universe.  ``enumerator``
    maps 0, 1, 2, ... injectively onto the universe (returning ``None`` once
    a finite universe is exhausted); structures without one cannot drive
    enumeration-based searches.  ``identity_relation`` names the relation
    index that decides equality, when the structure exposes one.
    """

    name: str
    signature: Signature
    constants: tuple[Value, ...]
    functions: tuple[Callable[..., Value], ...]
    relations: tuple[Callable[..., bool], ...]
    contains: Callable[[Value], bool]
    identity_relation: Optional[int] = None
    enumerator: Optional[Callable[[int], Optional[Value]]] = None
    parse_value: Optional[Callable[[str], Value]] = None
    format_value: Optional[Callable[[Value], str]] = None

    @property
    def identity_available(self) -> bool:
        return self.identity_relation is not None

    def __post_init__(self) -> None:
        sig = self.signature
        if len(self.constants) != sig.constant_count:
            raise ValueError("constant count does not match signature")
        if len(self.functions) != len(sig.function_arities):
            raise ValueError("function count does not match signature")
        if len(self.relations) != len(sig.relation_arities):
            raise ValueError("relation count does not match signature")


def eval_function(s: StructureDef, i: int, args: Sequence[Value]) -> Value:
    """Apply f_i to a tuple of universe elements, exactly."""
    if not 1 <= i <= len(s.functions):
        raise UnknownSymbol(f"structure {s.name} has no function f{i}")
    arity = s.signature.function_arities[i - 1]
    if len(args) != arity:
        raise ArityMismatch(f"f{i} expects {arity} arguments, got {len(args)}")
    return s.functions[i - 1](*args)


def eval_relation(s: StructureDef, i: int, args: Sequence[Value]) -> bool:
    if not 1 <= i <= len(s.relations):
        raise UnknownSymbol(f"structure {s.name} has no relation r{i}")
    arity = s.signature.relation_arities[i - 1]
    if len(args) != arity:
        raise ArityMismatch(f"r{i} expects {arity} arguments, got {len(args)}")
    return bool(s.relations[i - 1](*args))


def constant(s: StructureDef, i: int) -> Value:
    if not 1 <= i <= len(s.constants):
        raise UnknownSymbol(f"structure {s.name} has no constant c{i}")
    return s.constants[i - 1]


def enumerate_universe(s: StructureDef, k: int) -> Any:
    """The k-th universe element in the structure's canonical enumeration,
    or ``ABSENT`` when no enumerator exists or a finite universe is
    exhausted."""
    if s.enumerator is None:
        return ABSENT
    v = s.enumerator(k)
    return ABSENT if v is None else v


# ---------------------------------------------------------------------------
# The exact-rational structure (Q; 1, 0; +, -, *; =)
# ---------------------------------------------------------------------------
#
# Universe enumeration order is fixed so that every search over it is
# reproducible: rationals are listed by increasing height |p| + q over
# fractions p/q in lowest terms (q >= 1), the zero fraction first, and within
# one height by increasing denominator with the positive value before the
# negative one:
#
#     0, 1, -1, 2, -2, 1/2, -1/2, 3, -3, 1/3, -1/3, 4, -4, 3/2, -3/2, ...


def _rational_at(k: int) -> Optional[Fraction]:
    if k < 0:
        raise ValueError("enumeration index must be nonnegative")
    if k == 0:
        return Fraction(0)
    seen = 0
    height = 2
    while True:
        for q in range(1, height):
            p = height - q
            if math.gcd(p, q) != 1:
                continue
            for sign in (1, -1):
                seen += 1
                if seen == k:
                    return Fraction(sign * p, q)
        height += 1


def _parse_rational(text: str) -> Fraction:
    return Fraction(text.strip())


def _format_rational(v: Fraction) -> str:
    return str(v)


def RationalStructure() -> StructureDef:
    """(Q; 1, 0; +, -, *; =) with exact arithmetic.

    Constants are c1 = 1 and c2 = 0; the single relation r1 is equality,
    which doubles as the identity relation.
    """
    return StructureDef(
        name="rationals",
        signature=Signature(
            constant_count=2,
            function_arities=(2, 2, 2),
            relation_arities=(2,),
        ),
        constants=(Fraction(1), Fraction(0)),
        functions=(
            lambda a, b: a + b,
            lambda a, b: a - b,
            lambda a, b: a * b,
        ),
        relations=(lambda a, b: a == b,),
        contains=lambda v: isinstance(v, Fraction)
        or (isinstance(v, int) and not isinstance(v, bool)),
        identity_relation=1,
        enumerator=_rational_at,
        parse_value=_parse_rational,
        format_value=_format_rational,
    )


# ---------------------------------------------------------------------------
# Finite structures from explicit tables
# ---------------------------------------------------------------------------


def FiniteStructure(
    name: str,
    universe: Sequence[Value],
    constants: Sequence[Value] = (),
    function_tables: Sequence[dict[tuple[Value, ...], Value]] = (),
    relation_tables: Sequence[set[tuple[Value, ...]] | frozenset[tuple[Value, ...]]] = (),
    relation_arities: Optional[Sequence[int]] = None,
    identity_relation: Optional[int] = None,
) -> StructureDef:
    """A structure given by an explicit universe list and operation tables.

    Function tables must be total and closed over the universe; relation
    tables are sets of argument tuples.  The enumerator is the universe list
    order.  Relation arities are taken from the tables when every table is
    nonempty, otherwise they must be passed explicitly.
    """
    elements = tuple(universe)
    if len(set(elements)) != len(elements):
        raise ValueError("universe elements must be distinct")
    if not elements:
        raise ValueError("universe must be nonempty")
    element_set = set(elements)

    for c in constants:
        if c not in element_set:
            raise ValueError(f"constant {c!r} not in universe")

    fn_arities = []
    fns = []
    for t, table in enumerate(function_tables, start=1):
        if not table:
            raise ValueError(f"function table {t} is empty")
        arities = {len(key) for key in table}
        if len(arities) != 1:
            raise ValueError(f"function table {t} mixes arities")
        (arity,) = arities
        if len(table) != len(elements) ** arity:
            raise ValueError(f"function table {t} is not total")
        for key, val in table.items():
            if any(a not in element_set for a in key) or val not in element_set:
                raise ValueError(f"function table {t} not closed over the universe")
        fn_arities.append(arity)
        frozen = dict(table)
        fns.append(lambda *args, _t=frozen: _t[args])

    if relation_arities is None:
        relation_arities = []
        for t, table in enumerate(relation_tables, start=1):
            arities = {len(key) for key in table}
            if len(arities) != 1:
                raise ValueError(
                    f"relation table {t} is empty or mixes arities; pass relation_arities"
                )
            relation_arities.append(arities.pop())
    rels = []
    for table, arity in zip(relation_tables, relation_arities):
        for key in table:
            if len(key) != arity or any(a not in element_set for a in key):
                raise ValueError("relation table not closed over the universe")
        frozen_rel = frozenset(table)
        rels.append(lambda *args, _t=frozen_rel: args in _t)

    def enum(k: int) -> Optional[Value]:
        if k < 0:
            raise ValueError("enumeration index must be nonnegative")
        return elements[k] if k < len(elements) else None

    return StructureDef(
        name=name,
        signature=Signature(
            constant_count=len(constants),
            function_arities=tuple(fn_arities),
            relation_arities=tuple(relation_arities),
        ),
        constants=tuple(constants),
        functions=tuple(fns),
        relations=tuple(rels),
        contains=lambda v: v in element_set,
        identity_relation=identity_relation,
        enumerator=enum,
        parse_value=lambda text: text.strip(),
        format_value=lambda v: str(v),
    )


def identity_table(universe: Sequence[Value]) -> set[tuple[Value, Value]]:
    return {(u, u) for u in universe}
