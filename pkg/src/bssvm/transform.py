"""Program transformations.

Three layers live here:

1. a catalog of pseudo instructions (macros), each with a reference semantics
   and an expansion into genuine instructions only, using fresh labels and
   registers that never collide with the host program;
2. the machine-kind compilers: choice-operator machines to nondeterministic
   3-tape machines (one per oracle representation), nondeterministic machines
   to choice-operator machines over the full-universe oracle;
3. tape flattening: a d-tape machine becomes a 1-tape machine with the
   interleaved track layout cell (t, i) -> d*(i-1) + t.

Every compiler returns the transformed machine together with a
:class:`CompilationMap` recording where source labels landed and which
registers carry which bookkeeping role, so equivalence tests can check the
internal invariants of the constructions, not just end-to-end behaviour.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

from bssvm import vm as _vm
from bssvm.core import (
    Budget,
    CaseMismatch,
    Compute,
    Configuration,
    Deterministic,
    IReg,
    IndexBranch,
    IndexIncr,
    IndexSetOne,
    IndirectCopy,
    Instruction,
    MachineSpec,
    ND,
    NuAssign,
    NuOracle,
    OracleBranch,
    Program,
    RegisterCollision,
    RelBranch,
    SetConst,
    Stop,
    UnknownPseudo,
    Value,
    ZDirect,
    ZIndirect,
    branch_targets,
    inferred_index_counts,
    instruction_type,
    referenced_registers,
    validate_program,
)
from bssvm.nu import (
    FullUniverse,
    Decider,
    FixedArityDecider,
    SemiDecider,
    cantor_decode_plus,
    cantor_encode,
)


# ---------------------------------------------------------------------------
# Fresh-name allocation
# ---------------------------------------------------------------------------


class FreshAllocator:
    """Hands out register indices past everything the host program uses."""

    def __init__(self, tapes: int, ireg_floor: Sequence[int], z_floor: Sequence[int]):
        self._next_ireg = list(ireg_floor)
        self._next_z = list(z_floor)
        self.tapes = tapes

    @staticmethod
    def for_program(program_items: Sequence[Any], tapes: int) -> "FreshAllocator":
        iregs = [1] * tapes
        zs = [0] * tapes
        for item in program_items:
            for instr in _walk_instructions(item):
                for ref in referenced_registers(instr):
                    if isinstance(ref, IReg) and ref.tape <= tapes:
                        iregs[ref.tape - 1] = max(iregs[ref.tape - 1], ref.index)
                    elif isinstance(ref, ZDirect) and ref.tape <= tapes:
                        zs[ref.tape - 1] = max(zs[ref.tape - 1], ref.index)
                    elif isinstance(ref, ZIndirect) and ref.tape <= tapes:
                        iregs[ref.tape - 1] = max(iregs[ref.tape - 1], ref.ireg)
        return FreshAllocator(tapes, iregs, zs)

    def reserve_ireg(self, tape: int, index: int) -> IReg:
        """Claim a specific index (used for role registers named by the
        construction); fresh allocation continues past it."""
        self._next_ireg[tape - 1] = max(self._next_ireg[tape - 1], index)
        return IReg(tape, index)

    def fresh_ireg(self, tape: int) -> IReg:
        self._next_ireg[tape - 1] += 1
        return IReg(tape, self._next_ireg[tape - 1])

    def fresh_z(self, tape: int) -> ZDirect:
        self._next_z[tape - 1] += 1000 if self._next_z[tape - 1] == 0 else 1
        return ZDirect(tape, self._next_z[tape - 1])

    def ireg_counts(self) -> tuple[int, ...]:
        return tuple(self._next_ireg)


def _walk_instructions(item: Any):
    """Yield every pure instruction reachable inside an item (descending into
    pseudo bodies) so the allocator sees all referenced registers."""
    if isinstance(item, PSEUDO_TYPES):
        yield from item.walk_instructions()
    else:
        yield item


# ---------------------------------------------------------------------------
# Emission with symbolic labels
# ---------------------------------------------------------------------------
#
# During expansion, branch targets are one of:
#   int            -- final position in the expanded program
#   ("host", L)    -- position of host item L, patched from the label map
#   ("sym", k)     -- a forward reference bound later


class _Emitter:
    def __init__(self, alloc: FreshAllocator):
        self.alloc = alloc
        self.instrs: list[Instruction] = []
        self._sym_bindings: dict[int, int] = {}
        self._sym_count = 0

    def pos(self) -> int:
        return len(self.instrs) + 1

    def emit(self, instr: Instruction) -> int:
        self.instrs.append(instr)
        return len(self.instrs)

    def new_sym(self) -> tuple[str, int]:
        self._sym_count += 1
        return ("sym", self._sym_count)

    def bind(self, sym: tuple[str, int]) -> None:
        self._sym_bindings[sym[1]] = self.pos()

    def goto(self, target: Any, reg: Optional[IReg] = None) -> None:
        """Unconditional jump: the 'goto' macro, a self-comparing branch."""
        reg = reg or IReg(1, 1)
        self.emit(IndexBranch(reg, reg, target, target))

    def set_literal(self, reg: IReg, value: int) -> None:
        """reg := literal, by a reset and literal-1 increments."""
        self.emit(IndexSetOne(reg))
        for _ in range(value - 1):
            self.emit(IndexIncr(reg))

    def resolve(self, label_map: dict[int, int]) -> list[Instruction]:
        def fix(target: Any) -> int:
            if isinstance(target, int):
                return target
            kind, key = target
            if kind == "host":
                return label_map[key]
            if kind == "sym":
                return self._sym_bindings[key]
            raise AssertionError(target)

        out = []
        for instr in self.instrs:
            if isinstance(instr, (RelBranch, IndexBranch, OracleBranch)):
                instr = dataclasses.replace(
                    instr, then_label=fix(instr.then_label), else_label=fix(instr.else_label)
                )
            out.append(instr)
        return out


def _host_targets(instr: Instruction) -> Instruction:
    """Rewrite integer branch targets of a host instruction into host refs."""
    if isinstance(instr, (RelBranch, IndexBranch, OracleBranch)):
        return dataclasses.replace(
            instr,
            then_label=("host", instr.then_label),
            else_label=("host", instr.else_label),
        )
    return instr


# ---------------------------------------------------------------------------
# Pseudo-instruction catalog
# ---------------------------------------------------------------------------
#
# Each node knows how to expand itself (emitting only instruction types
# 1..10) and how to execute its net effect directly on a mutable register
# file; the two must agree on every host-visible register, which the macro
# soundness tests check on randomized contexts.


@dataclass(frozen=True)
class PGoto:
    """goto L, realized as a self-comparing index branch."""

    target: int
    reg: IReg = IReg(1, 1)

    def walk_instructions(self):
        yield IndexBranch(self.reg, self.reg, self.target, self.target)

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.goto(("host", self.target), self.reg)

    def reference(self, state, spec, nu_eval) -> None:
        state.label = self.target


@dataclass(frozen=True)
class PIndexSet:
    """reg := literal value (reset plus increments)."""

    reg: IReg
    value: int

    def walk_instructions(self):
        yield IndexSetOne(self.reg)

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.set_literal(self.reg, self.value)

    def reference(self, state, spec, nu_eval) -> None:
        state.iregs[self.reg.tape - 1][self.reg.index - 1] = self.value
        state.label += 1


@dataclass(frozen=True)
class PIndexCopy:
    """dest := src between index registers (reset, then count up to src)."""

    dest: IReg
    src: IReg

    def __post_init__(self):
        if self.dest == self.src:
            raise RegisterCollision("index copy needs distinct registers")

    def walk_instructions(self):
        yield IndexBranch(self.dest, self.src, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        exit_sym = em.new_sym()
        em.emit(IndexSetOne(self.dest))
        loop = em.pos()
        em.emit(IndexBranch(self.dest, self.src, exit_sym, loop + 1))
        em.emit(IndexIncr(self.dest))
        em.goto(loop, self.dest)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        state.iregs[self.dest.tape - 1][self.dest.index - 1] = state.iregs[
            self.src.tape - 1
        ][self.src.index - 1]
        state.label += 1


@dataclass(frozen=True)
class PIndexAdd:
    """dest := base + addend (or dest += addend when base is None)."""

    dest: IReg
    addend: IReg
    base: Optional[IReg] = None

    def __post_init__(self):
        if self.dest == self.addend:
            raise RegisterCollision("index add needs dest distinct from addend")

    def walk_instructions(self):
        yield IndexBranch(self.dest, self.addend, 1, 1)
        if self.base is not None:
            yield IndexBranch(self.base, self.base, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        if self.base is not None and self.base != self.dest:
            PIndexCopy(self.dest, self.base).expand(em, host_label)
        counter = em.alloc.fresh_ireg(self.dest.tape)
        exit_sym = em.new_sym()
        em.emit(IndexSetOne(counter))
        loop = em.pos()
        em.emit(IndexIncr(self.dest))
        em.emit(IndexBranch(counter, self.addend, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(counter))
        em.goto(loop, counter)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        base = self.base if self.base is not None else self.dest
        total = (
            state.iregs[base.tape - 1][base.index - 1]
            + state.iregs[self.addend.tape - 1][self.addend.index - 1]
        )
        state.iregs[self.dest.tape - 1][self.dest.index - 1] = total
        state.label += 1


@dataclass(frozen=True)
class PIndexPred:
    """dest := src - 1 for src >= 2 (count up from 1); dest := 1 if src = 1."""

    dest: IReg
    src: IReg

    def __post_init__(self):
        if self.dest == self.src:
            raise RegisterCollision("predecessor needs distinct registers")

    def walk_instructions(self):
        yield IndexBranch(self.dest, self.src, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        counter = em.alloc.fresh_ireg(self.dest.tape)
        exit_sym = em.new_sym()
        em.emit(IndexSetOne(self.dest))
        em.emit(IndexSetOne(counter))
        loop = em.pos()
        em.emit(IndexBranch(counter, self.src, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(counter))
        em.emit(IndexBranch(counter, self.src, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(self.dest))
        em.goto(loop, counter)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        src = state.iregs[self.src.tape - 1][self.src.index - 1]
        state.iregs[self.dest.tape - 1][self.dest.index - 1] = max(1, src - 1)
        state.label += 1


@dataclass(frozen=True)
class PCopy:
    """Tuple copy from cell 1: Z[dt, 1..c(length)] := Z[st, 1..c(length)],
    walking dest_cursor and src_cursor in lock step until the source cursor
    reaches the length register.  Both cursors end at the copied length.
    With ``reset`` the cursors are first set to 1 (needed when the copy runs
    more than once); without it the copy is the literal five-line loop that
    assumes cursors already at 1."""

    dest_tape: int
    dest_cursor: IReg
    src_tape: int
    src_cursor: IReg
    length: IReg
    reset: bool = False

    def walk_instructions(self):
        yield IndirectCopy(
            ZIndirect(self.dest_tape, self.dest_cursor.index),
            ZIndirect(self.src_tape, self.src_cursor.index),
        )
        yield IndexBranch(self.length, self.length, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        if self.dest_cursor.tape != self.dest_tape or self.src_cursor.tape != self.src_tape:
            raise RegisterCollision("copy cursors must live on the tapes they address")
        if self.reset:
            em.emit(IndexSetOne(self.dest_cursor))
            em.emit(IndexSetOne(self.src_cursor))
        exit_sym = em.new_sym()
        loop = em.pos()
        em.emit(
            IndirectCopy(
                ZIndirect(self.dest_tape, self.dest_cursor.index),
                ZIndirect(self.src_tape, self.src_cursor.index),
            )
        )
        em.emit(IndexBranch(self.length, self.src_cursor, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(self.src_cursor))
        em.emit(IndexIncr(self.dest_cursor))
        em.goto(loop, self.dest_cursor)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        sc = self.src_cursor
        dc = self.dest_cursor
        if self.reset:
            state.iregs[sc.tape - 1][sc.index - 1] = 1
            state.iregs[dc.tape - 1][dc.index - 1] = 1
        while True:
            s_i = state.iregs[sc.tape - 1][sc.index - 1]
            d_i = state.iregs[dc.tape - 1][dc.index - 1]
            state.write_cell(self.dest_tape, d_i, state.read_cell(self.src_tape, s_i))
            if state.iregs[self.length.tape - 1][self.length.index - 1] == s_i:
                break
            state.iregs[sc.tape - 1][sc.index - 1] = s_i + 1
            state.iregs[dc.tape - 1][dc.index - 1] = d_i + 1
        state.label += 1


@dataclass(frozen=True)
class PCopyRange:
    """Range copy: while the dest cursor has not reached dest_end, advance
    both cursors and copy one cell.  Copies into dest cells
    c(dest_cursor)+1 .. c(dest_end) from source cells after c(src_cursor)."""

    dest_tape: int
    dest_cursor: IReg
    src_tape: int
    src_cursor: IReg
    dest_end: IReg

    def walk_instructions(self):
        yield IndirectCopy(
            ZIndirect(self.dest_tape, self.dest_cursor.index),
            ZIndirect(self.src_tape, self.src_cursor.index),
        )
        yield IndexBranch(self.dest_end, self.dest_end, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        exit_sym = em.new_sym()
        loop = em.pos()
        em.emit(IndexBranch(self.dest_cursor, self.dest_end, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(self.dest_cursor))
        em.emit(IndexIncr(self.src_cursor))
        em.emit(
            IndirectCopy(
                ZIndirect(self.dest_tape, self.dest_cursor.index),
                ZIndirect(self.src_tape, self.src_cursor.index),
            )
        )
        em.goto(loop, self.dest_cursor)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        sc, dc, de = self.src_cursor, self.dest_cursor, self.dest_end
        while (
            state.iregs[dc.tape - 1][dc.index - 1]
            != state.iregs[de.tape - 1][de.index - 1]
        ):
            state.iregs[dc.tape - 1][dc.index - 1] += 1
            state.iregs[sc.tape - 1][sc.index - 1] += 1
            state.write_cell(
                self.dest_tape,
                state.iregs[dc.tape - 1][dc.index - 1],
                state.read_cell(self.src_tape, state.iregs[sc.tape - 1][sc.index - 1]),
            )
        state.label += 1


@dataclass(frozen=True)
class PDispatch:
    """Jump to targets[v-2] where v = c(value), for v in 2..len(targets)+1.

    The expansion is the incremental comparison chain: the scratch register
    is reset to 1 and incremented once per entry, each entry comparing it
    against the value register.  The final entry jumps to its target on both
    arms, so an out-of-range value lands on the last target with the scratch
    register left at len(targets)+1.
    """

    value: IReg
    scratch: IReg
    targets: tuple[int, ...]

    def walk_instructions(self):
        yield IndexSetOne(self.scratch)
        yield IndexBranch(self.value, self.scratch, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.emit(IndexSetOne(self.scratch))
        n = len(self.targets)
        for i, target in enumerate(self.targets):
            em.emit(IndexIncr(self.scratch))
            if i == n - 1:
                em.emit(IndexBranch(self.value, self.scratch, ("host", target), ("host", target)))
            else:
                em.emit(IndexBranch(self.value, self.scratch, ("host", target), em.pos() + 1))

    def reference(self, state, spec, nu_eval) -> None:
        v = state.iregs[self.value.tape - 1][self.value.index - 1]
        top = len(self.targets) + 1
        if 2 <= v <= top:
            state.iregs[self.scratch.tape - 1][self.scratch.index - 1] = v
            state.label = self.targets[v - 2]
        else:
            state.iregs[self.scratch.tape - 1][self.scratch.index - 1] = top
            state.label = self.targets[-1]


@dataclass(frozen=True)
class PForUnbounded:
    """for counter := 1, 2, ... do body.  Exits only through a branch in the
    body that targets a host label."""

    counter: IReg
    body: tuple[Any, ...]

    def walk_instructions(self):
        yield IndexSetOne(self.counter)
        for item in self.body:
            yield from _walk_instructions(item)

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.emit(IndexSetOne(self.counter))
        loop = em.pos()
        for item in self.body:
            _expand_body_item(item, em, host_label)
        em.emit(IndexIncr(self.counter))
        em.goto(loop, self.counter)

    def reference(self, state, spec, nu_eval) -> None:
        state.iregs[self.counter.tape - 1][self.counter.index - 1] = 1
        while True:
            if _reference_body(self.body, state, spec, nu_eval):
                return  # a body branch transferred control to a host label
            state.iregs[self.counter.tape - 1][self.counter.index - 1] += 1


@dataclass(frozen=True)
class PForBounded:
    """for counter := 1, 2, ..., c(bound) do body; then fall through.

    The expansion duplicates the body once, as in the two-line loop form:
    first pass with counter = 1, the loop line incrementing before each
    further pass, a comparison against the bound after every pass.
    """

    counter: IReg
    bound: IReg
    body: tuple[Any, ...]

    def walk_instructions(self):
        yield IndexSetOne(self.counter)
        yield IndexBranch(self.counter, self.bound, 1, 1)
        for item in self.body:
            yield from _walk_instructions(item)

    def expand(self, em: _Emitter, host_label: int) -> None:
        after = ("host", host_label + 1)
        em.emit(IndexSetOne(self.counter))
        for item in self.body:
            _expand_body_item(item, em, host_label)
        loop_sym = em.new_sym()
        em.emit(IndexBranch(self.counter, self.bound, after, em.pos() + 1))
        em.bind(loop_sym)
        em.emit(IndexIncr(self.counter))
        for item in self.body:
            _expand_body_item(item, em, host_label)
        em.emit(IndexBranch(self.counter, self.bound, after, ("sym", loop_sym[1])))

    def reference(self, state, spec, nu_eval) -> None:
        c, b = self.counter, self.bound
        state.iregs[c.tape - 1][c.index - 1] = 1
        while True:
            if _reference_body(self.body, state, spec, nu_eval):
                return
            if (
                state.iregs[c.tape - 1][c.index - 1]
                == state.iregs[b.tape - 1][b.index - 1]
            ):
                state.label += 1
                return
            state.iregs[c.tape - 1][c.index - 1] += 1


@dataclass(frozen=True)
class PIfEq:
    """if c(left) = c(right) then run then_items else run else_items, either
    way falling through afterwards; a PGoto inside an arm leaves instead."""

    left: IReg
    right: IReg
    then_items: tuple[Any, ...] = ()
    else_items: tuple[Any, ...] = ()

    def walk_instructions(self):
        yield IndexBranch(self.left, self.right, 1, 1)
        for item in self.then_items + self.else_items:
            yield from _walk_instructions(item)

    def expand(self, em: _Emitter, host_label: int) -> None:
        else_sym = em.new_sym()
        next_sym = em.new_sym()
        em.emit(IndexBranch(self.left, self.right, em.pos() + 1, else_sym))
        for item in self.then_items:
            _expand_body_item(item, em, host_label)
        em.goto(next_sym, self.left)
        em.bind(else_sym)
        for item in self.else_items:
            _expand_body_item(item, em, host_label)
        em.bind(next_sym)

    def reference(self, state, spec, nu_eval) -> None:
        same = (
            state.iregs[self.left.tape - 1][self.left.index - 1]
            == state.iregs[self.right.tape - 1][self.right.index - 1]
        )
        items = self.then_items if same else self.else_items
        if not _reference_body(items, state, spec, nu_eval):
            state.label += 1


@dataclass(frozen=True)
class PConstGuard:
    """if c(zreg) = c_i then goto then_label else goto else_label, decided by
    the structure's identity relation against a fresh cell holding c_i."""

    zreg: ZDirect
    const: int
    then_label: int
    else_label: int
    identity_rel: int

    def walk_instructions(self):
        yield SetConst(self.zreg, self.const)
        yield RelBranch(self.identity_rel, (self.zreg, self.zreg), self.then_label, self.else_label)

    def expand(self, em: _Emitter, host_label: int) -> None:
        scratch = em.alloc.fresh_z(self.zreg.tape)
        em.emit(SetConst(scratch, self.const))
        em.emit(
            RelBranch(
                self.identity_rel,
                (self.zreg, scratch),
                ("host", self.then_label),
                ("host", self.else_label),
            )
        )

    def reference(self, state, spec, nu_eval) -> None:
        from bssvm.structures import constant, eval_relation

        value = state.read_cell(self.zreg.tape, self.zreg.index)
        wanted = constant(spec.structure, self.const)
        same = eval_relation(spec.structure, self.identity_rel, (value, wanted))
        state.label = self.then_label if same else self.else_label


@dataclass(frozen=True)
class PCaEncode:
    """dest := pairing(m, s0) by pure counting: dest accumulates the
    triangle number of m + s0, then adds s0."""

    dest: IReg
    m: IReg
    s0: IReg

    def walk_instructions(self):
        yield IndexBranch(self.dest, self.m, 1, 1)
        yield IndexBranch(self.s0, self.s0, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        tape = self.dest.tape
        k_total = em.alloc.fresh_ireg(tape)
        i = em.alloc.fresh_ireg(tape)
        PIndexAdd(k_total, self.s0, base=self.m).expand(em, host_label)
        em.emit(IndexSetOne(self.dest))
        em.emit(IndexSetOne(i))
        exit_sym = em.new_sym()
        loop = em.pos()
        em.emit(IndexBranch(i, k_total, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(i))
        PIndexAdd(self.dest, i).expand(em, host_label)
        em.goto(loop, i)
        em.bind(exit_sym)
        PIndexAdd(self.dest, self.s0).expand(em, host_label)

    def reference(self, state, spec, nu_eval) -> None:
        m = state.iregs[self.m.tape - 1][self.m.index - 1]
        s0 = state.iregs[self.s0.tape - 1][self.s0.index - 1]
        state.iregs[self.dest.tape - 1][self.dest.index - 1] = cantor_encode(m, s0)
        state.label += 1


@dataclass(frozen=True)
class PCaDecodePlus:
    """(m_dest, s0_dest) := decode-plus(c(s)): walk the pairing enumeration
    diagonal by diagonal, counting up to s; a zero component maps to (1, 1).

    The walk keeps the diagonal k, a shifted copy s0+1, and k+1 in registers
    so only equality tests, resets, and increments are needed.
    """

    m_dest: IReg
    s0_dest: IReg
    s: IReg

    def walk_instructions(self):
        yield IndexBranch(self.m_dest, self.s, 1, 1)
        yield IndexBranch(self.s0_dest, self.s0_dest, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        tape = self.s.tape
        d = em.alloc.fresh_ireg(tape)  # walk counter, equals the scheduled s
        k = em.alloc.fresh_ireg(tape)  # current diagonal
        kp1 = em.alloc.fresh_ireg(tape)  # k + 1, maintained alongside
        s0s = em.alloc.fresh_ireg(tape)  # s0 + 1 (shifted so 0 is storable)
        cnt = em.alloc.fresh_ireg(tape)

        found = em.new_sym()
        fallback = em.new_sym()
        done = em.new_sym()

        em.emit(IndexSetOne(d))
        em.emit(IndexSetOne(k))
        em.set_literal(kp1, 2)
        em.emit(IndexSetOne(s0s))
        loop = em.pos()
        em.emit(IndexBranch(d, self.s, found, em.pos() + 1))
        # successor: diagonal end (s0 = k, i.e. s0s = kp1) starts diagonal k+1
        step_else = em.new_sym()
        step_done = em.new_sym()
        em.emit(IndexBranch(s0s, kp1, em.pos() + 1, step_else))
        em.emit(IndexIncr(k))
        em.emit(IndexIncr(kp1))
        em.emit(IndexSetOne(s0s))
        em.goto(step_done, d)
        em.bind(step_else)
        em.emit(IndexIncr(s0s))
        em.bind(step_done)
        em.emit(IndexIncr(d))
        em.goto(loop, d)

        em.bind(found)
        # s0 = 0 (s0s = 1) or m = 0 (s0s = kp1): fall back to (1, 1)
        one_probe = em.alloc.fresh_ireg(tape)
        em.emit(IndexSetOne(one_probe))
        em.emit(IndexBranch(s0s, one_probe, fallback, em.pos() + 1))
        em.emit(IndexBranch(s0s, kp1, fallback, em.pos() + 1))
        # s0_dest := s0s - 1
        PIndexPred(self.s0_dest, s0s).expand(em, host_label)
        # m_dest := kp1 - s0s, counting cnt from s0s up to kp1
        em.emit(IndexSetOne(self.m_dest))
        PIndexCopy(cnt, s0s).expand(em, host_label)
        em.emit(IndexIncr(cnt))
        mloop = em.pos()
        em.emit(IndexBranch(cnt, kp1, done, em.pos() + 1))
        em.emit(IndexIncr(cnt))
        em.emit(IndexIncr(self.m_dest))
        em.goto(mloop, cnt)
        em.bind(fallback)
        em.emit(IndexSetOne(self.m_dest))
        em.emit(IndexSetOne(self.s0_dest))
        em.bind(done)

    def reference(self, state, spec, nu_eval) -> None:
        s = state.iregs[self.s.tape - 1][self.s.index - 1]
        m, s0 = cantor_decode_plus(s)
        state.iregs[self.m_dest.tape - 1][self.m_dest.index - 1] = m
        state.iregs[self.s0_dest.tape - 1][self.s0_dest.index - 1] = s0
        state.label += 1


@dataclass(frozen=True)
class PInit:
    """Advance the frontier register and write the default value into the
    newly covered cell: frontier += 1; Z[tape, c(frontier)] := Z[src_tape,
    c(source)]; optionally advance the source pointer (the drawn form keeps
    it one cell behind the frontier)."""

    tape: int
    frontier: IReg
    source: IReg
    src_tape: int = 0  # 0 means same tape
    advance_source: bool = True

    def _src_tape(self) -> int:
        return self.src_tape or self.tape

    def walk_instructions(self):
        yield IndexIncr(self.frontier)
        yield IndirectCopy(
            ZIndirect(self.tape, self.frontier.index),
            ZIndirect(self._src_tape(), self.source.index),
        )

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.emit(IndexIncr(self.frontier))
        em.emit(
            IndirectCopy(
                ZIndirect(self.tape, self.frontier.index),
                ZIndirect(self._src_tape(), self.source.index),
            )
        )
        if self.advance_source:
            em.emit(IndexIncr(self.source))

    def reference(self, state, spec, nu_eval) -> None:
        f = self.frontier
        state.iregs[f.tape - 1][f.index - 1] += 1
        src_i = state.iregs[self.source.tape - 1][self.source.index - 1]
        state.write_cell(
            self.tape,
            state.iregs[f.tape - 1][f.index - 1],
            state.read_cell(self._src_tape(), src_i),
        )
        if self.advance_source:
            state.iregs[self.source.tape - 1][self.source.index - 1] += 1
        state.label += 1


@dataclass(frozen=True)
class PInitGuess:
    """Materialize one guessed value into the next frontier cell of tape 1,
    preserving Z1: the frontier advances, Z1 is saved one cell further, the
    choice operator lands a guess in Z1, the guess moves to the frontier
    cell, and Z1 is restored."""

    frontier: IReg
    save: IReg
    one: IReg

    def walk_instructions(self):
        yield IndexIncr(self.frontier)
        yield NuAssign(ZDirect(1, 1), 1)
        yield IndirectCopy(ZIndirect(1, self.save.index), ZIndirect(1, self.one.index))

    def expand(self, em: _Emitter, host_label: int) -> None:
        em.emit(IndexIncr(self.frontier))
        PIndexCopy(self.save, self.frontier).expand(em, host_label)
        em.emit(IndexIncr(self.save))
        em.emit(IndexSetOne(self.one))
        em.emit(IndirectCopy(ZIndirect(1, self.save.index), ZIndirect(1, self.one.index)))
        em.emit(NuAssign(ZDirect(1, 1), 1))
        em.emit(IndirectCopy(ZIndirect(1, self.frontier.index), ZIndirect(1, self.one.index)))
        em.emit(IndirectCopy(ZIndirect(1, self.one.index), ZIndirect(1, self.save.index)))

    def reference(self, state, spec, nu_eval) -> None:
        # First-candidate policy, mirroring how deterministic drivers resolve
        # the branch; exploration of all candidates happens at the VM level.
        from bssvm.core import EvaluatorCannotCertify

        f = self.frontier
        state.iregs[f.tape - 1][f.index - 1] += 1
        p = state.iregs[f.tape - 1][f.index - 1]
        state.iregs[self.save.tape - 1][self.save.index - 1] = p + 1
        state.iregs[self.one.tape - 1][self.one.index - 1] = 1
        old_z1 = state.read_cell(1, 1)
        state.write_cell(1, p + 1, old_z1)
        choices = nu_eval.candidates(state.prefix(1))
        if not choices.values:
            raise EvaluatorCannotCertify("no guess candidates available")
        guess = choices.values[0][0]
        state.write_cell(1, p, guess)
        state.write_cell(1, 1, old_z1)
        state.label += 1


@dataclass(frozen=True)
class PNuAdjacent:
    """The adjacent-register choice form Z[j+1] := nu[O](Z[j]); parsed for
    completeness, with no expansion defined."""

    dest: ZDirect
    src: ZDirect

    def walk_instructions(self):
        yield NuAssign(self.dest, self.src.tape)

    def expand(self, em: _Emitter, host_label: int) -> None:
        raise UnknownPseudo(
            "the adjacent-register choice form has no defined expansion"
        )

    def reference(self, state, spec, nu_eval) -> None:
        raise UnknownPseudo(
            "the adjacent-register choice form has no defined semantics"
        )


PSEUDO_TYPES = (
    PGoto,
    PIndexSet,
    PIndexCopy,
    PIndexAdd,
    PIndexPred,
    PCopy,
    PCopyRange,
    PDispatch,
    PForUnbounded,
    PForBounded,
    PIfEq,
    PConstGuard,
    PCaEncode,
    PCaDecodePlus,
    PInit,
    PInitGuess,
    PNuAdjacent,
)

PseudoInstruction = Union[
    PGoto,
    PIndexSet,
    PIndexCopy,
    PIndexAdd,
    PIndexPred,
    PCopy,
    PCopyRange,
    PDispatch,
    PForUnbounded,
    PForBounded,
    PIfEq,
    PConstGuard,
    PCaEncode,
    PCaDecodePlus,
    PInit,
    PInitGuess,
    PNuAdjacent,
]
PseudoItem = Union[Instruction, PseudoInstruction]


def _expand_body_item(item: Any, em: _Emitter, host_label: int) -> None:
    if isinstance(item, PSEUDO_TYPES):
        item.expand(em, host_label)
    else:
        em.emit(_host_targets(item))


_BODY_SENTINEL = -(10**9)
_REFERENCE_LOOP_CAP = 1_000_000


def _reference_body(items: Sequence[Any], state, spec, nu_eval) -> bool:
    """Run unlabeled body items in order on the mutable state.  Returns True
    when an item transferred control to a host label (the new label is
    already set), False when the body fell through (label untouched).

    Branch instructions inside a body always transfer (both arms name host
    labels); everything else falls through to the next body item.
    """
    for item in items:
        outer = state.label
        state.label = _BODY_SENTINEL
        if isinstance(item, PSEUDO_TYPES):
            item.reference(state, spec, nu_eval)
        else:
            _vm._exec(state, item, spec, nu_eval)
        if state.label == _BODY_SENTINEL + 1:
            state.label = outer
            continue
        return True
    return False


# ---------------------------------------------------------------------------
# Pseudo programs and expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PseudoProgram:
    """A labelled sequence of genuine and pseudo instructions; labels are
    positional, exactly like :class:`bssvm.core.Program`."""

    items: tuple[PseudoItem, ...]

    @property
    def last_label(self) -> int:
        return len(self.items)

    def labelled(self):
        return enumerate(self.items, start=1)

    def has_pseudo(self) -> bool:
        return any(isinstance(item, PSEUDO_TYPES) for item in self.items)

    def to_program(self) -> Program:
        if self.has_pseudo():
            raise UnknownPseudo("program still contains pseudo instructions")
        return Program(tuple(self.items))


@dataclass(frozen=True)
class CompilationMap:
    """Where things landed: host/source label -> expanded label, named anchor
    positions, and which register plays which bookkeeping role."""

    label_map: dict[int, int]
    anchors: dict[str, int] = field(default_factory=dict)
    register_roles: dict[str, IReg] = field(default_factory=dict)


def expand_pseudo(pp: PseudoProgram, tapes: int = 1) -> Program:
    """Expand every pseudo instruction into genuine instructions.

    The result is observationally equivalent to the pseudo-level reference
    semantics: projected onto host registers, the traces agree at every host
    label.  Fresh labels and registers are allocated past everything the
    host program mentions.
    """
    return expand_pseudo_mapped(pp, tapes)[0]


def expand_pseudo_mapped(pp: PseudoProgram, tapes: int = 1) -> tuple[Program, CompilationMap]:
    alloc = FreshAllocator.for_program(pp.items, tapes)
    em = _Emitter(alloc)
    label_map: dict[int, int] = {}
    for host_label, item in pp.labelled():
        label_map[host_label] = em.pos()
        if isinstance(item, PSEUDO_TYPES):
            item.expand(em, host_label)
        else:
            em.emit(_host_targets(item))
    instructions = em.resolve(label_map)
    return Program(tuple(instructions)), CompilationMap(label_map=label_map)


def expanded_index_counts(pp: PseudoProgram, tapes: int) -> tuple[int, ...]:
    """Index-register block sizes after expansion (fresh registers included)."""
    program, _ = expand_pseudo_mapped(pp, tapes)
    return inferred_index_counts(program, tapes)


# ---------------------------------------------------------------------------
# Reference interpreter for pseudo programs
# ---------------------------------------------------------------------------


def reference_run(
    pseudo: PseudoProgram,
    spec: MachineSpec,
    initial: Configuration,
    budget: Budget,
    nu_eval=None,
) -> tuple[str, list[Configuration]]:
    """Execute a pseudo program at the pseudo level, one item per step.

    Returns a status string ('halted', 'diverged') and the configuration
    after every executed item, starting with the initial configuration.
    Branching pseudo items resolve by first candidate.
    """
    state = _vm._State.thaw(initial)
    trace = [initial]
    for _ in range(budget.max_steps):
        item = pseudo.items[state.label - 1]
        if isinstance(item, Stop):
            trace.append(state.freeze())
            return "halted", trace
        if isinstance(item, PSEUDO_TYPES):
            item.reference(state, spec, nu_eval)
        else:
            _vm._exec(state, item, spec, nu_eval)
        trace.append(state.freeze())
    return "diverged", trace


# ---------------------------------------------------------------------------
# Track-address arithmetic (used by tape flattening)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PFlatAddr:
    """dest := d*(c(virtual) - 1) + offset, the interleaved track address of
    virtual cell c(virtual) on the track starting at ``offset``."""

    dest: IReg
    virtual: IReg
    offset: int
    d: int

    def __post_init__(self):
        if self.dest == self.virtual:
            raise RegisterCollision("address computation needs distinct registers")

    def walk_instructions(self):
        yield IndexBranch(self.dest, self.virtual, 1, 1)

    def expand(self, em: _Emitter, host_label: int) -> None:
        counter = em.alloc.fresh_ireg(self.dest.tape)
        em.set_literal(self.dest, self.offset)
        em.emit(IndexSetOne(counter))
        exit_sym = em.new_sym()
        loop = em.pos()
        em.emit(IndexBranch(counter, self.virtual, exit_sym, em.pos() + 1))
        em.emit(IndexIncr(counter))
        for _ in range(self.d):
            em.emit(IndexIncr(self.dest))
        em.goto(loop, counter)
        em.bind(exit_sym)

    def reference(self, state, spec, nu_eval) -> None:
        v = state.iregs[self.virtual.tape - 1][self.virtual.index - 1]
        state.iregs[self.dest.tape - 1][self.dest.index - 1] = self.d * (v - 1) + self.offset
        state.label += 1


PSEUDO_TYPES = PSEUDO_TYPES + (PFlatAddr,)


# ---------------------------------------------------------------------------
# Segment builder: pseudo items with named anchors
# ---------------------------------------------------------------------------


class SegmentBuilder:
    """Accumulates pseudo items whose branch targets may be anchor names;
    finalize() resolves every name to its item position."""

    def __init__(self):
        self.items: list[PseudoItem] = []
        self.anchors: dict[str, int] = {}

    def anchor(self, name: str) -> None:
        if name in self.anchors:
            raise ValueError(f"duplicate anchor {name!r}")
        self.anchors[name] = len(self.items) + 1

    def add(self, item: PseudoItem) -> None:
        self.items.append(item)

    def goto(self, name: str, reg: Optional[IReg] = None) -> None:
        self.add(PGoto(name, reg or IReg(1, 1)))

    def finalize(self) -> tuple[PseudoProgram, dict[str, int]]:
        resolved = tuple(_resolve_targets(item, self.anchors) for item in self.items)
        return PseudoProgram(resolved), dict(self.anchors)


def _resolve_label(target: Any, anchors: dict[str, int]) -> Any:
    if isinstance(target, str):
        return anchors[target]
    return target


def _resolve_targets(item: Any, anchors: dict[str, int]) -> Any:
    if isinstance(item, (RelBranch, IndexBranch, OracleBranch)):
        return dataclasses.replace(
            item,
            then_label=_resolve_label(item.then_label, anchors),
            else_label=_resolve_label(item.else_label, anchors),
        )
    if isinstance(item, PGoto):
        return dataclasses.replace(item, target=_resolve_label(item.target, anchors))
    if isinstance(item, PDispatch):
        return dataclasses.replace(
            item, targets=tuple(_resolve_label(t, anchors) for t in item.targets)
        )
    if isinstance(item, PConstGuard):
        return dataclasses.replace(
            item,
            then_label=_resolve_label(item.then_label, anchors),
            else_label=_resolve_label(item.else_label, anchors),
        )
    if isinstance(item, PIfEq):
        return dataclasses.replace(
            item,
            then_items=tuple(_resolve_targets(i, anchors) for i in item.then_items),
            else_items=tuple(_resolve_targets(i, anchors) for i in item.else_items),
        )
    if isinstance(item, (PForUnbounded, PForBounded)):
        return dataclasses.replace(
            item, body=tuple(_resolve_targets(i, anchors) for i in item.body)
        )
    return item


@dataclass(frozen=True)
class CompiledMachine:
    """A transformed machine plus the map tying it back to its source."""

    spec: MachineSpec
    map: CompilationMap


def _require_valid(m: MachineSpec, what: str) -> None:
    diags = validate_program(m.program, m.structure.signature, m)
    if diags:
        raise CaseMismatch(f"{what} is not well formed: {diags[0]}")


def _max_direct_z(program: Program, tape: int = 1) -> int:
    best = 0
    for instr in program.instructions:
        for ref in referenced_registers(instr):
            if isinstance(ref, ZDirect) and ref.tape == tape:
                best = max(best, ref.index)
    return best


def _retape_direct(z: ZDirect, tape: int) -> ZDirect:
    return ZDirect(tape, z.index)


def _rewrite_instruction_to_tape(
    instr: Instruction, tape: int, label_anchor: "str-prefix", anchors_prefix: str
) -> Instruction:
    """Move a 1-tape instruction onto ``tape``: every Z and I register keeps
    its index but lives on the new tape; branch targets become anchor names
    with the given prefix."""
    if isinstance(instr, Compute):
        return Compute(
            _retape_direct(instr.dest, tape),
            instr.fn,
            tuple(_retape_direct(a, tape) for a in instr.args),
        )
    if isinstance(instr, SetConst):
        return SetConst(_retape_direct(instr.dest, tape), instr.const)
    if isinstance(instr, IndirectCopy):
        return IndirectCopy(
            ZIndirect(tape, instr.dest.ireg), ZIndirect(tape, instr.src.ireg)
        )
    if isinstance(instr, RelBranch):
        return RelBranch(
            instr.rel,
            tuple(_retape_direct(a, tape) for a in instr.args),
            f"{anchors_prefix}{instr.then_label}",
            f"{anchors_prefix}{instr.else_label}",
        )
    if isinstance(instr, IndexBranch):
        return IndexBranch(
            IReg(tape, instr.left.index),
            IReg(tape, instr.right.index),
            f"{anchors_prefix}{instr.then_label}",
            f"{anchors_prefix}{instr.else_label}",
        )
    if isinstance(instr, IndexSetOne):
        return IndexSetOne(IReg(tape, instr.reg.index))
    if isinstance(instr, IndexIncr):
        return IndexIncr(IReg(tape, instr.reg.index))
    raise CaseMismatch(f"cannot move a type-{instruction_type(instr)} instruction across tapes")


# ---------------------------------------------------------------------------
# Choice-operator machine -> nondeterministic 3-tape machine
# ---------------------------------------------------------------------------


def compile_nu_to_nd(m: MachineSpec) -> CompiledMachine:
    """Compile a 1-tape machine with a semi-decidable oracle into a 3-tape
    nondeterministic machine with the same halting set.

    Tape 1 keeps the input and the guess supply, tape 2 runs the source
    program with its registers renamed, and tape 3 hosts the fair search
    that replaces every choice-operator instruction: for s = 1, 2, ... the
    decoded pair (m, s0) selects how many fresh guesses extend the query and
    how many steps of the oracle's semi-decider to simulate.  Reaching the
    semi-decider's stop label hands the first guess of the window back to
    the source program's destination register.

    Output tuples are copied from tape 2 onto tape 1 before stopping, since
    the output procedure reads the first tape.
    """
    if not isinstance(m.kind, NuOracle) or not isinstance(m.kind.oracle, SemiDecider):
        raise CaseMismatch("compile_nu_to_nd expects a machine with a semi-decider oracle")
    if m.tapes != 1:
        raise CaseMismatch("compile_nu_to_nd expects a 1-tape source machine")
    nq = m.kind.oracle.machine
    if nq.tapes != 1 or not isinstance(nq.kind, Deterministic):
        raise CaseMismatch("the oracle's semi-decider must be a deterministic 1-tape machine")
    _require_valid(m, "source machine")
    _require_valid(nq, "oracle machine")

    k_m = m.kappa[0]
    k_nq = nq.kappa[0]
    jmax_nq = _max_direct_z(nq.program)
    lp = m.program.last_label

    I = lambda t, k: IReg(t, k)
    roles = {
        "tape1.last_used_individual": I(1, 1),
        "tape1.return_label": I(1, 2),
        "tape1.loop_counter_s": I(1, 3),
        "tape1.window_m": I(1, 4),
        "tape1.step_bound_s0": I(1, 5),
        "tape1.query_end": I(1, 6),
        "tape1.copy_cursor": I(1, 7),
        "tape1.dispatch_scratch": I(1, 8),
        "tape1.step_counter": I(1, 9),
        "tape1.transfer_cursor": I(1, 11),
        "tape1.prefill_bound": I(1, 12),
        "tape2.dest_register": I(2, k_m + 1),
        "tape2.copy_cursor": I(2, k_m + 2),
        "tape3.frontier": I(3, k_nq + 1),
        "tape3.frontier_source": I(3, k_nq + 2),
        "tape3.range_cursor": I(3, k_nq + 3),
        "tape3.prefill_cursor": I(3, k_nq + 4),
    }

    nu_sites = [
        label for label, instr in m.program.labelled() if isinstance(instr, NuAssign)
    ]

    b = SegmentBuilder()

    # P_init: copy the input from tape 1 onto tape 2, then enter the
    # rewritten source program.
    b.anchor("init")
    b.add(PCopy(2, I(2, 1), 1, I(1, 7), I(1, 1), reset=False))
    b.goto("m:1")

    if nu_sites:
        # 1*: the query prefix (tape 2 cells 1..n0) is copied afresh onto
        # tape 3; looping back here keeps the tape-3 input layout canonical
        # on every search iteration.
        b.anchor("1*")
        b.add(PCopy(3, I(3, 1), 2, I(2, k_m + 2), I(2, 1), reset=True))
        b.anchor("~1")
        b.add(IndexSetOne(I(1, 3)))
        b.anchor("1bar")
        b.add(PCaDecodePlus(I(1, 4), I(1, 5), I(1, 3)))
        b.add(PIndexAdd(I(1, 6), I(1, 4), base=I(3, 1)))
        b.add(IndexSetOne(I(1, 9)))
        # P*_init: bring the guess window onto tape 3 and rebuild the state
        # the semi-decider's own input procedure would have produced.
        b.anchor("2*")
        b.add(PIndexCopy(I(1, 7), I(1, 1)))
        b.add(PIndexCopy(I(3, k_nq + 3), I(3, 1)))
        b.add(PCopyRange(3, I(3, k_nq + 3), 1, I(1, 7), I(1, 6)))
        for j in range(2, k_nq + 1):
            b.add(IndexSetOne(I(3, j)))
        b.anchor("3*")
        b.add(PIndexCopy(I(3, 1), I(1, 6)))
        b.anchor("4*")
        b.add(PIndexCopy(I(3, k_nq + 1), I(3, 1)))
        b.add(PIndexCopy(I(3, k_nq + 2), I(3, k_nq + 1)))
        b.add(PInit(3, I(3, k_nq + 1), I(1, 7), src_tape=1, advance_source=False))
        # Default fill: every tape-3 cell the simulation can reach within s0
        # steps (indirect growth) or through a literal register index must
        # read as the last input component, exactly as after the
        # semi-decider's input procedure.  I(1,7) still points at that
        # component on tape 1.
        b.anchor("prefill")
        b.add(PIndexAdd(I(1, 12), I(1, 5), base=I(1, 6)))
        for _ in range(jmax_nq + 1):
            b.add(IndexIncr(I(1, 12)))
        b.add(PIndexCopy(I(3, k_nq + 4), I(3, 1)))
        b.anchor("fill")
        b.add(PIfEq(I(3, k_nq + 4), I(1, 12), then_items=(PGoto("5*"),)))
        b.add(IndexIncr(I(3, k_nq + 4)))
        b.add(IndirectCopy(ZIndirect(3, k_nq + 4), ZIndirect(1, 7)))
        b.goto("fill")
        b.anchor("5*")
        b.add(IndexIncr(I(1, 5)))
        b.goto("q:1")

        # P''_{N_Q}: the semi-decider with registers moved to tape 3, a step
        # guard in front of every instruction, the frontier fill after every
        # type-7 site, and the stop label replaced by the success jump.
        for label, instr in nq.program.labelled():
            b.anchor(f"q:{label}")
            if isinstance(instr, Stop):
                b.goto("2tilde")
                continue
            b.add(
                PIfEq(
                    I(1, 9),
                    I(1, 5),
                    then_items=(PGoto("2bar"),),
                    else_items=(IndexIncr(I(1, 9)),),
                )
            )
            b.add(_rewrite_instruction_to_tape(instr, 3, label, "q:"))
            if isinstance(instr, IndexIncr):
                b.add(PInit(3, I(3, k_nq + 1), I(1, 7), src_tape=1, advance_source=False))

        # 2bar: next search iteration.  The displayed construction jumps to
        # the decode line; re-entering at 1* keeps tape 3 canonical (see the
        # decisions ledger).
        b.anchor("2bar")
        b.add(IndexIncr(I(1, 3)))
        b.goto("1*")

        # 2~/3~/4~: hand the witnessing guess to the source's destination
        # register, account for the consumed window, dispatch back.
        b.anchor("2tilde")
        b.add(PIndexCopy(I(1, 11), I(1, 1)))
        b.add(IndexIncr(I(1, 11)))
        b.add(IndirectCopy(ZIndirect(2, k_m + 1), ZIndirect(1, 11)))
        b.anchor("3tilde")
        b.add(PIndexAdd(I(1, 1), I(1, 4)))
        b.anchor("4tilde")
        b.add(PDispatch(I(1, 2), I(1, 8), tuple(f"m:{v}" for v in range(2, lp + 1))))

    # P_M': the source program on tape 2; choice instructions become the
    # bookkeeping writes plus the jump into the search.
    for label, instr in m.program.labelled():
        b.anchor(f"m:{label}")
        if isinstance(instr, Stop):
            b.add(PCopy(1, I(1, 1), 2, I(2, k_m + 2), I(2, 1), reset=True))
            b.add(Stop())
        elif isinstance(instr, NuAssign):
            b.add(PIndexSet(I(1, 2), label + 1))
            b.add(PIndexSet(I(2, k_m + 1), instr.dest.index))
            b.goto("1*")
        else:
            b.add(_rewrite_instruction_to_tape(instr, 2, label, "m:"))

    pseudo, anchors = b.finalize()
    program, cmap = expand_pseudo_mapped(pseudo, tapes=3)
    label_map = {
        src: cmap.label_map[anchors[f"m:{src}"]] for src in range(1, lp + 1)
    }
    spec = MachineSpec(
        program=program,
        structure=m.structure,
        kind=ND(),
        tapes=3,
        index_register_counts=inferred_index_counts(program, 3),
    )
    final_anchors = {name: cmap.label_map[pos] for name, pos in anchors.items()}
    return CompiledMachine(spec, CompilationMap(label_map, final_anchors, roles))


# ---------------------------------------------------------------------------
# Special oracles: fixed-arity or decidable Q
# ---------------------------------------------------------------------------


def compile_special(m: MachineSpec, case: str, n_q: Optional[int] = None) -> CompiledMachine:
    """Compile a choice-operator machine under one of the simpler oracle
    disciplines:

    * ``a1``: Q of fixed arity, decided by a characteristic-function machine
      (two constants and identity required);
    * ``a2``: Q of fixed arity (pass ``n_q``), semi-decided by a machine;
    * ``a3``: Q of unbounded arity, decided by a characteristic-function
      machine (two constants and identity required).

    A query prefix already at least as long as a fixed arity spins forever;
    so does a rejected candidate window under a1/a3.
    """
    if not isinstance(m.kind, NuOracle):
        raise CaseMismatch("compile_special expects a choice-operator machine")
    if m.tapes != 1:
        raise CaseMismatch("compile_special expects a 1-tape source machine")
    oracle = m.kind.oracle
    structure = m.structure
    if case == "a1":
        if not isinstance(oracle, FixedArityDecider):
            raise CaseMismatch("case a1 needs a fixed-arity decider oracle")
        nq_machine, arity, test_output = oracle.machine, oracle.n_q, True
    elif case == "a2":
        if not isinstance(oracle, SemiDecider):
            raise CaseMismatch("case a2 needs a semi-decider oracle")
        if n_q is None:
            raise CaseMismatch("case a2 needs the oracle's arity n_q")
        nq_machine, arity, test_output = oracle.machine, n_q, False
    elif case == "a3":
        if not isinstance(oracle, Decider):
            raise CaseMismatch("case a3 needs a decider oracle")
        nq_machine, arity, test_output = oracle.machine, None, True
    else:
        raise CaseMismatch(f"unknown case {case!r}")
    if test_output:
        if structure.signature.constant_count < 2:
            raise CaseMismatch(f"case {case} needs two constants")
        if not structure.identity_available:
            raise CaseMismatch(f"case {case} needs the identity relation")
    if nq_machine.tapes != 1 or not isinstance(nq_machine.kind, Deterministic):
        raise CaseMismatch("the oracle machine must be a deterministic 1-tape machine")
    _require_valid(m, "source machine")
    _require_valid(nq_machine, "oracle machine")

    k_m = m.kappa[0]
    k_nq = nq_machine.kappa[0]
    jmax_nq = _max_direct_z(nq_machine.program)
    lp = m.program.last_label
    I = lambda t, k: IReg(t, k)
    nu_sites = [
        label for label, instr in m.program.labelled() if isinstance(instr, NuAssign)
    ]

    b = SegmentBuilder()
    b.anchor("init")
    b.add(PCopy(2, I(2, 1), 1, I(1, 7), I(1, 1), reset=False))
    b.goto("m:1")

    if nu_sites:
        b.anchor("1*")
        b.add(PCopy(3, I(3, 1), 2, I(2, k_m + 2), I(2, 1), reset=True))
        if arity is not None:
            # if n0 < n_q then m := n_q - n0 else spin: a literal-comparison
            # chain over the possible prefix lengths 1 .. n_q - 1.
            probe = I(1, 3)
            b.add(IndexSetOne(probe))
            for v in range(1, arity):
                b.anchor(f"case:{v}")
                b.add(
                    PIfEq(I(3, 1), probe, then_items=(
                        PIndexSet(I(1, 4), arity - v),
                        PGoto("run"),
                    ))
                )
                b.add(IndexIncr(probe))
            b.goto("spin")
            b.anchor("run")
        else:
            # for m := 1, 2, ... do: the window grows until a run accepts.
            b.add(IndexSetOne(I(1, 4)))
            b.anchor("run")
        b.add(PIndexAdd(I(1, 6), I(1, 4), base=I(3, 1)))
        b.add(PIndexCopy(I(1, 7), I(1, 1)))
        b.add(PIndexCopy(I(3, k_nq + 3), I(3, 1)))
        b.add(PCopyRange(3, I(3, k_nq + 3), 1, I(1, 7), I(1, 6)))
        for j in range(2, k_nq + 1):
            b.add(IndexSetOne(I(3, j)))
        b.add(PIndexCopy(I(3, 1), I(1, 6)))
        b.add(PIndexCopy(I(3, k_nq + 1), I(3, 1)))
        b.add(PIndexCopy(I(3, k_nq + 2), I(3, k_nq + 1)))
        b.add(PInit(3, I(3, k_nq + 1), I(1, 7), src_tape=1, advance_source=False))
        for _ in range(jmax_nq):
            b.add(PInit(3, I(3, k_nq + 1), I(1, 7), src_tape=1, advance_source=False))
        b.goto("q:1")

        # The oracle machine runs to completion on tape 3 (no step guard).
        for label, instr in nq_machine.program.labelled():
            b.anchor(f"q:{label}")
            if isinstance(instr, Stop):
                b.goto("accept" if test_output else "2tilde")
                continue
            b.add(_rewrite_instruction_to_tape(instr, 3, label, "q:"))
            if isinstance(instr, IndexIncr):
                b.add(PInit(3, I(3, k_nq + 1), I(1, 7), src_tape=1, advance_source=False))

        if test_output:
            b.anchor("accept")
            b.add(
                PConstGuard(
                    ZDirect(3, 1),
                    1,
                    "2tilde",
                    "reject",
                    structure.identity_relation,
                )
            )
            b.anchor("reject")
            if arity is None:
                # a3: try the next window length.
                b.add(IndexIncr(I(1, 4)))
                b.goto("run")
            else:
                b.goto("spin")

        b.anchor("2tilde")
        b.add(PIndexCopy(I(1, 11), I(1, 1)))
        b.add(IndexIncr(I(1, 11)))
        b.add(IndirectCopy(ZIndirect(2, k_m + 1), ZIndirect(1, 11)))
        b.add(PIndexAdd(I(1, 1), I(1, 4)))
        b.add(PDispatch(I(1, 2), I(1, 8), tuple(f"m:{v}" for v in range(2, lp + 1))))
        b.anchor("spin")
        b.goto("spin")

    for label, instr in m.program.labelled():
        b.anchor(f"m:{label}")
        if isinstance(instr, Stop):
            b.add(PCopy(1, I(1, 1), 2, I(2, k_m + 2), I(2, 1), reset=True))
            b.add(Stop())
        elif isinstance(instr, NuAssign):
            b.add(PIndexSet(I(1, 2), label + 1))
            b.add(PIndexSet(I(2, k_m + 1), instr.dest.index))
            b.goto("1*")
        else:
            b.add(_rewrite_instruction_to_tape(instr, 2, label, "m:"))

    pseudo, anchors = b.finalize()
    program, cmap = expand_pseudo_mapped(pseudo, tapes=3)
    label_map = {src: cmap.label_map[anchors[f"m:{src}"]] for src in range(1, lp + 1)}
    spec = MachineSpec(
        program=program,
        structure=structure,
        kind=ND(),
        tapes=3,
        index_register_counts=inferred_index_counts(program, 3),
    )
    final_anchors = {name: cmap.label_map[pos] for name, pos in anchors.items()}
    return CompiledMachine(spec, CompilationMap(label_map, final_anchors, {}))


# ---------------------------------------------------------------------------
# Nondeterministic machine -> choice-operator machine over the full universe
# ---------------------------------------------------------------------------


def compile_nd_to_nu(m: MachineSpec) -> CompiledMachine:
    """Replace guessed inputs by on-demand choice-operator guesses.

    The compiled machine mirrors the source registers exactly and keeps a
    frontier register (initialized to the input length) counting the cells
    guesses have been materialized into.  Every type-7 site first
    materializes one fresh guess, so a guess exists before the register
    could reach its cell; registers referenced by literal index beyond what
    a shortest input covers get their guesses materialized up front.
    """
    if not isinstance(m.kind, ND):
        raise CaseMismatch("compile_nd_to_nu expects a nondeterministic machine")
    if m.tapes != 1:
        raise CaseMismatch("compile_nd_to_nu expects a 1-tape source machine")
    _require_valid(m, "source machine")

    k_m = m.kappa[0]
    frontier = IReg(1, k_m + 1)
    save = IReg(1, k_m + 2)
    one = IReg(1, k_m + 3)
    jmax = _max_direct_z(m.program)
    prepend = max(0, jmax - 1)
    lp = m.program.last_label

    b = SegmentBuilder()
    b.anchor("init")
    b.add(PIndexCopy(frontier, IReg(1, 1)))
    for _ in range(prepend):
        b.add(PInitGuess(frontier, save, one))
    for label, instr in m.program.labelled():
        b.anchor(f"m:{label}")
        if isinstance(instr, IndexIncr):
            b.add(PInitGuess(frontier, save, one))
            b.add(instr)
        elif isinstance(instr, (RelBranch, IndexBranch)):
            b.add(
                dataclasses.replace(
                    instr,
                    then_label=f"m:{instr.then_label}",
                    else_label=f"m:{instr.else_label}",
                )
            )
        else:
            b.add(instr)

    pseudo, anchors = b.finalize()
    program, cmap = expand_pseudo_mapped(pseudo, tapes=1)
    label_map = {src: cmap.label_map[anchors[f"m:{src}"]] for src in range(1, lp + 1)}
    spec = MachineSpec(
        program=program,
        structure=m.structure,
        kind=NuOracle(FullUniverse()),
        tapes=1,
        index_register_counts=inferred_index_counts(program, 1),
    )
    final_anchors = {name: cmap.label_map[pos] for name, pos in anchors.items()}
    roles = {"guess_frontier": frontier, "guess_save": save, "guess_one": one}
    return CompiledMachine(spec, CompilationMap(label_map, final_anchors, roles))


# ---------------------------------------------------------------------------
# Tape flattening
# ---------------------------------------------------------------------------


def flatten_tapes(m: MachineSpec) -> CompiledMachine:
    """Simulate a d-tape machine on one tape with interleaved tracks.

    Virtual cell (t, i) lives at flat cell d*(i-1) + t.  A prologue moves
    the input onto track 1 (descending, so nothing is clobbered) and seeds
    every literally-referenced cell of tracks 2..d with the default value;
    a frontier register per track extends that seeding one cell per type-7
    increment, so a read never sees another track's leftovers.  The stop
    instruction gains an epilogue compacting track 1 back into the flat
    prefix the output procedure reads.

    For a nondeterministic source the guess tuple of the flat machine is
    read at track-1 positions: guess q of the source corresponds to flat
    tuple position d*(n+q-1) + 1 - n for an input of length n.  Values at
    other positions are never read.  Oracle kinds are not supported.
    """
    d = m.tapes
    if d == 1:
        identity = {label: label for label, _ in m.program.labelled()}
        return CompiledMachine(m, CompilationMap(identity, {}, {}))
    if not isinstance(m.kind, (Deterministic, ND)):
        raise CaseMismatch("flatten_tapes supports deterministic and ND machines only")
    _require_valid(m, "source machine")

    kappa = m.kappa
    offsets = [0] * (d + 1)
    for t in range(2, d + 1):
        offsets[t] = offsets[t - 1] + kappa[t - 2]
    total_iregs = offsets[d] + kappa[d - 1]

    def flat_reg(t: int, k: int) -> IReg:
        return IReg(1, offsets[t] + k)

    def flat_cell(t: int, j: int) -> int:
        return d * (j - 1) + t

    nxt = total_iregs
    def scratch() -> IReg:
        nonlocal nxt
        nxt += 1
        return IReg(1, nxt)

    a1 = scratch()
    a2 = scratch()
    ds = scratch()  # track-1 address of the default value (input's last cell)
    one = scratch()
    iv = scratch()
    tmp = scratch()
    qreg = scratch()
    frontier = {t: scratch() for t in range(2, d + 1)}

    jmax = {t: max(1, _max_direct_z(m.program, t)) for t in range(2, d + 1)}
    lp = m.program.last_label

    b = SegmentBuilder()
    b.anchor("prologue")
    b.add(IndexSetOne(one))
    b.add(PIndexCopy(iv, flat_reg(1, 1)))
    b.anchor("rel_loop")
    b.add(PIfEq(iv, one, then_items=(PGoto("rel_done"),)))
    b.add(PFlatAddr(a1, iv, 1, d))
    b.add(IndirectCopy(ZIndirect(1, a1.index), ZIndirect(1, iv.index)))
    b.add(PIndexPred(tmp, iv))
    b.add(PIndexCopy(iv, tmp))
    b.goto("rel_loop")
    b.anchor("rel_done")
    b.add(PFlatAddr(ds, flat_reg(1, 1), 1, d))
    for t in range(2, d + 1):
        for j in range(1, jmax[t] + 1):
            b.add(PIndexSet(a1, flat_cell(t, j)))
            b.add(IndirectCopy(ZIndirect(1, a1.index), ZIndirect(1, ds.index)))
        b.add(PIndexSet(frontier[t], jmax[t]))
    b.goto("m:1")

    for label, instr in m.program.labelled():
        b.anchor(f"m:{label}")
        if isinstance(instr, Stop):
            b.anchor("epilogue")
            b.add(IndexSetOne(qreg))
            b.anchor("ep_loop")
            b.add(PFlatAddr(a1, qreg, 1, d))
            b.add(IndirectCopy(ZIndirect(1, qreg.index), ZIndirect(1, a1.index)))
            b.add(PIfEq(qreg, flat_reg(1, 1), then_items=(PGoto("ep_done"),)))
            b.add(IndexIncr(qreg))
            b.goto("ep_loop")
            b.anchor("ep_done")
            b.add(Stop())
        elif isinstance(instr, Compute):
            b.add(
                Compute(
                    ZDirect(1, flat_cell(instr.dest.tape, instr.dest.index)),
                    instr.fn,
                    tuple(ZDirect(1, flat_cell(a.tape, a.index)) for a in instr.args),
                )
            )
        elif isinstance(instr, SetConst):
            b.add(SetConst(ZDirect(1, flat_cell(instr.dest.tape, instr.dest.index)), instr.const))
        elif isinstance(instr, RelBranch):
            b.add(
                RelBranch(
                    instr.rel,
                    tuple(ZDirect(1, flat_cell(a.tape, a.index)) for a in instr.args),
                    f"m:{instr.then_label}",
                    f"m:{instr.else_label}",
                )
            )
        elif isinstance(instr, IndexBranch):
            b.add(
                IndexBranch(
                    flat_reg(instr.left.tape, instr.left.index),
                    flat_reg(instr.right.tape, instr.right.index),
                    f"m:{instr.then_label}",
                    f"m:{instr.else_label}",
                )
            )
        elif isinstance(instr, IndexSetOne):
            b.add(IndexSetOne(flat_reg(instr.reg.tape, instr.reg.index)))
        elif isinstance(instr, IndexIncr):
            t = instr.reg.tape
            reg = flat_reg(t, instr.reg.index)
            if t >= 2:
                # Extend the track's seeded region when this register sits at
                # the frontier: the address of virtual cell F+1 is
                # d*F + t = d*((F+1)-1) + t, computed as offset t + d.
                b.add(
                    PIfEq(
                        reg,
                        frontier[t],
                        then_items=(
                            PFlatAddr(a1, frontier[t], t + d, d),
                            IndirectCopy(ZIndirect(1, a1.index), ZIndirect(1, ds.index)),
                            IndexIncr(frontier[t]),
                        ),
                    )
                )
            b.add(IndexIncr(reg))
        elif isinstance(instr, IndirectCopy):
            b.add(PFlatAddr(a1, flat_reg(instr.dest.tape, instr.dest.ireg), instr.dest.tape, d))
            b.add(PFlatAddr(a2, flat_reg(instr.src.tape, instr.src.ireg), instr.src.tape, d))
            b.add(IndirectCopy(ZIndirect(1, a1.index), ZIndirect(1, a2.index)))
        else:
            raise CaseMismatch(
                f"flatten_tapes cannot translate a type-{instruction_type(instr)} instruction"
            )

    pseudo, anchors = b.finalize()
    program, cmap = expand_pseudo_mapped(pseudo, tapes=1)
    label_map = {src: cmap.label_map[anchors[f"m:{src}"]] for src in range(1, lp + 1)}
    spec = MachineSpec(
        program=program,
        structure=m.structure,
        kind=m.kind,
        tapes=1,
        index_register_counts=inferred_index_counts(program, 1),
    )
    final_anchors = {name: cmap.label_map[pos] for name, pos in anchors.items()}
    roles = {"default_source": ds, **{f"track{t}_frontier": frontier[t] for t in range(2, d + 1)}}
    return CompiledMachine(spec, CompilationMap(label_map, final_anchors, roles))


def strided_guess_tuple(
    source_guesses: Sequence[Value], n: int, d: int, fill: Value
) -> tuple[Value, ...]:
    """Embed a d-tape machine's guess tuple into the flat machine's guess
    layout: source guess q belongs at flat cell d*(n+q-1)+1, i.e. at tuple
    position d*(n+q-1)+1-n; other positions carry the fill value (they are
    never read)."""
    ys = tuple(source_guesses)
    if not ys:
        return ()
    top = d * (n + len(ys) - 1) + 1 - n
    flat = [fill] * top
    for q, y in enumerate(ys, start=1):
        flat[d * (n + q - 1) + 1 - n - 1] = y
    return tuple(flat)
