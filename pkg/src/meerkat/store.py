"""Runtime store: value cells for state variables and definitions, plus the
transactional, glitch-free propagation engine.

The store never mutates in place.  Every operation returns a fresh `Store`
sharing unchanged cells, so an exception anywhere leaves the caller's
store exactly as it was, and any `Store` value is a consistent committed
snapshot that can be read from other threads without locking.

A propagation wave recomputes each affected definition exactly once, in
dependency order, so no definition ever observes a mix of pre- and
post-transaction inputs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .syntax import (
    ActionBody,
    ActionLit,
    App,
    BinOp,
    DeclKind,
    Expr,
    If,
    Lambda,
    Lit,
    Program,
    Ref,
    Unit,
    render,
)
from .typesys import TypeEnv

DEFAULT_HIST_CAP = 1024

_WRAP = 2**64
_INT_MIN = -(2**63)


class EvalError(Exception):
    """A runtime fault during expression evaluation. Aborts the transaction."""

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason
        self.message = message

    def to_json(self) -> dict:
        return {"reason": self.reason, "message": self.message}


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntV:
    v: int


@dataclass(frozen=True)
class BoolV:
    v: bool


@dataclass(frozen=True)
class StringV:
    v: str


@dataclass(frozen=True)
class UnitV:
    pass


UNIT_V = UnitV()

# captured lambda locals, sorted by name for canonical equality
LocalBindings = tuple[tuple[str, "Value"], ...]


@dataclass(frozen=True)
class ClosureV:
    param: str
    body: Expr
    env: LocalBindings = ()


@dataclass(frozen=True)
class ActionV:
    """A suspended write sequence.

    Carries the lambda-local bindings visible where the literal was
    evaluated, so an action built inside a function can still evaluate its
    right-hand sides when triggered later.
    """

    body: ActionBody
    env: LocalBindings = ()


Value = IntV | BoolV | StringV | UnitV | ClosureV | ActionV


def _capture(ctx: Mapping[str, "Value"]) -> LocalBindings:
    return tuple(sorted(ctx.items()))


def value_to_text(v: Value) -> str:
    if isinstance(v, IntV):
        return str(v.v)
    if isinstance(v, BoolV):
        return "true" if v.v else "false"
    if isinstance(v, StringV):
        return '"' + v.v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, UnitV):
        return "()"
    if isinstance(v, ClosureV):
        return render(Lambda(v.param, v.body))
    return render(ActionLit(v.body))


def value_to_json(v: Value):
    if isinstance(v, IntV):
        return v.v
    if isinstance(v, BoolV):
        return v.v
    if isinstance(v, StringV):
        return v.v
    if isinstance(v, UnitV):
        return None
    if isinstance(v, ClosureV):
        return {"fn": render(Lambda(v.param, v.body)), "captured": {n: value_to_json(x) for n, x in v.env}}
    return {"action": render(ActionLit(v.body)), "captured": {n: value_to_json(x) for n, x in v.env}}


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarCell:
    """A state-variable cell: current value and the pre-image of the last
    committed write."""

    c: Value
    prev: Value


# history entries are (txn, value) pairs in ascending txn order
History = tuple[tuple[int, Value], ...]


@dataclass(frozen=True)
class DefCell:
    """A definition cell.

    `done` holds the transactions whose propagation fully reached this
    cell; `hist` keeps the committed value per transaction that actually
    recomputed it (a bounded ring); `upda` holds admitted-but-unapplied
    transactions (transient inside a wave); `repi` tags the logical
    replicas where the definition is materialized.
    """

    c: Value
    e: Expr
    prev: Value
    done: frozenset[int] = frozenset()
    hist: History = ()
    upda: frozenset[int] = frozenset()
    repi: frozenset[str] = frozenset({"local"})


def _hist_put(hist: History, txn: int, v: Value, cap: int) -> History:
    if hist and hist[-1][0] == txn:
        hist = hist[:-1] + ((txn, v),)
    else:
        hist = hist + ((txn, v),)
    if len(hist) > cap:
        hist = hist[len(hist) - cap:]
    return hist


def hist_value_at(cell: DefCell, txn: int) -> Value | None:
    """The committed value of the cell as of transaction `txn`, if recorded."""
    out = None
    for t, v in cell.hist:
        if t > txn:
            break
        out = v
    return out


@dataclass(frozen=True)
class Change:
    """One observable cell change committed by a transaction."""

    name: str
    old: Value | None  # None when the name is newly created
    new: Value


@dataclass(frozen=True)
class PropagationResult:
    """What one committed transaction did: its id, the value changes, and the
    definitions it recomputed, in recomputation order."""

    txn: int | None
    changes: tuple[Change, ...] = ()
    recomputed: tuple[str, ...] = ()


class Store:
    """The full runtime store: V cells, D cells, and the dependency graph."""

    __slots__ = ("vars", "defs", "depgraph", "txn", "hist_cap")

    def __init__(
        self,
        vars: Mapping[str, VarCell] | None = None,
        defs: Mapping[str, DefCell] | None = None,
        depgraph: Mapping[str, frozenset[str]] | None = None,
        txn: int = 0,
        hist_cap: int = DEFAULT_HIST_CAP,
    ):
        self.vars: dict[str, VarCell] = dict(vars or {})
        self.defs: dict[str, DefCell] = dict(defs or {})
        self.depgraph: dict[str, frozenset[str]] = dict(depgraph or {})
        self.txn = txn
        self.hist_cap = hist_cap

    def names(self) -> frozenset[str]:
        return frozenset(self.vars) | frozenset(self.defs)

    def __contains__(self, name: str) -> bool:
        return name in self.vars or name in self.defs

    def value_of(self, name: str) -> Value:
        if name in self.vars:
            return self.vars[name].c
        return self.defs[name].c

    def values(self) -> dict[str, Value]:
        """Current value of every cell; the observable state of the store."""
        out = {n: c.c for n, c in self.vars.items()}
        out.update({n: c.c for n, c in self.defs.items()})
        return out

    def def_exprs(self) -> dict[str, Expr]:
        return {n: c.e for n, c in self.defs.items()}

    def dependents(self) -> dict[str, set[str]]:
        rev: dict[str, set[str]] = {n: set() for n in self.depgraph}
        for n, deps in self.depgraph.items():
            for d in deps:
                rev.setdefault(d, set()).add(n)
        return rev

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Store)
            and self.vars == other.vars
            and self.defs == other.defs
            and self.depgraph == other.depgraph
            and self.txn == other.txn
        )

    def __repr__(self) -> str:
        vs = ", ".join(f"{n}={value_to_text(c.c)}" for n, c in self.vars.items())
        ds = ", ".join(f"{n}={value_to_text(c.c)}" for n, c in self.defs.items())
        return f"Store(txn={self.txn}, vars=[{vs}], defs=[{ds}])"


def empty_store(hist_cap: int = DEFAULT_HIST_CAP) -> Store:
    return Store(hist_cap=hist_cap)


def store_to_json(store: Store) -> dict:
    return {
        "txn": store.txn,
        "vars": {n: value_to_json(c.c) for n, c in sorted(store.vars.items())},
        "defs": {
            n: {"c": value_to_json(c.c), "expr": render(c.e)}
            for n, c in sorted(store.defs.items())
        },
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _wrap64(n: int) -> int:
    return (n - _INT_MIN) % _WRAP + _INT_MIN


def _int_div(a: int, b: int) -> int:
    if b == 0:
        raise EvalError("DivByZero", "division by zero")
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def eval_expr(
    store: Store,
    ctx: Mapping[str, Value],
    e: Expr,
    var_overlay: Mapping[str, Value] | None = None,
    on_ref: Callable[[str], None] | None = None,
) -> Value:
    """Call-by-value evaluation against a store snapshot.

    Locals in `ctx` shadow top-level names.  Top-level reads go to the
    live cells each time (closures capture locals only).  `var_overlay`
    supplies not-yet-committed state-variable values for action bodies;
    `on_ref` observes every top-level read (used by tests to check that
    inferred dependency sets are sound).  Never mutates the store.
    """
    if isinstance(e, Lit):
        v = e.value
        if isinstance(v, Unit):
            return UNIT_V
        if isinstance(v, bool):
            return BoolV(v)
        if isinstance(v, int):
            return IntV(v)
        return StringV(v)
    if isinstance(e, Ref):
        name = e.name
        if name in ctx:
            return ctx[name]
        if on_ref is not None:
            on_ref(name)
        if var_overlay is not None and name in var_overlay:
            return var_overlay[name]
        if name in store.vars:
            return store.vars[name].c
        if name in store.defs:
            return store.defs[name].c
        raise EvalError("UnboundName", f"'{name}' is not bound")
    if isinstance(e, Lambda):
        return ClosureV(e.param, e.body, _capture(ctx))
    if isinstance(e, ActionLit):
        return ActionV(e.body, _capture(ctx))
    if isinstance(e, App):
        fn = eval_expr(store, ctx, e.fn, var_overlay, on_ref)
        arg = eval_expr(store, ctx, e.arg, var_overlay, on_ref)
        if not isinstance(fn, ClosureV):
            raise EvalError("NotAFunction", f"cannot apply {value_to_text(fn)}")
        call_ctx = dict(fn.env)
        call_ctx[fn.param] = arg
        return eval_expr(store, call_ctx, fn.body, var_overlay, on_ref)
    if isinstance(e, BinOp):
        lhs = eval_expr(store, ctx, e.lhs, var_overlay, on_ref)
        rhs = eval_expr(store, ctx, e.rhs, var_overlay, on_ref)
        op = e.op
        if op in ("&&", "||"):
            assert isinstance(lhs, BoolV) and isinstance(rhs, BoolV)
            return BoolV(lhs.v and rhs.v) if op == "&&" else BoolV(lhs.v or rhs.v)
        if op == "==":
            return BoolV(lhs == rhs)
        assert isinstance(lhs, IntV) and isinstance(rhs, IntV)
        a, b = lhs.v, rhs.v
        if op == "+":
            return IntV(_wrap64(a + b))
        if op == "-":
            return IntV(_wrap64(a - b))
        if op == "*":
            return IntV(_wrap64(a * b))
        if op == "/":
            return IntV(_wrap64(_int_div(a, b)))
        if op == "<":
            return BoolV(a < b)
        raise EvalError("BadOperator", f"unknown operator {op!r}")
    if isinstance(e, If):
        cond = eval_expr(store, ctx, e.cond, var_overlay, on_ref)
        assert isinstance(cond, BoolV)
        branch = e.then if cond.v else e.orelse
        return eval_expr(store, ctx, branch, var_overlay, on_ref)
    raise EvalError("BadExpression", f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Wave propagation
# ---------------------------------------------------------------------------

def _affected_defs(store: Store, seeds: Iterable[str]) -> set[str]:
    """Definitions transitively downstream of any seed name."""
    rev = store.dependents()
    out: set[str] = set()
    pending = list(seeds)
    while pending:
        n = pending.pop()
        for dep in rev.get(n, ()):
            if dep not in out and dep in store.defs:
                out.add(dep)
                pending.append(dep)
    return out


def _topo_defs(store: Store, names: set[str]) -> list[str]:
    """Dependency-first order over `names`, lexicographic tie-break."""
    indeg = {}
    rdeps: dict[str, list[str]] = {}
    for n in names:
        deps_in = [d for d in store.depgraph.get(n, ()) if d in names]
        indeg[n] = len(deps_in)
        for d in deps_in:
            rdeps.setdefault(d, []).append(n)
    heap = sorted(n for n, d in indeg.items() if d == 0)
    heapq.heapify(heap)
    out = []
    while heap:
        n = heapq.heappop(heap)
        out.append(n)
        for m in rdeps.get(n, ()):
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, m)
    if len(out) != len(names):
        raise ValueError("dependency graph has a cycle")
    return out


def _run_wave(
    vars: dict[str, VarCell],
    defs: dict[str, DefCell],
    store_proto: Store,
    affected: set[str],
    txn: int,
    cap: int,
) -> list[str]:
    """Recompute `affected` definitions in dependency order, in place on the
    working dicts.  Every other definition just records the transaction.
    Returns the recomputation order."""
    order = _topo_defs(store_proto, affected)
    # admit the transaction on every cell it will touch
    for name in order:
        cell = defs[name]
        defs[name] = DefCell(
            cell.c, cell.e, cell.prev, cell.done, cell.hist, cell.upda | {txn}, cell.repi
        )
    for name in order:
        cell = defs[name]
        scratch = Store(vars, defs, store_proto.depgraph, txn, cap)
        new_c = eval_expr(scratch, {}, cell.e)
        defs[name] = DefCell(
            c=new_c,
            e=cell.e,
            prev=cell.prev if txn in {t for t, _ in cell.hist} else cell.c,
            done=cell.done | {txn},
            hist=_hist_put(cell.hist, txn, new_c, cap),
            upda=cell.upda - {txn},
            repi=cell.repi,
        )
    for name, cell in defs.items():
        if name not in affected and txn not in cell.done:
            defs[name] = DefCell(
                cell.c, cell.e, cell.prev, cell.done | {txn}, cell.hist, cell.upda, cell.repi
            )
    return order


def _diff(before: Mapping[str, Value | None], vars: dict, defs: dict) -> tuple[Change, ...]:
    changes = []
    for name in sorted(before):
        old = before[name]
        new = vars[name].c if name in vars else defs[name].c
        if old != new:
            changes.append(Change(name, old, new))
    return tuple(changes)


def propagate(
    store: Store, changed_vars: Mapping[str, Value], txn: int
) -> tuple[Store, PropagationResult]:
    """Commit a set of state-variable writes as one transaction.

    All writes land atomically, then every transitively affected
    definition is recomputed exactly once, in dependency order.
    Unaffected definitions record the transaction without recomputation.
    A fault during recomputation raises EvalError and commits nothing.
    """
    for name in changed_vars:
        if name not in store.vars:
            raise EvalError("NotAStateVariable", f"'{name}' is not a state variable")
    vars = dict(store.vars)
    defs = dict(store.defs)
    before: dict[str, Value | None] = {n: vars[n].c for n in changed_vars}
    affected = _affected_defs(store, changed_vars)
    before.update({n: defs[n].c for n in affected})
    for name, v in changed_vars.items():
        vars[name] = VarCell(c=v, prev=vars[name].c)
    order = _run_wave(vars, defs, store, affected, txn, store.hist_cap)
    new_store = Store(vars, defs, store.depgraph, txn, store.hist_cap)
    return new_store, PropagationResult(txn, _diff(before, vars, defs), tuple(order))


def init_cells(
    store: Store, delta_env: TypeEnv, r: Program, txn: int
) -> tuple[Store, PropagationResult]:
    """Apply an accepted evolution to the store.

    Installs each declaration left to right (so later declarations can
    read earlier ones), rebuilds the dependency graph from the new
    bindings, then runs one propagation wave over everything downstream
    of a declared name — all under a single transaction.  An empty
    program returns the store unchanged and consumes no transaction.
    Any fault leaves the caller's store untouched.
    """
    if not r.decls:
        return store, PropagationResult(None)
    vars = dict(store.vars)
    defs = dict(store.defs)
    depgraph = dict(store.depgraph)
    cap = store.hist_cap
    before: dict[str, Value | None] = {}
    declared: list[str] = []
    for d in r.decls:
        name = d.name
        if name not in before:
            before[name] = (
                vars[name].c if name in vars else defs[name].c if name in defs else None
            )
        declared.append(name)
        scratch = Store(vars, defs, depgraph, txn, cap)
        v = eval_expr(scratch, {}, d.init)
        if d.kind is DeclKind.STATE:
            old = vars.get(name)
            vars[name] = VarCell(c=v, prev=old.c if old else v)
            depgraph[name] = frozenset()
        else:
            binding = delta_env.get(name)
            assert binding is not None and not binding.is_state
            old_def = defs.get(name)
            defs[name] = DefCell(
                c=v,
                e=d.init,
                prev=old_def.c if old_def else v,
                done=(old_def.done if old_def else frozenset()) | {txn},
                hist=_hist_put(old_def.hist if old_def else (), txn, v, cap),
                upda=old_def.upda if old_def else frozenset(),
                repi=old_def.repi if old_def else frozenset({"local"}),
            )
            depgraph[name] = binding.deps.names()
    proto = Store(vars, defs, depgraph, txn, cap)
    # the wave covers everything downstream of a declared name, including
    # declarations from this very program that read a name redeclared later
    affected = _affected_defs(proto, declared)
    before.update({n: defs[n].c for n in affected if n not in before})
    order = _run_wave(vars, defs, proto, affected, txn, cap)
    new_store = Store(vars, defs, depgraph, txn, cap)
    return new_store, PropagationResult(txn, _diff(before, vars, defs), tuple(order))


def snapshot_read(store: Store, names: Iterable[str], txn_floor: int = 0) -> dict[str, Value]:
    """Read a set of cells from one consistent committed snapshot.

    Store values are immutable snapshots, so the read can never mix pre-
    and post-states of a transaction; `txn_floor` asserts the snapshot is
    recent enough.
    """
    if txn_floor > store.txn:
        raise ValueError(f"snapshot at txn {store.txn} is older than requested floor {txn_floor}")
    return {n: store.value_of(n) for n in names}


def merge_defs(
    d1: Mapping[str, DefCell],
    d2: Mapping[str, DefCell],
    merged_vars: Mapping[str, VarCell],
    depgraph: Mapping[str, frozenset[str]],
    hist_cap: int = DEFAULT_HIST_CAP,
) -> dict[str, DefCell]:
    """Merge the definition maps of two transactions run from the same base
    store with disjoint state-variable write sets.

    Bookkeeping sets union; each definition's current value is recomputed
    against the merged variable state (in dependency order), and the
    history entry of the later transaction is fixed up to that merged
    value so replay stays coherent.  Symmetric in its arguments.
    """
    if set(d1) != set(d2):
        raise ValueError("definition maps must cover the same names")
    merged: dict[str, DefCell] = {}
    vars = dict(merged_vars)
    scratch_defs = dict(d1)
    proto = Store(vars, scratch_defs, dict(depgraph), 0, hist_cap)
    for name in _topo_defs(proto, set(d1)):
        c1, c2 = d1[name], d2[name]
        if c1.e != c2.e:
            raise ValueError(f"'{name}' has diverging expressions; merge needs a common base")
        keys1 = {t for t, _ in c1.hist}
        keys2 = {t for t, _ in c2.hist}
        new1 = max(keys1 - keys2, default=None)
        new2 = max(keys2 - keys1, default=None)
        hist_map = dict(c1.hist)
        for t, v in c2.hist:
            if t in hist_map and hist_map[t] != v:
                raise ValueError(
                    f"'{name}' disagrees on transaction {t}; the inputs do not share a base"
                )
            hist_map[t] = v
        hist: History = tuple(sorted(hist_map.items()))
        scratch = Store(vars, scratch_defs, dict(depgraph), 0, hist_cap)
        new_c = eval_expr(scratch, {}, c1.e)
        if new1 is not None and new2 is not None:
            later, earlier_cell = (new1, c2) if new1 > new2 else (new2, c1)
            prev = earlier_cell.c
            hist = tuple((t, new_c if t == later else v) for t, v in hist)
        elif new1 is not None:
            prev = c1.prev
        elif new2 is not None:
            prev = c2.prev
        else:
            prev = c1.prev
        if len(hist) > hist_cap:
            hist = hist[len(hist) - hist_cap:]
        cell = DefCell(
            c=new_c,
            e=c1.e,
            prev=prev,
            done=c1.done | c2.done,
            hist=hist,
            upda=c1.upda | c2.upda,
            repi=c1.repi | c2.repi,
        )
        merged[name] = cell
        scratch_defs[name] = cell
    return merged
