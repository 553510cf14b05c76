"""The configuration stepper.

A `Config` bundles the typing environment, the store, and the two pending
queues: code evolutions submitted by programmers and `do` statements
submitted by users.  Step functions consume queue entries and return a new
config plus an outcome describing what happened; nothing here blocks or
shares mutable state, so a scheduler (the network server, the REPL, or the
exploration harness) owns all sequencing decisions.

Evolution approval follows a lock discipline: two evolutions may commit in
one step only when they rebind disjoint names and neither reads a name the
other rebinds (a write lock excludes all other readers).  Two actions may
run concurrently only when their statically planned write sets are
disjoint and neither reads a variable the other writes.  When no pending
evolution can be approved alone or in a pair, the evolution queue dies to
empty and every waiting submitter is notified.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

from .store import (
    ActionV,
    Change,
    EvalError,
    Store,
    ClosureV,
    BoolV,
    IntV,
    StringV,
    UnitV,
    Value,
    empty_store,
    eval_expr,
    init_cells,
    merge_defs,
    propagate,
)
from .syntax import DoStmt, Program
from .typesys import (
    Action,
    Base,
    Func,
    TypeCheckError,
    TypeEnv,
    check_do,
    compatible,
    env_merge,
    infer_program,
    well_formed,
)


@dataclass(frozen=True)
class Submission:
    """One queued item together with who submitted it."""

    item: Program | DoStmt
    who: object = "anon"


@dataclass(frozen=True)
class Config:
    """The runtime configuration: environment, store, and pending queues."""

    env: TypeEnv = field(default_factory=TypeEnv)
    store: Store = field(default_factory=empty_store)
    q_r: tuple[Submission, ...] = ()
    q_do: tuple[Submission, ...] = ()
    next_txn: int = 1

    def without_r(self, *subs: Submission) -> "Config":
        return replace(self, q_r=_remove(self.q_r, subs))

    def without_do(self, *subs: Submission) -> "Config":
        return replace(self, q_do=_remove(self.q_do, subs))


def _remove(queue: tuple[Submission, ...], subs: Sequence[Submission]) -> tuple[Submission, ...]:
    out = list(queue)
    for s in subs:
        out.remove(s)  # first occurrence; queues are multisets
    return tuple(out)


def initial_config(hist_cap: int | None = None) -> Config:
    store = empty_store(hist_cap) if hist_cap else empty_store()
    return Config(store=store)


# ---------------------------------------------------------------------------
# Lock table
# ---------------------------------------------------------------------------

class LockTable:
    """Name-level read/write locks used to judge concurrent steps.

    A write lock admits its owner for both reading and writing and
    excludes every other task entirely; read locks share.
    """

    def __init__(self):
        self.held: dict[str, tuple[str, object]] = {}  # name -> ("read", count) | ("write", owner)

    def try_write(self, name: str, owner: object) -> bool:
        cur = self.held.get(name)
        if cur is None:
            self.held[name] = ("write", owner)
            return True
        return cur == ("write", owner)

    def try_read(self, name: str, owner: object) -> bool:
        cur = self.held.get(name)
        if cur is None:
            self.held[name] = ("read", 1)
            return True
        if cur[0] == "read":
            self.held[name] = ("read", cur[1] + 1)
            return True
        return cur[1] == owner  # a writer may read its own locked name

    def write_locked_by_others(self, owner: object) -> frozenset[str]:
        return frozenset(
            n for n, (mode, who) in self.held.items() if mode == "write" and who != owner
        )


# ---------------------------------------------------------------------------
# Step outcomes
# ---------------------------------------------------------------------------

class StepOutcome:
    pass


@dataclass(frozen=True)
class Accepted(StepOutcome):
    """An evolution (or a pair of them) merged into the environment."""

    delta: TypeEnv
    changes: tuple[Change, ...]
    txn: int | None
    who: tuple = ()
    recomputed: tuple[str, ...] = ()


@dataclass(frozen=True)
class Rejected(StepOutcome):
    """A failed evolution.  `final` means the entry left the queue and the
    submitter must be notified; a non-final rejection reports why a pair
    cannot be approved concurrently while both entries stay queued."""

    report: object  # CompatReport | TypeCheckError | EvalError
    notified: tuple
    final: bool = True


@dataclass(frozen=True)
class Executed(StepOutcome):
    """An action (or merged pair) committed."""

    changes: tuple[Change, ...]
    txn: int | None
    who: tuple = ()
    recomputed: tuple[str, ...] = ()


@dataclass(frozen=True)
class ActionFailed(StepOutcome):
    error: object  # TypeCheckError | EvalError
    notified: tuple


@dataclass(frozen=True)
class QueueDied(StepOutcome):
    """The evolution queue died to empty; every waiting submitter is told."""

    notified: tuple


def outcome_to_json(o: StepOutcome) -> dict:
    from .store import value_to_json

    def chs(changes):
        return [
            {"name": c.name, "old": None if c.old is None else value_to_json(c.old), "new": value_to_json(c.new)}
            for c in changes
        ]

    if isinstance(o, Accepted):
        return {"outcome": "accepted", "txn": o.txn, "changes": chs(o.changes)}
    if isinstance(o, Rejected):
        rep = o.report
        detail = rep.to_json() if hasattr(rep, "to_json") else {"message": str(rep)}
        return {"outcome": "rejected", "final": o.final, "detail": detail}
    if isinstance(o, Executed):
        return {"outcome": "executed", "txn": o.txn, "changes": chs(o.changes)}
    if isinstance(o, ActionFailed):
        err = o.error
        detail = err.to_json() if hasattr(err, "to_json") else {"message": str(err)}
        return {"outcome": "failed", "detail": detail}
    if isinstance(o, QueueDied):
        return {"outcome": "queue_died", "count": len(o.notified)}
    raise TypeError(o)


# ---------------------------------------------------------------------------
# Queue submission
# ---------------------------------------------------------------------------

def submit_evolution(cfg: Config, r: Program, who: object = "anon") -> Config:
    """Enqueue a declaration sequence; nothing else changes."""
    return replace(cfg, q_r=cfg.q_r + (Submission(r, who),))


def submit_do(cfg: Config, d: DoStmt, who: object = "anon") -> Config:
    """Enqueue a user action; nothing else changes."""
    return replace(cfg, q_do=cfg.q_do + (Submission(d, who),))


# ---------------------------------------------------------------------------
# Evolution steps
# ---------------------------------------------------------------------------

def _declared_names(r: Program) -> frozenset[str]:
    return frozenset(d.name for d in r.decls)


def step_evolve_one(cfg: Config, pick: Submission) -> tuple[Config, StepOutcome]:
    """Approve (or finally reject) a single queued evolution.

    On success the new bindings overwrite-merge into the environment and
    the store is updated under one transaction.  On any failure the entry
    leaves the queue, the store stays untouched, and the submitter gets
    the report.
    """
    assert pick in cfg.q_r, "pick must be a queued evolution"
    r = pick.item
    assert isinstance(r, Program)
    try:
        delta = infer_program(cfg.env, r)
    except TypeCheckError as err:
        return cfg.without_r(pick), Rejected(err, (pick.who,))
    report = compatible(cfg.env, delta)
    if not report.ok:
        return cfg.without_r(pick), Rejected(report, (pick.who,))
    try:
        new_store, prop = init_cells(cfg.store, delta, r, cfg.next_txn)
    except EvalError as err:
        return cfg.without_r(pick), Rejected(err, (pick.who,))
    consumed = 1 if prop.txn is not None else 0
    new_cfg = replace(
        cfg,
        env=env_merge(cfg.env, delta),
        store=new_store,
        q_r=_remove(cfg.q_r, (pick,)),
        next_txn=cfg.next_txn + consumed,
    )
    return new_cfg, Accepted(delta, prop.changes, prop.txn, (pick.who,), prop.recomputed)


def _partition_envs(env: TypeEnv, write_sets: Sequence[frozenset[str]]) -> list[TypeEnv] | None:
    """Build each task's visible environment under the lock discipline, or
    None when any two write sets collide.

    Task i sees the full environment minus every name write-locked by a
    different task: a write lock admits only its owner, for reading too.
    """
    table = LockTable()
    for owner, names in enumerate(write_sets):
        for n in sorted(names):
            if not table.try_write(n, owner):
                return None
    return [env.without(table.write_locked_by_others(owner)) for owner in range(len(write_sets))]


def step_evolve_many(cfg: Config, picks: Sequence[Submission]) -> tuple[Config, StepOutcome]:
    """Approve several evolutions in one step.

    The scheduler's default width is two (see step_evolve_two), but the
    premises generalize: pairwise-disjoint rebind sets, each submission
    typed with every other submission's rebound names hidden, and the
    combined delta compatible with the environment.  All commit under a
    single transaction, or none do.  A failed premise leaves every entry
    queued and reports a non-final rejection.
    """
    remaining = cfg.q_r
    for p in picks:
        assert p in remaining, "picks must be distinct queued evolutions"
        remaining = _remove(remaining, (p,))
    programs = [p.item for p in picks]
    assert all(isinstance(r, Program) for r in programs)
    whos = tuple(p.who for p in picks)
    write_sets = [_declared_names(r) for r in programs]
    parts = _partition_envs(cfg.env, write_sets)
    if parts is None:
        overlap = sorted(
            {n for i, a in enumerate(write_sets) for b in write_sets[i + 1:] for n in a & b}
        )
        return cfg, Rejected(
            TypeCheckError("WriteConflict", f"submissions rebind the same names {overlap}"),
            whos,
            final=False,
        )
    try:
        deltas = [infer_program(env_i, r) for env_i, r in zip(parts, programs)]
    except TypeCheckError as err:
        return cfg, Rejected(err, whos, final=False)
    combined = TypeEnv()
    for delta in deltas:
        combined = env_merge(combined, delta)
    report = compatible(cfg.env, combined)
    if not report.ok:
        return cfg, Rejected(report, whos, final=False)
    try:
        union_prog = Program(tuple(d for r in programs for d in r.decls))
        new_store, prop = init_cells(cfg.store, combined, union_prog, cfg.next_txn)
    except EvalError as err:
        return cfg.without_r(*picks), Rejected(err, whos)
    consumed = 1 if prop.txn is not None else 0
    new_cfg = replace(
        cfg,
        env=env_merge(cfg.env, combined),
        store=new_store,
        q_r=_remove(cfg.q_r, picks),
        next_txn=cfg.next_txn + consumed,
    )
    return new_cfg, Accepted(combined, prop.changes, prop.txn, whos, prop.recomputed)


def step_evolve_two(cfg: Config, pick1: Submission, pick2: Submission) -> tuple[Config, StepOutcome]:
    """Approve two evolutions in one step (the scheduler's default width)."""
    return step_evolve_many(cfg, (pick1, pick2))


def step_queue_die(cfg: Config) -> tuple[Config, StepOutcome]:
    """Empty the evolution queue, notifying every pending submitter.

    The environment, store, and action queue are untouched.
    """
    if not cfg.q_r:
        raise ValueError("queue death needs a nonempty evolution queue")
    notified = tuple(s.who for s in cfg.q_r)
    return replace(cfg, q_r=()), QueueDied(notified)


# ---------------------------------------------------------------------------
# Action steps
# ---------------------------------------------------------------------------

def _run_action(store: Store, d: DoStmt) -> dict[str, Value]:
    """Evaluate the action expression and its writes against a snapshot.

    Each right-hand side sees the snapshot plus the earlier writes of the
    same action; definitions are read at their committed values.
    """
    av = eval_expr(store, {}, d.expr)
    assert isinstance(av, ActionV), "typechecked do must evaluate to an action"
    pending: dict[str, Value] = {}
    ctx = dict(av.env)
    for w in av.body.writes:
        pending[w.target] = eval_expr(store, ctx, w.rhs, var_overlay=pending)
    return pending


def step_do_one(cfg: Config, pick: Submission) -> tuple[Config, StepOutcome]:
    """Execute one queued action transactionally.

    All writes commit in one propagation wave, or none do.
    """
    assert pick in cfg.q_do, "pick must be a queued do"
    d = pick.item
    assert isinstance(d, DoStmt)
    gone = cfg.without_do(pick)
    try:
        check_do(cfg.env, d)
    except TypeCheckError as err:
        return gone, ActionFailed(err, (pick.who,))
    try:
        pending = _run_action(cfg.store, d)
        new_store, prop = propagate(cfg.store, pending, cfg.next_txn)
    except EvalError as err:
        return gone, ActionFailed(err, (pick.who,))
    new_cfg = replace(gone, store=new_store, next_txn=cfg.next_txn + 1)
    return new_cfg, Executed(prop.changes, prop.txn, (pick.who,), prop.recomputed)


def do_pair_viable(cfg: Config, d1: DoStmt, d2: DoStmt) -> bool:
    """Lock check for running two actions concurrently: disjoint write sets
    and neither reads a variable the other writes."""
    try:
        p1 = check_do(cfg.env, d1)
        p2 = check_do(cfg.env, d2)
    except TypeCheckError:
        return False
    table = LockTable()
    for n in sorted(p1.writes):
        if not table.try_write(n, 1):
            return False
    for n in sorted(p2.writes):
        if not table.try_write(n, 2):
            return False
    for n in sorted(p1.read_vars):
        if not table.try_read(n, 1):
            return False
    for n in sorted(p2.read_vars):
        if not table.try_read(n, 2):
            return False
    return True


def step_do_two(
    cfg: Config, pick1: Submission, pick2: Submission
) -> tuple[Config, tuple[StepOutcome, ...]]:
    """Execute two lock-compatible actions against the same base snapshot.

    Both run against the pre-step store with distinct transaction ids;
    their disjoint variable writes and their definition updates merge into
    one result.  A runtime fault in either action aborts only that action;
    the survivor commits alone.  Returns one outcome per distinct result.
    """
    assert pick1 in cfg.q_do and pick2 in _remove(cfg.q_do, (pick1,))
    d1, d2 = pick1.item, pick2.item
    assert isinstance(d1, DoStmt) and isinstance(d2, DoStmt)
    if not do_pair_viable(cfg, d1, d2):
        return cfg, (
            Rejected(
                TypeCheckError("LockConflict", "actions overlap on reads or writes"),
                (pick1.who, pick2.who),
                final=False,
            ),
        )
    gone = cfg.without_do(pick1, pick2)
    base = cfg.store
    t1, t2 = cfg.next_txn, cfg.next_txn + 1

    def attempt(d: DoStmt, txn: int):
        pending = _run_action(base, d)
        st, prop = propagate(base, pending, txn)
        return pending, st, prop

    res1 = err1 = None
    res2 = err2 = None
    try:
        res1 = attempt(d1, t1)
    except EvalError as e:
        err1 = e
    try:
        res2 = attempt(d2, t2)
    except EvalError as e:
        err2 = e

    if res1 and res2:
        pend1, st1, prop1 = res1
        pend2, st2, prop2 = res2
        merged_vars = dict(base.vars)
        merged_vars.update({n: st1.vars[n] for n in pend1})
        merged_vars.update({n: st2.vars[n] for n in pend2})
        try:
            defs = merge_defs(st1.defs, st2.defs, merged_vars, base.depgraph, base.hist_cap)
        except EvalError as e:
            # combined writes fault a definition the halves computed fine;
            # the earlier transaction stands, the later aborts
            new_cfg = replace(gone, store=st1, next_txn=t1 + 1)
            return new_cfg, (
                Executed(prop1.changes, t1, (pick1.who,), prop1.recomputed),
                ActionFailed(e, (pick2.who,)),
            )
        merged = Store(merged_vars, defs, base.depgraph, t2, base.hist_cap)
        before: dict[str, Value | None] = {}
        for prop in (prop1, prop2):
            for ch in prop.changes:
                before.setdefault(ch.name, ch.old)
        changes = tuple(
            Change(n, before[n], merged.value_of(n))
            for n in sorted(before)
            if before[n] != merged.value_of(n)
        )
        recomputed = tuple(dict.fromkeys(prop1.recomputed + prop2.recomputed))
        new_cfg = replace(gone, store=merged, next_txn=t2 + 1)
        return new_cfg, (Executed(changes, t2, (pick1.who, pick2.who), recomputed),)
    if res1:
        _, st1, prop1 = res1
        new_cfg = replace(gone, store=st1, next_txn=t1 + 1)
        return new_cfg, (
            Executed(prop1.changes, t1, (pick1.who,), prop1.recomputed),
            ActionFailed(err2, (pick2.who,)),
        )
    if res2:
        _, st2, prop2 = res2
        new_cfg = replace(gone, store=st2, next_txn=t2 + 1)
        return new_cfg, (
            ActionFailed(err1, (pick1.who,)),
            Executed(prop2.changes, t2, (pick2.who,), prop2.recomputed),
        )
    return gone, (ActionFailed(err1, (pick1.who,)), ActionFailed(err2, (pick2.who,)))


# ---------------------------------------------------------------------------
# Step enumeration and the quiescence driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    """A schedulable step, naming queue entries by index."""

    kind: str  # "evolve_one" | "evolve_two" | "do_one" | "do_two" | "queue_die"
    i: int = -1
    j: int = -1

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.i >= 0:
            out["i"] = self.i
        if self.j >= 0:
            out["j"] = self.j
        return out


def evolve_viable(cfg: Config, sub: Submission) -> bool:
    """Would this evolution be accepted right now (statically)?"""
    try:
        delta = infer_program(cfg.env, sub.item)
    except TypeCheckError:
        return False
    return compatible(cfg.env, delta).ok


def evolve_pair_viable(cfg: Config, s1: Submission, s2: Submission) -> bool:
    parts = _partition_envs(cfg.env, [_declared_names(s1.item), _declared_names(s2.item)])
    if parts is None:
        return False
    try:
        delta1 = infer_program(parts[0], s1.item)
        delta2 = infer_program(parts[1], s2.item)
    except TypeCheckError:
        return False
    return compatible(cfg.env, env_merge(delta1, delta2)).ok


def enabled_steps(cfg: Config) -> tuple[Step, ...]:
    """Every step the scheduler may fire from this configuration.

    Evolutions appear only when they would be approved (alone or as a
    pair); actions are always steppable one at a time and additionally as
    lock-compatible pairs.  When evolutions are pending but none is
    approvable in any combination, the only evolution step is queue death.
    """
    steps: list[Step] = []
    singles = [i for i, s in enumerate(cfg.q_r) if evolve_viable(cfg, s)]
    steps.extend(Step("evolve_one", i) for i in singles)
    pair_found = False
    for i in range(len(cfg.q_r)):
        for j in range(i + 1, len(cfg.q_r)):
            if evolve_pair_viable(cfg, cfg.q_r[i], cfg.q_r[j]):
                steps.append(Step("evolve_two", i, j))
                pair_found = True
    if cfg.q_r and not singles and not pair_found:
        steps.append(Step("queue_die"))
    steps.extend(Step("do_one", i) for i in range(len(cfg.q_do)))
    for i in range(len(cfg.q_do)):
        for j in range(i + 1, len(cfg.q_do)):
            if do_pair_viable(cfg, cfg.q_do[i].item, cfg.q_do[j].item):
                steps.append(Step("do_two", i, j))
    return tuple(steps)


def apply_step(cfg: Config, step: Step) -> tuple[Config, tuple[StepOutcome, ...]]:
    """Fire one step from `enabled_steps`."""
    if step.kind == "evolve_one":
        cfg2, out = step_evolve_one(cfg, cfg.q_r[step.i])
        return cfg2, (out,)
    if step.kind == "evolve_two":
        cfg2, out = step_evolve_two(cfg, cfg.q_r[step.i], cfg.q_r[step.j])
        return cfg2, (out,)
    if step.kind == "do_one":
        cfg2, out = step_do_one(cfg, cfg.q_do[step.i])
        return cfg2, (out,)
    if step.kind == "do_two":
        return step_do_two(cfg, cfg.q_do[step.i], cfg.q_do[step.j])
    if step.kind == "queue_die":
        cfg2, out = step_queue_die(cfg)
        return cfg2, (out,)
    raise ValueError(f"unknown step kind {step.kind!r}")


class ScheduleSource(Protocol):
    def choose(self, cfg: Config, options: Sequence[Step]) -> Step: ...


class RandomSchedule:
    """Seeded uniformly random scheduler; the default for live services."""

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)
        self.picks: list[int] = []

    def choose(self, cfg: Config, options: Sequence[Step]) -> Step:
        k = self.rng.randrange(len(options))
        self.picks.append(k)
        return options[k]


class FirstSchedule:
    """Always fires the first enabled step; a deterministic baseline."""

    def choose(self, cfg: Config, options: Sequence[Step]) -> Step:
        return options[0]


class FixedSchedule:
    """Replays a recorded sequence of option indices."""

    def __init__(self, picks: Sequence[int]):
        self.picks = list(picks)
        self.pos = 0

    def choose(self, cfg: Config, options: Sequence[Step]) -> Step:
        if self.pos >= len(self.picks):
            raise IndexError("replay schedule exhausted")
        k = self.picks[self.pos]
        self.pos += 1
        return options[k % len(options)]


def run_until_quiescent(
    cfg: Config, schedule: ScheduleSource | None = None
) -> tuple[Config, list[StepOutcome]]:
    """Fire schedule-chosen steps until both queues are empty.

    Terminates because every step removes at least one queue entry or is
    queue death, which empties the evolution queue outright.
    """
    schedule = schedule or FirstSchedule()
    outcomes: list[StepOutcome] = []
    while True:
        options = enabled_steps(cfg)
        if not options:
            assert not cfg.q_r and not cfg.q_do
            return cfg, outcomes
        step = schedule.choose(cfg, options)
        cfg, outs = apply_step(cfg, step)
        outcomes.extend(outs)


# ---------------------------------------------------------------------------
# Configuration health checks (used by property suites)
# ---------------------------------------------------------------------------

def value_conforms(v: Value, ty) -> bool:
    if isinstance(ty, Base):
        return {
            "Int": IntV,
            "Bool": BoolV,
            "String": StringV,
            "Unit": UnitV,
        }[ty.name] is type(v)
    if isinstance(ty, Func):
        return isinstance(v, ClosureV)
    if isinstance(ty, Action):
        return isinstance(v, ActionV) and frozenset(w.target for w in v.body.writes) == ty.writes
    return False


def check_config(cfg: Config) -> list[str]:
    """All invariant violations of a configuration (empty list = healthy).

    Checks environment well-formedness, that the store covers exactly the
    environment's names with the right cell kinds, that every stored value
    matches its declared type, and the per-cell bookkeeping invariants.
    """
    problems: list[str] = []
    report = well_formed(cfg.env)
    if not report.ok:
        problems.append(f"environment ill-formed: {report}")
    env_names = set(cfg.env.names())
    store_names = set(cfg.store.names())
    if env_names != store_names:
        problems.append(f"domain mismatch: env {sorted(env_names)} vs store {sorted(store_names)}")
    for name, binding in cfg.env.items():
        if binding.is_state:
            if name not in cfg.store.vars:
                problems.append(f"'{name}' should be a state-variable cell")
                continue
            if not value_conforms(cfg.store.vars[name].c, binding.ty):
                problems.append(f"'{name}' value does not match its type")
        else:
            cell = cfg.store.defs.get(name)
            if cell is None:
                problems.append(f"'{name}' should be a definition cell")
                continue
            if not value_conforms(cell.c, binding.ty):
                problems.append(f"'{name}' value does not match its type")
            if cell.done & cell.upda:
                problems.append(f"'{name}' has transactions both done and pending")
            if cell.hist and cell.hist[-1][1] != cell.c:
                problems.append(f"'{name}' history head disagrees with current value")
            if cfg.store.depgraph.get(name) != binding.deps.names():
                problems.append(f"'{name}' dependency edges disagree with the environment")
    return problems
