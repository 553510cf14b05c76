"""Deterministic concurrency exploration for the runtime stepper.

A *scenario* is an initial program plus a batch of queued submissions.
`explore` drives the stepper through many schedules — seeded random
sampling or exhaustive enumeration of every choice point up to a depth
cap — and checks, at every step of every run:

  * progress: a configuration with pending work always has an enabled step;
  * preservation: the environment stays well-formed, the store covers it,
    and every stored value matches its declared type;
  * glitch freedom: each transaction recomputes every affected definition
    exactly once, after the affected definitions it reads;
  * oracle agreement at quiescence: the incrementally maintained store
    equals a from-scratch recomputation of every definition;
  * confluence for independent workloads: all schedules reach the same
    observable store.

Violations come back in a `Verdict` along with a replayable trace.

Scenario files are JSON::

    {
      "initial": "var x = 1; def inc1 = x + 1;",     // optional
      "submissions": [
        {"kind": "evolve", "code": "def inc2 = inc1 + 1;", "who": "p1"},
        {"kind": "do", "expr": "do (action { x := 2 })", "who": "u1"}
      ],
      "independent": true        // schedules must agree on the final store
    }

Command line::

    meerkat-sim --scenario s.json --exhaustive 8
    meerkat-sim --scenario s.json --runs 200 --seed 7 --trace-out t.json
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from typing import Mapping

from .runtime import (
    Accepted,
    Config,
    Executed,
    FixedSchedule,
    RandomSchedule,
    StepOutcome,
    apply_step,
    check_config,
    enabled_steps,
    initial_config,
    run_until_quiescent,
    submit_do,
    submit_evolution,
)
from .store import DefCell, Store, Value, VarCell, eval_expr, value_to_text
from .syntax import Expr, parse_do, parse_program
from .typesys import TypeEnv, dep_edges, env_merge, topo_order


def oracle_recompute(
    env: TypeEnv, def_exprs: Mapping[str, Expr], var_values: Mapping[str, Value]
) -> dict[str, Value]:
    """Ground truth for the store: evaluate every definition from scratch.

    Definitions are computed in dependency order against the given
    state-variable values, using none of the incremental machinery.
    """
    vars = {n: VarCell(v, v) for n, v in var_values.items()}
    defs: dict[str, DefCell] = {}
    edges = dep_edges(env)
    out: dict[str, Value] = {}
    for name in topo_order(env):
        scratch = Store(vars, defs, edges, 0)
        v = eval_expr(scratch, {}, def_exprs[name])
        out[name] = v
        defs[name] = DefCell(c=v, e=def_exprs[name], prev=v)
    return out


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioItem:
    kind: str  # "evolve" | "do"
    source: str
    who: str

    def to_json(self) -> dict:
        key = "code" if self.kind == "evolve" else "expr"
        return {"kind": self.kind, key: self.source, "who": self.who}


@dataclass(frozen=True)
class Scenario:
    initial: str | None = None
    submissions: tuple[ScenarioItem, ...] = ()
    independent: bool = False

    @staticmethod
    def from_json(doc: dict) -> "Scenario":
        items = []
        for entry in doc.get("submissions", ()):
            kind = entry["kind"]
            if kind not in ("evolve", "do"):
                raise ValueError(f"unknown submission kind {kind!r}")
            source = entry["code"] if kind == "evolve" else entry["expr"]
            items.append(ScenarioItem(kind, source, str(entry.get("who", "anon"))))
        return Scenario(doc.get("initial"), tuple(items), bool(doc.get("independent", False)))

    def to_json(self) -> dict:
        return {
            "initial": self.initial,
            "submissions": [s.to_json() for s in self.submissions],
            "independent": self.independent,
        }


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return Scenario.from_json(json.load(fh))


@dataclass(frozen=True)
class Seeded:
    runs: int = 100
    seed: int = 0


@dataclass(frozen=True)
class Exhaustive:
    depth_cap: int = 8
    max_states: int = 250_000


@dataclass
class Verdict:
    ok: bool = True
    violations: list[str] = field(default_factory=list)
    runs: int = 0
    states: int = 0
    schedules_complete: bool = True
    counterexample: dict | None = None

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "violations": self.violations,
            "runs": self.runs,
            "states": self.states,
            "schedules_complete": self.schedules_complete,
            "counterexample": self.counterexample,
        }


# ---------------------------------------------------------------------------
# Per-step validation
# ---------------------------------------------------------------------------

def validate_wave(cfg_before: Config, outcome: StepOutcome) -> list[str]:
    """Glitch-freedom audit of one committed transaction.

    Recomputes the expected affected set from the dependency graph and
    checks the engine's reported recomputation order covers it exactly
    once, dependencies first.
    """
    if not isinstance(outcome, (Accepted, Executed)) or outcome.txn is None:
        return []
    recomputed = outcome.recomputed
    problems = []
    if len(set(recomputed)) != len(recomputed):
        problems.append(f"txn {outcome.txn}: a definition was recomputed more than once")
    seen: set[str] = set()
    affected = set(recomputed)
    # store of the PREVIOUS config still has the pre-step graph for do's;
    # for evolutions the graph may have grown, so use the edge map implied
    # by the outcome itself (dependencies among recomputed names).
    edges = cfg_before.store.depgraph
    if isinstance(outcome, Accepted):
        edges = dep_edges(env_merge(cfg_before.env, outcome.delta))
    for name in recomputed:
        for dep in edges.get(name, ()):
            if dep in affected and dep not in seen:
                problems.append(
                    f"txn {outcome.txn}: '{name}' recomputed before its dependency '{dep}'"
                )
        seen.add(name)
    return problems


def check_oracle(cfg: Config) -> list[str]:
    """Compare every definition's stored value with the from-scratch oracle."""
    store = cfg.store
    expected = oracle_recompute(cfg.env, store.def_exprs(), {n: c.c for n, c in store.vars.items()})
    problems = []
    for name, want in expected.items():
        got = store.defs[name].c
        if got != want:
            problems.append(
                f"'{name}' is {value_to_text(got)} but recomputing from scratch gives {value_to_text(want)}"
            )
    return problems


def observable(cfg: Config) -> tuple:
    """The schedule-comparable part of a configuration: every cell's value
    (and each definition's expression), but no transaction bookkeeping."""
    vars = tuple(sorted((n, c.c) for n, c in cfg.store.vars.items()))
    defs = tuple(sorted((n, c.c, c.e) for n, c in cfg.store.defs.items()))
    return vars, defs


# ---------------------------------------------------------------------------
# Exploration
# ---------------------------------------------------------------------------

def build_config(scenario: Scenario, hist_cap: int | None = None) -> Config:
    cfg = initial_config(hist_cap)
    if scenario.initial:
        cfg = submit_evolution(cfg, parse_program(scenario.initial), "__init__")
        cfg, outcomes = run_until_quiescent(cfg)
        if not outcomes or not isinstance(outcomes[0], Accepted):
            raise ValueError(f"initial program was not accepted: {outcomes}")
    for item in scenario.submissions:
        if item.kind == "evolve":
            cfg = submit_evolution(cfg, parse_program(item.source), item.who)
        else:
            cfg = submit_do(cfg, parse_do(item.source), item.who)
    return cfg


def _audit_step(cfg_before: Config, cfg_after: Config, outs, verdict: Verdict):
    for o in outs:
        verdict.violations.extend(validate_wave(cfg_before, o))
    verdict.violations.extend(check_config(cfg_after))


def _finish_run(cfg: Config, verdict: Verdict, finals: list):
    verdict.violations.extend(check_oracle(cfg))
    finals.append(observable(cfg))
    verdict.runs += 1


def explore(scenario: Scenario, mode: Seeded | Exhaustive = Seeded()) -> Verdict:
    """Drive the scenario through many schedules and audit every step."""
    verdict = Verdict()
    finals: list[tuple] = []
    start = build_config(scenario)
    if isinstance(mode, Seeded):
        for k in range(mode.runs):
            schedule = RandomSchedule(mode.seed + k)
            cfg = start
            while True:
                options = enabled_steps(cfg)
                if (cfg.q_r or cfg.q_do) and not options:
                    verdict.violations.append("progress violated: pending work but no enabled step")
                    break
                if not options:
                    break
                step = schedule.choose(cfg, options)
                nxt, outs = apply_step(cfg, step)
                verdict.states += 1
                _audit_step(cfg, nxt, outs, verdict)
                cfg = nxt
            _finish_run(cfg, verdict, finals)
            if verdict.violations and verdict.counterexample is None:
                verdict.counterexample = {"kind": "seeded", "seed": mode.seed + k, "picks": schedule.picks}
    else:
        # depth-first enumeration of every schedule choice
        stack: list[tuple[Config, tuple[int, ...]]] = [(start, ())]
        while stack:
            cfg, picks = stack.pop()
            if verdict.states >= mode.max_states:
                verdict.schedules_complete = False
                break
            options = enabled_steps(cfg)
            if (cfg.q_r or cfg.q_do) and not options:
                verdict.violations.append("progress violated: pending work but no enabled step")
                if verdict.counterexample is None:
                    verdict.counterexample = {"kind": "picks", "picks": list(picks)}
                continue
            if not options:
                _finish_run(cfg, verdict, finals)
                if verdict.violations and verdict.counterexample is None:
                    verdict.counterexample = {"kind": "picks", "picks": list(picks)}
                continue
            if len(picks) >= mode.depth_cap:
                verdict.schedules_complete = False
                continue
            before = len(verdict.violations)
            for k in reversed(range(len(options))):
                nxt, outs = apply_step(cfg, options[k])
                verdict.states += 1
                _audit_step(cfg, nxt, outs, verdict)
                if len(verdict.violations) > before and verdict.counterexample is None:
                    verdict.counterexample = {"kind": "picks", "picks": list(picks + (k,))}
                    before = len(verdict.violations)
                stack.append((nxt, picks + (k,)))
    if scenario.independent and len(set(finals)) > 1:
        verdict.violations.append(
            f"confluence violated: {len(set(finals))} distinct final stores across {len(finals)} schedules"
        )
    verdict.ok = not verdict.violations
    return verdict


def replay(scenario: Scenario, trace: dict) -> Verdict:
    """Re-run a single recorded schedule; reproduces its violations exactly."""
    verdict = Verdict()
    finals: list[tuple] = []
    cfg = build_config(scenario)
    schedule = FixedSchedule(trace["picks"])
    while True:
        options = enabled_steps(cfg)
        if not options:
            break
        try:
            step = schedule.choose(cfg, options)
        except IndexError:
            break
        nxt, outs = apply_step(cfg, step)
        verdict.states += 1
        _audit_step(cfg, nxt, outs, verdict)
        cfg = nxt
    if not cfg.q_r and not cfg.q_do:
        _finish_run(cfg, verdict, finals)
    verdict.ok = not verdict.violations
    verdict.counterexample = trace if verdict.violations else None
    return verdict


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="meerkat-sim", description="explore stepper schedules for a scenario file"
    )
    parser.add_argument("--scenario", required=True, help="scenario JSON file")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--exhaustive", type=int, metavar="DEPTH", help="enumerate all schedules to DEPTH")
    group.add_argument("--runs", type=int, default=100, help="number of seeded random runs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trace-out", help="write the verdict (with any counterexample trace) as JSON")
    args = parser.parse_args(argv)
    try:
        scenario = load_scenario(args.scenario)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: cannot load scenario: {err}", file=sys.stderr)
        return 1
    mode = Exhaustive(args.exhaustive) if args.exhaustive is not None else Seeded(args.runs, args.seed)
    verdict = explore(scenario, mode)
    print(
        f"runs={verdict.runs} states={verdict.states} "
        f"complete={'yes' if verdict.schedules_complete else 'no'} "
        f"result={'OK' if verdict.ok else 'VIOLATIONS'}"
    )
    for v in verdict.violations[:20]:
        print(f"  - {v}")
    if args.trace_out:
        with open(args.trace_out, "w", encoding="utf-8") as fh:
            json.dump(verdict.to_json(), fh, indent=2)
    return 0 if verdict.ok else 1


if __name__ == "__main__":
    sys.exit(main())
