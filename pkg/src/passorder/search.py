"""Exhaustive search over action sequences, for small spaces only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .actions import ActionSpace, legal_actions
from .environment import advance
from .state import AgentState, ir_id


@dataclass
class SearchResult:
    runtime: float
    sequence: tuple
    visited: int


def exhaustive_best(backend, space: ActionSpace, body: str, max_actions: int,
                    runtime: Optional[Callable[[str], float]] = None) -> SearchResult:
    """Minimum runtime reachable with at most ``max_actions`` pass-level actions.

    The empty sequence counts. Ties keep the shortest, then lexicographically
    smallest, sequence. ``runtime`` defaults to ``backend.true_runtime``.
    """
    runtime = runtime or backend.true_runtime
    bodies = {}
    times = {}
    optimized = {}

    def t(key):
        if key not in times:
            times[key] = runtime(bodies[key])
        return times[key]

    def apply(key, invocation):
        memo = (key, invocation.key())
        if memo not in optimized:
            new = backend.optimize(bodies[key], invocation)
            nk = ir_id(new)
            bodies.setdefault(nk, new)
            optimized[memo] = nk
        return optimized[memo]

    root = ir_id(body)
    bodies[root] = body
    best = [t(root), ()]
    visited = [0]

    def dfs(state: AgentState, seq: tuple):
        visited[0] += 1
        if state.history.pending is None:
            cand = (t(state.ir), len(seq), seq)
            if cand < (best[0], len(best[1]), best[1]):
                best[0], best[1] = cand[0], seq
        mask = legal_actions(space, state, max_actions)
        for a in mask.nonzero()[0]:
            a = int(a)
            invocation, history = advance(space, state, a, max_actions)
            ir = state.ir if invocation is None else apply(state.ir, invocation)
            dfs(AgentState(ir, history, state.program_id), seq + (a,))

    dfs(AgentState(root), ())
    return SearchResult(best[0], best[1], visited[0])
