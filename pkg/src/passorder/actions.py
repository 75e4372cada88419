"""Action catalogs for the three abstraction levels and their decoding.

H actions run a fixed sub-sequence of the O3 pipeline, M actions run one
transformation pass with default parameters, and L actions either pick a
pass or bind one parameter value of the pass currently being configured.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import ConfigError, IllegalAction
from .state import MAX_ACTIONS, ActionHistory, AgentState, PendingSelection

LEVELS = ("H", "M", "L")


@dataclass(frozen=True)
class ActionSpec:
    id: int
    level: str
    kind: str  # pass_sequence | single_pass | parameter_value
    passes: tuple = ()
    parameter: Optional[str] = None
    value: Optional[str] = None

    @property
    def pass_name(self) -> str:
        return self.passes[0]

    @property
    def is_pass_level(self) -> bool:
        return self.kind != "parameter_value"

    def label(self) -> str:
        if self.kind == "pass_sequence":
            return f"H{self.id}"
        if self.kind == "single_pass":
            return self.pass_name
        return f"{self.pass_name}:{self.parameter}={self.value}"


@dataclass(frozen=True)
class Invocation:
    """Ordered passes plus explicit ``(pass, parameter, value)`` flags."""

    passes: tuple
    flags: tuple = ()

    def key(self) -> str:
        s = ",".join(self.passes)
        if self.flags:
            s += "|" + ",".join(f"{p}.{k}={v}" for p, k, v in self.flags)
        return s


@dataclass(frozen=True)
class Catalog:
    """Pass groups (one per H action) plus per-pass tunable parameters."""

    groups: tuple  # tuple of tuples of pass names
    analysis: frozenset = frozenset()
    parameters: dict = field(default_factory=dict)  # pass -> ((param, (v0, v1..)), ...)

    @classmethod
    def from_files(cls, h_path=None, l_path=None) -> "Catalog":
        groups, analysis = load_h_catalog(h_path)
        return cls(groups, analysis, load_l_catalog(l_path))

    def transformation_passes(self) -> tuple:
        """Unique non-analysis passes by first appearance."""
        seen = []
        for group in self.groups:
            for p in group:
                if p not in self.analysis and p not in seen:
                    seen.append(p)
        return tuple(seen)


def _read_lines(path, default_name):
    if path is None:
        text = resources.files("passorder").joinpath("data", default_name).read_text("utf-8")
        path = default_name
    else:
        text = Path(path).read_text("utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() and not line.lstrip().startswith("#"):
            yield path, lineno, line.rstrip("\n")


def load_h_catalog(path=None):
    """Parse ``action_index<TAB>pass_name[<TAB>analysis]`` records."""
    groups: dict = {}
    analysis = set()
    for src, lineno, line in _read_lines(path, "actions_h.tsv"):
        cols = line.split("\t")
        if len(cols) not in (2, 3) or not cols[0].strip().isdigit() or not cols[1].strip():
            raise ConfigError(f"{src}:{lineno}: malformed H catalog entry {line!r}")
        if len(cols) == 3 and cols[2].strip() not in ("", "analysis"):
            raise ConfigError(f"{src}:{lineno}: unknown pass tag {cols[2]!r}")
        idx, name = int(cols[0]), cols[1].strip()
        groups.setdefault(idx, []).append(name)
        if len(cols) == 3 and cols[2].strip() == "analysis":
            analysis.add(name)
    if sorted(groups) != list(range(len(groups))):
        raise ConfigError(f"H catalog action indices are not contiguous: {sorted(groups)}")
    return tuple(tuple(groups[i]) for i in range(len(groups))), frozenset(analysis)


def load_l_catalog(path=None) -> dict:
    """Parse ``pass<TAB>parameter<TAB>v1,v2,...`` records (first value = default)."""
    params: dict = {}
    for src, lineno, line in _read_lines(path, "parameters_l.tsv"):
        cols = line.split("\t")
        if len(cols) != 3 or not cols[0].strip() or not cols[1].strip():
            raise ConfigError(f"{src}:{lineno}: malformed L catalog entry {line!r}")
        values = tuple(v.strip() for v in cols[2].split(","))
        if not all(values):
            raise ConfigError(f"{src}:{lineno}: empty value in {line!r}")
        entry = params.setdefault(cols[0].strip(), [])
        if any(p == cols[1].strip() for p, _ in entry):
            raise ConfigError(f"{src}:{lineno}: duplicate parameter {cols[1]!r}")
        entry.append((cols[1].strip(), values))
    return {k: tuple(v) for k, v in params.items()}


class ActionSpace:
    def __init__(self, level: str, actions: list, catalog: Catalog):
        self.level = level
        self.actions = tuple(actions)
        self.catalog = catalog
        self.pass_catalog = catalog.transformation_passes()
        self.parameter_catalog = {
            p: catalog.parameters.get(p, ()) for p in self.pass_catalog if p in catalog.parameters
        }
        self._single = {a.pass_name: a.id for a in self.actions if a.kind == "single_pass"}
        self._values: dict = {}
        for a in self.actions:
            if a.kind == "parameter_value":
                self._values.setdefault((a.pass_name, a.parameter), []).append(a.id)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, i) -> ActionSpec:
        return self.actions[i]

    def __repr__(self):
        return f"ActionSpace(level={self.level!r}, n={len(self)})"

    def value_actions(self, pass_name: str, parameter: str) -> list:
        return list(self._values.get((pass_name, parameter), ()))

    def single_pass_id(self, pass_name: str) -> int:
        return self._single[pass_name]


def build_space(level: str, catalog: Optional[Catalog] = None) -> ActionSpace:
    if level not in LEVELS:
        raise ConfigError(f"unknown action level {level!r}")
    catalog = catalog or Catalog.from_files()
    actions = []
    if level == "H":
        for i, group in enumerate(catalog.groups):
            actions.append(ActionSpec(i, "H", "pass_sequence", tuple(group)))
        return ActionSpace(level, actions, catalog)

    for p in catalog.transformation_passes():
        actions.append(ActionSpec(len(actions), level, "single_pass", (p,)))
    if level == "L":
        known = set(catalog.transformation_passes())
        for p, params in catalog.parameters.items():
            if p not in known:
                raise ConfigError(f"parameterized pass {p!r} is not part of any H action")
        for p in catalog.transformation_passes():
            for param, values in catalog.parameters.get(p, ()):
                for v in values:
                    actions.append(ActionSpec(len(actions), "L", "parameter_value", (p,), param, v))
    return ActionSpace(level, actions, catalog)


def synthetic_catalog(n_actions: int, parameters: Optional[dict] = None) -> Catalog:
    """One single-pass group per action, named ``p0..p{n-1}``."""
    return Catalog(tuple((f"p{i}",) for i in range(n_actions)), frozenset(), dict(parameters or {}))


def _history(state_or_history) -> ActionHistory:
    return state_or_history.history if isinstance(state_or_history, AgentState) else state_or_history


def legal_actions(space: ActionSpace, state: Union[AgentState, ActionHistory],
                  max_actions: int = MAX_ACTIONS) -> np.ndarray:
    h = _history(state)
    mask = np.zeros(len(space), dtype=bool)
    if h.pending is not None:
        if space.level != "L" or not h.pending.remaining:
            raise IllegalAction("pending selection outside space L")
        mask[space.value_actions(h.pending.pass_name, h.pending.remaining[0])] = True
        return mask
    if h.budget_used >= max_actions:
        return mask
    if space.level == "L":
        mask[list(space._single.values())] = True
    else:
        mask[:] = True
    return mask


def decode(space: ActionSpace, action_id: int,
           pending: Optional[PendingSelection] = None) -> Union[Invocation, PendingSelection]:
    """Turn an action into an optimizer invocation or an updated selection."""
    if not 0 <= action_id < len(space):
        raise IllegalAction(f"action {action_id} outside space of size {len(space)}")
    a = space[action_id]
    if a.kind == "pass_sequence":
        return Invocation(a.passes)
    if a.kind == "single_pass":
        if pending is not None:
            raise IllegalAction(f"{a.label()} chosen while {pending.pass_name} is pending")
        params = space.parameter_catalog.get(a.pass_name, ()) if space.level == "L" else ()
        if not params:
            return Invocation(a.passes)
        return PendingSelection(a.pass_name, (), tuple(p for p, _ in params))
    if pending is None or pending.pass_name != a.pass_name or pending.remaining[:1] != (a.parameter,):
        raise IllegalAction(f"{a.label()} does not bind the next pending parameter")
    bound = pending.bind(a.parameter, a.value)
    if bound.remaining:
        return bound
    return Invocation((a.pass_name,), tuple((a.pass_name, k, v) for k, v in bound.chosen))
