"""IR artifacts, agent states, experiences and the state encoder."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import BudgetExhausted

MAX_ACTIONS = 16

_WS = re.compile(r"[ \t]+")


def _strip_comment(line: str) -> str:
    # ';' starts a comment unless it sits inside a quoted string constant
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == ";" and not in_str:
            return line[:i]
    return line


def canonicalize_ir(body: str) -> str:
    """Drop comments, collapse blanks and empty lines."""
    out = []
    for line in body.splitlines():
        line = _WS.sub(" ", _strip_comment(line)).strip()
        if line:
            out.append(line)
    return "\n".join(out)


def ir_id(body: str) -> str:
    return hashlib.sha256(canonicalize_ir(body).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Origin:
    kind: str = "base"  # base | optimized | o3_baseline
    parent_id: Optional[str] = None
    action_id: Optional[int] = None


BASE = Origin()


@dataclass(frozen=True)
class IrArtifact:
    id: str
    body: str
    origin: Origin = BASE

    @classmethod
    def from_body(cls, body: str, origin: Origin = BASE) -> "IrArtifact":
        return cls(ir_id(body), body, origin)


@dataclass(frozen=True)
class PendingSelection:
    """A pass whose parameters are being chosen one at a time (space L)."""

    pass_name: str
    chosen: tuple = ()  # ((parameter, value), ...)
    remaining: tuple = ()  # parameter names still to bind, in catalog order

    def bind(self, parameter: str, value: str) -> "PendingSelection":
        if not self.remaining or self.remaining[0] != parameter:
            raise ValueError(f"{parameter!r} is not the next parameter of {self.pass_name}")
        return PendingSelection(self.pass_name, self.chosen + ((parameter, value),), self.remaining[1:])


@dataclass(frozen=True)
class ActionHistory:
    entries: tuple = ()
    budget_used: int = 0
    pending: Optional[PendingSelection] = None

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        pending = None
        if self.pending is not None:
            pending = {
                "pass": self.pending.pass_name,
                "chosen": [list(kv) for kv in self.pending.chosen],
                "remaining": list(self.pending.remaining),
            }
        return {"entries": list(self.entries), "budget_used": self.budget_used, "pending": pending}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionHistory":
        p = d.get("pending")
        pending = None
        if p is not None:
            pending = PendingSelection(
                p["pass"], tuple(tuple(kv) for kv in p["chosen"]), tuple(p["remaining"])
            )
        return cls(tuple(d["entries"]), d["budget_used"], pending)


@dataclass(frozen=True)
class AgentState:
    ir: str
    history: ActionHistory = field(default_factory=ActionHistory)
    program_id: str = ""

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)


def fingerprint(state: AgentState) -> str:
    """256-bit digest over IR id, ordered history and pending selection."""
    h = state.history
    payload = json.dumps(
        [state.ir, list(h.entries), h.to_dict()["pending"]], separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def append_action(history: ActionHistory, action, max_actions: int = MAX_ACTIONS,
                  pending: Optional[PendingSelection] = None) -> ActionHistory:
    """Record ``action``; only pass-level actions consume the budget.

    ``pending`` is the selection left open after the action (from ``decode``).
    """
    if action.is_pass_level:
        if history.budget_used >= max_actions:
            raise BudgetExhausted(f"budget of {max_actions} pass-level actions used up")
        return ActionHistory(history.entries + (action.id,), history.budget_used + 1, pending)
    return ActionHistory(history.entries + (action.id,), history.budget_used, pending)


@dataclass(frozen=True)
class Experience:
    s: str
    a: int
    r: float
    s_next: str
    discount: float
    terminal: bool


@dataclass(frozen=True)
class TransitionRecord:
    state: str
    action: int
    result_ir: str
    reward: float
    runtime_after: float
    measured_at: float = 0.0

    @property
    def key(self) -> tuple:
        return (self.state, self.action)


# --- encoding -----------------------------------------------------------

LLVM_OPCODES = (
    "ret", "br", "switch", "indirectbr", "invoke", "resume", "unreachable",
    "fneg", "add", "fadd", "sub", "fsub", "mul", "fmul", "udiv", "sdiv", "fdiv",
    "urem", "srem", "frem", "shl", "lshr", "ashr", "and", "or", "xor",
    "extractelement", "insertelement", "shufflevector", "extractvalue", "insertvalue",
    "alloca", "load", "store", "fence", "cmpxchg", "atomicrmw", "getelementptr",
    "trunc", "zext", "sext", "fptrunc", "fpext", "fptoui", "fptosi", "uitofp",
    "sitofp", "ptrtoint", "inttoptr", "bitcast", "addrspacecast",
    "icmp", "fcmp", "phi", "select", "call", "va_arg", "landingpad", "freeze",
)

_INSTR = re.compile(
    r"^(?:%[-\w.$]+\s*=\s*)?(?:(?:tail|musttail|notail)\s+)?([a-z_][a-z0-9_]*)"
)


def llvm_opcodes(body: str) -> list:
    """Instruction opcodes inside function bodies, in textual order."""
    ops = []
    in_fn = False
    for line in canonicalize_ir(body).splitlines():
        if line.startswith("define "):
            in_fn = True
            continue
        if not in_fn:
            continue
        if line == "}":
            in_fn = False
            continue
        if line.endswith(":") or re.match(r"^[-\w.$]+:", line):
            continue  # basic block label
        m = _INSTR.match(line)
        if m:
            ops.append(m.group(1))
    return ops


def token_opcodes(body: str) -> list:
    """Opcodes of a synthetic comma-separated integer token body."""
    body = body.strip()
    return [t.strip() for t in body.split(",")] if body else []


TOKENIZERS = {"llvm": llvm_opcodes, "tokens": token_opcodes}


def encode_state(history: ActionHistory, body: str, vocabulary: Sequence[str],
                 n_actions: int, max_actions: int = MAX_ACTIONS,
                 tokenizer: Callable[[str], list] = llvm_opcodes) -> np.ndarray:
    """Opcode histogram (last bucket = other) followed by one-hot history slots.

    The history block keeps the most recent ``max_actions`` entries; in space L
    the parameter sub-actions also occupy slots.
    """
    index = {op: i for i, op in enumerate(vocabulary)}
    other = len(vocabulary) - 1
    hist = np.zeros(len(vocabulary))
    for op in tokenizer(body):
        hist[index.get(op, other)] += 1
    total = hist.sum()
    if total > 0:
        hist /= total

    width = n_actions + 1
    slots = np.zeros((max_actions, width))
    slots[:, n_actions] = 1.0  # padding symbol
    for i, a in enumerate(history.entries[-max_actions:]):
        slots[i, n_actions] = 0.0
        slots[i, a] = 1.0
    return np.concatenate([hist, slots.ravel()])


class StateEncoder(TransformerMixin, BaseEstimator):
    """Static state features: normalized opcode histogram plus action history.

    ``fit`` only learns a vocabulary when none is given; ``transform`` takes
    ``(body, history)`` pairs.
    """

    def __init__(self, vocabulary=None, n_actions=8, max_actions=MAX_ACTIONS,
                 tokenizer="llvm", max_vocabulary=256):
        self.vocabulary = vocabulary
        self.n_actions = n_actions
        self.max_actions = max_actions
        self.tokenizer = tokenizer
        self.max_vocabulary = max_vocabulary

    def _tok(self):
        return TOKENIZERS[self.tokenizer] if isinstance(self.tokenizer, str) else self.tokenizer

    def fit(self, X: Iterable = (), y=None):
        if self.vocabulary is not None:
            vocab = list(self.vocabulary)
        elif self.tokenizer == "llvm":
            vocab = list(LLVM_OPCODES)
        else:
            seen = {}
            for item in X:
                body = item[0] if isinstance(item, tuple) else item
                for op in self._tok()(body):
                    seen[op] = seen.get(op, 0) + 1
            ranked = sorted(seen, key=lambda op: (-seen[op], op))
            vocab = sorted(ranked[: self.max_vocabulary - 1])
        if not vocab or vocab[-1] != "other":
            vocab = [v for v in vocab if v != "other"] + ["other"]
        self.vocabulary_ = tuple(vocab)
        self.n_features_out_ = len(vocab) + self.max_actions * (self.n_actions + 1)
        return self

    def encode(self, body: str, history: ActionHistory) -> np.ndarray:
        return encode_state(history, body, self.vocabulary_, self.n_actions,
                            self.max_actions, self._tok())

    def transform(self, X):
        X = list(X)
        if not X:
            return np.zeros((0, self.n_features_out_))
        return np.stack([self.encode(body, history) for body, history in X])
