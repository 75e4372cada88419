"""Backends, benchmarking and the step/reward logic of the environment."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import shutil
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .actions import ActionSpace, Invocation, decode, legal_actions
from .exceptions import (BackendTimeout, ConfigError, EnvironmentFault, IllegalAction,
                         MeasurementFault)
from .state import (MAX_ACTIONS, AgentState, Experience, PendingSelection,
                    append_action, canonicalize_ir, ir_id)

log = logging.getLogger(__name__)


def reward(t_before: float, t_after: float) -> float:
    """Log speedup of going from ``t_before`` to ``t_after`` seconds."""
    if not (t_before > 0 and t_after > 0):
        raise ValueError(f"runtimes must be positive, got {t_before!r} -> {t_after!r}")
    return math.log(t_before / t_after)


# --- benchmarking -------------------------------------------------------

DEFAULT_REP_TABLE = ((0.01, 1000), (0.1, 300), (1.0, 100), (math.inf, 20))


@dataclass(frozen=True)
class BenchmarkPolicy:
    """Maps a probe runtime to a repetition count; results are medians."""

    rep_table: tuple = DEFAULT_REP_TABLE
    min_reps: int = 20
    max_reps: int = 1000

    def __post_init__(self):
        counts = [n for _, n in self.rep_table]
        if any(b > a for a, b in zip(counts, counts[1:])):
            raise ValueError("repetition counts must not increase with runtime")
        if [t for t, _ in self.rep_table] != sorted(t for t, _ in self.rep_table):
            raise ValueError("rep_table thresholds must be ascending")

    def repetitions(self, probe_seconds: float) -> int:
        for threshold, n in self.rep_table:
            if probe_seconds < threshold:
                return min(max(n, self.min_reps), self.max_reps)
        return self.min_reps

    def to_dict(self) -> dict:
        return {"rep_table": [list(r) for r in self.rep_table],
                "min_reps": self.min_reps, "max_reps": self.max_reps}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPolicy":
        return cls(tuple((float(t), int(n)) for t, n in d["rep_table"]),
                   int(d["min_reps"]), int(d["max_reps"]))


class Backend(Protocol):
    def frontend(self, source: str, program_id: str = "") -> str: ...
    def optimize(self, body: str, invocation: Invocation) -> str: ...
    def o3(self, body: str) -> str: ...
    def compile_and_run(self, body: str, program_id: str = "") -> float: ...


def measure_runtime(backend, body: str, policy: BenchmarkPolicy = BenchmarkPolicy(),
                    program_id: str = "") -> float:
    """Median of ``policy.repetitions(probe)`` runs after one probe run."""
    def run(i):
        try:
            return backend.compile_and_run(body, program_id)
        except MeasurementFault:
            raise
        except EnvironmentFault as e:
            raise MeasurementFault(f"run {i} failed: {e}", i, e.stderr) from e

    probe = run(0)
    n = policy.repetitions(probe)
    samples = [run(i) for i in range(1, n + 1)]
    return float(np.median(samples))


# --- synthetic backend --------------------------------------------------

def _digest(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


class SyntheticBackend:
    """Deterministic stand-in for compiler + machine.

    IR bodies are comma-separated integer tokens. Each distinct invocation
    permutes the tokens and substitutes a few of them, driven by a generator
    seeded from (seed, body hash, invocation). Runtime is a fixed function of
    the body hash in [1 ms, 2 ms), optionally with multiplicative noise.
    """

    def __init__(self, seed=0, n_tokens=32, vocab_size=16, n_actions=8,
                 noise=0.0, run_delay=0.0, substitutions=None):
        self.seed = seed
        self.n_tokens = n_tokens
        self.vocab_size = vocab_size
        self.n_actions = n_actions
        self.noise = noise
        self.run_delay = run_delay
        self.substitutions = substitutions or max(1, n_tokens // 8)
        self._noise_rng = np.random.default_rng(_digest("noise", seed))
        self._lock = threading.Lock()
        self.optimize_calls = 0
        self.run_calls = 0

    def config(self) -> dict:
        return {"seed": self.seed, "n_tokens": self.n_tokens, "vocab_size": self.vocab_size,
                "n_actions": self.n_actions, "noise": self.noise, "run_delay": self.run_delay}

    @staticmethod
    def tokens(body: str) -> list:
        body = canonicalize_ir(body).replace("\n", "")
        try:
            return [int(t) for t in body.split(",")] if body else []
        except ValueError:
            raise EnvironmentFault(f"not a token program: {body[:40]!r}") from None

    @staticmethod
    def body_hash(body: str) -> int:
        return int(ir_id(body), 16)

    def make_program(self, index: int) -> str:
        rng = np.random.default_rng(_digest("program", self.seed, index))
        return ",".join(map(str, rng.integers(0, self.vocab_size, self.n_tokens)))

    def frontend(self, source: str, program_id: str = "") -> str:
        return ",".join(map(str, self.tokens(source)))

    def optimize(self, body: str, invocation: Invocation) -> str:
        with self._lock:
            self.optimize_calls += 1
        t = np.array(self.tokens(body), dtype=np.int64)
        rng = np.random.default_rng(_digest(self.seed, ir_id(body), invocation.key()))
        if len(t):
            t = t[rng.permutation(len(t))]
            k = min(self.substitutions, len(t))
            pos = rng.choice(len(t), size=k, replace=False)
            t[pos] = rng.integers(0, self.vocab_size, size=k)
        return ",".join(map(str, t.tolist()))

    def o3(self, body: str) -> str:
        for i in range(self.n_actions):
            body = self.optimize(body, Invocation((f"p{i}",)))
        return body

    def true_runtime(self, body: str) -> float:
        return 0.001 * (1 + (self.body_hash(body) % 1000) / 1000)

    def compile_and_run(self, body: str, program_id: str = "") -> float:
        self.tokens(body)
        if self.run_delay:
            time.sleep(self.run_delay)
        t = self.true_runtime(body)
        with self._lock:
            self.run_calls += 1
            if self.noise:
                t *= 1.0 + self.noise * self._noise_rng.standard_normal()
        return max(t, 1e-12)


# --- LLVM backend -------------------------------------------------------

# Table-level parameter names that need a pass-specific command-line option.
FLAG_ALIASES = {
    ("loop-unroll", "threshold"): "unroll-threshold",
    ("loop-unroll", "runtime"): "unroll-runtime",
    ("loop-unroll", "allow-partial"): "unroll-allow-partial",
    ("loop-unroll", "percent-dynamic-cost-saved-threshold"): "unroll-percent-dynamic-cost-saved-threshold",
    ("loop-unroll", "dynamic-cost-savings-discount"): "unroll-dynamic-cost-savings-discount",
    ("loop-unroll", "max-iteration-count-to-analyze"): "unroll-max-iteration-count-to-analyze",
    ("loop-unswitch", "threshold"): "loop-unswitch-threshold",
    ("loop-unswitch", "with-block-frequency"): "loop-unswitch-with-block-frequency",
    ("loop-unswitch", "coldness-threshold"): "loop-unswitch-coldness-threshold",
    ("jump-threading", "threshold"): "jump-threading-threshold",
    ("jump-threading", "implication-search-threshold"): "jump-threading-implication-search-threshold",
}


def read_manifest(path) -> dict:
    """``program_id<TAB>argv...`` lines -> {program_id: [argv...]}."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                cols = line.rstrip("\n").split("\t")
                out[cols[0]] = [a for c in cols[1:] for a in c.split()]
    return out


class LlvmBackend:
    """Drives clang and opt as subprocesses.

    ``pass_syntax="legacy"`` emits one ``-pass`` flag per pass (LLVM <= 12);
    ``"new"`` emits ``-passes=a,b,...``.
    """

    def __init__(self, clang="clang", opt="opt", cflags=("-O0", "-Xclang", "-disable-O0-optnone"),
                 ldflags=("-lm",), manifest=None, pass_syntax="new", optimize_timeout=60.0,
                 run_timeout=300.0, workdir=None):
        self.clang = clang
        self.opt = opt
        self.cflags = tuple(cflags)
        self.ldflags = tuple(ldflags)
        self.manifest = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else (manifest or {})
        self.pass_syntax = pass_syntax
        self.optimize_timeout = optimize_timeout
        self.run_timeout = run_timeout
        self._dir = workdir or tempfile.mkdtemp(prefix="passorder-")
        self._exe: dict = {}
        self._lock = threading.Lock()

    def available(self) -> bool:
        return bool(shutil.which(self.clang) and shutil.which(self.opt))

    def _run(self, argv, timeout, stdin=None):
        try:
            p = subprocess.run(argv, input=stdin, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as e:
            raise BackendTimeout(f"{argv[0]} timed out after {timeout}s", str(e.stderr or "")) from e
        except OSError as e:
            raise EnvironmentFault(f"cannot execute {argv[0]}: {e}") from e
        if p.returncode != 0:
            raise EnvironmentFault(f"{argv[0]} exited with {p.returncode}", p.stderr)
        return p.stdout

    def frontend(self, source: str, program_id: str = "") -> str:
        if program_id.endswith(".ll"):
            return source
        suffix = ".cpp" if program_id.endswith((".cpp", ".cc")) else ".c"
        with tempfile.NamedTemporaryFile("w", suffix=suffix, dir=self._dir, delete=False) as fh:
            fh.write(source)
        try:
            return self._run([self.clang, *self.cflags, "-S", "-emit-llvm", fh.name, "-o", "-"],
                             self.optimize_timeout)
        finally:
            os.unlink(fh.name)

    def opt_args(self, invocation: Invocation) -> list:
        if self.pass_syntax == "legacy":
            args = [f"-{p}" for p in invocation.passes]
        else:
            args = ["-passes=" + ",".join(invocation.passes)]
        for p, k, v in invocation.flags:
            args.append(f"-{FLAG_ALIASES.get((p, k), k)}={v}")
        return args

    def optimize(self, body: str, invocation: Invocation) -> str:
        return self._run([self.opt, "-S", *self.opt_args(invocation), "-", "-o", "-"],
                         self.optimize_timeout, stdin=body)

    def o3(self, body: str) -> str:
        return self._run([self.opt, "-S", "-O3", "-", "-o", "-"], self.optimize_timeout, stdin=body)

    def _executable(self, body: str) -> str:
        key = ir_id(body)
        with self._lock:
            exe = self._exe.get(key)
        if exe:
            return exe
        ll = os.path.join(self._dir, key + ".ll")
        exe = os.path.join(self._dir, key + ".exe")
        with open(ll, "w") as fh:
            fh.write(body)
        self._run([self.clang, "-O0", "-x", "ir", ll, "-o", exe, *self.ldflags], self.optimize_timeout)
        with self._lock:
            self._exe[key] = exe
        return exe

    def compile_and_run(self, body: str, program_id: str = "") -> float:
        exe = self._executable(body)
        argv = [exe, *self.manifest.get(program_id, [])]
        start = time.perf_counter()
        self._run(argv, self.run_timeout)
        return time.perf_counter() - start


def make_backend(kind: str, config: Optional[dict] = None):
    config = dict(config or {})
    classes = {"synthetic": SyntheticBackend, "llvm": LlvmBackend}
    if kind not in classes:
        raise ConfigError(f"unknown backend {kind!r}")
    try:
        return classes[kind](**config)
    except TypeError as e:
        raise ConfigError(f"bad {kind} backend options: {e}") from e


# --- environment --------------------------------------------------------

@dataclass(frozen=True)
class StepResult:
    state: AgentState
    reward: float
    terminal: bool
    invoked: bool  # whether the backend ran (False for intermediate L actions)
    runtime_after: float


@dataclass
class Baseline:
    program_id: str
    base_ir: str
    base_runtime: float
    o3_ir: str
    o3_runtime: float


def is_terminal(space: ActionSpace, state: AgentState, max_actions: int) -> bool:
    return not legal_actions(space, state, max_actions).any()


@dataclass
class Environment:
    """Applies actions to states, keeping IR bodies and runtimes by IR id."""

    backend: object
    space: ActionSpace
    policy: BenchmarkPolicy = field(default_factory=BenchmarkPolicy)
    max_actions: int = MAX_ACTIONS
    bodies: dict = field(default_factory=dict)
    runtimes: dict = field(default_factory=dict)

    def add_ir(self, body: str) -> str:
        key = ir_id(body)
        self.bodies.setdefault(key, body)
        return key

    def runtime(self, ir: str, program_id: str = "") -> float:
        if ir not in self.runtimes:
            self.runtimes[ir] = measure_runtime(self.backend, self.bodies[ir], self.policy, program_id)
        return self.runtimes[ir]

    def base_state(self, body: str, program_id: str = "") -> AgentState:
        return AgentState(self.add_ir(body), program_id=program_id)

    def step(self, state: AgentState, action: int) -> StepResult:
        return step(self, state, action)


def advance(space: ActionSpace, state: AgentState, action: int, max_actions: int):
    """Local part of a step: returns (invocation or None, history after)."""
    if not legal_actions(space, state, max_actions)[action]:
        raise IllegalAction(f"action {action} is not legal in this state")
    out = decode(space, action, state.history.pending)
    pending = out if isinstance(out, PendingSelection) else None
    history = append_action(state.history, space[action], max_actions, pending)
    return (None if pending is not None else out), history


def step(env: Environment, state: AgentState, action: int) -> StepResult:
    invocation, history = advance(env.space, state, action, env.max_actions)
    t_before = env.runtime(state.ir, state.program_id)
    if invocation is None:
        nxt = AgentState(state.ir, history, state.program_id)
        return StepResult(nxt, 0.0, False, False, t_before)
    body = env.backend.optimize(env.bodies[state.ir], invocation)
    nxt = AgentState(env.add_ir(body), history, state.program_id)
    t_after = env.runtime(nxt.ir, state.program_id)
    return StepResult(nxt, reward(t_before, t_after),
                      is_terminal(env.space, nxt, env.max_actions), True, t_after)


def make_experience(state: AgentState, action: int, result: StepResult, gamma: float) -> Experience:
    return Experience(state.fingerprint, action, result.reward, result.state.fingerprint,
                      gamma if result.invoked else 1.0, result.terminal)


def baseline_init(backend, policy: BenchmarkPolicy, source: str, program_id: str = "",
                  store=None) -> Baseline:
    """Base and O3 IR with their median runtimes, served from ``store`` when known."""
    if store is not None:
        cached = store.get_baseline(program_id)
        if cached is not None:
            return cached
    base = backend.frontend(source, program_id)
    o3 = backend.o3(base)
    b = Baseline(program_id, base, measure_runtime(backend, base, policy, program_id),
                 o3, measure_runtime(backend, o3, policy, program_id))
    if store is not None:
        store.put_baseline(b)
    return b
