"""Learner/manager loop: split, exploration, result handling, evaluation."""

from __future__ import annotations

import json
import logging
import math
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import yaml

from .actions import Catalog, ActionSpace, build_space, legal_actions, synthetic_catalog
from .agent import DEFAULT_GAMMA, Learner, StateTable, TrainConfig, epsilon, greedy_action
from .dispatch import LocalDispatcher, Manager
from .environment import (Baseline, BenchmarkPolicy, SyntheticBackend, advance, is_terminal,
                          make_backend, reward)
from .exceptions import ConfigError, EnvironmentFault, PassOrderError
from .network import QNetwork
from .protocol import Task, TaskResult
from .replay import ReplayMemory
from .report import geomean, format_sequence
from .state import (AgentState, Experience, IrArtifact, Origin, StateEncoder,
                    TransitionRecord)
from .store import BackgroundWriter, Store

log = logging.getLogger(__name__)

SOURCE_SUFFIXES = (".c", ".cc", ".cpp", ".ll", ".tok")


@dataclass
class RunConfig:
    level: str = "H"
    train: TrainConfig = field(default_factory=TrainConfig)
    backend: str = "synthetic"
    backend_config: dict = field(default_factory=dict)
    dataset: Optional[str] = None
    synthetic_programs: int = 0
    programs: Optional[dict] = None  # inline {program_id: source}
    split_ratio: tuple = (4, 1)
    shuffle_seed: int = 0
    store_root: str = "store"
    run_dir: str = "run"
    run_id: Optional[str] = None
    endpoint: Optional[str] = None  # host:port to serve workers; None runs tasks in-process
    exploration_batch: Optional[int] = None
    train_steps: int = 5000
    train_steps_per_explore: int = 1
    exclude: tuple = ()
    h_catalog: Optional[str] = None
    l_catalog: Optional[str] = None
    synthetic_actions: Optional[int] = None
    synthetic_parameters: Optional[dict] = None
    vocabulary: Optional[list] = None
    policy: dict = field(default_factory=lambda: BenchmarkPolicy().to_dict())
    max_retries: int = 2
    heartbeat_period: float = 10.0
    heartbeat_timeout: float = 30.0

    def __post_init__(self):
        if isinstance(self.train, dict):
            train = dict(self.train)
            train.setdefault("gamma", DEFAULT_GAMMA.get(self.level, 0.9))
            self.train = TrainConfig.from_dict(train)
        if self.level not in ("H", "M", "L"):
            raise ConfigError(f"level must be H, M or L, got {self.level!r}")
        self.split_ratio = tuple(self.split_ratio)
        if len(self.split_ratio) != 2 or min(self.split_ratio) < 0 or sum(self.split_ratio) <= 0:
            raise ConfigError(f"bad split_ratio {self.split_ratio}")
        self.exclude = tuple(self.exclude)
        self.train.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratio"] = list(self.split_ratio)
        d["exclude"] = list(self.exclude)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown run options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} is not a mapping")
        return cls.from_dict(data)


def split_programs(ids, ratio=(4, 1), seed=0):
    """Seeded shuffle, then the validation share is rounded up."""
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = ratio
    n_valid = math.ceil(len(ids) * b / (a + b))
    return shuffled[: len(ids) - n_valid], shuffled[len(ids) - n_valid:]


class RunLog:
    """Line-delimited JSON records ``{step, phase, program_id, metric, value}``."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, step, phase, program_id, metric, value):
        rec = {"step": int(step), "phase": phase, "program_id": program_id,
               "metric": metric, "value": value}
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")


@dataclass
class Trajectory:
    start: AgentState
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    states: list = field(default_factory=list)
    stop: str = ""
    fault: Optional[str] = None

    @property
    def final(self) -> AgentState:
        return self.states[-1] if self.states else self.start

    def pass_level_count(self) -> int:
        return self.final.history.budget_used - self.start.history.budget_used


def run_policy(space: ActionSpace, state: AgentState, q_fn: Callable, transition: Callable,
               max_actions: int, greedy: bool = True, eps: float = 0.0,
               rng: Optional[np.random.Generator] = None) -> Trajectory:
    """Act until the budget is spent or every legal Q-value is <= 0.

    The Q test is skipped while a parameter selection is pending, so an L
    episode never ends half-configured. When exploring, the test only
    applies on greedy coin tosses.
    """
    traj = Trajectory(state)
    while True:
        mask = legal_actions(space, state, max_actions)
        if not mask.any():
            traj.stop = "budget"
            break
        if not greedy and rng.random() < eps:
            a = int(rng.choice(np.flatnonzero(mask)))
        else:
            q = np.asarray(q_fn(state), dtype=np.float64)
            if state.history.pending is None and q[mask].max() <= 0:
                traj.stop = "q<=0"
                break
            a = greedy_action(q, mask)
        try:
            nxt, r = transition(state, a)
        except (EnvironmentFault, TimeoutError) as e:
            traj.stop = "fault"
            traj.fault = str(e)
            break
        traj.actions.append(a)
        traj.rewards.append(r)
        traj.states.append(nxt)
        state = nxt
    return traj


@dataclass
class ProgramEval:
    program_id: str
    split: str
    sequence: list
    agent_speedup: float
    o3_speedup: float
    best_observed: float


@dataclass
class EvalReport:
    step: int
    rows: list = field(default_factory=list)
    faults: dict = field(default_factory=dict)

    def geomean(self, split: str, metric: str) -> float:
        return geomean([getattr(r, metric) for r in self.rows if r.split == split])

    def summary(self) -> dict:
        out = {}
        for split in ("train", "valid"):
            for metric in ("agent_speedup", "o3_speedup", "best_observed"):
                out[f"{split}.{metric}"] = self.geomean(split, metric)
        return out


class RunContext:
    def __init__(self, config: RunConfig, backend, store: Store, space: ActionSpace,
                 encoder: StateEncoder, learner: Learner, dispatcher, runlog: RunLog):
        self.config = config
        self.backend = backend
        self.store = store
        self.writer = BackgroundWriter(store)
        self.space = space
        self.encoder = encoder
        self.learner = learner
        self.dispatcher = dispatcher
        self.runlog = runlog
        self.level = config.level
        self.max_actions = config.train.max_actions
        self.gamma = config.train.gamma
        self.policy = BenchmarkPolicy.from_dict(config.policy)
        self.rng = np.random.default_rng(config.train.seed + 1)
        self.lock = threading.RLock()
        self.bodies: dict = {}
        self.runtimes: dict = {}
        self.states: dict = {}
        self.cache: dict = {}  # (fp, action) -> next fp
        self.records: dict = {}  # (fp, action) -> TransitionRecord
        self.outstanding: dict = {}  # task id -> Task
        self.inflight: dict = {}  # (fp, action) -> task id
        self.programs: dict = {}
        self.train_ids: list = []
        self.valid_ids: list = []
        self.baselines: dict = {}  # pid -> (base ir, base t, o3 ir, o3 t)
        self.excluded: dict = {}
        self.min_runtime: dict = {}
        self.best_observed: dict = {}
        self.faults: dict = {}
        self.baseline_tasks_issued = 0
        self.reports: list = []

    # -- registries ------------------------------------------------------

    @property
    def table(self) -> StateTable:
        return self.learner.table

    @property
    def memory(self) -> ReplayMemory:
        return self.learner.memory

    def body(self, ir: str) -> str:
        b = self.bodies.get(ir)
        if b is None:
            b = self.bodies[ir] = self.store.get_ir(ir)
        return b

    def register_ir(self, body: str, origin: Origin = Origin()) -> str:
        art = IrArtifact.from_body(body, origin)
        if art.id not in self.bodies:
            self.bodies[art.id] = body
            self.writer.submit(self.store.put_ir, art)
        return art.id

    def set_runtime(self, ir: str, seconds: float) -> float:
        """First measurement of an IR wins, keeping rewards telescoping."""
        if ir not in self.runtimes:
            self.runtimes[ir] = float(seconds)
            self.writer.submit(self.store.put_runtime, ir, float(seconds), self.config.policy)
        return self.runtimes[ir]

    def register_state(self, state: AgentState, persist: bool = True) -> str:
        fp = state.fingerprint
        if fp not in self.states:
            self.states[fp] = state
            feats = self.encoder.encode(self.body(state.ir), state.history)
            self.table.put(fp, feats, legal_actions(self.space, state, self.max_actions))
            if persist:
                self.writer.submit(self.store.put_state, state, self.level)
        return fp

    def base_state(self, pid: str) -> AgentState:
        return AgentState(self.baselines[pid][0], program_id=pid)

    def q_function(self, net: Optional[QNetwork] = None) -> Callable:
        net = net or self.learner.net

        def q(state):
            fp = self.register_state(state)
            return net.q_values(self.table.get(fp)[0])
        return q

    def record(self, state: AgentState, action: int, nxt: AgentState, r: float,
               runtime_after: float, discount: float, terminal: bool) -> Experience:
        key = (state.fingerprint, action)
        self.register_state(nxt)
        rec = TransitionRecord(key[0], action, nxt.ir, r, runtime_after, time.time())
        exp = Experience(key[0], action, r, nxt.fingerprint, discount, terminal)
        self.cache[key] = nxt.fingerprint
        self.records[key] = rec
        self.writer.submit(self.store.upsert_transition, rec, self.level, nxt.fingerprint,
                           discount, terminal)
        self.memory.insert(exp)
        pid = state.program_id
        self.min_runtime[pid] = min(self.min_runtime.get(pid, math.inf), runtime_after)
        return exp

    # -- transitions -----------------------------------------------------

    def make_task(self, state: AgentState, action: int, invocation) -> Task:
        return Task(Task.new_id(), "transition", state.program_id, state.fingerprint, action,
                    state.ir, Task.pack_invocation(invocation), self.config.policy)

    def local_step(self, state: AgentState, action: int):
        """Advance without a worker if possible: returns (next state, reward) or a Task."""
        with self.lock:
            key = (state.fingerprint, action)
            if key in self.cache:
                nxt = self.states[self.cache[key]]
                return nxt, self.records[key].reward
            invocation, history = advance(self.space, state, action, self.max_actions)
            if invocation is None:
                nxt = AgentState(state.ir, history, state.program_id)
                self.record(state, action, nxt, 0.0, self.runtimes[state.ir], 1.0, False)
                return nxt, 0.0
            return self.make_task(state, action, invocation)

    def transition(self, state: AgentState, action: int):
        out = self.local_step(state, action)
        if not isinstance(out, Task):
            return out
        key = (state.fingerprint, action)
        if key in self.faults:
            raise EnvironmentFault(f"transition previously failed: {self.faults[key]}")
        with self.lock:
            pending = self.inflight.get(key)
            if pending is None:
                self.inflight[key] = out.task_id
                self.outstanding[out.task_id] = out
        if pending is not None:
            # exploration already asked for this one; wait for its answer
            while key in self.inflight:
                for r in self.dispatcher.poll(0.05):
                    on_result(self, r)
        else:
            on_result(self, self.dispatcher.run_sync(out))
        if key not in self.cache:
            raise EnvironmentFault(f"transition {action} failed", self.faults.get(key, ""))
        return self.transition(state, action)

    # -- persistence -----------------------------------------------------

    def flush(self):
        self.writer.flush()

    def checkpoint(self, path=None) -> Path:
        path = Path(path or Path(self.config.run_dir) / "checkpoints" / f"step_{self.learner.step:08d}.npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"level": self.level, "step": self.learner.step, "max_actions": self.max_actions,
                "vocabulary": list(self.encoder.vocabulary_), "tokenizer": self.encoder.tokenizer,
                "n_actions": len(self.space), "run_id": self.config.run_id,
                "catalog": catalog_spec(self.config), "optimizer": "adam",
                "train": self.config.train.to_dict()}
        self.learner.net.save(path, meta)
        self.store.set_run_step(self.config.run_id, self.learner.step)
        return path

    def close(self):
        try:
            self.writer.flush()
        finally:
            self.writer.close()
            self.dispatcher.close()


def catalog_spec(config: RunConfig) -> dict:
    return {"h_catalog": config.h_catalog, "l_catalog": config.l_catalog,
            "synthetic_actions": config.synthetic_actions,
            "synthetic_parameters": config.synthetic_parameters}


def make_catalog(spec: dict) -> Catalog:
    if spec.get("synthetic_actions"):
        params = {}
        for p, plist in (spec.get("synthetic_parameters") or {}).items():
            items = plist.items() if isinstance(plist, dict) else plist
            params[p] = tuple((str(k), tuple(str(v) for v in vals)) for k, vals in items)
        return synthetic_catalog(spec["synthetic_actions"], params)
    return Catalog.from_files(spec.get("h_catalog"), spec.get("l_catalog"))


def make_encoder(config: RunConfig, space: ActionSpace, backend) -> StateEncoder:
    if isinstance(backend, SyntheticBackend):
        vocab = config.vocabulary or [str(i) for i in range(backend.vocab_size)]
        enc = StateEncoder(list(vocab), len(space), config.train.max_actions, "tokens")
    else:
        enc = StateEncoder(config.vocabulary, len(space), config.train.max_actions, "llvm")
    return enc.fit()


def load_programs(config: RunConfig, backend) -> dict:
    programs = {}
    if config.programs:
        programs.update(config.programs)
    if config.synthetic_programs:
        if not isinstance(backend, SyntheticBackend):
            raise ConfigError("synthetic_programs requires the synthetic backend")
        for i in range(config.synthetic_programs):
            programs[f"prog{i:03d}"] = backend.make_program(i)
    if config.dataset:
        root = Path(config.dataset)
        if not root.is_dir():
            raise ConfigError(f"dataset {root} is not a directory")
        for p in sorted(root.iterdir()):
            if p.suffix in SOURCE_SUFFIXES:
                programs[p.name] = p.read_text(encoding="utf-8")
    for pid in config.exclude:
        programs.pop(pid, None)
    return programs


def init_run(config: RunConfig, backend=None, dispatcher=None) -> RunContext:
    """Split the dataset, warm-start from the store and schedule missing baselines."""
    backend = backend or make_backend(config.backend, config.backend_config)
    programs = load_programs(config, backend)
    if not programs:
        raise ConfigError("dataset is empty")
    config.run_id = config.run_id or uuid.uuid4().hex[:12]
    space = build_space(config.level, make_catalog(catalog_spec(config)))
    encoder = make_encoder(config, space, backend)
    learner = Learner.create(encoder.n_features_out_, len(space), config.train)
    store = Store(config.store_root)
    policy = BenchmarkPolicy.from_dict(config.policy)
    if dispatcher is None:
        if config.endpoint:
            host, _, port = config.endpoint.rpartition(":")
            dispatcher = Manager(None, host or "127.0.0.1", int(port), config.max_retries,
                                 config.heartbeat_period, config.heartbeat_timeout)
        else:
            dispatcher = LocalDispatcher(backend, policy, max_retries=config.max_retries)
    runlog = RunLog(Path(config.run_dir) / "run.log.jsonl")
    ctx = RunContext(config, backend, store, space, encoder, learner, dispatcher, runlog)
    dispatcher.body_lookup = ctx.body

    ctx.programs = programs
    ctx.train_ids, ctx.valid_ids = split_programs(programs, config.split_ratio, config.shuffle_seed)

    # warm start
    ctx.runtimes.update(store.runtimes())
    for fp, state in store.states(ctx.level).items():
        ctx.register_state(state, persist=False)
    for rec, exp in store.transitions(ctx.level)[-int(learner.memory.capacity):]:
        key = rec.key
        ctx.cache[key] = exp.s_next
        ctx.records[key] = rec
        learner.memory.insert(exp)
        pid = ctx.states[rec.state].program_id
        ctx.min_runtime[pid] = min(ctx.min_runtime.get(pid, math.inf), rec.runtime_after)

    prev = store.get_run(config.run_id)
    if prev is not None:
        ckpts = sorted((Path(config.run_dir) / "checkpoints").glob("step_*.npz"))
        if ckpts:
            net, meta = QNetwork.load(ckpts[-1])
            learner.net.load_params(net)
            learner.target.load_params(net)
            learner.step = int(meta["step"])
            learner.publish()
    meta = config.to_dict()
    meta["architecture"] = learner.net.architecture()
    meta["optimizer"] = "adam"
    store.put_run(config.run_id, meta)

    ctx.excluded.update({p: why for p, why in store.excluded().items() if p in programs})
    for pid in sorted(programs):
        ids = store.baseline_ids(pid)
        if pid in ctx.excluded:
            continue
        if ids is not None:
            ctx.baselines[pid] = ids
            ctx.register_state(ctx.base_state(pid))
            ctx.min_runtime[pid] = min(ctx.min_runtime.get(pid, math.inf), ids[1])
        else:
            task = Task(Task.new_id(), "baseline", pid, source=programs[pid], policy=config.policy)
            ctx.outstanding[task.task_id] = task
            ctx.dispatcher.submit([task])
            ctx.baseline_tasks_issued += 1
    return ctx


def wait_for_baselines(ctx: RunContext, timeout: Optional[float] = None) -> None:
    deadline = None if timeout is None else time.monotonic() + timeout
    while any(t.kind == "baseline" for t in list(ctx.outstanding.values())):
        for r in ctx.dispatcher.poll(0.05):
            on_result(ctx, r)
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError("baseline tasks did not finish in time")
    ctx.train_ids = [p for p in ctx.train_ids if p in ctx.baselines]
    ctx.valid_ids = [p for p in ctx.valid_ids if p in ctx.baselines]


def ensure_baseline(ctx: RunContext, pid: str, source: str) -> tuple:
    """Baseline ids for ``pid``, computing them synchronously if unknown."""
    if pid not in ctx.baselines:
        task = Task(Task.new_id(), "baseline", pid, source=source, policy=ctx.config.policy)
        ctx.outstanding[task.task_id] = task
        on_result(ctx, ctx.dispatcher.run_sync(task))
        if pid not in ctx.baselines:
            raise EnvironmentFault(f"baseline for {pid} failed", ctx.excluded.get(pid, ""))
    return ctx.baselines[pid]


def on_result(ctx: RunContext, result: TaskResult) -> None:
    with ctx.lock:
        task = ctx.outstanding.pop(result.task_id, None)
        if task is None:
            log.warning("result for unknown task %s dropped", result.task_id)
            return
        if task.kind == "baseline":
            _on_baseline(ctx, task, result)
            return
        key = (task.state, task.action)
        ctx.inflight.pop(key, None)
        if result.status != "ok":
            ctx.faults[key] = result.stderr
            ctx.writer.submit(ctx.store.put_fault, ctx.level, task.state, task.action,
                              task.task_id, "task failed", result.stderr)
            return
        state = ctx.states[task.state]
        invocation, history = advance(ctx.space, state, task.action, ctx.max_actions)
        new_ir = ctx.register_ir(result.ir_body, Origin("optimized", state.ir, task.action))
        t_after = ctx.set_runtime(new_ir, result.runtime)
        r = reward(ctx.runtimes[state.ir], t_after)
        nxt = AgentState(new_ir, history, state.program_id)
        ctx.record(state, task.action, nxt, r, t_after, ctx.gamma,
                   is_terminal(ctx.space, nxt, ctx.max_actions))


def _on_baseline(ctx, task, result):
    pid = task.program_id
    if result.status != "ok":
        ctx.excluded[pid] = result.stderr or "baseline failed"
        ctx.writer.submit(ctx.store.exclude, pid, ctx.excluded[pid])
        log.warning("excluding %s: %s", pid, ctx.excluded[pid])
        return
    base = ctx.register_ir(result.base_body)
    o3 = ctx.register_ir(result.o3_body, Origin("o3_baseline", base))
    tb = ctx.set_runtime(base, result.base_runtime)
    to3 = ctx.set_runtime(o3, result.o3_runtime)
    ctx.baselines[pid] = (base, tb, o3, to3)
    ctx.writer.submit(ctx.store.put_baseline, Baseline(pid, result.base_body, tb, result.o3_body, to3))
    ctx.register_state(ctx.base_state(pid))
    ctx.min_runtime[pid] = min(ctx.min_runtime.get(pid, math.inf), tb)


def explore_step(ctx: RunContext, eps: Optional[float] = None, net: Optional[QNetwork] = None,
                 rng: Optional[np.random.Generator] = None) -> list:
    """Walk cached transitions from sampled base states; emit one task per cache miss."""
    rng = rng or ctx.rng
    eps = epsilon(ctx.config.train, ctx.learner.step) if eps is None else eps
    q_fn = ctx.q_function(net or ctx.learner.snapshot())
    pool = [p for p in ctx.train_ids if p in ctx.baselines]
    if not pool:
        return []
    size = min(ctx.config.exploration_batch or 32, len(pool))
    tasks = []
    for pid in rng.choice(pool, size=size, replace=False):
        state = ctx.base_state(str(pid))
        while True:
            mask = legal_actions(ctx.space, state, ctx.max_actions)
            if not mask.any():
                break
            if rng.random() < eps:
                a = int(rng.choice(np.flatnonzero(mask)))
            else:
                q = q_fn(state)
                if state.history.pending is None and q[mask].max() <= 0:
                    break
                a = greedy_action(q, mask)
            key = (state.fingerprint, a)
            if key in ctx.faults:
                break
            out = ctx.local_step(state, a)
            if not isinstance(out, Task):
                state = out[0]
                continue
            with ctx.lock:
                if key not in ctx.inflight:
                    ctx.inflight[key] = out.task_id
                    ctx.outstanding[out.task_id] = out
                    tasks.append(out)
            break
    ctx.dispatcher.submit(tasks)
    return tasks


def rollout(ctx: RunContext, state: AgentState, greedy: bool = True, q_fn: Optional[Callable] = None,
            eps: float = 0.0, rng: Optional[np.random.Generator] = None) -> Trajectory:
    q_fn = q_fn or ctx.q_function()
    return run_policy(ctx.space, state, q_fn, ctx.transition, ctx.max_actions,
                      greedy, eps, rng or ctx.rng)


def evaluate(ctx: RunContext, q_fn: Optional[Callable] = None, write: bool = True) -> EvalReport:
    """Greedy rollout from every base state, training and validation alike."""
    q_fn = q_fn or ctx.q_function(ctx.learner.net)
    report = EvalReport(ctx.learner.step)
    for split, ids in (("train", ctx.train_ids), ("valid", ctx.valid_ids)):
        for pid in ids:
            if pid not in ctx.baselines:
                continue
            base_ir, tb, _, to3 = ctx.baselines[pid]
            traj = rollout(ctx, ctx.base_state(pid), greedy=True, q_fn=q_fn)
            if traj.fault is not None:
                report.faults[pid] = traj.fault
                continue
            agent = tb / ctx.runtimes[traj.final.ir]
            best = max(ctx.best_observed.get(pid, 0.0), tb / ctx.min_runtime.get(pid, tb), agent)
            ctx.best_observed[pid] = best
            report.rows.append(ProgramEval(pid, split, traj.actions, agent, tb / to3, best))
    ctx.reports.append(report)
    if write:
        write_report(ctx, report)
    return report


def write_report(ctx: RunContext, report: EvalReport) -> None:
    step = report.step
    for row in report.rows:
        for metric in ("agent_speedup", "o3_speedup", "best_observed"):
            ctx.runlog.write(step, "eval", row.program_id, metric, getattr(row, metric))
        ctx.runlog.write(step, "eval", row.program_id, "split", row.split)
        ctx.runlog.write(step, "eval", row.program_id, "sequence", format_sequence(row.sequence))
    for pid, msg in report.faults.items():
        ctx.runlog.write(step, "eval", pid, "fault", msg)
    path = Path(ctx.config.run_dir) / f"eval_{step:08d}.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("split\tprogram_id\tsequence\to3_speedup\tagent_speedup\tbest_observed\n")
        for r in report.rows:
            fh.write(f"{r.split}\t{r.program_id}\t{format_sequence(r.sequence)}\t"
                     f"{r.o3_speedup:.6g}\t{r.agent_speedup:.6g}\t{r.best_observed:.6g}\n")


def train(ctx: RunContext, steps: Optional[int] = None, on_eval: Optional[Callable] = None,
          max_idle: float = 30.0, wait: bool = True) -> int:
    """Interleave exploration, result handling and training for ``steps`` train steps.

    Evaluation and checkpointing run every ``delta`` steps with exploration
    and training paused. With ``wait`` the tasks still out at the end are
    collected before returning. Returns the learner step reached.
    """
    cfg = ctx.config.train
    total = ctx.learner.step + (ctx.config.train_steps if steps is None else steps)
    per_explore = max(1, ctx.config.train_steps_per_explore)
    limit = 2 * (ctx.config.exploration_batch or 32)
    idle_since = None
    while ctx.learner.step < total:
        for r in ctx.dispatcher.poll(0.0):
            on_result(ctx, r)
        progressed = False
        if len(ctx.outstanding) < limit:
            progressed = bool(explore_step(ctx))
            for r in ctx.dispatcher.poll(0.0):
                on_result(ctx, r)
                progressed = True
        if ctx.learner.ready():
            for _ in range(per_explore):
                ctx.learner.train_step()
                if ctx.learner.step % cfg.tau == 0:
                    ctx.learner.publish()
                if ctx.learner.step % cfg.delta == 0:
                    report = evaluate(ctx)
                    ctx.checkpoint()
                    if on_eval:
                        on_eval(report)
                if ctx.learner.step >= total:
                    break
            progressed = True
        if progressed:
            idle_since = None
            continue
        idle_since = idle_since or time.monotonic()
        if time.monotonic() - idle_since > max_idle:
            raise PassOrderError("no experiences arriving and replay memory not ready")
        for r in ctx.dispatcher.poll(0.05):
            on_result(ctx, r)
    if wait:
        drain(ctx, max_idle)
    ctx.flush()
    return ctx.learner.step


def drain(ctx: RunContext, max_idle: float = 30.0) -> None:
    """Wait for every outstanding task to report back."""
    last = time.monotonic()
    while ctx.outstanding:
        results = ctx.dispatcher.poll(0.05)
        for r in results:
            on_result(ctx, r)
        if results:
            last = time.monotonic()
        elif time.monotonic() - last > max_idle:
            raise PassOrderError(f"{len(ctx.outstanding)} task(s) never finished")
