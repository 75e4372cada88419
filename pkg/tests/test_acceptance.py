"""Acceptance gate: one PASS/FAIL/SKIP line per criterion in the terminal summary."""

import math
from importlib import resources
import os
import shutil
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from passorder import PassOrderingAgent
from passorder.actions import Invocation, build_space, decode, synthetic_catalog
from passorder.agent import Learner, TrainConfig
from passorder.cli import main
from passorder.environment import BenchmarkPolicy, Environment, SyntheticBackend, measure_runtime
from passorder.orchestrator import (RunConfig, init_run, rollout, run_policy, train,
                                    wait_for_baselines)
from passorder.search import exhaustive_best
from passorder.state import AgentState, Experience, append_action
from passorder.store import Store

from test_report import table_rows, write_log

ONE_REP = {"rep_table": [[1e9, 1]], "min_reps": 1, "max_reps": 1}

# Independent copy of the eight O3 groups (74 slots in order 0..73).
H_GROUPS = [
    "tti verify tbaa scoped-noalias simplifycfg sroa early-cse lower-expect",
    "targetlibinfo tti forceattrs tbaa scoped-noalias inferattrs ipsccp globalopt mem2reg "
    "deadargelim instcombine simplifycfg",
    "globals-aa prune-eh inline functionattrs argpromotion sroa early-cse jump-threading "
    "correlated-propagation simplifycfg",
    "instcombine tailcallelim simplifycfg",
    "reassociate loop-rotate licm loop-unswitch simplifycfg",
    "instcombine indvars loop-idiom loop-deletion loop-unroll mldst-motion gvn memcpyopt sccp bdce "
    "instcombine jump-threading correlated-propagation dse licm adce simplifycfg",
    "instcombine barrier rpo-functionattrs elim-avail-extern globals-aa float2int loop-rotate "
    "loop-vectorize instcombine slp-vectorizer simplifycfg",
    "instcombine loop-unroll instcombine licm alignment-from-assumptions strip-dead-prototypes "
    "globaldce constmerge",
]


# -- 1 ---------------------------------------------------------------------

def oracle_run(tmp_path, seed):
    train_cfg = TrainConfig(gamma=1.0, tau=200, delta=2000, batch_size=128, learning_rate=1e-3,
                            eps_anneal_steps=10_000, max_actions=4, n_blocks=2, width=256,
                            dtype="float32", stop_floor=True, seed=seed)
    cfg = RunConfig(level="H", train=train_cfg, backend_config={"seed": seed, "n_actions": 6},
                    synthetic_programs=5, synthetic_actions=6, split_ratio=(1, 0), policy=ONE_REP,
                    store_root=str(tmp_path / f"s{seed}"), run_dir=str(tmp_path / f"r{seed}"))
    backend = SyntheticBackend(seed=seed, n_actions=6)
    ctx = init_run(cfg, backend)
    try:
        wait_for_baselines(ctx)
        start = time.monotonic()
        train(ctx, 20_000)
        elapsed = time.monotonic() - start
        hits = 0
        for pid in ctx.train_ids:
            body = ctx.body(ctx.baselines[pid][0])
            best = exhaustive_best(backend, ctx.space, body, 4)
            assert best.visited == 6 ** 4 + 6 ** 3 + 6 ** 2 + 6 + 1
            final = rollout(ctx, ctx.base_state(pid), greedy=True).final
            hits += backend.true_runtime(ctx.body(final.ir)) <= 1.02 * best.runtime
        return hits, elapsed
    finally:
        ctx.close()


@pytest.mark.slow
def test_synthetic_oracle_equivalence(criterion, tmp_path):
    with criterion(1, "greedy rollouts within 2% of exhaustive optimum") as c:
        results = [oracle_run(tmp_path, seed) for seed in range(3)]
        c.detail = ", ".join(f"seed {s}: {h}/5 in {t:.0f}s" for s, (h, t) in enumerate(results))
        assert all(h >= 4 for h, _ in results)
        assert all(t < 600 for _, t in results)


# -- 2 ---------------------------------------------------------------------

def test_parameter_chain_mechanics(criterion):
    params = {"p0": {"a": [1, 2], "b": [1, 2]}}
    src = SyntheticBackend(seed=0, n_actions=1).make_program(7)
    with criterion(2, "parameter chains: zero reward, unit discount, one invocation") as c:
        picks = []
        for seed in range(3):
            est = PassOrderingAgent(
                level="L", backend_config={"seed": 0, "n_actions": 1}, synthetic_actions=1,
                synthetic_parameters=params, max_actions=1, train_steps=1000, tau=50, delta=500,
                batch_size=4, min_fill=4, learning_rate=1e-3, eps_anneal_steps=300, n_blocks=1,
                width=32, policy=ONE_REP, random_state=seed).fit({"p7": src})
            ctx = est.context_
            space = ctx.space
            chains = 0
            for e in ctx.memory.snapshot():
                if ctx.states[e.s_next].history.pending is not None:
                    assert (e.r, e.discount, e.terminal) == (0.0, 1.0, False)
                else:
                    assert e.discount == ctx.gamma == 0.5
                    chains += 1
            # one call for the O3 baseline, then exactly one per distinct completed chain
            assert ctx.backend.optimize_calls == 1 + chains == 5

            runtimes = {}
            for a in (1, 2):
                for b in (3, 4):
                    inv = Invocation(("p0",), (("p0", "a", space[a].value), ("p0", "b", space[b].value)))
                    runtimes[(0, a, b)] = SyntheticBackend(seed=0, n_actions=1).true_runtime(
                        SyntheticBackend(seed=0, n_actions=1).optimize(src, inv))
            best = min(runtimes, key=runtimes.get)
            assert runtimes[best] < SyntheticBackend().true_runtime(src)
            assert exhaustive_best(ctx.backend, space, src, 1).sequence == best
            picks.append(tuple(est.predict({"p7": src})[0]) == best)
        c.detail = f"best parameterization chosen on {sum(picks)}/3 seeds"
        assert all(picks)


# -- 3 ---------------------------------------------------------------------

def test_tabular_convergence(criterion):
    with criterion(3, "Q matches value iteration on a 5-state MDP") as c:
        rng = np.random.default_rng(0)
        S, A, gamma = 5, 3, 0.9
        nxt = rng.integers(0, S, (S, A))
        r = rng.uniform(-1, 1, (S, A))
        v = np.zeros(S)
        for _ in range(2000):
            q_star = r + gamma * v[nxt]
            v = q_star.max(axis=1)

        cfg = TrainConfig(gamma=gamma, tau=500, delta=5000, batch_size=15, learning_rate=3e-4,
                          n_blocks=1, width=32, min_fill=15, seed=0)
        learner = Learner.create(S, A, cfg)
        for s in range(S):
            learner.table.put(f"s{s}", np.eye(S)[s], np.ones(A, bool))
            for a in range(A):
                learner.memory.insert(Experience(f"s{s}", a, r[s, a], f"s{nxt[s, a]}", gamma, False))
        start = time.monotonic()
        for _ in range(50_000):
            learner.train_step()
        elapsed = time.monotonic() - start
        q = np.array([learner.net.q_values(np.eye(S)[s]) for s in range(S)])
        err = np.abs(q - q_star).max()
        c.detail = f"L-inf {err:.1e} after 50000 steps, {elapsed:.0f}s"
        assert err < 1e-2 and elapsed < 120


# -- 4 ---------------------------------------------------------------------

def test_gradient_check(criterion):
    from test_agent import test_gradient_matches_finite_differences
    with criterion(4, "analytic gradient vs central differences"):
        test_gradient_matches_finite_differences()


# -- 5 ---------------------------------------------------------------------

def test_reward_telescopes(criterion):
    with criterion(5, "summed rewards equal log overall speedup") as c:
        backend = SyntheticBackend(seed=5, n_actions=6)
        space = build_space("H", synthetic_catalog(6))
        env = Environment(backend, space, BenchmarkPolicy(((math.inf, 1),), 1, 1), max_actions=16)
        rng = np.random.default_rng(5)
        worst = 0.0
        for i in range(1000):
            state = env.base_state(backend.make_program(i % 50), f"p{i % 50}")
            base = env.runtime(state.ir)
            total = 0.0
            for _ in range(rng.integers(1, 17)):
                res = env.step(state, int(rng.integers(len(space))))
                total += res.reward
                state = res.state
            worst = max(worst, abs(total - math.log(base / env.runtime(state.ir))))
        c.detail = f"max error {worst:.1e}"
        assert worst <= 1e-9


# -- 6 ---------------------------------------------------------------------

def test_catalog_fidelity(criterion):
    with criterion(6, "catalog sizes and O3 groups") as c:
        h, m, l_space = (build_space(level) for level in "HML")
        assert [" ".join(decode(h, i).passes) for i in range(len(h))] == H_GROUPS
        slots = sum(len(g.split()) for g in H_GROUPS)
        assert len(m) == 42
        raw = resources.files("passorder").joinpath("data", "parameters_l.tsv").read_text("utf-8")
        values = sum(len(line.split("\t")[2].split(",")) for line in raw.splitlines()
                     if line.strip() and not line.startswith("#"))
        assert len(l_space) == 42 + values
        c.detail = f"H: 8 groups, {slots} slots; M: {len(m)}; L: 42 + {values}"


# -- 7 ---------------------------------------------------------------------

def test_stop_rule_boundaries(criterion):
    space = build_space("H", synthetic_catalog(8))

    def step(state, a):
        h = append_action(state.history, space[a], 16)
        return AgentState(state.ir, h), 0.0

    def scripted(stop_at, top):
        def q(state):
            v = np.full(len(space), -1.0)
            v[3] = top if state.history.budget_used == stop_at else 1e-9
            return v
        return q

    with criterion(7, "stop iff max Q <= 0 or 16 actions taken"):
        for k in range(17):
            traj = run_policy(space, AgentState("ir"), scripted(k, 0.0), step, 16)
            assert len(traj.actions) == k
            assert traj.stop == ("budget" if k == 16 else "q<=0")
            traj = run_policy(space, AgentState("ir"), scripted(k, 1e-12), step, 16)
            assert len(traj.actions) == 16 and traj.stop == "budget"


# -- 8 ---------------------------------------------------------------------

def test_benchmark_policy(criterion):
    with criterion(8, "repetition bounds and median accuracy under 5% noise") as c:
        policy = BenchmarkPolicy()
        probes = np.concatenate([np.logspace(-7, 4, 400), [0.0, math.inf]])
        counts = [policy.repetitions(p) for p in probes]
        assert 20 <= min(counts) and max(counts) <= 1000
        hundred = BenchmarkPolicy(((math.inf, 100),), 20, 1000)
        backend = SyntheticBackend(seed=8, noise=0.05)
        body = backend.make_program(0)
        truth = backend.true_runtime(body)
        ok = sum(abs(measure_runtime(backend, body, hundred) / truth - 1) <= 0.02 for _ in range(1000))
        c.detail = f"{ok}/1000 within 2% at 100 repetitions; counts in [{min(counts)}, {max(counts)}]"
        assert ok >= 990


# -- 9 ---------------------------------------------------------------------

def spawn_worker(cfg_path, endpoint, name):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    return subprocess.Popen([sys.executable, "-m", "passorder", "--backend", "synthetic",
                             "--config", str(cfg_path), "worker", "--manager", endpoint,
                             "--worker-id", name],
                            env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)


def distributed_config(tmp_path):
    train_cfg = TrainConfig(gamma=0.9, tau=20, delta=100, batch_size=8, min_fill=16, max_actions=3,
                            n_blocks=1, width=16, learning_rate=1e-3, eps_anneal_steps=200)
    return RunConfig(level="H", train=train_cfg, backend_config={"seed": 9, "n_actions": 4,
                                                                "run_delay": 0.01},
                     synthetic_programs=6, synthetic_actions=4, split_ratio=(5, 1), policy=ONE_REP,
                     store_root=str(tmp_path / "store"), run_dir=str(tmp_path / "run"),
                     endpoint="127.0.0.1:0", run_id="dist", exploration_batch=5,
                     heartbeat_period=0.5, heartbeat_timeout=5.0)


def test_distribution_and_durability(criterion, tmp_path):
    cfg = distributed_config(tmp_path)
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg.to_dict()))
    with criterion(9, "3 workers, one killed: complete, one record per task, no repeat baselines") as c:
        ctx = init_run(cfg, SyntheticBackend(**cfg.backend_config))
        issued = []
        submit = ctx.dispatcher.queue.submit

        def logging_submit(task):
            issued.append(task)
            submit(task)
        ctx.dispatcher.queue.submit = logging_submit
        workers = [spawn_worker(cfg_path, ctx.dispatcher.endpoint, f"w{i}") for i in range(3)]
        killer = None
        try:
            wait_for_baselines(ctx)
            victim = workers[0]

            def kill_when_busy():
                deadline = time.monotonic() + 60
                while time.monotonic() < deadline and len(ctx.records) < 20:
                    time.sleep(0.05)
                victim.send_signal(signal.SIGKILL)
            killer = threading.Thread(target=kill_when_busy, daemon=True)
            killer.start()
            train(ctx, 300, max_idle=60)
            killer.join(timeout=60)
            assert victim.poll() == -signal.SIGKILL
            ctx.flush()
            transitions = [t for t in issued if t.kind == "transition"]
            keys = [(t.state, t.action) for t in transitions]
            assert len(set(keys)) == len(keys)
            store = ctx.store
            assert store.count_transitions("H") == len(ctx.records)
            missing = [k for k in keys if store.lookup(k, "H") is None]
            assert not missing and not ctx.faults
            n_baselines = ctx.baseline_tasks_issued
        finally:
            ctx.close()
            for w in workers:
                if w.poll() is None:
                    w.terminate()
                    w.wait(10)
        ctx = init_run(cfg, SyntheticBackend(**cfg.backend_config))
        try:
            restart_baselines = ctx.baseline_tasks_issued
            assert restart_baselines == 0 and len(ctx.memory) == len(keys)
        finally:
            ctx.close()
        c.detail = (f"{len(transitions)} transition tasks, {n_baselines} baseline tasks, "
                    f"{restart_baselines} after restart")


# -- 10 --------------------------------------------------------------------

def test_report_fidelity(criterion, tmp_path):
    with criterion(10, "report reproduces recorded ratios") as c:
        rows = table_rows()
        write_log(tmp_path / "log.jsonl", rows)
        res = CliRunner().invoke(main, ["report", str(tmp_path / "log.jsonl"), "-k", "10"])
        assert res.exit_code == 0
        lines = {line.split()[1]: line.split()[-1] for line in res.output.splitlines()[1:] if "x" in line}
        assert lines["dynprog.c"] == "1.32x" and lines["floyd-warshall.c"] == "0.70x"
        assert all(lines[r["program_id"]] == f"{r['ratio']}x" for r in rows)
        c.detail = f"{len(rows)} rows; dynprog.c {lines['dynprog.c']}, floyd-warshall.c {lines['floyd-warshall.c']}"


# -- 11 --------------------------------------------------------------------

TINY_C = {
    "sum.c": "int main(void){volatile long s=0;for(long i=0;i<3000000;i++)s+=i%7;return 0;}\n",
    "mul.c": "int main(void){volatile double x=1;for(int i=0;i<2000000;i++)x*=1.0000001;return 0;}\n",
}


def test_llvm_pipeline(criterion, tmp_path):
    with criterion(11, "LLVM pipeline gives finite positive speedups") as c:
        if not (shutil.which("clang") and shutil.which("opt")):
            pytest.skip("clang and opt are not both on PATH")
        est = PassOrderingAgent(level="H", backend="llvm", train_steps=20, tau=10, delta=10,
                                batch_size=2, min_fill=2, max_actions=2, n_blocks=1, width=8,
                                policy={"rep_table": [[1e9, 3]], "min_reps": 3, "max_reps": 3},
                                store_root=str(tmp_path))
        est.fit(TINY_C)
        sp = est.speedups(TINY_C)
        c.detail = ", ".join(f"{s:.2f}x" for s in sp)
        assert np.all(np.isfinite(sp)) and np.all(sp > 0)
