"""scikit-learn style wrapper around a training run."""

from __future__ import annotations

import tempfile
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .agent import DEFAULT_GAMMA, TrainConfig
from .environment import BenchmarkPolicy, make_backend
from .orchestrator import (RunConfig, ensure_baseline, init_run, rollout, train,
                           wait_for_baselines)
from .report import geomean


def _as_programs(X) -> dict:
    if isinstance(X, dict):
        return dict(X)
    return {f"prog{i:03d}": src for i, src in enumerate(X)}


class PassOrderingAgent(BaseEstimator):
    """Learns a pass ordering policy on a set of programs.

    ``X`` is a list of sources (or a ``{program_id: source}`` dict).
    ``predict`` returns the greedy action sequence for each program.
    """

    def __init__(self, level="H", backend="synthetic", backend_config=None, train_steps=5000,
                 gamma=None, tau=1000, delta=4000, batch_size=32, learning_rate=1e-4,
                 eps_start=1.0, eps_end=0.1, eps_anneal_steps=100_000, max_actions=16,
                 n_blocks=4, width=256, min_fill=None, exploration_batch=None,
                 train_steps_per_explore=1, synthetic_actions=None, synthetic_parameters=None,
                 policy=None, store_root=None, random_state=0):
        self.level = level
        self.backend = backend
        self.backend_config = backend_config
        self.train_steps = train_steps
        self.gamma = gamma
        self.tau = tau
        self.delta = delta
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.eps_anneal_steps = eps_anneal_steps
        self.max_actions = max_actions
        self.n_blocks = n_blocks
        self.width = width
        self.min_fill = min_fill
        self.exploration_batch = exploration_batch
        self.train_steps_per_explore = train_steps_per_explore
        self.synthetic_actions = synthetic_actions
        self.synthetic_parameters = synthetic_parameters
        self.policy = policy
        self.store_root = store_root
        self.random_state = random_state

    def _run_config(self, programs: dict, root: str) -> RunConfig:
        train_cfg = TrainConfig(
            gamma=DEFAULT_GAMMA[self.level] if self.gamma is None else self.gamma,
            tau=self.tau, delta=self.delta, batch_size=self.batch_size,
            learning_rate=self.learning_rate, eps_start=self.eps_start, eps_end=self.eps_end,
            eps_anneal_steps=self.eps_anneal_steps, max_actions=self.max_actions,
            n_blocks=self.n_blocks, width=self.width, min_fill=self.min_fill,
            seed=self.random_state)
        return RunConfig(
            level=self.level, train=train_cfg, backend=self.backend,
            backend_config=dict(self.backend_config or {}), programs=programs,
            split_ratio=(1, 0), shuffle_seed=self.random_state, store_root=f"{root}/store",
            run_dir=f"{root}/run", exploration_batch=self.exploration_batch,
            train_steps=self.train_steps, train_steps_per_explore=self.train_steps_per_explore,
            synthetic_actions=self.synthetic_actions,
            synthetic_parameters=self.synthetic_parameters,
            policy=dict(self.policy or BenchmarkPolicy().to_dict()))

    def fit(self, X, y=None):
        if getattr(self, "context_", None) is not None:
            self.context_.close()
        root = self.store_root or tempfile.mkdtemp(prefix="passorder-")
        backend = make_backend(self.backend, self.backend_config)
        self.context_ = ctx = init_run(self._run_config(_as_programs(X), root), backend)
        wait_for_baselines(ctx)
        train(ctx, self.train_steps)
        self.n_steps_ = ctx.learner.step
        self.network_ = ctx.learner.net
        return self

    def _trajectories(self, X):
        ctx = self.context_
        out = []
        for pid, src in _as_programs(X).items():
            ctx.programs.setdefault(pid, src)
            ensure_baseline(ctx, pid, src)
            out.append((pid, rollout(ctx, ctx.base_state(pid), greedy=True)))
        return out

    def predict(self, X) -> list:
        return [list(t.actions) for _, t in self._trajectories(X)]

    def optimize(self, source: str, program_id: str = "input") -> tuple:
        """Optimized IR body and the action sequence that produced it."""
        _, traj = self._trajectories({program_id: source})[0]
        return self.context_.body(traj.final.ir), list(traj.actions)

    def speedups(self, X) -> np.ndarray:
        ctx = self.context_
        return np.array([ctx.baselines[pid][1] / ctx.runtimes[t.final.ir]
                         for pid, t in self._trajectories(X)])

    def score(self, X, y=None) -> float:
        """Geometric-mean speedup over the unoptimized programs."""
        return geomean(self.speedups(X))
