"""Command-line entry points."""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

import click

from .actions import build_space
from .environment import BenchmarkPolicy, Environment, make_backend
from .exceptions import ConfigError, PassOrderError
from .network import QNetwork
from .orchestrator import (RunConfig, evaluate as run_evaluate, init_run, make_catalog,
                           run_policy, train as run_train, wait_for_baselines)
from .report import build_report, fmt_x, format_sequence
from .state import StateEncoder
from .store import Store
from .worker import ENDPOINT_ENV, worker_loop

log = logging.getLogger("passorder")


def load_config(obj: dict) -> RunConfig:
    cfg = RunConfig.load(obj["config"]) if obj.get("config") else RunConfig()
    if obj.get("level"):
        cfg.level = obj["level"]
    if obj.get("backend"):
        cfg.backend = obj["backend"]
    if obj.get("seed") is not None:
        cfg.train.seed = obj["seed"]
        cfg.shuffle_seed = obj["seed"]
    cfg.__post_init__()
    return cfg


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


class _Group(click.Group):
    """Maps library errors onto exit codes: 2 for configuration, 1 for runtime."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ConfigError as e:
            _fail(2, str(e))
        except (PassOrderError, OSError, TimeoutError) as e:
            _fail(1, str(e))


@click.group(cls=_Group)
@click.option("--config", "config", type=click.Path(dir_okay=False), help="YAML run configuration.")
@click.option("--seed", type=int, default=None)
@click.option("--level", type=click.Choice(["H", "M", "L"]), default=None)
@click.option("--backend", type=click.Choice(["llvm", "synthetic"]), default=None)
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config, seed, level, backend, verbose):
    """Deep Q-learning pass ordering."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config, "seed": seed, "level": level, "backend": backend}


@main.command()
@click.option("--steps", type=int, default=None, help="Train steps (overrides the config).")
@click.pass_obj
def train(obj, steps):
    """Run exploration and training until the step budget is spent."""
    cfg = load_config(obj)
    run = init_run(cfg)
    try:
        wait_for_baselines(run)
        click.echo(f"run {cfg.run_id}: {len(run.train_ids)} training / {len(run.valid_ids)} "
                   f"validation programs, {len(run.excluded)} excluded")
        run_train(run, steps, on_eval=lambda r: click.echo(_summary(r)))
        click.echo(f"checkpoint {run.checkpoint()}")
    finally:
        run.close()


def _summary(report) -> str:
    s = report.summary()
    return (f"step {report.step}: train {fmt_x(s['train.agent_speedup'])} (O3 {fmt_x(s['train.o3_speedup'])}), "
            f"valid {fmt_x(s['valid.agent_speedup'])} (O3 {fmt_x(s['valid.o3_speedup'])})")


def load_agent(checkpoint, level=None):
    net, meta = QNetwork.load(checkpoint)
    if level and meta.get("level") != level:
        raise ConfigError(f"checkpoint is for level {meta.get('level')}, not {level}")
    space = build_space(meta["level"], make_catalog(meta.get("catalog") or {}))
    if len(space) != net.n_actions:
        raise ConfigError(f"checkpoint has {net.n_actions} outputs, action space has {len(space)}")
    enc = StateEncoder(list(meta["vocabulary"]), len(space), meta["max_actions"], meta["tokenizer"]).fit()
    return net, meta, space, enc


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), help="Where to write the final IR.")
@click.argument("source", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def optimize(obj, checkpoint, output, source):
    """Greedy rollout of a trained agent on one program."""
    cfg = load_config(obj)
    net, meta, space, enc = load_agent(checkpoint, obj.get("level"))
    backend = make_backend(cfg.backend, cfg.backend_config)
    env = Environment(backend, space, BenchmarkPolicy.from_dict(cfg.policy), meta["max_actions"])
    pid = Path(source).name
    start = env.base_state(backend.frontend(Path(source).read_text(encoding="utf-8"), pid), pid)

    def q(state):
        return net.q_values(enc.encode(env.bodies[state.ir], state.history))

    def step(state, a):
        res = env.step(state, a)
        return res.state, res.reward

    traj = run_policy(space, start, q, step, meta["max_actions"])
    click.echo(format_sequence(traj.actions))
    body = env.bodies[traj.final.ir]
    if output:
        Path(output).write_text(body, encoding="utf-8")
    else:
        click.echo(body, nl=False)
    if traj.fault is not None:
        _fail(1, f"backend failure after {len(traj.actions)} action(s): {traj.fault}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_obj
def evaluate(obj, checkpoint):
    """Greedy evaluation on every program of the configured dataset."""
    cfg = load_config(obj)
    run = init_run(cfg)
    try:
        if checkpoint:
            net, _, _, _ = load_agent(checkpoint, cfg.level)
            run.learner.net.load_params(net)
        wait_for_baselines(run)
        report = run_evaluate(run)
        for row in report.rows:
            click.echo(f"{row.split}\t{row.program_id}\t{format_sequence(row.sequence)}\t"
                       f"{fmt_x(row.o3_speedup)}\t{fmt_x(row.agent_speedup)}")
        for pid, msg in report.faults.items():
            click.echo(f"fault\t{pid}\t{msg}")
        click.echo(_summary(report))
    finally:
        run.close()


@main.command()
@click.argument("run_log", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--svg/--no-svg", default=False)
@click.option("-k", "top", type=int, default=5, show_default=True, help="Rows shown at each end.")
def report(run_log, out_dir, svg, top):
    """Per-program table and aggregate series from a run log."""
    if not os.path.exists(run_log) or os.path.getsize(run_log) == 0:
        _fail(2, f"{run_log}: empty run log")
    try:
        written = build_report(run_log, out_dir or Path(run_log).parent / "report", svg, top)
    except ValueError as e:
        _fail(2, str(e))
    click.echo(written["text"])
    click.echo(f"series: {written['series']}")


@main.command()
@click.option("--manager", envvar=ENDPOINT_ENV, required=True, help=f"host:port (or ${ENDPOINT_ENV}).")
@click.option("--worker-id", default=None)
@click.pass_obj
def worker(obj, manager, worker_id):
    """Serve optimize and benchmark tasks for a manager."""
    cfg = load_config(obj)
    backend = make_backend(cfg.backend, cfg.backend_config)
    worker_loop(manager, backend, BenchmarkPolicy.from_dict(cfg.policy), worker_id=worker_id)


@main.group()
def store():
    """Artifact store maintenance."""


@store.command("verify")
@click.option("--root", type=click.Path(file_okay=False), default=None)
@click.pass_obj
def store_verify(obj, root):
    """Re-hash every stored IR artifact."""
    root = root or load_config(obj).store_root
    if not Path(root).is_dir():
        raise ConfigError(f"no store at {root}")
    st = Store(root)
    bad = st.verify()
    click.echo(f"{len(st.ir_ids())} artifact(s), {len(bad)} corrupt")
    for key in bad:
        click.echo(f"corrupt\t{key}")
    st.close()
    if bad:
        sys.exit(1)


if __name__ == "__main__":
    main()
