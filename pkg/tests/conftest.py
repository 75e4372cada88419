import pytest

from passorder.agent import TrainConfig
from passorder.environment import SyntheticBackend
from passorder.orchestrator import RunConfig

FAST_POLICY = {"rep_table": [[1e9, 1]], "min_reps": 1, "max_reps": 1}


@pytest.fixture
def backend():
    return SyntheticBackend(seed=0, n_actions=4)


@pytest.fixture
def make_config(tmp_path):
    def make(**kw):
        train = dict(gamma=0.9, tau=10, delta=50, batch_size=4, learning_rate=1e-3,
                     eps_anneal_steps=100, max_actions=3, n_blocks=1, width=16, min_fill=8)
        train.update(kw.pop("train", {}))
        base = dict(level="H", train=TrainConfig(**train),
                    backend_config={"seed": 0, "n_actions": 4}, synthetic_programs=5,
                    synthetic_actions=4, policy=FAST_POLICY,
                    store_root=str(tmp_path / "store"), run_dir=str(tmp_path / "run"))
        base.update(kw)
        return RunConfig(**base)
    return make


GATE = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, table, number, title):
        self.table, self.number, self.title = table, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            status = "PASS"
        elif issubclass(kind, pytest.skip.Exception):
            status, self.detail = "SKIP", str(exc)
        else:
            status = "FAIL"
            self.detail = self.detail or str(exc).splitlines()[0] if str(exc) else kind.__name__
        line = f"criterion {self.number:>2} {status}: {self.title}" + (f" ({self.detail})" if self.detail else "")
        self.table[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion(request):
    table = request.config.stash.setdefault(GATE, {})
    return lambda number, title: _Criterion(table, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(GATE, {})
    if table:
        terminalreporter.section("acceptance")
        for n in sorted(table):
            terminalreporter.write_line(table[n])
