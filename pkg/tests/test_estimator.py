import numpy as np
import pytest
from sklearn.base import clone

from passorder import PassOrderingAgent, SyntheticBackend

FAST = {"rep_table": [[1e9, 1]], "min_reps": 1, "max_reps": 1}


def tiny(**kw):
    params = dict(backend_config={"seed": 0, "n_actions": 3}, synthetic_actions=3, max_actions=2,
                  train_steps=60, tau=10, delta=30, batch_size=4, min_fill=6, n_blocks=1, width=8,
                  learning_rate=1e-3, eps_anneal_steps=40, policy=FAST)
    params.update(kw)
    return PassOrderingAgent(**params)


def test_params_round_trip():
    est = tiny(gamma=0.5)
    assert est.get_params()["gamma"] == 0.5
    est.set_params(width=4)
    assert clone(est).get_params()["width"] == 4


def test_fit_predict_score(tmp_path):
    backend = SyntheticBackend(seed=0, n_actions=3)
    X = [backend.make_program(i) for i in range(3)]
    est = tiny(store_root=str(tmp_path)).fit(X)
    assert est.n_steps_ == 60
    seqs = est.predict(X)
    assert len(seqs) == 3 and all(len(s) <= 2 and set(s) <= {0, 1, 2} for s in seqs)
    sp = est.speedups(X)
    assert sp.shape == (3,) and np.all(sp > 0)
    assert est.score(X) == pytest.approx(float(np.exp(np.mean(np.log(sp)))))
    body, seq = est.optimize(X[0], "prog000")
    assert seq == seqs[0]
    assert (tmp_path / "run" / "checkpoints" / "step_00000060.npz").exists()


def test_predict_new_program():
    backend = SyntheticBackend(seed=0, n_actions=3)
    est = tiny().fit([backend.make_program(0), backend.make_program(1)])
    assert len(est.predict({"unseen": backend.make_program(9)})) == 1


def test_parameterized_pass_toy():
    src = SyntheticBackend(seed=0, n_actions=1).make_program(7)
    est = tiny(level="L", backend_config={"seed": 0, "n_actions": 1}, synthetic_actions=1,
               synthetic_parameters={"p0": {"a": [1, 2], "b": [1, 2]}}, max_actions=1,
               train_steps=600, tau=50, delta=300, width=32, min_fill=4, eps_anneal_steps=300)
    est.fit({"p7": src})
    # 0 = pass, 1/2 = a in {1, 2}, 3/4 = b in {1, 2}
    assert est.predict({"p7": src}) == [[0, 2, 3]]
