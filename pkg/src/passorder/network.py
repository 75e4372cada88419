"""Residual MLP Q-network in plain numpy, with explicit backpropagation."""

from __future__ import annotations

import io
import json
from typing import Optional

import numpy as np

CHECKPOINT_VERSION = 1


def _uniform(rng, fan_in, shape, gain):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class QNetwork:
    """Input layer, ``n_blocks`` residual blocks of width ``width``, linear head.

    A block computes ``relu(h + W2 @ relu(W1 @ h + b1) + b2)``.
    """

    def __init__(self, input_dim: int, n_actions: int, n_blocks: int = 4, width: int = 256,
                 seed: Optional[int] = 0, params: Optional[dict] = None, dtype="float64"):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {dtype}")
        self.input_dim = int(input_dim)
        self.n_actions = int(n_actions)
        self.n_blocks = int(n_blocks)
        self.width = int(width)
        if params is not None:
            self.params = {k: np.array(v, dtype=self.dtype) for k, v in params.items()}
            return
        rng = np.random.default_rng(seed)
        p = {
            "in.W": _uniform(rng, input_dim, (input_dim, width), np.sqrt(2.0)),
            "in.b": np.zeros(width),
        }
        for k in range(n_blocks):
            p[f"b{k}.W1"] = _uniform(rng, width, (width, width), np.sqrt(2.0))
            p[f"b{k}.b1"] = np.zeros(width)
            # small second layer keeps blocks near identity at init
            p[f"b{k}.W2"] = _uniform(rng, width, (width, width), 0.1)
            p[f"b{k}.b2"] = np.zeros(width)
        p["out.W"] = _uniform(rng, width, (width, n_actions), 1.0)
        p["out.b"] = np.zeros(n_actions)
        self.params = {k: v.astype(self.dtype) for k, v in p.items()}

    # -- structure -------------------------------------------------------

    def architecture(self) -> dict:
        return {"input_dim": self.input_dim, "n_actions": self.n_actions,
                "n_blocks": self.n_blocks, "width": self.width,
                "nonlinearity": "relu", "init": "scaled-uniform-fan-in", "dtype": self.dtype.name}

    def copy(self) -> "QNetwork":
        return QNetwork(self.input_dim, self.n_actions, self.n_blocks, self.width,
                        params={k: v.copy() for k, v in self.params.items()}, dtype=self.dtype)

    def load_params(self, other: "QNetwork") -> None:
        for k, v in other.params.items():
            np.copyto(self.params[k], v)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for v in self.params.values():
            v[...] = vec[i:i + v.size].reshape(v.shape)
            i += v.size

    # -- forward / backward ---------------------------------------------

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input of length {self.input_dim}, got {x.shape[-1]}")
        return x

    def forward(self, X, keep: bool = False):
        X = self._check(X)
        p = self.params
        h = np.maximum(X @ p["in.W"] + p["in.b"], 0.0)
        cache = [X, h]
        for k in range(self.n_blocks):
            z1 = h @ p[f"b{k}.W1"] + p[f"b{k}.b1"]
            a1 = np.maximum(z1, 0.0)
            h = np.maximum(h + a1 @ p[f"b{k}.W2"] + p[f"b{k}.b2"], 0.0)
            if keep:
                cache += [z1, a1, h]
        q = h @ p["out.W"] + p["out.b"]
        return (q, cache) if keep else q

    def q_values(self, x) -> np.ndarray:
        x = self._check(x)
        if x.ndim == 1:
            return self.forward(x[None, :])[0]
        return self.forward(x)

    __call__ = q_values

    def backward(self, cache, dq: np.ndarray) -> dict:
        """Gradients of ``sum(dq * q)`` with respect to every parameter."""
        p = self.params
        X, h0 = cache[0], cache[1]
        blocks = [cache[2 + 3 * k: 5 + 3 * k] for k in range(self.n_blocks)]
        h_last = blocks[-1][2] if blocks else h0
        g = {"out.W": h_last.T @ dq, "out.b": dq.sum(0)}
        dh = dq @ p["out.W"].T
        for k in reversed(range(self.n_blocks)):
            z1, a1, h_out = blocks[k]
            h_in = blocks[k - 1][2] if k > 0 else h0
            dpre = dh * (h_out > 0)
            g[f"b{k}.W2"] = a1.T @ dpre
            g[f"b{k}.b2"] = dpre.sum(0)
            dz1 = (dpre @ p[f"b{k}.W2"].T) * (z1 > 0)
            g[f"b{k}.W1"] = h_in.T @ dz1
            g[f"b{k}.b1"] = dz1.sum(0)
            dh = dpre + dz1 @ p[f"b{k}.W1"].T
        dz0 = dh * (h0 > 0)
        g["in.W"] = X.T @ dz0
        g["in.b"] = dz0.sum(0)
        return {k: g[k] for k in p}

    # -- checkpoints -----------------------------------------------------

    def save(self, path, metadata: Optional[dict] = None) -> None:
        header = {"version": CHECKPOINT_VERSION, "architecture": self.architecture(),
                  "shapes": {k: list(v.shape) for k, v in self.params.items()},
                  "metadata": metadata or {}}
        buf = io.BytesIO()
        np.savez(buf, __header__=np.array(json.dumps(header)), **self.params)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        """Returns ``(network, metadata)``."""
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {header['version']}")
            params = {k: z[k] for k in header["shapes"]}
        for k, shape in header["shapes"].items():
            if list(params[k].shape) != shape:
                raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, header says {shape}")
        arch = header["architecture"]
        net = cls(arch["input_dim"], arch["n_actions"], arch["n_blocks"], arch["width"], params=params,
                  dtype=arch.get("dtype", "float64"))
        return net, header["metadata"]


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        step = self.lr / c1
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            params[k] -= step * m / denom
