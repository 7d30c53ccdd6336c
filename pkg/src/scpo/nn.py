"""Minimal neural-network engine: reverse-mode autodiff over dense 2-D
arrays (rows = batch), an LSTM cell, pinball/squared losses, and Adam.

A Graph is built once against a ParamStore and then evaluated many times
with different input feeds.  Gradients accumulate into the store, so
distinct graphs (e.g. a training graph and a prediction graph) can share
one parameter set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

WEIGHTS_FORMAT = "scpo-weights-v1"


class ParamStore:
    """Named parameter matrices with matching gradient buffers."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple[int, int]) -> str:
        """Create a parameter initialized U(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        fan_in = max(1, shape[0])
        bound = 1.0 / math.sqrt(fan_in)
        self.params[name] = self.rng.uniform(-bound, bound, size=shape)
        self.grads[name] = np.zeros(shape)
        return name

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def to_json(self, meta: dict | None = None) -> str:
        doc = {
            "format": WEIGHTS_FORMAT,
            "params": {
                name: {"shape": list(p.shape),
                       "values": [float(v) for v in p.ravel()]}
                for name, p in sorted(self.params.items())
            },
        }
        if meta:
            doc["meta"] = meta
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> tuple["ParamStore", dict]:
        doc = json.loads(text)
        if doc.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"unsupported weights format: {doc.get('format')!r}")
        store = ParamStore()
        for name, spec in doc["params"].items():
            arr = np.asarray(spec["values"], dtype=float).reshape(spec["shape"])
            store.params[name] = arr
            store.grads[name] = np.zeros_like(arr)
        return store, doc.get("meta", {})


@dataclass
class _Node:
    op: str
    args: tuple
    aux: object = None


class Graph:
    """Static computation graph; nodes are created once, then forward() and
    backward() run repeatedly with fresh feeds."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.nodes: list[_Node] = []
        self.inputs: dict[str, int] = {}
        self._vals: list[np.ndarray | None] = []

    def _new(self, op, args=(), aux=None) -> int:
        self.nodes.append(_Node(op, tuple(args), aux))
        return len(self.nodes) - 1

    # -- node constructors -------------------------------------------------

    def input(self, name: str) -> int:
        nid = self._new("input", aux=name)
        self.inputs[name] = nid
        return nid

    def param(self, name: str) -> int:
        if name not in self.store.params:
            raise KeyError(f"unknown parameter {name!r}")
        return self._new("param", aux=name)

    def const(self, value) -> int:
        return self._new("const", aux=np.atleast_2d(np.asarray(value, dtype=float)))

    def matmul(self, a: int, b: int) -> int:
        return self._new("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        """Elementwise add; the right operand may be a (1, n) bias row that
        broadcasts over the batch."""
        return self._new("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._new("mul", (a, b))

    def smul(self, a: int, s: float) -> int:
        return self._new("smul", (a,), float(s))

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.smul(b, -1.0))

    def tanh(self, a: int) -> int:
        return self._new("tanh", (a,))

    def sigmoid(self, a: int) -> int:
        return self._new("sigmoid", (a,))

    def relu(self, a: int) -> int:
        return self._new("relu", (a,))

    def pospart(self, a: int) -> int:
        """(x)^+ with subgradient 0 at x = 0; identical to relu."""
        return self._new("relu", (a,))

    def concat(self, parts: list[int]) -> int:
        return self._new("concat", tuple(parts))

    def slice_cols(self, a: int, c0: int, c1: int) -> int:
        return self._new("slice", (a,), (int(c0), int(c1)))

    def sum(self, a: int) -> int:
        """Reduce to a (1, 1) scalar."""
        return self._new("sum", (a,))

    # -- execution ----------------------------------------------------------

    def forward(self, feeds: dict[str, np.ndarray], out: int | None = None) -> np.ndarray:
        vals: list[np.ndarray | None] = [None] * len(self.nodes)
        last = out if out is not None else len(self.nodes) - 1
        for nid in range(last + 1):
            node = self.nodes[nid]
            op = node.op
            if op == "input":
                v = np.atleast_2d(np.asarray(feeds[node.aux], dtype=float))
            elif op == "param":
                v = self.store.params[node.aux]
            elif op == "const":
                v = node.aux
            elif op == "matmul":
                a, b = (vals[i] for i in node.args)
                if a.shape[1] != b.shape[0]:
                    raise ValueError(f"matmul shape mismatch {a.shape} x {b.shape}")
                v = a @ b
            elif op == "add":
                a, b = (vals[i] for i in node.args)
                if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
                    raise ValueError(f"add shape mismatch {a.shape} + {b.shape}")
                v = a + b
            elif op == "mul":
                a, b = (vals[i] for i in node.args)
                if a.shape != b.shape:
                    raise ValueError(f"mul shape mismatch {a.shape} * {b.shape}")
                v = a * b
            elif op == "smul":
                v = vals[node.args[0]] * node.aux
            elif op == "tanh":
                v = np.tanh(vals[node.args[0]])
            elif op == "sigmoid":
                v = 1.0 / (1.0 + np.exp(-vals[node.args[0]]))
            elif op == "relu":
                v = np.maximum(vals[node.args[0]], 0.0)
            elif op == "concat":
                v = np.concatenate([vals[i] for i in node.args], axis=1)
            elif op == "slice":
                c0, c1 = node.aux
                v = vals[node.args[0]][:, c0:c1]
            elif op == "sum":
                v = np.array([[float(np.sum(vals[node.args[0]]))]])
            else:  # pragma: no cover
                raise ValueError(f"unknown op {op}")
            vals[nid] = v
        self._vals = vals
        self._last = last
        return vals[last]

    def backward(self, out: int | None = None) -> None:
        """Reverse-mode sweep from a scalar output; accumulates parameter
        gradients into the store (call store.zero_grads() between batches)."""
        if not self._vals or self._vals[-1] is None and out is None:
            raise RuntimeError("backward called before forward")
        last = out if out is not None else self._last
        vals = self._vals
        if vals[last] is None or vals[last].shape != (1, 1):
            raise ValueError("backward needs a (1,1) scalar output node")
        adj: dict[int, np.ndarray] = {last: np.ones((1, 1))}
        for nid in range(last, -1, -1):
            if nid not in adj:
                continue
            node = self.nodes[nid]
            g = adj[nid]
            op = node.op

            def acc(i, val):
                if i in adj:
                    adj[i] = adj[i] + val
                else:
                    adj[i] = val

            if op == "param":
                self.store.grads[node.aux] += g
            elif op in ("input", "const"):
                pass
            elif op == "matmul":
                a, b = node.args
                acc(a, g @ vals[b].T)
                acc(b, vals[a].T @ g)
            elif op == "add":
                a, b = node.args
                acc(a, g)
                if vals[b].shape == g.shape:
                    acc(b, g)
                else:  # bias row broadcast over the batch
                    acc(b, g.sum(axis=0, keepdims=True))
            elif op == "mul":
                a, b = node.args
                acc(a, g * vals[b])
                acc(b, g * vals[a])
            elif op == "smul":
                acc(node.args[0], g * node.aux)
            elif op == "tanh":
                acc(node.args[0], g * (1.0 - vals[nid] ** 2))
            elif op == "sigmoid":
                acc(node.args[0], g * vals[nid] * (1.0 - vals[nid]))
            elif op == "relu":
                acc(node.args[0], g * (vals[node.args[0]] > 0.0))
            elif op == "concat":
                c = 0
                for i in node.args:
                    w = vals[i].shape[1]
                    acc(i, g[:, c:c + w])
                    c += w
            elif op == "slice":
                c0, c1 = node.aux
                full = np.zeros_like(vals[node.args[0]])
                full[:, c0:c1] = g
                acc(node.args[0], full)
            elif op == "sum":
                acc(node.args[0], np.full_like(vals[node.args[0]], float(g[0, 0])))


# -- layers -------------------------------------------------------------------

def lstm_params(store: ParamStore, prefix: str, n_in: int, n_hidden: int) -> None:
    """Register one LSTM cell's weights: inputs->gates, hidden->gates, bias.
    Gate order along the 4H axis is input, forget, output, candidate."""
    store.add(f"{prefix}.Wx", (n_in, 4 * n_hidden))
    store.add(f"{prefix}.Wh", (n_hidden, 4 * n_hidden))
    store.add(f"{prefix}.b", (1, 4 * n_hidden))


def lstm_cell(g: Graph, x: int, h_prev: int, c_prev: int, prefix: str,
              n_hidden: int) -> tuple[int, int]:
    """One LSTM step: returns (h, c) node ids."""
    pre = g.add(g.add(g.matmul(x, g.param(f"{prefix}.Wx")),
                      g.matmul(h_prev, g.param(f"{prefix}.Wh"))),
                g.param(f"{prefix}.b"))
    H = n_hidden
    i = g.sigmoid(g.slice_cols(pre, 0, H))
    f = g.sigmoid(g.slice_cols(pre, H, 2 * H))
    o = g.sigmoid(g.slice_cols(pre, 2 * H, 3 * H))
    cand = g.tanh(g.slice_cols(pre, 3 * H, 4 * H))
    c = g.add(g.mul(f, c_prev), g.mul(i, cand))
    h = g.mul(o, g.tanh(c))
    return h, c


def dense(g: Graph, x: int, prefix: str) -> int:
    return g.add(g.matmul(x, g.param(f"{prefix}.W")), g.param(f"{prefix}.b"))


def dense_params(store: ParamStore, prefix: str, n_in: int, n_out: int) -> None:
    store.add(f"{prefix}.W", (n_in, n_out))
    store.add(f"{prefix}.b", (1, n_out))


# -- losses -------------------------------------------------------------------

def quantile_loss(pred: np.ndarray, target: np.ndarray, quantiles) -> float:
    """Pinball loss summed over the quantile grid and horizons.

    `pred` has shape (|quantiles|, horizon); `target` has shape (horizon,).
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float).reshape(1, -1)
    q = np.asarray(list(quantiles), dtype=float).reshape(-1, 1)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    diff = target - pred
    return float(np.sum(q * np.maximum(diff, 0.0) + (1 - q) * np.maximum(-diff, 0.0)))


def quantile_loss_node(g: Graph, pred: int, target_col: int, quantiles,
                       batch: int) -> int:
    """Graph node for the pinball loss of one horizon.

    `pred` is (batch, B); `target_col` is (batch, 1), broadcast across the
    B quantile columns via a constant ones row."""
    B = len(quantiles)
    tiled = g.matmul(target_col, g.const(np.ones((1, B))))
    diff = g.sub(tiled, pred)
    wq = g.const(np.tile(np.asarray(quantiles, dtype=float), (batch, 1)))
    w1q = g.const(np.tile(1.0 - np.asarray(quantiles, dtype=float), (batch, 1)))
    over = g.mul(wq, g.pospart(diff))
    under = g.mul(w1q, g.pospart(g.smul(diff, -1.0)))
    return g.sum(g.add(over, under))


def squared_loss_node(g: Graph, pred: int, target: int) -> int:
    d = g.sub(pred, target)
    return g.sum(g.mul(d, d))


# -- optimizer ----------------------------------------------------------------

def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; `state` persists across calls."""
    t = state.get("t", 0) + 1
    state["t"] = t
    for name, p in params.items():
        gval = grads[name]
        m = state.setdefault(("m", name), np.zeros_like(p))
        v = state.setdefault(("v", name), np.zeros_like(p))
        m[...] = beta1 * m + (1 - beta1) * gval
        v[...] = beta2 * v + (1 - beta2) * gval * gval
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def step(self) -> None:
        adam_step(self.store.params, self.store.grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)
