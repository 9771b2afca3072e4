"""Dense 64-bit tensors with reverse-mode automatic differentiation.

Operations are methods of a :class:`Graph`. Every call appends a node to the
graph's tape in execution order; :meth:`Graph.backward` replays that tape in
reverse exactly once. Tensors are read-only after construction: optimizers
rebind a parameter's buffer with :meth:`Tensor.assign` instead of writing
into it, and ``grad`` is the only attribute a backward pass fills in.

There is no broadcasting beyond adding a bias row to a
``batch x n`` matrix, and no convolution.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import GraphError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _checked(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class Tensor:
    """A read-only float64 array that may take part in a backward pass."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self._data = _checked(np.array(data, dtype=np.float64), name or "tensor")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out._data = _checked(np.asarray(arr, dtype=np.float64), f"output of {op}")
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def assign(self, values) -> None:
        """Rebind the buffer to new values of the same shape."""
        arr = np.array(values, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"cannot assign shape {arr.shape} to tensor of shape {self.shape}")
        self._data = _checked(arr, self.name or "tensor")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data, False, "detach")

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * batch_mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * batch_var


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    saved: Dict[str, np.ndarray] = field(default_factory=dict)


class Graph:
    """Tape of executed operations, consumed by exactly one backward pass.

    A graph is not thread-safe; run independent graphs on separate threads
    instead of sharing one.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
                backward: BackwardFn, saved: Optional[Dict[str, np.ndarray]] = None) -> Tensor:
        if self.consumed:
            raise GraphError(f"cannot record {op}: graph was already consumed by backward")
        requires_grad = any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad, op)
        self.nodes.append(Node(op, tuple(inputs), result, backward, saved or {}))
        return result

    # -- operations ---------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        A, B = a.data, b.data

        def backward(g):
            return g @ B.T, A.T @ g

        return self._record("matmul", (a, b), A @ B, backward)

    def add_bias(self, x: Tensor, bias: Tensor) -> Tensor:
        if x.ndim != 2 or bias.shape not in ((x.shape[1],), (1, x.shape[1])):
            raise ShapeError(f"add_bias: bias of shape {bias.shape} does not fit {x.shape}")
        bias_shape = bias.shape

        def backward(g):
            return g, g.sum(axis=0).reshape(bias_shape)

        return self._record("add_bias", (x, bias), x.data + bias.data.reshape(1, -1), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def relu(self, x: Tensor) -> Tensor:
        # subgradient at exactly 0 is 0
        mask = x.data > 0

        def backward(g):
            return (g * mask,)

        return self._record("relu", (x,), np.where(mask, x.data, 0.0), backward)

    def minimum(self, x: Tensor, cap: float) -> Tensor:
        """Elementwise ``min(x, cap)``; the gradient passes only where ``x < cap``."""
        cap = float(cap)
        mask = x.data < cap

        def backward(g):
            return (g * mask,)

        return self._record("minimum", (x,), np.where(mask, x.data, cap), backward)

    def batchnorm(self, x: Tensor, gamma: Tensor, beta: Tensor,
                  state: BatchNormState, mode: str = TRAIN) -> Tensor:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batchnorm: input {x.shape} with gamma {gamma.shape} and beta {beta.shape}")
        X, G = x.data, gamma.data

        if mode == TRAIN:
            m = X.shape[0]
            if m < 2:
                raise ShapeError("batchnorm: train mode needs a batch of at least 2 rows")
            mean = X.mean(axis=0)
            var = X.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + state.eps)
            xhat = (X - mean) * inv_std
            state.update(mean, var)

            def backward(g):
                dxhat = g * G
                dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

            saved = {"mean": mean, "var": var}
        else:
            inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
            xhat = (X - state.running_mean) * inv_std

            def backward(g):
                return g * G * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0)

            saved = {}

        return self._record("batchnorm", (x, gamma, beta), xhat * G + beta.data, backward, saved)

    def softmax_cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean over the batch of -log softmax(logits)[label]."""
        if logits.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy: logits must be batch x K, got {logits.shape}")
        batch, k = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (batch,):
            raise ShapeError(f"softmax_cross_entropy: {labels.shape} labels for {batch} rows")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("softmax_cross_entropy: labels must be integer class ids")
        if batch and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")

        log_probs = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
        probs = np.exp(log_probs)
        rows = np.arange(batch)
        loss = -log_probs[rows, labels].mean()

        def backward(g):
            d = probs.copy()
            d[rows, labels] -= 1.0
            return (g * d / batch,)

        return self._record("softmax_cross_entropy", (logits,), np.array(loss), backward,
                            {"probs": probs})

    def mse(self, pred: Tensor, target: Tensor) -> Tensor:
        if pred.shape != target.shape:
            raise ShapeError(f"mse: prediction {pred.shape} and target {target.shape} differ")
        diff = pred.data - target.data
        n = diff.size

        def backward(g):
            d = g * 2.0 * diff / n
            return d, -d

        return self._record("mse", (pred, target), np.array(np.mean(diff ** 2)), backward)

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"concat: cannot join {a.shape} and {b.shape} column-wise")
        p = a.shape[1]

        def backward(g):
            return g[:, :p], g[:, p:]

        return self._record("concat", (a, b), np.concatenate([a.data, b.data], axis=1), backward)

    def sum(self, x: Tensor) -> Tensor:
        shape = x.shape
        return self._record("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))

    def linear_combination(self, terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
        """Scalar ``sum(w_i * t_i)``; the backward pass scales each upstream gradient by w_i."""
        if len(terms) != len(weights) or not terms:
            raise ShapeError("linear_combination: need one weight per term")
        for t in terms:
            if t.size != 1:
                raise ShapeError(f"linear_combination: terms must be scalars, got {t.shape}")
        weights = [float(w) for w in weights]
        value = sum(w * t.item() for w, t in zip(weights, terms))

        def backward(g):
            return tuple(np.full(t.shape, float(g) * w) for t, w in zip(terms, weights))

        return self._record("linear_combination", tuple(terms), np.array(value), backward)

    # -- differentiation ----------------------------------------------------

    def backward(self, loss: Tensor) -> Dict[Tensor, np.ndarray]:
        """Populate ``grad`` on every leaf tensor that requires it.

        Gradients accumulate additively when a tensor feeds several
        operations. Leaves that take part in the graph but do not influence
        the loss receive zeros. Returns the leaf gradients keyed by tensor.
        """
        if self.consumed:
            raise GraphError("backward called on a graph that was already consumed")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced:
            raise GraphError("loss was not produced by this graph")
        self.consumed = True

        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: Dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            g = grads.pop(id(node.output), None)
            if g is None or not node.output.requires_grad:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi

        result: Dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            t.grad = grads.get(key, np.zeros(t.shape))
            result[t] = t.grad
        return result


def backward(graph: Graph, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    return graph.backward(loss)


def _evaluate(fn: Callable[[Graph], Tensor]) -> float:
    try:
        value = fn(Graph())
    except NonFiniteError as exc:
        raise NonFiniteError(f"grad_check: function is not finite at a probe point ({exc})") from exc
    return value.item()


def grad_check(fn: Callable[[Graph], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0) -> float:
    """Compare backward's gradient against central differences.

    ``fn`` builds a scalar loss on the graph it is given from ``params``.
    Returns the largest ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``
    over the probed coordinates. With ``sample`` set, only that many randomly
    chosen coordinates per parameter are probed.

    Layers in train mode update their running statistics on every probe;
    the loss itself does not depend on them.
    """
    graph = Graph()
    grads = graph.backward(fn(graph))
    rng = np.random.default_rng(seed)

    worst = 0.0
    for param in params:
        analytic = grads.get(param, np.zeros(param.shape)).reshape(-1)
        base = param.data
        coords = np.arange(param.size)
        if sample is not None and sample < param.size:
            coords = np.sort(rng.choice(param.size, size=sample, replace=False))
        try:
            for i in coords:
                probe = base.reshape(-1).copy()
                probe[i] += h
                param.assign(probe.reshape(base.shape))
                f_plus = _evaluate(fn)
                probe[i] -= 2 * h
                param.assign(probe.reshape(base.shape))
                f_minus = _evaluate(fn)
                numeric = (f_plus - f_minus) / (2 * h)
                err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
                worst = max(worst, err)
        finally:
            param.assign(base)
    logger.debug("grad_check over %d tensors: max relative error %.3e", len(params), worst)
    return worst


def _away_from_kink(rng: np.random.Generator, shape: Tuple[int, ...], h: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    close = np.abs(x) < 10 * h
    while close.any():
        x[close] = rng.standard_normal(int(close.sum()))
        close = np.abs(x) < 10 * h
    return x


def op_checks(seed: int = 0, points: int = 10, h: float = 1e-5) -> Dict[str, float]:
    """Run :func:`grad_check` on every differentiable op, each feeding an MSE against a fixed target.

    Returns the worst relative error per op name.
    """
    rng = np.random.default_rng(seed)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def target(*shape):
        return Tensor(rng.standard_normal(shape))

    a, b, c = leaf(6, 4), leaf(4, 5), leaf(6, 4)
    bias, bias_row = leaf(5), leaf(1, 4)
    kinked = Tensor(_away_from_kink(rng, (6, 4), h), requires_grad=True)
    gamma, beta = Tensor(1.0 + 0.1 * rng.standard_normal(4), requires_grad=True), leaf(4)
    state = BatchNormState(rng.standard_normal(4), 0.5 + rng.random(4))
    logits = leaf(6, 3)
    labels = rng.integers(0, 3, size=6)
    t45, t64, t68 = target(6, 5), target(6, 4), target(6, 8)

    cases = {
        "matmul": (lambda g: g.mse(g.matmul(a, b), t45), [a, b]),
        "add_bias": (lambda g: g.mse(g.add_bias(g.matmul(a, b), bias), t45), [bias]),
        "add_bias_row": (lambda g: g.mse(g.add_bias(a, bias_row), t64), [a, bias_row]),
        "add": (lambda g: g.mse(g.add(a, c), t64), [a, c]),
        "relu": (lambda g: g.mse(g.relu(kinked), t64), [kinked]),
        "minimum": (lambda g: g.mse(g.minimum(kinked, 0.0), t64), [kinked]),
        "batchnorm_train": (lambda g: g.mse(g.batchnorm(a, gamma, beta, state, TRAIN), t64), [a, gamma, beta]),
        "batchnorm_eval": (lambda g: g.mse(g.batchnorm(a, gamma, beta, state, EVAL), t64), [a, gamma, beta]),
        "softmax_cross_entropy": (lambda g: g.softmax_cross_entropy(logits, labels), [logits]),
        "mse": (lambda g: g.mse(a, c), [a, c]),
        "concat": (lambda g: g.mse(g.concat(a, c), t68), [a, c]),
        "sum": (lambda g: g.sum(g.matmul(a, b)), [a, b]),
        "linear_combination": (lambda g: g.linear_combination(
            [g.mse(a, t64), g.softmax_cross_entropy(logits, labels)], [1.0, -0.5]), [a, logits]),
    }
    return {name: grad_check(fn, params, h=h, sample=points, seed=seed) for name, (fn, params) in cases.items()}
