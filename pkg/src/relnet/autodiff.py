"""Dense float64 tensors with reverse-mode automatic differentiation.

Ops execute eagerly on numpy arrays and append a node to a Graph (an
append-only tape). ``Graph.backward`` walks the tape once, in strictly
decreasing node-id order, and accumulates parameter gradients into a
ParameterStore.

Numeric contracts:

* everything is float64;
* reductions over rows or row blocks run sequentially left-to-right over
  the operand list (numpy reductions over a leading axis), so identical
  inputs give bitwise identical results run to run. Reordering operands
  (e.g. permuting object rows) may move results within float rounding;
  callers that permute must compare with a tolerance;
* relu's derivative at exactly 0 is 0;
* softmax subtracts the per-row max and the loss uses log-sum-exp, so
  extreme logits neither overflow nor produce NaN;
* there is no implicit broadcasting. The only shape-bending ops are the
  explicit ones: ``add_bias`` and ``mul_rowvec`` (row-broadcast of a
  vector), ``repeat_rows``/``tile_block_rows`` and friends.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract. Message carries the shapes."""


class Tensor:
    """Immutable dense array of 64-bit floats in row-major order."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for op outputs: adopt the array (views are fine, the
        # row-major `values` contract is about order, not storage).
        t = object.__new__(cls)
        if arr.dtype != np.float64:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls._wrap(np.zeros(shape))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


class Param:
    """One named trainable tensor with its gradient accumulator."""

    __slots__ = ("name", "value", "grad", "regularize", "state")

    def __init__(self, name: str, value: Tensor, regularize: bool):
        self.name = name
        self.value = value
        self.grad = np.zeros(value.shape)
        self.regularize = regularize
        self.state: dict[str, np.ndarray] = {}  # optimizer slots, keyed by slot name


class ParameterStore:
    """Named trainable tensors with gradient slots.

    Names are unique; iteration is always sorted by name so that every
    consumer (optimizer, checkpoints, reports) sees one deterministic order.
    The ``regularize`` flag marks the weight matrices the L2 penalty applies
    to (relation and output MLP weights, not biases or encoder weights).
    """

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value, regularize: bool = False) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not isinstance(value, Tensor):
            value = Tensor(value)
        p = Param(name, value, regularize)
        self._params[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Param]]:
        return [(n, self._params[n]) for n in self.names()]

    def regularized_names(self) -> list[str]:
        return [n for n, p in self.items() if p.regularize]

    def zero_grads(self) -> None:
        for _, p in self.items():
            p.grad[...] = 0.0

    def accumulate_grad(self, name: str, grad: np.ndarray) -> None:
        p = self._params[name]
        if grad.shape != p.grad.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameter shape {p.grad.shape} for {name!r}"
            )
        p.grad += grad

    def set_value(self, name: str, value: np.ndarray) -> None:
        self._params[name].value = Tensor(value)


class Node:
    __slots__ = ("op", "inputs", "tensor", "grad", "grad_owned", "needs_grad",
                 "vjp", "fwd", "param")

    def __init__(self, op, inputs, tensor, vjp=None, fwd=None, param=None,
                 needs_grad=False):
        self.op = op            # op kind, for debugging and replay
        self.inputs = inputs    # ids of input nodes, all smaller than this node's id
        self.tensor = tensor    # forward value
        self.grad = None        # adjoint slot, filled during backward
        self.grad_owned = False  # whether grad is a private buffer we may add into
        self.needs_grad = needs_grad  # a parameter leaf sits under this node
        self.vjp = vjp          # grad_out -> tuple of input adjoints (None entries allowed)
        self.fwd = fwd          # input arrays -> output array, for replay
        self.param = param      # (store, name) for parameter leaves


class Var:
    """Handle to one node of a Graph. All ops consume and produce Vars."""

    __slots__ = ("graph", "nid")

    def __init__(self, graph: "Graph", nid: int):
        self.graph = graph
        self.nid = nid

    @property
    def tensor(self) -> Tensor:
        return self.graph.nodes[self.nid].tensor

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.nid].tensor.data

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.shape})"


class Graph:
    """Append-only computation tape.

    Acyclic by construction: an op's inputs always carry smaller ids than
    its output. Recording and backward are single-threaded per instance.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, op, inputs, out_arr, vjp=None, fwd=None, param=None) -> Var:
        needs = param is not None
        for v in inputs:
            if v.graph is not self:
                raise ValueError(f"input of op {op!r} belongs to a different graph")
            needs = needs or self.nodes[v.nid].needs_grad
        node = Node(op, tuple(v.nid for v in inputs), Tensor._wrap(out_arr), vjp, fwd,
                    param, needs_grad=needs)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        t = value if isinstance(value, Tensor) else Tensor(value)
        return self._record("const", (), t.data)

    def parameter(self, store: ParameterStore, name: str) -> Var:
        p = store[name]
        return self._record("param", (), p.value.data, param=(store, name))

    def backward(self, loss: Var) -> None:
        """Accumulate dLoss/dParam into every parameter's gradient slot.

        Repeated calls accumulate (no implicit zeroing). Visits each node
        at most once, in strictly decreasing id order.
        """
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if self.nodes[loss.nid].tensor.shape != ():
            raise ShapeError(
                f"backward needs a scalar loss, got shape {self.nodes[loss.nid].tensor.shape}"
            )
        nodes = self.nodes
        for node in nodes:
            node.grad = None
            node.grad_owned = False
        nodes[loss.nid].grad = np.ones(())
        for nid in range(loss.nid, -1, -1):
            node = nodes[nid]
            if node.grad is None:
                continue
            if node.param is not None:
                store, name = node.param
                store.accumulate_grad(name, node.grad)
            if node.vjp is None:
                continue
            for in_id, g in zip(node.inputs, node.vjp(node.grad)):
                in_node = nodes[in_id]
                if g is None or not in_node.needs_grad:
                    continue
                if in_node.grad is None:
                    # adopt the array read-only; copy on the first extra
                    # contribution (vjp outputs may be shared or views)
                    in_node.grad = g
                elif in_node.grad_owned:
                    in_node.grad += g
                else:
                    in_node.grad = in_node.grad + g
                    in_node.grad_owned = True

    def replay(self, upto: Var) -> Tensor:
        """Re-evaluate the recorded tape and return the value at ``upto``.

        Leaves keep their recorded tensors; every interior node is
        recomputed from its inputs. Equal inputs give a bitwise equal
        result. Only forward values are refreshed; vjp closures keep the
        state saved at recording time.
        """
        values: list[Tensor] = []
        for nid in range(upto.nid + 1):
            node = self.nodes[nid]
            if node.fwd is None:
                values.append(node.tensor)
            else:
                out = node.fwd(*(values[i].data for i in node.inputs))
                values.append(Tensor._wrap(out))
        return values[upto.nid]


# ---------------------------------------------------------------------------
# ops


def _need_2d(x: Var, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} needs a 2-d tensor, got shape {x.shape}")


def matmul(a: Var, b: Var) -> Var:
    """Matrix product of a [r x k] and b [k x c]."""
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return a.graph._record("matmul", (a, b), A @ B, vjp, fwd=lambda x, y: x @ y)


def _binary(op: str, a: Var, b: Var, f, vjp_maker):
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return a.graph._record(op, (a, b), f(A, B), vjp_maker(A, B), fwd=f)


def add(a: Var, b: Var) -> Var:
    return _binary("add", a, b, lambda x, y: x + y, lambda A, B: lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    return _binary("sub", a, b, lambda x, y: x - y, lambda A, B: lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda A, B: lambda g: (g * B, g * A))


def add_bias(x: Var, b: Var) -> Var:
    """Row-broadcast addition: x [n x d] + b [d]."""
    _need_2d(x, "add_bias")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias needs bias [d] matching x [n x d], got {x.shape} and {b.shape}")
    B = b.data

    def vjp(g):
        return g, g.sum(axis=0)

    return x.graph._record("add_bias", (x, b), x.data + B, vjp, fwd=lambda X, Bv: X + Bv)


def mul_rowvec(x: Var, v: Var) -> Var:
    """Row-broadcast Hadamard product: x [n x d] * v [d]."""
    _need_2d(x, "mul_rowvec")
    if v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeError(f"mul_rowvec needs vector [d] matching x [n x d], got {x.shape} and {v.shape}")
    X, V = x.data, v.data

    def vjp(g):
        return g * V, (g * X).sum(axis=0)

    return x.graph._record("mul_rowvec", (x, v), X * V, vjp, fwd=lambda a, b: a * b)


def relu(x: Var) -> Var:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return x.graph._record("relu", (x,), out, vjp, fwd=lambda a: np.maximum(a, 0.0))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Var) -> Var:
    out = _sigmoid(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return x.graph._record("sigmoid", (x,), out, vjp, fwd=_sigmoid)


def tanh(x: Var) -> Var:
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return x.graph._record("tanh", (x,), out, vjp, fwd=np.tanh)


def concat(parts: list[Var], axis: int) -> Var:
    if not parts:
        raise ShapeError("concat needs at least one input")
    graph = parts[0].graph
    ndim = parts[0].data.ndim
    if axis < 0 or axis >= ndim:
        raise ShapeError(f"concat axis {axis} out of range for {ndim}-d tensors")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != ndim or any(
            other[i] != base[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concat shapes incompatible off axis {axis}: {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))  # views; accumulation copies on write

    return graph._record(
        "concat", tuple(parts), out, vjp,
        fwd=lambda *arrs: np.concatenate(arrs, axis=axis),
    )


def slice_cols(x: Var, lo: int, hi: int) -> Var:
    _need_2d(x, "slice_cols")
    n, d = x.shape
    if not (0 <= lo < hi <= d):
        raise ShapeError(f"slice_cols [{lo}:{hi}] out of range for shape {x.shape}")

    def vjp(g):
        full = np.zeros((n, d))
        full[:, lo:hi] = g
        return (full,)

    return x.graph._record(
        "slice_cols", (x,), x.data[:, lo:hi], vjp, fwd=lambda a: a[:, lo:hi]
    )


def reshape(x: Var, shape: tuple) -> Var:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return x.graph._record(
        "reshape", (x,), x.data.reshape(shape), vjp, fwd=lambda a: a.reshape(shape)
    )


def sum_rows(x: Var) -> Var:
    """Column-wise sum of x [n x d] -> [d]. Rows are added first to last."""
    _need_2d(x, "sum_rows")
    n = x.shape[0]

    def vjp(g):
        return (np.broadcast_to(g, (n, g.shape[0])),)

    return x.graph._record(
        "sum_rows", (x,), x.data.sum(axis=0), vjp, fwd=lambda a: a.sum(axis=0)
    )


def block_row_sum(x: Var, block: int) -> Var:
    """Sum consecutive blocks of ``block`` rows: [m*block x d] -> [m x d].

    Within each block rows are added first to last.
    """
    _need_2d(x, "block_row_sum")
    rows, d = x.shape
    if block < 1 or rows % block != 0:
        raise ShapeError(f"block_row_sum: {rows} rows not divisible into blocks of {block}")
    m = rows // block

    def vjp(g):
        return (np.repeat(g, block, axis=0),)

    return x.graph._record(
        "block_row_sum", (x,), x.data.reshape(m, block, d).sum(axis=1), vjp,
        fwd=lambda a: a.reshape(m, block, d).sum(axis=1),
    )


def repeat_rows(x: Var, times: int) -> Var:
    """Repeat each row ``times`` times consecutively: [m x d] -> [m*times x d]."""
    _need_2d(x, "repeat_rows")
    if times < 1:
        raise ShapeError(f"repeat_rows needs times >= 1, got {times}")
    m, d = x.shape

    def f(a):
        return np.ascontiguousarray(
            np.broadcast_to(a.reshape(m, 1, d), (m, times, d))).reshape(m * times, d)

    def vjp(g):
        return (g.reshape(m, times, d).sum(axis=1),)

    return x.graph._record("repeat_rows", (x,), f(x.data), vjp, fwd=f)


def tile_block_rows(x: Var, block: int, times: int) -> Var:
    """Tile each block of ``block`` consecutive rows ``times`` times.

    [m*block x d] -> [m*times*block x d]; block b expands to ``times``
    back-to-back copies of itself.
    """
    _need_2d(x, "tile_block_rows")
    rows, d = x.shape
    if block < 1 or rows % block != 0:
        raise ShapeError(f"tile_block_rows: {rows} rows not divisible into blocks of {block}")
    if times < 1:
        raise ShapeError(f"tile_block_rows needs times >= 1, got {times}")
    m = rows // block

    def f(a):
        return np.ascontiguousarray(
            np.broadcast_to(a.reshape(m, 1, block, d), (m, times, block, d))
        ).reshape(m * times * block, d)

    def vjp(g):
        return (g.reshape(m, times, block, d).sum(axis=1).reshape(rows, d),)

    return x.graph._record("tile_block_rows", (x,), f(x.data), vjp, fwd=f)


def gather_rows(x: Var, ids) -> Var:
    """Row gather: x [v x d], ids [k] -> [k x d]. Backward scatter-adds."""
    _need_2d(x, "gather_rows")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs 1-d ids, got shape {idx.shape}")
    v, d = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = idx[(idx < 0) | (idx >= v)][0]
        raise ValueError(f"gather_rows id {bad} out of range for {v} rows")

    def vjp(g):
        out = np.zeros((v, d))
        np.add.at(out, idx, g)
        return (out,)

    return x.graph._record(
        "gather_rows", (x,), x.data[idx], vjp, fwd=lambda a: a[idx]
    )


# Spec name for the same gather, used with the word-embedding table.
embedding_lookup = gather_rows


def scale(x: Var, c: float) -> Var:
    c = float(c)

    def vjp(g):
        return (c * g,)

    return x.graph._record("scale", (x,), c * x.data, vjp, fwd=lambda a: c * a)


def sum_all(x: Var) -> Var:
    """Sum of all entries -> scalar."""
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g, shape),)

    return x.graph._record(
        "sum_all", (x,), np.asarray(x.data.sum()), vjp, fwd=lambda a: np.asarray(a.sum())
    )


def sum_squares(x: Var) -> Var:
    """Sum of squared entries -> scalar."""
    X = x.data

    def vjp(g):
        return (2.0 * g * X,)

    return x.graph._record(
        "sum_squares", (x,), np.asarray((X * X).sum()), vjp,
        fwd=lambda a: np.asarray((a * a).sum()),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row softmax (plain array helper)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean over the batch of -log softmax(logits)[label] -> scalar.

    Stable for extreme logits via per-row max subtraction and log-sum-exp.
    """
    _need_2d(logits, "softmax_cross_entropy")
    batch, classes = logits.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (batch,):
        raise ShapeError(
            f"labels shape {lab.shape} does not match logits batch {batch}"
        )
    if lab.size and (lab.min() < 0 or lab.max() >= classes):
        bad = lab[(lab < 0) | (lab >= classes)][0]
        raise ValueError(f"label {bad} out of range for {classes} classes")

    def f(x):
        z = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return np.asarray((lse - z[np.arange(batch), lab]).mean())

    probs = softmax(logits.data)

    def vjp(g):
        d = probs.copy()
        d[np.arange(batch), lab] -= 1.0
        return (g * d / batch,)

    return logits.graph._record("softmax_xent", (logits,), f(logits.data), vjp, fwd=f)
