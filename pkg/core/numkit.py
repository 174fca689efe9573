"""
Dense tensor engine with a single-use gradient tape and the Adam optimizer

Every kernel takes Tensors and returns a Tensor. When at least one input is
tracked on a Tape the result is recorded on the same tape together with its
backward rule; untracked inputs flow through as constants.
"""

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config.constants import Constants
from .exceptions import ContractError, DimensionError


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Rank 0-3 real array with an optional handle to a tape node"""

    __slots__ = ("data", "grad", "tape", "tape_id")

    def __init__(self, data, dtype=None, tape: Optional["Tape"] = None, tape_id: Optional[int] = None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        if array.ndim > 3:
            raise DimensionError("tensor", array.shape, detail="rank above 3")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None and self.tape_id is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Node:
    inputs: Tuple[Tensor, ...]
    backward: Optional[BackwardFn]


class Tape:
    """Records one forward pass; consumed by exactly one backward"""

    _serial = itertools.count()

    def __init__(self):
        self.serial = next(Tape._serial)
        self._nodes: List[_Node] = []
        self._param_nodes: Dict[int, "Parameter"] = {}
        self._watched: Dict[str, Tensor] = {}
        self._variables: Dict[int, Tensor] = {}
        self.consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Optional[BackwardFn]) -> Tensor:
        if self.consumed:
            raise ContractError("tape already consumed by backward; build a new tape per forward pass")
        self._nodes.append(_Node(inputs, backward))
        return Tensor(data, tape=self, tape_id=len(self._nodes) - 1)

    def variable(self, data, dtype=None) -> Tensor:
        """Tracked leaf whose .grad is filled in by backward"""
        leaf = self._append(np.array(data, dtype=dtype), (), None)
        self._variables[leaf.tape_id] = leaf
        return leaf

    def constant(self, data, dtype=None) -> Tensor:
        """Tracked leaf that never receives a gradient"""
        return self._append(np.array(data, dtype=dtype), (), None)

    def watch(self, param: "Parameter") -> Tensor:
        """Leaf view of a parameter; repeated calls return the same node"""
        leaf = self._watched.get(param.name)
        if leaf is None:
            leaf = self._append(param.value.data, (), None)
            self._watched[param.name] = leaf
            self._param_nodes[leaf.tape_id] = param
        return leaf

    def parameters(self) -> List["Parameter"]:
        return list(self._param_nodes.values())

    def _propagate(self, root: int, seed: np.ndarray) -> Dict[int, np.ndarray]:
        grads: Dict[int, np.ndarray] = {root: seed}
        leaf_grads: Dict[int, np.ndarray] = {}
        for node_id in range(root, -1, -1):
            grad = grads.pop(node_id, None)
            if grad is None:
                continue
            node = self._nodes[node_id]
            if node.backward is None:
                leaf_grads[node_id] = grad
                continue
            for tensor, input_grad in zip(node.inputs, node.backward(grad)):
                if input_grad is None or tensor.tape is not self or tensor.tape_id is None:
                    continue
                existing = grads.get(tensor.tape_id)
                grads[tensor.tape_id] = input_grad if existing is None else existing + input_grad
        return leaf_grads

    def clear(self):
        self._nodes = []
        self._watched = {}
        self.consumed = True


def _check_loss(loss: Tensor, caller: str):
    if not isinstance(loss, Tensor) or not loss.tracked:
        raise ContractError(f"{caller}: loss is not tracked on a tape")
    if loss.data.size != 1:
        raise ContractError(f"{caller}: loss must be a scalar, got shape {loss.shape}")
    if loss.tape.consumed:
        raise ContractError(f"{caller}: tape already consumed")


def collect_gradients(loss: Tensor) -> Dict[str, np.ndarray]:
    """Run backward into a private buffer keyed by parameter name

    Leaves created with Tape.variable get their .grad set; parameters are left
    untouched so that worker threads can return disjoint buffers to the trainer.
    """
    _check_loss(loss, "collect_gradients")
    tape = loss.tape
    leaf_grads = tape._propagate(loss.tape_id, np.ones_like(loss.data))

    buffer: Dict[str, np.ndarray] = {}
    for node_id, param in tape._param_nodes.items():
        grad = leaf_grads.get(node_id)
        shape = param.value.data.shape
        buffer[param.name] = np.zeros(shape, dtype=param.value.data.dtype) if grad is None \
            else np.asarray(grad, dtype=param.value.data.dtype).reshape(shape)
    for node_id, leaf in tape._variables.items():
        grad = leaf_grads.get(node_id)
        leaf.grad = np.zeros_like(leaf.data) if grad is None else np.asarray(grad, dtype=leaf.data.dtype).reshape(leaf.shape)

    tape.clear()
    return buffer


def backward(loss: Tensor):
    """Populate .grad of every parameter watched on the loss's tape, then clear the tape"""
    _check_loss(loss, "backward")
    params = {p.name: p for p in loss.tape.parameters()}
    for name, grad in collect_gradients(loss).items():
        params[name].accumulate_grad(grad)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _tape_of(kernel: str, inputs: Iterable[Tensor]) -> Optional[Tape]:
    tape = None
    for tensor in inputs:
        if not isinstance(tensor, Tensor):
            raise ContractError(f"{kernel}: expected Tensor inputs, got {type(tensor).__name__}")
        if tensor.tracked:
            if tape is not None and tensor.tape is not tape:
                raise ContractError(f"{kernel}: inputs are tracked on different tapes")
            tape = tensor.tape
    return tape


def _result(kernel: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = _tape_of(kernel, inputs)
    if tape is None:
        return Tensor(data)
    return tape._append(data, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(kernel, a.shape, b.shape) from None
    if len(shape) > 3:
        raise DimensionError(kernel, a.shape, b.shape, detail="rank above 3")
    return shape


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (broadcasting limited to rank 3)"""
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), grad_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def grad_fn(g):
        return (g * factor,)

    return _result("scale", a.data * factor, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] \
            or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)

    def grad_fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result("matmul", a.data @ b.data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes"""
    if a.data.ndim < 2:
        raise DimensionError("transpose", a.shape, detail="needs rank >= 2")

    def grad_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _result("transpose", np.swapaxes(a.data, -1, -2), (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    """max(0, x)"""
    positive = a.data > 0

    def grad_fn(g):
        return (g * positive,)

    return _result("relu", np.where(positive, a.data, 0).astype(a.dtype), (a,), grad_fn)


def softmax(a: Tensor, allow: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax over the last axis with an optional admissibility mask

    Disallowed positions get Constants.MASK_FILL added before normalisation.
    Rows with no allowed position output uniform weights and pass no gradient.
    """
    x = a.data
    if x.ndim == 0:
        raise DimensionError("softmax", a.shape, detail="needs rank >= 1")
    dead = None
    if allow is not None:
        allow = np.asarray(allow, dtype=bool)
        if allow.shape != x.shape:
            raise DimensionError("softmax", x.shape, allow.shape, detail="mask shape")
        x = np.where(allow, x, x + Constants.MASK_FILL)
        dead = ~allow.any(axis=-1)
    shifted = x - x.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    weights = exps / exps.sum(axis=-1, keepdims=True)
    if dead is not None and dead.any():
        weights[dead] = 1.0 / x.shape[-1]

    def grad_fn(g):
        grad = weights * (g - (g * weights).sum(axis=-1, keepdims=True))
        if dead is not None and dead.any():
            grad[dead] = 0
        return (grad,)

    return _result("softmax", weights, (a,), grad_fn)


def layernorm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
              eps: float = Constants.LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then apply gain/bias"""
    width = x.shape[-1] if x.data.ndim else 0
    for name, param in (("gain", gain), ("bias", bias)):
        if param is not None and param.shape != (width,):
            raise DimensionError("layernorm", x.shape, param.shape, detail=f"{name} must match last axis")

    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    out = normed
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g_normed = g * gain.data if gain is not None else g
        mean_g = g_normed.mean(axis=-1, keepdims=True)
        mean_gx = (g_normed * normed).mean(axis=-1, keepdims=True)
        g_x = inv_std * (g_normed - mean_g - normed * mean_gx)
        g_gain = (g * normed).reshape(-1, width).sum(axis=0) if gain is not None else None
        g_bias = g.reshape(-1, width).sum(axis=0) if bias is not None else None
        return g_x, g_gain, g_bias

    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def routed(g):
        g_x, g_gain, g_bias = grad_fn(g)
        grads = [g_x]
        if gain is not None:
            grads.append(g_gain)
        if bias is not None:
            grads.append(g_bias)
        return grads

    return _result("layernorm", out.astype(x.dtype, copy=False), inputs, routed)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat", detail="no operands")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return _result("concat", data, tensors, grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of the last axis"""
    width = a.shape[-1]
    if not 0 <= start < stop <= width:
        raise DimensionError("slice_cols", a.shape, detail=f"range [{start}, {stop}) out of bounds")

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        grad[..., start:stop] = g
        return (grad,)

    return _result("slice_cols", a.data[..., start:stop], (a,), grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of the second-to-last axis"""
    if a.data.ndim < 2 or not 0 <= start < stop <= a.shape[-2]:
        raise DimensionError("slice_rows", a.shape, detail=f"range [{start}, {stop}) out of bounds")

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        grad[..., start:stop, :] = g
        return (grad,)

    return _result("slice_rows", a.data[..., start:stop, :], (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), grad_fn)


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis, keeping it as extent 1"""
    def grad_fn(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _result("sum_rows", a.data.sum(axis=-1, keepdims=True), (a,), grad_fn)


def log(a: Tensor, floor: float = Constants.PROB_FLOOR) -> Tensor:
    """Natural log with inputs clamped at floor; clamped entries pass no gradient"""
    clamped = np.maximum(a.data, floor)
    live = a.data > floor

    def grad_fn(g):
        return (np.where(live, g / clamped, 0).astype(a.dtype),)

    return _result("log", np.log(clamped), (a,), grad_fn)


def take(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather a[rows[k], cols[k]] into a vector"""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise DimensionError("take", a.shape, rows.shape, cols.shape)
    if rows.size and (rows.max() >= a.shape[0] or cols.max() >= a.shape[1] or rows.min() < 0 or cols.min() < 0):
        raise DimensionError("take", a.shape, detail="index out of range")

    def grad_fn(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, (rows, cols), g)
        return (grad,)

    return _result("take", a.data[rows, cols], (a,), grad_fn)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Zero each entry with probability rate and rescale the survivors by 1 / (1 - rate)"""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout: rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)

    def grad_fn(g):
        return (g * keep,)

    return _result("dropout", a.data * keep, (a,), grad_fn)


KERNELS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "softmax": softmax,
    "layernorm": layernorm,
    "concat": concat,
    "slice_cols": slice_cols,
    "slice_rows": slice_rows,
    "sum": sum_all,
    "sum_rows": sum_rows,
    "log": log,
    "take": take,
    "dropout": dropout,
}


def forward_kernels(op_name: str, *inputs, **attrs) -> Tensor:
    """Dispatch a kernel by name"""
    try:
        kernel = KERNELS[op_name]
    except KeyError:
        raise ContractError(f"unknown kernel '{op_name}'; known: {', '.join(sorted(KERNELS))}") from None
    return kernel(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Parameters and optimisation
# ---------------------------------------------------------------------------


@dataclass
class Parameter:
    """Trainable tensor with its Adam moments"""

    name: str
    value: Tensor
    first_moment: Tensor
    second_moment: Tensor
    step_count: int = 0

    @classmethod
    def create(cls, name: str, data, dtype=np.float64) -> "Parameter":
        value = Tensor(np.array(data, dtype=dtype))
        return cls(
            name=name,
            value=value,
            first_moment=Tensor(np.zeros_like(value.data)),
            second_moment=Tensor(np.zeros_like(value.data)),
        )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad

    def zero_grad(self):
        self.value.grad = np.zeros_like(self.value.data)

    def accumulate_grad(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise DimensionError("accumulate_grad", self.value.shape, grad.shape, detail=self.name)
        if self.value.grad is None:
            self.value.grad = np.array(grad, dtype=self.value.dtype)
        else:
            self.value.grad += grad


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = Constants.ADAM_BETA1,
              beta2: float = Constants.ADAM_BETA2, eps: float = Constants.ADAM_EPS):
    """Bias-corrected Adam update; gradients are zeroed afterwards"""
    for param in params:
        if param.value.grad is None:
            raise ContractError(f"adam_step: parameter '{param.name}' has no gradient")

    for param in params:
        grad = param.value.grad
        param.step_count += 1
        t = param.step_count
        m = param.first_moment.data
        v = param.second_moment.data
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        param.value.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.value.dtype, copy=False)
        param.zero_grad()


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for param in params:
        if param.value.grad is not None:
            total += float(np.sum(np.square(param.value.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients so their global norm is at most max_norm; returns the pre-clip norm"""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for param in params:
            if param.value.grad is not None:
                param.value.grad *= param.value.dtype.type(factor)
    return norm
