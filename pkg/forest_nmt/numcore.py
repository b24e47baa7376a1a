"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves only while a :class:`Tape` is active in the
current context, so the same model code serves training (recorded) and
decoding (plain forward evaluation).
"""

import contextlib
import contextvars
import itertools
import logging
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel

from forest_nmt.exceptions import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

_node_ids = itertools.count()
_active_tape: "contextvars.ContextVar[Optional[Tape]]" = contextvars.ContextVar(
    "forest_nmt_active_tape", default=None
)


def _check_shape(shape: Shape, where: str) -> None:
    if len(shape) > 2 or any(dim <= 0 for dim in shape):
        raise DimensionError.single(
            "invalid_shape",
            f"{where}: tensors are scalars, vectors or matrices with positive dimensions, got {shape}",
            loc=(where,),
            input=list(shape),
        )


class Tensor:
    __slots__ = ("data", "grad", "node_id", "requires_grad", "name")

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        array = np.array(data, dtype=np.float64)
        _check_shape(array.shape, name or "tensor")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(array) if requires_grad else None
        self.node_id = next(_node_ids)
        self.name = name

    @classmethod
    def _from_array(cls, array: np.ndarray, requires_grad: bool) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.node_id = next(_node_ids)
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.shape != ():
            raise ContractError.single(
                "not_scalar", f"item() needs a scalar, got shape {self.shape}"
            )
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape))


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# operation registry
# ---------------------------------------------------------------------------


class OpSpec(NamedTuple):
    kind: str
    check: Callable[[str, List[Shape], Dict[str, Any]], None]
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]]


_OPS: Dict[str, OpSpec] = {}


def defop(
    kind: str,
    check: Callable[[str, List[Shape], Dict[str, Any]], None],
    forward: Callable[..., np.ndarray],
    backward: Callable[..., Tuple[Optional[np.ndarray], ...]],
) -> None:
    _OPS[kind] = OpSpec(kind, check, forward, backward)


def _mismatch(kind: str, shapes: List[Shape]) -> DimensionError:
    rendered = " and ".join(str(shape) for shape in shapes)
    return DimensionError.single(
        "shape_mismatch",
        f"{kind}: incompatible shapes {rendered}",
        loc=(kind,),
        input=[list(shape) for shape in shapes],
    )


def _arity(kind: str, shapes: List[Shape], count: int) -> None:
    if len(shapes) != count:
        raise ContractError.single(
            "arity",
            f"{kind} takes {count} input(s), got {len(shapes)}",
            loc=(kind,),
        )


def _check_unary(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 1)


def _check_broadcast(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 2)
    left, right = shapes
    if left == right or right == ():
        return
    if len(left) == 2 and len(right) == 1 and left[1] == right[0]:
        return
    raise _mismatch(kind, shapes)


def _check_elementwise(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 2)
    left, right = shapes
    if left != right and right != ():
        raise _mismatch(kind, shapes)


def _check_matmul(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 2)
    left, right = shapes
    if len(left) == 0 or len(right) == 0 or left[-1] != right[0]:
        raise _mismatch(kind, shapes)


def _check_same(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    if not shapes:
        raise ContractError.single("arity", f"{kind} needs at least one input", loc=(kind,))
    if any(shape != shapes[0] for shape in shapes):
        raise _mismatch(kind, shapes)


def _check_vectors(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    if not shapes:
        raise ContractError.single("arity", f"{kind} needs at least one input", loc=(kind,))
    if any(len(shape) != 1 for shape in shapes):
        raise _mismatch(kind, shapes)


def _check_stack(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _check_same(kind, shapes, attrs)
    if len(shapes[0]) > 1:
        raise _mismatch(kind, shapes)


def _check_softmax(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 1)
    if len(shapes[0]) != 1:
        raise _mismatch(kind, shapes)


def _check_transpose(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 1)
    if len(shapes[0]) != 2:
        raise _mismatch(kind, shapes)


def _check_index(kind: str, size: int, index: int) -> None:
    if not 0 <= index < size:
        raise ContractError.single(
            "index_out_of_range",
            f"{kind}: index {index} outside [0, {size})",
            loc=(kind,),
            input=index,
        )


def _check_embedding(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _arity(kind, shapes, 1)
    if len(shapes[0]) != 2:
        raise _mismatch(kind, shapes)
    _check_index(kind, shapes[0][0], attrs["index"])


def _check_cross_entropy(kind: str, shapes: List[Shape], attrs: Dict[str, Any]) -> None:
    _check_softmax(kind, shapes, attrs)
    _check_index(kind, shapes[0][0], attrs["target"])


def _unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    return grad.sum(axis=0)


def stable_softmax(values: np.ndarray) -> np.ndarray:
    shifted = np.exp(values - values.max())
    return shifted / shifted.sum()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _matmul_backward(
    attrs: Dict[str, Any], g: np.ndarray, out: np.ndarray, a: np.ndarray, b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2:
        return np.outer(g, b), a.T @ g
    if b.ndim == 2:
        return b @ g, np.outer(a, g)
    return g * b, g * a


def _cross_entropy_forward(attrs: Dict[str, Any], z: np.ndarray) -> np.ndarray:
    peak = z.max()
    log_normalizer = peak + np.log(np.exp(z - peak).sum())
    return np.asarray(log_normalizer - z[attrs["target"]])


def _cross_entropy_backward(
    attrs: Dict[str, Any], g: np.ndarray, out: np.ndarray, z: np.ndarray
) -> Tuple[np.ndarray]:
    probs = stable_softmax(z)
    probs[attrs["target"]] -= 1.0
    return (g * probs,)


def _embedding_backward(
    attrs: Dict[str, Any], g: np.ndarray, out: np.ndarray, table: np.ndarray
) -> Tuple[np.ndarray]:
    grad = np.zeros_like(table)
    grad[attrs["index"]] += g
    return (grad,)


def _concat_backward(
    attrs: Dict[str, Any], g: np.ndarray, out: np.ndarray, *parts: np.ndarray
) -> Tuple[np.ndarray, ...]:
    bounds = np.cumsum([part.shape[0] for part in parts])[:-1]
    return tuple(np.split(g, bounds))


defop(
    "add",
    _check_broadcast,
    lambda attrs, a, b: a + b,
    lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
defop(
    "sub",
    _check_broadcast,
    lambda attrs, a, b: a - b,
    lambda attrs, g, out, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
)
defop(
    "mul",
    _check_elementwise,
    lambda attrs, a, b: a * b,
    lambda attrs, g, out, a, b: (g * b, _unbroadcast(g * a, b.shape)),
)
defop(
    "scale",
    _check_unary,
    lambda attrs, a: a * attrs["factor"],
    lambda attrs, g, out, a: (g * attrs["factor"],),
)
defop("matmul", _check_matmul, lambda attrs, a, b: np.asarray(a @ b), _matmul_backward)
defop(
    "transpose",
    _check_transpose,
    lambda attrs, a: a.T.copy(),
    lambda attrs, g, out, a: (g.T,),
)
defop(
    "sigmoid",
    _check_unary,
    lambda attrs, a: _sigmoid(a),
    lambda attrs, g, out, a: (g * out * (1.0 - out),),
)
defop(
    "tanh",
    _check_unary,
    lambda attrs, a: np.tanh(a),
    lambda attrs, g, out, a: (g * (1.0 - out * out),),
)
defop(
    "softmax",
    _check_softmax,
    lambda attrs, a: stable_softmax(a),
    lambda attrs, g, out, a: (out * (g - np.dot(g, out)),),
)
defop(
    "concat",
    _check_vectors,
    lambda attrs, *parts: np.concatenate(parts),
    _concat_backward,
)
defop(
    "stack",
    _check_stack,
    lambda attrs, *parts: np.stack(parts),
    lambda attrs, g, out, *parts: tuple(g[row] for row in range(len(parts))),
)
defop(
    "add_n",
    _check_same,
    lambda attrs, *parts: np.add.reduce(parts) if len(parts) > 1 else parts[0].copy(),
    lambda attrs, g, out, *parts: tuple(g for _ in parts),
)
defop(
    "sum",
    _check_unary,
    lambda attrs, a: np.asarray(a.sum()),
    lambda attrs, g, out, a: (np.full_like(a, g),),
)
defop(
    "embedding",
    _check_embedding,
    lambda attrs, table: table[attrs["index"]].copy(),
    _embedding_backward,
)
defop("cross_entropy", _check_cross_entropy, _cross_entropy_forward, _cross_entropy_backward)


class Record(NamedTuple):
    op: OpSpec
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Dict[str, Any]


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape is private to the thread that built it; parameters may be shared
    between tapes because :meth:`gradients` never writes into tensors.
    """

    def __init__(self) -> None:
        self.records: List[Record] = []
        self.tensors: Dict[int, Tensor] = {}
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(
        self, op: OpSpec, inputs: Tuple[Tensor, ...], output: Tensor, attrs: Dict[str, Any]
    ) -> None:
        for tensor in inputs:
            self.tensors.setdefault(tensor.node_id, tensor)
        self.tensors[output.node_id] = output
        self.records.append(Record(op, inputs, output, attrs))

    def gradients(self, loss: Tensor) -> Dict[int, np.ndarray]:
        if loss.shape != ():
            raise ContractError.single(
                "non_scalar_loss",
                f"backward needs a scalar loss, got shape {loss.shape}",
                loc=("backward",),
                input=list(loss.shape),
            )
        adjoint: Dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for record in reversed(self.records):
            grad = adjoint.get(record.output.node_id)
            if grad is None:
                continue
            input_grads = record.op.backward(
                record.attrs,
                grad,
                record.output.data,
                *[tensor.data for tensor in record.inputs],
            )
            for tensor, input_grad in zip(record.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                previous = adjoint.get(tensor.node_id)
                adjoint[tensor.node_id] = input_grad if previous is None else previous + input_grad
        return adjoint

    def gradients_for(
        self, loss: Tensor, params: Mapping[str, Tensor]
    ) -> Dict[str, np.ndarray]:
        adjoint = self.gradients(loss)
        return {
            name: np.array(adjoint[tensor.node_id])
            if tensor.node_id in adjoint
            else np.zeros_like(tensor.data)
            for name, tensor in params.items()
        }

    def backward(self, loss: Tensor) -> None:
        for node_id, grad in self.gradients(loss).items():
            tensor = self.tensors.get(node_id, loss if node_id == loss.node_id else None)
            if tensor is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                tensor.grad = np.array(grad)
            else:
                tensor.grad += grad


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def forward_op(op_kind: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    op = _OPS.get(op_kind)
    if op is None:
        raise ContractError.single(
            "unknown_op", f"unknown operation {op_kind!r}", loc=("forward_op",), input=op_kind
        )
    tensors = tuple(inputs)
    op.check(op_kind, [tensor.shape for tensor in tensors], attrs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        result = np.asarray(op.forward(attrs, *[tensor.data for tensor in tensors]), dtype=np.float64)
    if not np.all(np.isfinite(result)):
        raise NumericError.single(
            "non_finite",
            f"{op_kind} produced non-finite values",
            loc=(op_kind,),
            input=[list(tensor.shape) for tensor in tensors],
        )
    tape = _active_tape.get()
    tracked = tape is not None and any(tensor.requires_grad for tensor in tensors)
    output = Tensor._from_array(result, tracked)
    if tracked:
        tape.record(op, tensors, output, attrs)
    return output


def backward(loss: Tensor) -> None:
    tape = _active_tape.get()
    if tape is None:
        raise ContractError.single(
            "no_tape", "backward() called outside an active Tape", loc=("backward",)
        )
    tape.backward(loss)


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("mul", [a, b])


def scale(a: Tensor, factor: float) -> Tensor:
    return forward_op("scale", [a], factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("matmul", [a, b])


def transpose(a: Tensor) -> Tensor:
    return forward_op("transpose", [a])


def sigmoid(a: Tensor) -> Tensor:
    return forward_op("sigmoid", [a])


def tanh(a: Tensor) -> Tensor:
    return forward_op("tanh", [a])


def softmax(a: Tensor) -> Tensor:
    return forward_op("softmax", [a])


def concat(parts: Sequence[Tensor]) -> Tensor:
    return forward_op("concat", parts)


def stack(parts: Sequence[Tensor]) -> Tensor:
    return forward_op("stack", parts)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    return forward_op("add_n", parts)


def sum_all(a: Tensor) -> Tensor:
    return forward_op("sum", [a])


def embedding(table: Tensor, index: int) -> Tensor:
    return forward_op("embedding", [table], index=int(index))


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    return forward_op("cross_entropy", [logits], target=int(target))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport(BaseModel):
    max_rel_error: float
    tolerance: float
    checked_entries: int
    worst_param: Optional[str] = None
    worst_index: Optional[List[int]] = None
    analytic: Optional[float] = None
    numeric: Optional[float] = None
    per_param: Dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    *,
    step: float = 1e-5,
    floor: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    corrupt: Optional[str] = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. With
    ``max_entries`` only a seeded random subset of each parameter is checked.
    ``corrupt`` names a parameter whose analytic gradient is perturbed on
    purpose, so callers can confirm a broken derivative is detected.
    """
    for name, tensor in params.items():
        if not tensor.requires_grad:
            raise ContractError.single(
                "untracked_param", f"{name} is not a tracked tensor", loc=("grad_check", name)
            )
    with Tape() as tape:
        loss = f(params)
    analytic = tape.gradients_for(loss, params)
    if corrupt is not None:
        if corrupt not in analytic:
            raise ContractError.single(
                "unknown_param", f"cannot corrupt unknown parameter {corrupt!r}", loc=("grad_check",)
            )
        analytic[corrupt] = analytic[corrupt] * 2.0 + 1e-3

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance, checked_entries=0)
    with no_grad():
        for name, tensor in params.items():
            indices = list(np.ndindex(*tensor.shape))
            if max_entries is not None and len(indices) > max_entries:
                picked = rng.choice(len(indices), size=max_entries, replace=False)
                indices = [indices[i] for i in sorted(picked)]
            worst_here = 0.0
            for index in indices:
                original = tensor.data[index]
                tensor.data[index] = original + step
                plus = f(params).item()
                tensor.data[index] = original - step
                minus = f(params).item()
                tensor.data[index] = original
                numeric = (plus - minus) / (2.0 * step)
                exact = float(analytic[name][index])
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                report.checked_entries += 1
                worst_here = max(worst_here, error)
                if error > report.max_rel_error:
                    report.max_rel_error = error
                    report.worst_param = name
                    report.worst_index = [int(i) for i in index]
                    report.analytic = exact
                    report.numeric = numeric
            report.per_param[name] = worst_here
    logger.debug(
        "grad_check: %d entries, max rel err %.3e at %s",
        report.checked_entries,
        report.max_rel_error,
        report.worst_param,
    )
    return report
