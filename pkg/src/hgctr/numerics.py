"""Dense float64 matrix math with tape-based reverse-mode automatic differentiation.

Every tensor is a 2-D float64 numpy array (vectors are 1 x n rows). Operations
append nodes to a :class:`Tape` in execution order; :meth:`Tape.backward` walks
the list once in reverse, so gradients are exact and deterministic: the same
graph built in the same order produces bit-identical gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

SIGMOID_FLOOR = 1e-308
SIGMOID_CEIL = float(np.nextafter(1.0, 0.0))
MASK_LOGIT = -1e30


def _as_matrix(array) -> np.ndarray:
    """Coerce input to a C-contiguous 2-D float64 array (1-D becomes a row)."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return np.ascontiguousarray(a)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, clipped to the open interval (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_FLOOR, SIGMOID_CEIL)


def softmax_rows_value(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction (plain numpy, no tape)."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Tensor:
    """A node on the tape: a value, and after backward() possibly a gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_backward", "tape")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool,
                 name: str | None = None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return self.tape.matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return self.tape.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.tape.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return self.tape.mul(self, other)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"<{tag} {self.value.shape[0]}x{self.value.shape[1]}>"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a full-shape gradient back to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _check_broadcast(a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    """Allowed elementwise pairs: equal shapes, or a 1 x n / m x 1 operand."""
    rows = {a[0], b[0]} - {1}
    cols = {a[1], b[1]} - {1}
    if len(rows) > 1 or len(cols) > 1:
        raise ShapeError(f"shapes {a} and {b} do not broadcast")
    return (max(a[0], b[0]), max(a[1], b[1]))


class Tape:
    """Records operations in execution order and replays them in reverse."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._finished = False

    # ---------------------------------------------------------------- leaves

    def param(self, array, name: str | None = None) -> Tensor:
        """A differentiable leaf. The array is used as-is; do not mutate it
        while the tape is alive."""
        value = _as_matrix(array)
        if not np.isfinite(value).all():
            raise ContractError(f"parameter {name or ''} contains non-finite entries")
        t = Tensor(value, self, requires_grad=True, name=name)
        self._nodes.append(t)
        return t

    def const(self, array, name: str | None = None) -> Tensor:
        """A non-differentiable leaf (inputs, labels, fixed weights)."""
        t = Tensor(_as_matrix(array), self, requires_grad=False, name=name)
        self._nodes.append(t)
        return t

    def _op(self, value: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None], name: str) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        t = Tensor(value, self, requires_grad=needs, name=name)
        if needs:
            t._backward = backward
        self._nodes.append(t)
        return t

    # ------------------------------------------------------------ arithmetic

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul {a.value.shape} @ {b.value.shape}")
        out = a.value @ b.value

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, g @ b.value.T)
            if b.requires_grad:
                _accumulate(b, a.value.T @ g)

        return self._op(out, (a, b), backward, "matmul")

    def _elementwise_binary(self, a: Tensor, b: Tensor, fn, da_fn, db_fn,
                            name: str) -> Tensor:
        _check_broadcast(a.value.shape, b.value.shape)
        out = fn(a.value, b.value)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _unbroadcast(da_fn(g), a.value.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(db_fn(g), b.value.shape))

        return self._op(out, (a, b), backward, name)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise_binary(
            a, b, np.add, lambda g: g, lambda g: g, "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise_binary(
            a, b, np.subtract, lambda g: g, lambda g: -g, "sub")

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise_binary(
            a, b, np.multiply, lambda g: g * b.value, lambda g: g * a.value, "mul")

    def scale(self, a: Tensor, factor: float) -> Tensor:
        factor = float(factor)
        return self._op(a.value * factor, (a,),
                        lambda g: _accumulate(a, g * factor), "scale")

    def relu(self, a: Tensor) -> Tensor:
        out = np.maximum(a.value, 0.0)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.where(a.value > 0.0, g, 0.0))

        return self._op(out, (a,), backward, "relu")

    def sigmoid(self, a: Tensor) -> Tensor:
        s = stable_sigmoid(a.value)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g * s * (1.0 - s))

        return self._op(s, (a,), backward, "sigmoid")

    def log(self, a: Tensor) -> Tensor:
        if (a.value <= 0.0).any():
            raise ContractError("log requires strictly positive entries")
        out = np.log(a.value)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g / a.value)

        return self._op(out, (a,), backward, "log")

    def elementwise(self, kind: str, a: Tensor, other: Tensor | None = None,
                    factor: float | None = None) -> Tensor:
        """Dispatcher over the pointwise family: relu, sigmoid, log, add, sub,
        mul (tensor `other`) and scale (scalar `factor`)."""
        unary = {"relu": self.relu, "sigmoid": self.sigmoid, "log": self.log}
        binary = {"add": self.add, "sub": self.sub, "mul": self.mul}
        if kind in unary:
            return unary[kind](a)
        if kind in binary:
            if other is None:
                raise ContractError(f"elementwise '{kind}' needs a second tensor")
            return binary[kind](a, other)
        if kind == "scale":
            if factor is None:
                raise ContractError("elementwise 'scale' needs a factor")
            return self.scale(a, factor)
        raise ContractError(f"unknown elementwise kind '{kind}'")

    # ------------------------------------------------------------ reductions

    def sum_all(self, a: Tensor) -> Tensor:
        out = np.array([[a.value.sum()]])

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.full_like(a.value, g[0, 0]))

        return self._op(out, (a,), backward, "sum_all")

    def mean_all(self, a: Tensor) -> Tensor:
        n = a.value.size
        out = np.array([[a.value.sum() / n]])

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.full_like(a.value, g[0, 0] / n))

        return self._op(out, (a,), backward, "mean_all")

    def row_sum(self, a: Tensor) -> Tensor:
        out = a.value.sum(axis=1, keepdims=True)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, np.broadcast_to(g, a.value.shape))

        return self._op(out, (a,), backward, "row_sum")

    # --------------------------------------------------------- soft functions

    def softmax_rows(self, a: Tensor) -> Tensor:
        y = softmax_rows_value(a.value)

        def backward(g: np.ndarray) -> None:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(a, (g - dot) * y)

        return self._op(y, (a,), backward, "softmax_rows")

    def logsumexp_rows(self, a: Tensor) -> Tensor:
        m = a.value.max(axis=1, keepdims=True)
        e = np.exp(a.value - m)
        s = e.sum(axis=1, keepdims=True)
        out = m + np.log(s)
        soft = e / s

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g * soft)

        return self._op(out, (a,), backward, "logsumexp_rows")

    # ------------------------------------------------------------- structure

    def transpose(self, a: Tensor) -> Tensor:
        out = np.ascontiguousarray(a.value.T)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g.T)

        return self._op(out, (a,), backward, "transpose")

    def rows(self, a: Tensor, indices) -> Tensor:
        """Gather rows a[indices]; duplicate indices accumulate gradient."""
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
            raise ShapeError("row index out of range")
        out = a.value[idx]

        def backward(g: np.ndarray) -> None:
            full = np.zeros_like(a.value)
            np.add.at(full, idx, g)
            _accumulate(a, full)

        return self._op(out, (a,), backward, "rows")

    def scatter_rows(self, a: Tensor, indices, num_rows: int) -> Tensor:
        """Inverse of rows(): place/accumulate a's rows at `indices` in a
        num_rows-tall zero matrix."""
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if idx.size != a.value.shape[0]:
            raise ShapeError("scatter_rows needs one index per input row")
        if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
            raise ShapeError("scatter index out of range")
        out = np.zeros((num_rows, a.value.shape[1]))
        np.add.at(out, idx, a.value)

        def backward(g: np.ndarray) -> None:
            _accumulate(a, g[idx])

        return self._op(out, (a,), backward, "scatter_rows")

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        if not parts:
            raise ContractError("concat_cols needs at least one tensor")
        rows = parts[0].value.shape[0]
        for p in parts:
            if p.value.shape[0] != rows:
                raise ShapeError("concat_cols operands must share row count")
        out = np.concatenate([p.value for p in parts], axis=1)
        widths = [p.value.shape[1] for p in parts]

        def backward(g: np.ndarray) -> None:
            off = 0
            for p, w in zip(parts, widths):
                _accumulate(p, g[:, off:off + w])
                off += w

        return self._op(out, tuple(parts), backward, "concat_cols")

    def outer(self, u: Tensor, v: Tensor) -> Tensor:
        """Outer product of two vectors (any 1 x n / n x 1 orientation)."""
        if 1 not in u.value.shape or 1 not in v.value.shape:
            raise ShapeError("outer expects vectors")
        uf, vf = u.value.ravel(), v.value.ravel()
        out = np.outer(uf, vf)

        def backward(g: np.ndarray) -> None:
            _accumulate(u, (g @ vf).reshape(u.value.shape))
            _accumulate(v, (g.T @ uf).reshape(v.value.shape))

        return self._op(out, (u, v), backward, "outer")

    def row_outer(self, a: Tensor, b: Tensor) -> Tensor:
        """Per-row outer products, flattened row-major: out[i] = a[i] (x) b[i]."""
        m, p = a.value.shape
        mb, q = b.value.shape
        if m != mb:
            raise ShapeError("row_outer operands must share row count")
        out = (a.value[:, :, None] * b.value[:, None, :]).reshape(m, p * q)

        def backward(g: np.ndarray) -> None:
            g3 = g.reshape(m, p, q)
            if a.requires_grad:
                _accumulate(a, (g3 @ b.value[:, :, None])[:, :, 0])
            if b.requires_grad:
                _accumulate(b, (g3.transpose(0, 2, 1) @ a.value[:, :, None])[:, :, 0])

        return self._op(out, (a, b), backward, "row_outer")

    # ------------------------------------------------------- fused composites

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor,
                   eps: float = 1e-6) -> Tensor:
        """Per-row normalization followed by an affine map (gain, bias are 1 x d)."""
        d = x.value.shape[1]
        if gain.value.shape != (1, d) or bias.value.shape != (1, d):
            raise ShapeError("layer_norm gain/bias must be 1 x d")
        mu = x.value.mean(axis=1, keepdims=True)
        xc = x.value - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gain.value + bias.value

        def backward(g: np.ndarray) -> None:
            if gain.requires_grad:
                _accumulate(gain, (g * xhat).sum(axis=0, keepdims=True))
            if bias.requires_grad:
                _accumulate(bias, g.sum(axis=0, keepdims=True))
            if x.requires_grad:
                dxh = g * gain.value
                term = dxh - dxh.mean(axis=1, keepdims=True) \
                    - xhat * (dxh * xhat).mean(axis=1, keepdims=True)
                _accumulate(x, inv * term)

        return self._op(out, (x, gain, bias), backward, "layer_norm")

    def attention(self, q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                  block: int, key_mask: np.ndarray | None = None) -> Tensor:
        """Scaled dot-product attention over contiguous blocks of rows.

        q, k, v are (B*block) x (num_heads*dh). Rows are grouped into B blocks
        of length `block`; attention is computed within each block for every
        head, scores scaled by 1/sqrt(dh). `key_mask` (length B*block, bool)
        marks valid key positions; masked keys get MASK_LOGIT added to their
        scores. Every block must retain at least one valid key.
        """
        n, width = q.value.shape
        if k.value.shape != (n, width) or v.value.shape[0] != n:
            raise ShapeError("attention operands must align")
        if n % block != 0:
            raise ShapeError(f"row count {n} not divisible by block {block}")
        if width % num_heads != 0 or v.value.shape[1] % num_heads != 0:
            raise ShapeError("width not divisible by head count")
        nb = n // block
        dh = width // num_heads
        dv = v.value.shape[1] // num_heads
        scale = 1.0 / np.sqrt(dh)

        def to_heads(m: np.ndarray, depth: int) -> np.ndarray:
            return m.reshape(nb, block, num_heads, depth).transpose(0, 2, 1, 3)

        q4, k4, v4 = to_heads(q.value, dh), to_heads(k.value, dh), to_heads(v.value, dv)
        scores = np.matmul(q4, k4.transpose(0, 1, 3, 2)) * scale
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool).ravel()
            if km.size != n:
                raise ShapeError("key_mask length must equal row count")
            if not km.reshape(nb, block).any(axis=1).all():
                raise ContractError("attention block with every key masked")
            scores = scores + np.where(km, 0.0, MASK_LOGIT).reshape(nb, 1, 1, block)
        p = softmax_rows_value(scores)
        out4 = np.matmul(p, v4)
        out = np.ascontiguousarray(
            out4.transpose(0, 2, 1, 3).reshape(n, num_heads * dv))

        def backward(g: np.ndarray) -> None:
            g4 = g.reshape(nb, block, num_heads, dv).transpose(0, 2, 1, 3)
            if v.requires_grad:
                dv4 = np.matmul(p.transpose(0, 1, 3, 2), g4)
                _accumulate(v, np.ascontiguousarray(
                    dv4.transpose(0, 2, 1, 3).reshape(n, num_heads * dv)))
            dp = np.matmul(g4, v4.transpose(0, 1, 3, 2))
            ds = (dp - (dp * p).sum(axis=-1, keepdims=True)) * p
            if q.requires_grad:
                dq4 = np.matmul(ds, k4) * scale
                _accumulate(q, np.ascontiguousarray(
                    dq4.transpose(0, 2, 1, 3).reshape(n, width)))
            if k.requires_grad:
                dk4 = np.matmul(ds.transpose(0, 1, 3, 2), q4) * scale
                _accumulate(k, np.ascontiguousarray(
                    dk4.transpose(0, 2, 1, 3).reshape(n, width)))

        return self._op(out, (q, k, v), backward, "attention")

    def propagate(self, operator, x: Tensor) -> Tensor:
        """Apply a fixed symmetric linear operator (duck-typed: .dim and
        .apply(ndarray)) to x. Backward re-applies the same operator."""
        if x.value.shape[0] != operator.dim:
            raise ShapeError(
                f"operator dim {operator.dim} vs {x.value.shape[0]} rows")
        out = operator.apply(x.value)

        def backward(g: np.ndarray) -> None:
            _accumulate(x, operator.apply(g))

        return self._op(out, (x,), backward, "propagate")

    # ------------------------------------------------------------------ loss

    def bce_with_logits(self, logits: Tensor, targets: Tensor) -> Tensor:
        """Mean binary cross-entropy computed stably from logits."""
        if logits.value.shape != targets.value.shape or logits.value.shape[1] != 1:
            raise ShapeError("bce_with_logits expects matching m x 1 columns")
        z, y = logits.value, targets.value
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        m = z.shape[0]
        out = np.array([[per.sum() / m]])

        def backward(g: np.ndarray) -> None:
            _accumulate(logits, (stable_sigmoid(z) - y) * (g[0, 0] / m))

        return self._op(out, (logits, targets), backward, "bce_with_logits")

    def l2_penalty(self, tensors: Sequence[Tensor], weight: float) -> Tensor:
        """weight * sum of squared entries over all given tensors."""
        if not tensors:
            raise ContractError("l2_penalty needs at least one tensor")
        weight = float(weight)
        total = sum(float(np.sum(t.value * t.value)) for t in tensors)
        out = np.array([[weight * total]])

        def backward(g: np.ndarray) -> None:
            f = 2.0 * weight * g[0, 0]
            for t in tensors:
                _accumulate(t, f * t.value)

        return self._op(out, tuple(tensors), backward, "l2_penalty")

    # -------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the tape once in reverse."""
        if loss.tape is not self:
            raise ContractError("loss tensor does not belong to this tape")
        if loss.value.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.value.shape}")
        if self._finished:
            raise ContractError("backward() already ran on this tape")
        self._finished = True
        loss.grad = np.ones((1, 1))
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def grad_check(build: Callable[[Tape, dict[str, Tensor]], Tensor],
               params: dict[str, np.ndarray],
               eps: float = 1e-5,
               max_coords: int = 600,
               rng: np.random.Generator | None = None) -> float:
    """Compare tape gradients against central finite differences.

    `build(tape, leaves)` must construct a 1x1 output from the given leaf
    tensors. Returns the maximum relative error max|a-n| / max(|a|,|n|,1e-8)
    over sampled coordinates (all coordinates when there are at most
    `max_coords`).
    """
    arrays = {k: _as_matrix(v).copy() for k, v in params.items()}

    def run(current: dict[str, np.ndarray]):
        tape = Tape()
        leaves = {k: tape.param(v, name=k) for k, v in current.items()}
        out = build(tape, leaves)
        if out.value.shape != (1, 1):
            raise ContractError("grad_check target must produce a 1x1 tensor")
        return tape, leaves, out

    tape, leaves, out = run(arrays)
    tape.backward(out)
    analytic = {
        k: (leaves[k].grad if leaves[k].grad is not None
            else np.zeros_like(arrays[k]))
        for k in arrays
    }

    coords = [(k, i) for k, v in arrays.items() for i in range(v.size)]
    if len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in pick]

    worst = 0.0
    for key, flat in coords:
        ref = arrays[key].ravel()
        old = ref[flat]
        ref[flat] = old + eps
        f_plus = run(arrays)[2].value[0, 0]
        ref[flat] = old - eps
        f_minus = run(arrays)[2].value[0, 0]
        ref[flat] = old
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[key].ravel()[flat]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
