"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the classifier actually needs are provided, each
with a hand-written backward rule. The computation graph is recorded
implicitly: every operation output keeps references to its inputs, a
backward closure, and a monotonically increasing sequence number.
``backward`` replays the closures of all nodes reachable from the loss
exactly once, in reverse execution order, accumulating gradients into
the leaves.

Arrays are float64 by default; float32 can be requested per tensor for
speed. Gradient accumulation always happens in the tensor's own dtype.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_DTYPES = {"f64": np.float64, "f32": np.float32}

_seq_counter = itertools.count(1)

_grad_enabled = True
_finite_checks = False


def resolve_dtype(name: str) -> np.dtype:
    """Map a config dtype name ("f64" or "f32") to a numpy dtype."""
    try:
        return np.dtype(_DTYPES[name])
    except KeyError:
        raise ConfigError(f"unknown dtype name {name!r}; expected one of {sorted(_DTYPES)}") from None


def make_rng(seed: int) -> np.random.Generator:
    """A named, seedable random generator with a portable algorithm."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive n independent child seeds from one root seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def set_finite_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection on every op output. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = enabled
    return previous


class no_grad:
    """Context manager that suppresses graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """An n-d array plus the bookkeeping reverse-mode autodiff needs.

    Leaf tensors are built directly; operation outputs come from the op
    functions below. ``grad`` is None until a backward pass reaches the
    tensor. Data is copied on construction so leaves stay decoupled from
    caller arrays; the optimizer mutates ``data`` in place between steps,
    which is the one sanctioned mutation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; the module-level functions are the canonical ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op output, recording the graph edge when gradients are on."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value in operation output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._seq = next(_seq_counter)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out._seq = 0
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    The loss must be scalar. Intermediate gradients are reset on every
    call; leaf gradients accumulate across calls until ``zero_grad``.
    """
    if loss.data.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)

    # Reset interior grads; leaves keep what earlier passes accumulated.
    for node in nodes:
        if node._parents:
            node.grad = np.zeros_like(node.data)
        elif node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.data)

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)

    # Sequence numbers increase with execution, so descending order is
    # exactly reverse execution order; each closure runs once.
    nodes.sort(key=lambda t: t._seq, reverse=True)
    for node in nodes:
        if node._backward is not None:
            node._backward(node.grad)


Tensor.backward = backward  # method form: loss.backward()


def _check_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} needs a 2-d tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.grad is not None:
            a.grad += g @ b.data.T
        if b.grad is not None:
            b.grad += a.data.T @ g

    return _result(data, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports adding a (d,) bias to an (n, d) matrix."""
    if a.shape == b.shape:
        data = a.data + b.data

        def bw(g):
            if a.grad is not None:
                a.grad += g
            if b.grad is not None:
                b.grad += g

    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        data = a.data + b.data

        def bw(g):
            if a.grad is not None:
                a.grad += g
            if b.grad is not None:
                b.grad += g.sum(axis=0)

    else:
        raise ShapeError(f"add mismatch: {a.shape} + {b.shape}")
    return _result(data, (a, b), bw)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"subtract mismatch: {a.shape} - {b.shape}")
    data = a.data - b.data

    def bw(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad -= g

    return _result(data, (a, b), bw)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"multiply mismatch: {a.shape} * {b.shape}")
    data = a.data * b.data

    def bw(g):
        if a.grad is not None:
            a.grad += g * b.data
        if b.grad is not None:
            b.grad += g * a.data

    return _result(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply every element by a Python scalar."""
    s = float(s)
    data = a.data * s

    def bw(g):
        if a.grad is not None:
            a.grad += g * s

    return _result(data, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    """Transpose a 2-d tensor."""
    _check_2d(a, "transpose")
    data = a.data.T.copy()

    def bw(g):
        if a.grad is not None:
            a.grad += g.T

    return _result(data, (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """View the same elements under a new shape (sizes must match)."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
    data = a.data.reshape(shape)

    def bw(g):
        if a.grad is not None:
            a.grad += g.reshape(a.shape)

    return _result(data, (a,), bw)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors with equal column counts along axis 0."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = tensors[0].shape[-1]
    for t in tensors:
        _check_2d(t, "concat_rows")
        if t.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch: {t.shape[1]} vs {cols}")
    data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.grad is not None:
                t.grad += g[lo:hi]

    return _result(data, tensors, bw)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-d tensors with equal row counts along axis 1."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        _check_2d(t, "concat_cols")
        if t.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch: {t.shape[0]} vs {rows}")
    data = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.grad is not None:
                t.grad += g[:, lo:hi]

    return _result(data, tensors, bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-d tensor."""
    _check_2d(a, "slice_rows")
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[start:stop].copy()

    def bw(g):
        if a.grad is not None:
            a.grad[start:stop] += g

    return _result(data, (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor."""
    _check_2d(a, "slice_cols")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[:, start:stop].copy()

    def bw(g):
        if a.grad is not None:
            a.grad[:, start:stop] += g

    return _result(data, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bw(g):
        if a.grad is not None:
            a.grad += g

    return _result(data, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bw(g):
        if a.grad is not None:
            a.grad += g / n

    return _result(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, computed on a numerically safe branch per sign."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        if a.grad is not None:
            a.grad += g * out * (1.0 - out)

    return _result(out, (a,), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-d tensor with per-row max subtraction."""
    _check_2d(a, "softmax_rows")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows input contains non-finite values")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if a.grad is not None:
            a.grad += out * (g - (g * out).sum(axis=1, keepdims=True))

    return _result(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize each row to zero mean and unit variance, then rescale.

    Variance is the biased estimate (divide by d). gamma and beta are
    (d,) vectors applied to every row.
    """
    _check_2d(x, "layer_norm")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm scale shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gamma.data * xhat + beta.data

    def bw(g):
        if beta.grad is not None:
            beta.grad += g.sum(axis=0)
        if gamma.grad is not None:
            gamma.grad += (g * xhat).sum(axis=0)
        if x.grad is not None:
            dxhat = g * gamma.data
            x.grad += inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )

    return _result(data, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero elements with probability ``rate``, scale the rest.

    Identity in evaluation mode or at rate 0. The mask is drawn from the
    caller's generator so the training loop controls reproducibility; the
    same mask drives the backward pass.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / keep
    data = x.data * mask

    def bw(g):
        if x.grad is not None:
            x.grad += g * mask

    return _result(data, (x,), bw)


def unfold_patches_3d(x: Tensor, spatial: int) -> Tensor:
    """Cut a (P, P, B) cube into non-overlapping (spatial, spatial, B) blocks.

    Blocks are ordered row-major over the block grid; within a block,
    values flatten in (row, col, band) order. Output is
    ((P/spatial)**2, spatial*spatial*B). Every input element lands in
    exactly one output element, so the backward pass is a permutation.
    """
    if x.data.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"unfold_patches_3d needs a (P, P, B) tensor, got {x.shape}")
    p = int(spatial)
    size, bands = x.shape[0], x.shape[2]
    if p < 1 or size % p != 0:
        raise ConfigError(f"patch size {size} is not divisible by token spatial extent {p}")
    nb = size // p
    data = (
        x.data.reshape(nb, p, nb, p, bands)
        .transpose(0, 2, 1, 3, 4)
        .reshape(nb * nb, p * p * bands)
    )

    def bw(g):
        if x.grad is not None:
            x.grad += (
                g.reshape(nb, nb, p, p, bands)
                .transpose(0, 2, 1, 3, 4)
                .reshape(size, size, bands)
            )

    return _result(data, (x,), bw)


def diff_cols(s: Tensor) -> Tensor:
    """Anchored first difference along columns.

    D[:, 0] = S[:, 0] and D[:, j] = S[:, j] - S[:, j-1] for j >= 1, so
    the map is invertible (cumulative sum along columns recovers S) and
    keeps the output width equal to the input width.
    """
    _check_2d(s, "diff_cols")
    if s.shape[1] < 1:
        raise ShapeError(f"diff_cols needs at least one column, got {s.shape}")
    data = np.concatenate([s.data[:, :1], np.diff(s.data, axis=1)], axis=1)

    def bw(g):
        if s.grad is not None:
            ds = g.copy()
            ds[:, :-1] -= g[:, 1:]
            s.grad += ds

    return _result(data, (s,), bw)


def cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax.

    labels are 0-based indices, one per logits row. Uses the log-sum-exp
    form rather than materializing probabilities in the forward pass.
    """
    _check_2d(logits, "cross_entropy_mean")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size == 0:
        raise ShapeError("cross_entropy_mean needs at least one row")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"label out of range [0, {k}) in cross_entropy_mean")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(n), labels]
    data = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def bw(g):
        if logits.grad is not None:
            soft = np.exp(z - m)
            soft /= soft.sum(axis=1, keepdims=True)
            soft[np.arange(n), labels] -= 1.0
            logits.grad += (float(g) / n) * soft

    return _result(data, (logits,), bw)


def finite_diff_grad(
    f: Callable[[Sequence[Tensor]], float],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of the params.

    Perturbs each parameter element in place by +-step, calling f after
    each move, and restores the original value. Cost is two evaluations
    per element; meant for small test problems only.
    """
    if step <= 0:
        raise ConfigError(f"finite difference step must be positive, got {step}")
    grads = []
    for p in params:
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = float(f(params))
            flat[i] = original - step
            f_minus = float(f(params))
            flat[i] = original
            gf[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case relative error between two gradients.

    The denominator is floored at 1e-3 so near-zero entries are compared
    absolutely: with the usual 1e-4 threshold that floor corresponds to
    an absolute tolerance of 1e-7.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom))


def max_gradient_error(params: Iterable[Tensor], numeric: Sequence[np.ndarray]) -> float:
    """gradient_error across a parameter list, taking each tensor's .grad."""
    worst = 0.0
    for p, num in zip(params, numeric):
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, gradient_error(grad, num))
    return worst
