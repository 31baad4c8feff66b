"""Built-in diagnostic suites behind the command line selftest command.

Each suite re-derives its expectations on the spot (finite differences,
an independently coded metric oracle, closed-form attention identities),
so a regression anywhere in the stack shows up as a named failure here
without any stored fixtures. The fault-injection hook exists to prove
the gradient suite can actually catch a wrong backward rule.
"""

from __future__ import annotations

import contextlib
import gc
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import model as md
from . import metrics
from . import tensor as tc
from .errors import ConfigError
from .tensor import Tensor

GRAD_TOL = 1e-4

# Ops whose backward rule the fault hook may corrupt; each also has a
# finite-difference case below, so an injected fault is always caught.
INJECTABLE_OPS = (
    "matmul",
    "add",
    "subtract",
    "multiply",
    "scale",
    "transpose",
    "reshape",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum_all",
    "mean_all",
    "sigmoid",
    "softmax_rows",
    "layer_norm",
    "dropout",
    "unfold_patches_3d",
    "diff_cols",
    "cross_entropy_mean",
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float | None
    detail: str = ""


@contextlib.contextmanager
def inject_backward_fault(op_name: str):
    """Temporarily corrupt one op's backward rule (leaves forward intact).

    The replacement scales every parent gradient by 1.5 after the real
    rule runs, a 50 percent error no finite-difference check can miss.
    """
    if op_name not in INJECTABLE_OPS:
        raise ConfigError(
            f"cannot inject fault into {op_name!r}; known ops: {', '.join(INJECTABLE_OPS)}"
        )
    original = getattr(tc, op_name)

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:

            def corrupted(g):
                inner(g)
                for parent in out._parents:
                    if parent.grad is not None:
                        parent.grad *= 1.5

            out._backward = corrupted
        return out

    setattr(tc, op_name, broken)
    try:
        yield
    finally:
        setattr(tc, op_name, original)


def _square_sum(x: Tensor) -> Tensor:
    # Quadratic reduction so a sign flip in the op under test cannot
    # cancel out of the scalar loss.
    return tc.sum_all(tc.multiply(x, x))


def _grad_op_cases() -> list[tuple[str, list[Tensor], callable]]:
    """(name, params, loss builder) triples, one per differentiable op.

    Builders look the ops up through the module at call time so the
    fault-injection hook is visible to them.
    """
    rng = tc.make_rng(7)

    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    cases: list[tuple[str, list[Tensor], callable]] = []

    a, b = t(3, 4), t(4, 2)
    cases.append(("matmul", [a, b], lambda p: _square_sum(tc.matmul(p[0], p[1]))))
    a, b = t(3, 4), t(3, 4)
    cases.append(("add", [a, b], lambda p: _square_sum(tc.add(p[0], p[1]))))
    a, b = t(3, 4), t(4)
    cases.append(("add_bias", [a, b], lambda p: _square_sum(tc.add(p[0], p[1]))))
    a, b = t(3, 4), t(3, 4)
    cases.append(("subtract", [a, b], lambda p: _square_sum(tc.subtract(p[0], p[1]))))
    a, b = t(3, 4), t(3, 4)
    cases.append(("multiply", [a, b], lambda p: _square_sum(tc.multiply(p[0], p[1]))))
    a = t(3, 4)
    cases.append(("scale", [a], lambda p: _square_sum(tc.scale(p[0], -1.7))))
    a = t(3, 4)
    cases.append(("transpose", [a], lambda p: _square_sum(tc.transpose(p[0]))))
    a = t(3, 4)
    cases.append(("reshape", [a], lambda p: _square_sum(tc.reshape(p[0], (2, 6)))))
    a, b = t(2, 3), t(4, 3)
    cases.append(("concat_rows", [a, b], lambda p: _square_sum(tc.concat_rows([p[0], p[1]]))))
    a, b = t(3, 2), t(3, 5)
    cases.append(("concat_cols", [a, b], lambda p: _square_sum(tc.concat_cols([p[0], p[1]]))))
    a = t(5, 3)
    cases.append(("slice_rows", [a], lambda p: _square_sum(tc.slice_rows(p[0], 1, 4))))
    a = t(3, 6)
    cases.append(("slice_cols", [a], lambda p: _square_sum(tc.slice_cols(p[0], 2, 5))))
    a = t(3, 4)
    cases.append(("sum_all", [a], lambda p: tc.sum_all(tc.multiply(p[0], p[0]))))
    a = t(3, 4)
    cases.append(("mean_all", [a], lambda p: tc.mean_all(tc.multiply(p[0], p[0]))))
    a = t(3, 4)
    cases.append(("sigmoid", [a], lambda p: _square_sum(tc.sigmoid(p[0]))))
    a = t(4, 5)
    cases.append(("softmax_rows", [a], lambda p: _square_sum(tc.softmax_rows(p[0]))))
    x, gamma, beta = t(3, 5), t(5), t(5)
    cases.append(
        ("layer_norm", [x, gamma, beta], lambda p: _square_sum(tc.layer_norm(p[0], p[1], p[2], 1e-3)))
    )
    a = t(6, 6)
    cases.append(
        # Rebuilding the generator inside the loss keeps the mask fixed
        # across the finite-difference evaluations.
        ("dropout", [a], lambda p: _square_sum(tc.dropout(p[0], 0.4, tc.make_rng(21), training=True)))
    )
    a = t(4, 4, 2)
    cases.append(("unfold_patches_3d", [a], lambda p: _square_sum(tc.unfold_patches_3d(p[0], 2))))
    a = t(3, 5)
    cases.append(("diff_cols", [a], lambda p: _square_sum(tc.diff_cols(p[0]))))
    logits = t(3, 4)
    labels = np.array([0, 2, 1])
    cases.append(("cross_entropy_mean", [logits], lambda p: tc.cross_entropy_mean(p[0], labels)))
    return cases


def run_gradient_ops() -> SuiteResult:
    failures = []
    worst = 0.0
    for name, params, build in _grad_op_cases():
        for p in params:
            p.grad = None
        tc.backward(build(params))
        numeric = tc.finite_diff_grad(lambda p: build(p).data, params)
        err = tc.max_gradient_error(params, numeric)
        worst = max(worst, err)
        if not err < GRAD_TOL:
            failures.append(f"{name}: {err:.3e}")
    return SuiteResult("gradient-ops", not failures, worst, "; ".join(failures))


def run_gradient_model() -> SuiteResult:
    """Finite differences through the whole classifier on a micro config."""
    config = md.ModelConfig(
        n_classes=2,
        patch_size=2,
        pca_bands=2,
        token_spatial=1,
        d_embed=4,
        n_layers=1,
        n_heads=2,
        d_ff=8,
        dropout_rate=0.0,
        l2_head=0.0,
        seed=11,
    )
    params = md.init_params(config)
    rng = tc.make_rng(3)
    patches = rng.normal(size=(2, config.patch_size, config.patch_size, config.pca_bands))
    labels = np.array([0, 1])
    tensors = list(params.values())

    def build(_):
        logits = md.forward(patches, params, config, training=False)
        return tc.cross_entropy_mean(logits, labels)

    for p in tensors:
        p.grad = None
    tc.backward(build(tensors))
    numeric = tc.finite_diff_grad(lambda p: build(p).data, tensors)
    err = tc.max_gradient_error(tensors, numeric)
    detail = "" if err < GRAD_TOL else f"worst parameter error {err:.3e}"
    return SuiteResult("gradient-model", err < GRAD_TOL, err, detail)


def run_attention_invariants() -> SuiteResult:
    rng = tc.make_rng(5)
    failures = []
    worst = 0.0

    q = rng.normal(size=(6, 4))
    k = rng.normal(size=(6, 4))
    v = rng.normal(size=(6, 4))
    _, weights = md.attention_core(Tensor(q), Tensor(k), Tensor(v), differential=True)
    row_err = float(np.max(np.abs(weights.data.sum(axis=1) - 1.0)))
    worst = max(worst, row_err)
    if not row_err < 1e-9:
        failures.append(f"weight rows do not sum to 1 ({row_err:.3e})")

    scores = q @ k.T / np.sqrt(4)
    diffed = tc.diff_cols(Tensor(scores)).data
    recon_err = float(np.max(np.abs(np.cumsum(diffed, axis=1) - scores)))
    worst = max(worst, recon_err)
    if not recon_err < 1e-9:
        failures.append(f"cumulative sum does not invert the difference ({recon_err:.3e})")

    shifted = tc.diff_cols(Tensor(scores + 3.7)).data
    tail_err = float(np.max(np.abs(shifted[:, 1:] - diffed[:, 1:])))
    anchor_err = float(np.max(np.abs((shifted[:, 0] - diffed[:, 0]) - 3.7)))
    worst = max(worst, tail_err, anchor_err)
    if not (tail_err < 1e-12 and anchor_err < 1e-12):
        failures.append("constant score shift leaked past the anchor column")

    config = md.ModelConfig(
        n_classes=2,
        patch_size=2,
        pca_bands=2,
        token_spatial=1,
        d_embed=8,
        n_layers=1,
        n_heads=2,
        d_ff=8,
        dropout_rate=0.0,
        seed=13,
    )
    params = md.init_params(config)
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    plain = md.mhsa(Tensor(x), params, 0, config).data
    plain_permuted = md.mhsa(Tensor(x[perm]), params, 0, config).data
    equiv_err = float(np.max(np.abs(plain_permuted - plain[perm])))
    worst = max(worst, equiv_err)
    if not equiv_err < 1e-9:
        failures.append(f"baseline attention is not permutation equivariant ({equiv_err:.3e})")
    diff = md.dmhsa(Tensor(x), params, 0, config).data
    diff_permuted = md.dmhsa(Tensor(x[perm]), params, 0, config).data
    violation = float(np.max(np.abs(diff_permuted - diff[perm])))
    if not violation > 1e-6:
        failures.append(
            f"differential attention unexpectedly permutation equivariant ({violation:.3e})"
        )

    return SuiteResult("attention-invariants", not failures, worst, "; ".join(failures))


def run_positional_encoding() -> SuiteResult:
    failures = []
    pe = md.positional_encoding(50, 16)
    zero_err = float(np.max(np.abs(pe[0] - np.tile([0.0, 1.0], 8))))
    sin_err = abs(pe[1, 0] - np.sin(1.0))
    pythagoras = pe[:, 0::2] ** 2 + pe[:, 1::2] ** 2
    pyth_err = float(np.max(np.abs(pythagoras - 1.0)))
    bound_err = max(0.0, float(np.max(np.abs(pe))) - 1.0)
    worst = max(zero_err, sin_err, pyth_err, bound_err)
    if not zero_err == 0.0:
        failures.append("position zero is not the alternating 0/1 pattern")
    if not sin_err < 1e-12:
        failures.append("first sine column does not match sin(position)")
    if not pyth_err < 1e-9:
        failures.append("sine/cosine pairs are off the unit circle")
    if bound_err > 0.0:
        failures.append("encoding leaves [-1, 1]")
    return SuiteResult("positional-encoding", not failures, worst, "; ".join(failures))


def _oracle_metrics(counts: np.ndarray) -> tuple[float, float, float]:
    """Straight-from-definition OA, AA, kappa for cross-checking."""
    n = counts.shape[0]
    total = counts.sum()
    oa = sum(counts[i, i] for i in range(n)) / total
    rates = []
    for i in range(n):
        row = counts[i].sum()
        if row > 0:
            rates.append(counts[i, i] / row)
    aa = sum(rates) / len(rates)
    expected = sum(counts[i].sum() * counts[:, i].sum() for i in range(n)) / (total * total)
    if expected == 1.0:
        k = 1.0 if oa == 1.0 else 0.0
    else:
        k = (oa - expected) / (1.0 - expected)
    return float(oa), float(aa), float(k)


def run_metrics_oracle() -> SuiteResult:
    rng = tc.make_rng(19)
    failures = []
    worst = 0.0
    hand = [
        (np.array([[20, 5], [10, 15]]), 0.7, 0.4),
        (np.array([[1, 1], [0, 2]]), 0.75, 0.5),
    ]
    for counts, oa_expect, kappa_expect in hand:
        cm = metrics.ConfusionMatrix(counts.shape[0])
        cm.counts[:] = counts
        if abs(metrics.overall_accuracy(cm) - oa_expect) > 1e-12:
            failures.append(f"hand case OA mismatch for {counts.tolist()}")
        if abs(metrics.kappa(cm) - kappa_expect) > 1e-12:
            failures.append(f"hand case kappa mismatch for {counts.tolist()}")
    for trial in range(200):
        n = int(rng.integers(2, 9))
        counts = rng.integers(0, 51, size=(n, n))
        if counts.sum() == 0:
            continue
        cm = metrics.ConfusionMatrix(n)
        cm.counts[:] = counts
        oa, aa, k = _oracle_metrics(counts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = (metrics.overall_accuracy(cm), metrics.average_accuracy(cm), metrics.kappa(cm))
        err = max(abs(got[0] - oa), abs(got[1] - aa), abs(got[2] - k))
        worst = max(worst, err)
        if not err < 1e-12:
            failures.append(f"trial {trial}: disagreement {err:.3e}")
    return SuiteResult("metrics-oracle", not failures, worst, "; ".join(failures[:3]))


def attention_scaling_ratio(
    n_tokens: int = 64, d_head: int = 224, repeats: int = 5, inner: int = 60
) -> float:
    """Median wall-clock ratio of attention at 2N tokens versus N.

    Times forward passes through a single differential attention head;
    the score-matrix work is quadratic in sequence length, so doubling
    the token count should land near a factor of four. Inputs carry no
    gradient tape, which keeps every intermediate short-lived and lets
    the allocator settle into a steady recycling pattern instead of a
    layout that depends on whatever ran earlier in the process. The
    head is kept wide so the matrix products dominate the fixed
    per-operation dispatch cost, which would otherwise compress the
    ratio toward one. Each repetition alternates timed blocks of the
    two sizes and takes the minimum per size, which drops stalls from
    a busy machine and cancels slow drift.
    """
    rng = tc.make_rng(17)
    qkv = {
        t: tuple(Tensor(rng.normal(size=(t, d_head)), requires_grad=False) for _ in range(3))
        for t in (n_tokens, 2 * n_tokens)
    }

    def once(t):
        md.attention_core(*qkv[t], differential=True)

    def block(t):
        best = float("inf")
        for _ in range(2):
            start = time.perf_counter()
            for _ in range(inner):
                once(t)
            best = min(best, time.perf_counter() - start)
        return best

    once(n_tokens)
    once(2 * n_tokens)
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        ratios = []
        for _ in range(repeats):
            small = [block(n_tokens)]
            big = [block(2 * n_tokens)]
            for _ in range(3):
                small.append(block(n_tokens))
                big.append(block(2 * n_tokens))
            ratios.append(min(big) / max(min(small), 1e-12))
    finally:
        if gc_was_on:
            gc.enable()
    return float(np.median(ratios))


def run_all(fault_op: str | None = None) -> list[SuiteResult]:
    """Every suite, optionally under an injected backward fault."""
    suites = (
        run_gradient_ops,
        run_gradient_model,
        run_attention_invariants,
        run_positional_encoding,
        run_metrics_oracle,
    )
    hook = inject_backward_fault(fault_op) if fault_op else contextlib.nullcontext()
    with hook:
        return [suite() for suite in suites]
