"""Loss, Adam with inverse-time learning-rate decay, and the training loop.

The decay follows the legacy convention the settings name: on step t the
effective rate is lr / (1 + decay * t). Model selection keeps the
parameters with the best validation overall accuracy (earlier epoch wins
ties). Everything is driven by one seeded generator so a run is fully
reproducible, and the loop can resume from a checkpointed optimizer and
generator state bit-exactly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 56
    lr: float = 1e-3
    decay: float = 1e-6
    l2_head: float = 0.01
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.decay < 0:
            raise ConfigError(f"decay must be >= 0, got {self.decay}")
        if self.l2_head < 0:
            raise ConfigError(f"l2_head must be >= 0, got {self.l2_head}")


@dataclass
class OptimState:
    lr: float
    decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float, decay: float, **kwargs) -> "OptimState":
        state = cls(lr=lr, decay=decay, **kwargs)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data, dtype=np.float64)
            state.v[name] = np.zeros_like(tensor.data, dtype=np.float64)
        return state

    @property
    def lr_t(self) -> float:
        """Effective learning rate at the current step count."""
        return self.lr / (1.0 + self.decay * self.t)


def cross_entropy_loss(
    logits: Tensor,
    labels: np.ndarray,
    head_weights: list[Tensor],
    l2: float,
) -> Tensor:
    """Mean categorical cross-entropy plus l2 * sum of squared head weights.

    Labels are 1-based class ids; biases never enter the penalty.
    """
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > logits.shape[1]):
        raise DataError(
            f"labels must be in [1, {logits.shape[1]}], got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    loss = tc.cross_entropy_mean(logits, labels - 1)
    if l2 > 0.0:
        for w in head_weights:
            loss = tc.add(loss, tc.scale(tc.sum_all(tc.multiply(w, w)), l2))
    return loss


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """One Adam update in place; the decayed rate uses the post-increment t."""
    state.t += 1
    lr_t = state.lr_t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != tensor.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter {name!r} {tensor.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr_t * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        tensor.data -= update.astype(tensor.data.dtype, copy=False)


def optim_to_extras(state: OptimState) -> dict[str, np.ndarray]:
    """Flatten moments and step count into named arrays for a checkpoint."""
    out: dict[str, np.ndarray] = {"optim/t": np.array([float(state.t)])}
    for name, arr in state.m.items():
        out[f"optim/m/{name}"] = arr
    for name, arr in state.v.items():
        out[f"optim/v/{name}"] = arr
    return out


def optim_from_extras(
    extras: dict[str, np.ndarray], params: ModelParams, lr: float, decay: float
) -> OptimState | None:
    """Rebuild optimizer state stored by optim_to_extras; None if absent."""
    if "optim/t" not in extras:
        return None
    state = OptimState(lr=lr, decay=decay, t=int(extras["optim/t"][0]))
    for name, tensor in params.items():
        for kind, store in (("m", state.m), ("v", state.v)):
            key = f"optim/{kind}/{name}"
            if key not in extras:
                raise ShapeError(f"checkpoint optimizer state is missing {key!r}")
            arr = np.asarray(extras[key], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ShapeError(
                    f"optimizer state {key!r} has shape {arr.shape}, parameter needs "
                    f"{tensor.data.shape}"
                )
            store[name] = arr.copy()
    return state


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_oa: float
    lr_t: float
    seconds: float


@dataclass
class TrainResult:
    best_params: ModelParams
    best_epoch: int
    best_val_oa: float
    history: list[EpochRecord]
    final_params: ModelParams
    optim_state: OptimState
    rng_state: dict


def history_csv(history: list[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_oa,lr_t,seconds"]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_oa!r},{r.lr_t!r},{r.seconds!r}")
    return "\n".join(lines) + "\n"


def _stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    patches = np.stack([np.asarray(s.patch, dtype=np.float64) for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return patches, labels


def predict_labels(
    params: ModelParams, config: ModelConfig, patches: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Eval-mode argmax class ids (1-based) for a stack of patches."""
    out = np.empty(len(patches), dtype=np.int64)
    with tc.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            logits = forward(chunk, params, config, training=False)
            out[start : start + len(chunk)] = np.argmax(logits.data, axis=1) + 1
    return out


def _snapshot(params: ModelParams) -> ModelParams:
    return ModelParams(
        {name: Tensor(t.data.copy(), requires_grad=True, dtype=t.data.dtype) for name, t in params.items()}
    )


def train_model(
    train_samples,
    val_samples,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParams | None = None,
    optim_state: OptimState | None = None,
    rng_state: dict | None = None,
    start_epoch: int = 0,
    timing: bool = True,
    log=None,
) -> TrainResult:
    """Run the full loop; resumable from checkpointed optimizer/rng state.

    One generator (seeded from train_config, or restored from rng_state)
    drives both the epoch shuffles and the dropout masks, so a resumed
    run continues the exact stream of the uninterrupted one.
    """
    if not train_samples:
        raise DataError("training split is empty")
    if not val_samples:
        raise DataError("validation split is empty")
    if params is None:
        params = init_params(model_config)
    if optim_state is None:
        optim_state = OptimState.for_params(params, lr=train_config.lr, decay=train_config.decay)
    rng = tc.make_rng(train_config.seed)
    if rng_state is not None:
        rng.bit_generator.state = rng_state

    x_train, y_train = _stack_samples(train_samples)
    x_val, y_val = _stack_samples(val_samples)
    for name, y in (("train", y_train), ("val", y_val)):
        if y.min() < 1 or y.max() > model_config.n_classes:
            raise DataError(
                f"{name} labels outside [1, {model_config.n_classes}]: "
                f"range [{y.min()}, {y.max()}]"
            )

    head_weights = [params["head/W"], params["classifier/W"]]
    n = len(x_train)
    history: list[EpochRecord] = []
    best_params = _snapshot(params)
    best_epoch = 0
    best_val_oa = -1.0

    for epoch in range(start_epoch + 1, start_epoch + train_config.epochs + 1):
        t_start = time.perf_counter()
        order = rng.permutation(n) if train_config.shuffle else np.arange(n)
        batch_losses = []
        for batch_index, start in enumerate(range(0, n, train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            try:
                # Non-finite values are diagnosed below; keep numpy quiet
                # about the intermediate inf/nan arithmetic.
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = forward(x_train[idx], params, model_config, training=True, rng=rng)
                    loss = cross_entropy_loss(
                        logits, y_train[idx], head_weights, train_config.l2_head
                    )
            except NumericError as exc:
                raise NumericError(
                    f"non-finite values in epoch {epoch}, batch {batch_index}: {exc}"
                ) from exc
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss in epoch {epoch}, batch {batch_index}: loss={loss_value}"
                )
            params.zero_grads()
            tc.backward(loss)
            adam_step(params, {name: t.grad for name, t in params.items()}, optim_state)
            batch_losses.append(loss_value)

        predictions = predict_labels(params, model_config, x_val, train_config.batch_size)
        val_oa = float(np.mean(predictions == y_val))
        seconds = time.perf_counter() - t_start if timing else 0.0
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_oa=val_oa,
            lr_t=optim_state.lr_t,
            seconds=seconds,
        )
        history.append(record)
        if log is not None:
            log(
                f"epoch {record.epoch}: loss {record.train_loss:.4f} "
                f"val_oa {record.val_oa:.4f} lr {record.lr_t:.6g}"
            )
        if val_oa > best_val_oa:
            best_val_oa = val_oa
            best_epoch = epoch
            best_params = _snapshot(params)

    return TrainResult(
        best_params=best_params,
        best_epoch=best_epoch,
        best_val_oa=best_val_oa,
        history=history,
        final_params=params,
        optim_state=optim_state,
        rng_state=rng.bit_generator.state,
    )
