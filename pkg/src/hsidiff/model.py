"""The spectral-spatial transformer classifier.

A patch cube is unfolded into spatial sub-blocks, each projected by a
shared affine map into embedding space (equivalent to a 3D convolution
whose stride equals its kernel). A trainable class token is appended as
the LAST row, sinusoidal positional encodings are added, and the
sequence runs through pre-norm encoder blocks whose attention is either
differential (DMHSA) or plain (MHSA). The class row then passes through
two affine layers to produce logits; softmax lives in the loss.

DMHSA replaces raw attention scores S with their anchored first
difference along the key axis: D[:, 0] = S[:, 0] and
D[:, j] = S[:, j] - S[:, j-1]. The map is invertible (column cumsum
recovers S) and shapes are preserved, so the weighted sum over values
stays well-formed. A uniform shift of S moves only the anchor column,
which is what makes the scheme insensitive to redundant constant
attention mass.

Checkpoint file layout: magic "DFCKPT01", u32 little-endian header
length, UTF-8 JSON header (config, epoch, name/shape manifest, rng
state), then each manifest entry's values as little-endian float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    GraphError,
    HeaderMismatchError,
    ShapeError,
    TruncatedFileError,
)
from .tensor import Tensor

ATTENTION_KINDS = ("DMHSA", "MHSA")

CHECKPOINT_MAGIC = b"DFCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    patch_size: int = 12
    pca_bands: int = 15
    token_spatial: int = 2
    d_embed: int = 64
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int = 256
    dropout_rate: float = 0.1
    ln_eps: float = 1e-3
    attention_kind: str = "DMHSA"
    l2_head: float = 0.01
    seed: int = 0
    dtype: str = "f64"

    def __post_init__(self):
        extents = {
            "n_classes": self.n_classes,
            "patch_size": self.patch_size,
            "pca_bands": self.pca_bands,
            "token_spatial": self.token_spatial,
            "d_embed": self.d_embed,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
        }
        for name, value in extents.items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_embed % self.n_heads != 0:
            raise ConfigError(
                f"d_embed {self.d_embed} not divisible by n_heads {self.n_heads}"
            )
        if self.d_embed % 2 != 0:
            raise ConfigError(f"d_embed must be even for positional encoding, got {self.d_embed}")
        if self.patch_size % self.token_spatial != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} not divisible by token_spatial {self.token_spatial}"
            )
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(
                f"attention_kind must be one of {ATTENTION_KINDS}, got {self.attention_kind!r}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.ln_eps <= 0:
            raise ConfigError(f"ln_eps must be positive, got {self.ln_eps}")
        if self.l2_head < 0:
            raise ConfigError(f"l2_head must be >= 0, got {self.l2_head}")
        tc.resolve_dtype(self.dtype)

    @property
    def d_head(self) -> int:
        return self.d_embed // self.n_heads

    @property
    def n_patch_tokens(self) -> int:
        return (self.patch_size // self.token_spatial) ** 2

    @property
    def n_tokens(self) -> int:
        """Patch tokens plus the class token."""
        return self.n_patch_tokens + 1


class ModelParams:
    """Named trainable tensors in a stable enumeration order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def total_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every trainable tensor, in enumeration order."""
    d = config.d_embed
    f = config.d_ff
    flat = config.token_spatial * config.token_spatial * config.pca_bands
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("tok_proj/W", (flat, d)),
        ("tok_proj/b", (d,)),
        ("cls_token", (d,)),
    ]
    for i in range(config.n_layers):
        prefix = f"layer{i}"
        entries += [
            (f"{prefix}/ln1/gamma", (d,)),
            (f"{prefix}/ln1/beta", (d,)),
            (f"{prefix}/attn/Wq", (d, d)),
            (f"{prefix}/attn/bq", (d,)),
            (f"{prefix}/attn/Wk", (d, d)),
            (f"{prefix}/attn/bk", (d,)),
            (f"{prefix}/attn/Wv", (d, d)),
            (f"{prefix}/attn/bv", (d,)),
            (f"{prefix}/attn/Wo", (d, d)),
            (f"{prefix}/attn/bo", (d,)),
            (f"{prefix}/ln2/gamma", (d,)),
            (f"{prefix}/ln2/beta", (d,)),
            (f"{prefix}/ffn/Wu", (d, f)),
            (f"{prefix}/ffn/bu", (f,)),
            (f"{prefix}/ffn/Wg", (d, f)),
            (f"{prefix}/ffn/bg", (f,)),
            (f"{prefix}/ffn/Wd", (f, d)),
            (f"{prefix}/ffn/bd", (d,)),
        ]
    entries += [
        ("head/W", (d, d)),
        ("head/b", (d,)),
        ("classifier/W", (d, config.n_classes)),
        ("classifier/b", (config.n_classes,)),
    ]
    return entries


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a config."""
    d = config.d_embed
    f = config.d_ff
    n = config.n_classes
    flat = config.token_spatial * config.token_spatial * config.pca_bands
    token_and_cls = flat * d + d + d
    per_layer = 4 * d * d + 3 * d * f + 9 * d + 2 * f
    head = d * d + d
    classifier = d * n + n
    return token_and_cls + config.n_layers * per_layer + head + classifier


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded initialization in manifest order.

    Weight matrices draw uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)),
    biases and LN beta start at zero, LN gamma at one, and the class
    token at Normal(0, 0.02).
    """
    rng = tc.make_rng(config.seed)
    dtype = tc.resolve_dtype(config.dtype)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_manifest(config):
        if name == "cls_token":
            values = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith("/gamma"):
            values = np.ones(shape)
        elif len(shape) == 1:
            values = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-a, a, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, dtype=dtype)
    params = ModelParams(tensors)
    assert params.total_count() == param_count(config)
    return params


def positional_encoding(n_positions: int, d_embed: int) -> np.ndarray:
    """Sinusoidal table: column 2i is sin(pos/10000^(2i/d)), 2i+1 the cosine."""
    if d_embed % 2 != 0:
        raise ConfigError(f"positional encoding needs even d_embed, got {d_embed}")
    if n_positions < 1:
        raise ConfigError(f"need at least one position, got {n_positions}")
    positions = np.arange(n_positions, dtype=np.float64)[:, None]
    even = np.arange(0, d_embed, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, even / d_embed)
    table = np.empty((n_positions, d_embed), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def tokenize(patch: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Unfold a (P, P, C) patch and project each block to d_embed."""
    expected = (config.patch_size, config.patch_size, config.pca_bands)
    if patch.shape != expected:
        raise ShapeError(f"patch shape {patch.shape} does not match config {expected}")
    blocks = tc.unfold_patches_3d(patch, config.token_spatial)
    return tc.add(tc.matmul(blocks, params["tok_proj/W"]), params["tok_proj/b"])


def append_class_token(tokens: Tensor, cls_token: Tensor) -> Tensor:
    """Concatenate the class token as the last row of the sequence."""
    row = tc.reshape(cls_token, (1, cls_token.data.size))
    return tc.concat_rows([tokens, row])


def attention_core(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    differential: bool,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> tuple[Tensor, Tensor]:
    """One head of scaled dot-product attention; returns (output, weights).

    Scores are q k^T / sqrt(d_head); the differential variant rewrites
    them with the anchored first difference along keys before softmax.
    """
    d_head = q.shape[1]
    scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / np.sqrt(d_head))
    if differential:
        scores = tc.diff_cols(scores)
    weights = tc.softmax_rows(scores)
    if training and dropout_rate > 0.0:
        weights = tc.dropout(weights, dropout_rate, rng, training=True)
    return tc.matmul(weights, v), weights


def _multi_head_attention(
    x: Tensor,
    params: ModelParams,
    layer: int,
    config: ModelConfig,
    differential: bool,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    n_tokens = x.shape[0]
    if differential and n_tokens < 2:
        raise GraphError(f"differential attention needs at least 2 tokens, got {n_tokens}")
    prefix = f"layer{layer}/attn"
    q = tc.add(tc.matmul(x, params[f"{prefix}/Wq"]), params[f"{prefix}/bq"])
    k = tc.add(tc.matmul(x, params[f"{prefix}/Wk"]), params[f"{prefix}/bk"])
    v = tc.add(tc.matmul(x, params[f"{prefix}/Wv"]), params[f"{prefix}/bv"])
    heads = []
    for h in range(config.n_heads):
        lo, hi = h * config.d_head, (h + 1) * config.d_head
        out, _ = attention_core(
            tc.slice_cols(q, lo, hi),
            tc.slice_cols(k, lo, hi),
            tc.slice_cols(v, lo, hi),
            differential=differential,
            dropout_rate=config.dropout_rate,
            rng=rng,
            training=training,
        )
        heads.append(out)
    merged = heads[0] if len(heads) == 1 else tc.concat_cols(heads)
    return tc.add(tc.matmul(merged, params[f"{prefix}/Wo"]), params[f"{prefix}/bo"])


def dmhsa(
    x: Tensor,
    params: ModelParams,
    layer: int,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Differential multi-head self-attention over a token sequence."""
    return _multi_head_attention(x, params, layer, config, True, training, rng)


def mhsa(
    x: Tensor,
    params: ModelParams,
    layer: int,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Plain multi-head self-attention (the comparison baseline)."""
    return _multi_head_attention(x, params, layer, config, False, training, rng)


def swiglu_ffn(x: Tensor, params: ModelParams, layer: int) -> Tensor:
    """Gated feed-forward: s = u * sigmoid(g) + u, then project back down."""
    prefix = f"layer{layer}/ffn"
    u = tc.add(tc.matmul(x, params[f"{prefix}/Wu"]), params[f"{prefix}/bu"])
    g = tc.add(tc.matmul(x, params[f"{prefix}/Wg"]), params[f"{prefix}/bg"])
    s = tc.add(tc.multiply(u, tc.sigmoid(g)), u)
    return tc.add(tc.matmul(s, params[f"{prefix}/Wd"]), params[f"{prefix}/bd"])


def encoder_block(
    x: Tensor,
    params: ModelParams,
    layer: int,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block: attention sublayer, then feed-forward."""
    attend = dmhsa if config.attention_kind == "DMHSA" else mhsa
    normed = tc.layer_norm(
        x, params[f"layer{layer}/ln1/gamma"], params[f"layer{layer}/ln1/beta"], config.ln_eps
    )
    x = tc.add(x, attend(normed, params, layer, config, training, rng))
    normed = tc.layer_norm(
        x, params[f"layer{layer}/ln2/gamma"], params[f"layer{layer}/ln2/beta"], config.ln_eps
    )
    return tc.add(x, swiglu_ffn(normed, params, layer))


def forward(
    patches: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits for a batch of (P, P, C) patches; shape (batch, n_classes)."""
    batch = np.asarray(patches)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.ndim != 4 or batch.shape[1:] != (
        config.patch_size,
        config.patch_size,
        config.pca_bands,
    ):
        raise ShapeError(
            f"patch batch shape {np.asarray(patches).shape} does not match config "
            f"({config.patch_size}, {config.patch_size}, {config.pca_bands})"
        )
    if batch.shape[0] < 1:
        raise ShapeError("forward needs at least one patch")
    if training and config.dropout_rate > 0.0 and rng is None:
        raise ConfigError("training-mode forward with dropout needs an rng")

    dtype = tc.resolve_dtype(config.dtype)
    pe = Tensor(positional_encoding(config.n_tokens, config.d_embed), dtype=dtype)
    rows = []
    for sample in batch:
        tokens = tokenize(Tensor(sample, dtype=dtype), params, config)
        sequence = tc.add(append_class_token(tokens, params["cls_token"]), pe)
        for layer in range(config.n_layers):
            sequence = encoder_block(sequence, params, layer, config, training, rng)
        cls_row = tc.slice_rows(sequence, config.n_tokens - 1, config.n_tokens)
        hidden = tc.add(tc.matmul(cls_row, params["head/W"]), params["head/b"])
        rows.append(tc.add(tc.matmul(hidden, params["classifier/W"]), params["classifier/b"]))
    return rows[0] if len(rows) == 1 else tc.concat_rows(rows)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    epoch: int
    rng_state: dict | None
    extras: dict[str, np.ndarray]


def save_checkpoint(
    path,
    config: ModelConfig,
    params: ModelParams,
    epoch: int = 0,
    rng_state: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> None:
    """Write config, parameters, and any extra arrays (PCA, optimizer state).

    Payloads are always little-endian float64 in manifest order, so the
    file is identical regardless of the in-memory dtype.
    """
    extras = {name: np.asarray(arr, dtype=np.float64) for name, arr in (extras or {}).items()}
    manifest = [[name, list(t.shape)] for name, t in params.items()]
    manifest += [[name, list(extras[name].shape)] for name in sorted(extras)]
    header = {
        "config": asdict(config),
        "epoch": int(epoch),
        "manifest": manifest,
        "rng_state": rng_state,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        for name, t in params.items():
            fh.write(t.data.astype("<f8", copy=False).tobytes())
        for name in sorted(extras):
            fh.write(extras[name].astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}")
    if len(raw) < len(CHECKPOINT_MAGIC) + 4:
        raise TruncatedFileError(f"{path}: missing header length")
    header_len = int(np.frombuffer(raw, dtype="<u4", count=1, offset=len(CHECKPOINT_MAGIC))[0])
    start = len(CHECKPOINT_MAGIC) + 4
    end = start + header_len
    if len(raw) < end:
        raise TruncatedFileError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[start:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    try:
        config = ModelConfig(**header["config"])
        manifest = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["manifest"]]
        epoch = int(header["epoch"])
        rng_state = header.get("rng_state")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc

    payload = sum(int(np.prod(shape)) * 8 for _, shape in manifest)
    if len(raw) < end + payload:
        raise TruncatedFileError(f"{path}: expected {end + payload} bytes, found {len(raw)}")
    if len(raw) > end + payload:
        raise HeaderMismatchError(f"{path}: {len(raw) - end - payload} trailing bytes")

    arrays: dict[str, np.ndarray] = {}
    offset = end
    for name, shape in manifest:
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        )
        offset += count * 8

    dtype = tc.resolve_dtype(config.dtype)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_manifest(config):
        if name not in arrays:
            raise HeaderMismatchError(f"{path}: checkpoint is missing parameter {name!r}")
        if arrays[name].shape != shape:
            raise HeaderMismatchError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, config needs {shape}"
            )
        tensors[name] = Tensor(arrays.pop(name), requires_grad=True, dtype=dtype)
    return Checkpoint(
        config=config,
        params=ModelParams(tensors),
        epoch=epoch,
        rng_state=rng_state,
        extras=arrays,
    )
