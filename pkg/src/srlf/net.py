"""SRLF-Net: per-view encoder branches fused by a deep fully-connected head.

Each of the N views feeds its embedding through its own stack of
linear -> batch-norm -> ReLU -> dropout blocks (weights are NOT shared across
views). The branch outputs are concatenated in fixed view order and passed
through a fusion head of linear -> batch-norm -> ReLU blocks, ending in a
plain linear layer that emits one logit per class.

The default geometry: three 768-d inputs, branches 768->512->256 (dropout
0.5 then 0.6), head 768->768->512->256->128->16. fusion_sizes[0] is the
head's input width and must equal num_views * branch_sizes[-1]; the remaining
entries are the hidden widths.

Everything is explicit numpy: forward caches activations, backward consumes
them, and both are validated against central finite differences in the test
suite. Eval-mode forwards are pure (running batch-norm statistics, no
dropout) and bitwise deterministic.

Canonical parameter order (used by the optimizer, the finite-difference
flattening, and the checkpoint blob): for each branch in view order, for each
block: W, b, gamma, beta; then the head blocks in depth order likewise; then
the final linear W, b. The checkpoint state blob additionally carries each
batch-norm's running_mean and running_var immediately after its beta.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, IntegrityError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_views: int = 3
    embed_dim: int = 768
    branch_sizes: tuple[int, ...] = (512, 256)
    branch_dropout: tuple[float, ...] = (0.5, 0.6)
    fusion_sizes: tuple[int, ...] = (768, 768, 512, 256, 128)
    num_classes: int = 16

    def __post_init__(self):
        object.__setattr__(self, "branch_sizes", tuple(self.branch_sizes))
        object.__setattr__(self, "branch_dropout", tuple(self.branch_dropout))
        object.__setattr__(self, "fusion_sizes", tuple(self.fusion_sizes))
        if len(self.branch_dropout) != len(self.branch_sizes):
            raise ConfigError(
                f"branch_dropout has {len(self.branch_dropout)} rates for "
                f"{len(self.branch_sizes)} branch layers"
            )
        sizes = (self.num_views, self.embed_dim, self.num_classes,
                 *self.branch_sizes, *self.fusion_sizes)
        if any(s <= 0 for s in sizes):
            raise ConfigError("all layer sizes must be positive")
        if not self.branch_sizes:
            raise ConfigError("at least one branch layer is required")
        if not all(0.0 <= p < 1.0 for p in self.branch_dropout):
            raise ConfigError("dropout rates must lie in [0, 1)")
        if self.fusion_sizes[0] != self.num_views * self.branch_sizes[-1]:
            raise ConfigError(
                f"fusion input width {self.fusion_sizes[0]} != "
                f"num_views * last branch size = "
                f"{self.num_views * self.branch_sizes[-1]}"
            )

    def to_json(self) -> str:
        return json.dumps({
            "num_views": self.num_views,
            "embed_dim": self.embed_dim,
            "branch_sizes": list(self.branch_sizes),
            "branch_dropout": list(self.branch_dropout),
            "fusion_sizes": list(self.fusion_sizes),
            "num_classes": self.num_classes,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        d = json.loads(text)
        return ModelConfig(
            num_views=d["num_views"],
            embed_dim=d["embed_dim"],
            branch_sizes=tuple(d["branch_sizes"]),
            branch_dropout=tuple(d["branch_dropout"]),
            fusion_sizes=tuple(d["fusion_sizes"]),
            num_classes=d["num_classes"],
        )


@dataclass
class Block:
    """One linear + batch-norm unit. ReLU/dropout carry no parameters."""

    W: np.ndarray            # (out, in)
    b: np.ndarray            # (out,)
    gamma: np.ndarray        # (out,) batch-norm scale
    beta: np.ndarray         # (out,) batch-norm shift
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ModelParams:
    config: ModelConfig
    branches: list[list[Block]]
    head: list[Block]
    out_W: np.ndarray        # (num_classes, fusion_sizes[-1])
    out_b: np.ndarray        # (num_classes,)
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            branches=[[replace(bl, W=bl.W.copy(), b=bl.b.copy(),
                               gamma=bl.gamma.copy(), beta=bl.beta.copy(),
                               running_mean=bl.running_mean.copy(),
                               running_var=bl.running_var.copy())
                       for bl in branch] for branch in self.branches],
            head=[replace(bl, W=bl.W.copy(), b=bl.b.copy(),
                          gamma=bl.gamma.copy(), beta=bl.beta.copy(),
                          running_mean=bl.running_mean.copy(),
                          running_var=bl.running_var.copy())
                  for bl in self.head],
            out_W=self.out_W.copy(),
            out_b=self.out_b.copy(),
            dtype=self.dtype,
        )


def _iter_blocks(params: ModelParams):
    for branch in params.branches:
        yield from branch
    yield from params.head


def trainable_arrays(params: ModelParams) -> list[np.ndarray]:
    """All trainable arrays in canonical order (shared by optimizer state,
    gradient lists, finite-difference flattening, and the checkpoint)."""
    arrays = []
    for bl in _iter_blocks(params):
        arrays.extend([bl.W, bl.b, bl.gamma, bl.beta])
    arrays.extend([params.out_W, params.out_b])
    return arrays


def state_arrays(params: ModelParams) -> list[np.ndarray]:
    """Trainable arrays plus batch-norm running statistics, canonical order."""
    arrays = []
    for bl in _iter_blocks(params):
        arrays.extend([bl.W, bl.b, bl.gamma, bl.beta,
                       bl.running_mean, bl.running_var])
    arrays.extend([params.out_W, params.out_b])
    return arrays


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count.

    Every linear layer contributes in*out + out; every hidden batch-norm
    contributes 2*out (scale + shift; running stats are not trainable).
    """
    total = 0
    for _ in range(config.num_views):
        fan_in = config.embed_dim
        for width in config.branch_sizes:
            total += fan_in * width + width + 2 * width
            fan_in = width
    for prev, width in zip(config.fusion_sizes, config.fusion_sizes[1:]):
        total += prev * width + width + 2 * width
    total += config.fusion_sizes[-1] * config.num_classes + config.num_classes
    return total


def _init_block(rng: np.random.Generator, fan_in: int, width: int, dtype) -> Block:
    bound = 1.0 / np.sqrt(fan_in)
    return Block(
        W=rng.uniform(-bound, bound, size=(width, fan_in)).astype(dtype),
        b=rng.uniform(-bound, bound, size=width).astype(dtype),
        gamma=np.ones(width, dtype=dtype),
        beta=np.zeros(width, dtype=dtype),
        running_mean=np.zeros(width, dtype=dtype),
        running_var=np.ones(width, dtype=dtype),
    )


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in-scaled uniform init for linears; batch-norm starts at identity
    (scale 1, shift 0, running mean 0, running var 1). Deterministic in seed;
    draws happen in canonical parameter order."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    branches = []
    for _ in range(config.num_views):
        fan_in = config.embed_dim
        branch = []
        for width in config.branch_sizes:
            branch.append(_init_block(rng, fan_in, width, dtype))
            fan_in = width
        branches.append(branch)
    head = []
    for prev, width in zip(config.fusion_sizes, config.fusion_sizes[1:]):
        head.append(_init_block(rng, prev, width, dtype))
    bound = 1.0 / np.sqrt(config.fusion_sizes[-1])
    out_W = rng.uniform(-bound, bound,
                        size=(config.num_classes, config.fusion_sizes[-1])).astype(dtype)
    out_b = rng.uniform(-bound, bound, size=config.num_classes).astype(dtype)
    return ModelParams(config=config, branches=branches, head=head,
                       out_W=out_W, out_b=out_b, dtype=dtype)


def _check_views(params: ModelParams, views) -> tuple[list[np.ndarray], bool]:
    cfg = params.config
    if len(views) != cfg.num_views:
        raise ValidationError(f"expected {cfg.num_views} views, got {len(views)}")
    single = np.asarray(views[0]).ndim == 1
    mats = []
    for v in views:
        v = np.asarray(v, dtype=params.dtype)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[1] != cfg.embed_dim:
            raise ValidationError(
                f"view embedding has shape {v.shape}, expected (*, {cfg.embed_dim})")
        if not np.all(np.isfinite(v)):
            raise ValidationError("view embeddings contain NaN or Inf")
        mats.append(v)
    if len({m.shape[0] for m in mats}) != 1:
        raise ValidationError("views disagree on batch size")
    return mats, single


def _bn_forward(bl: Block, x: np.ndarray, mode: str, cache: dict | None):
    if mode == "batch":
        if x.shape[0] < 2:
            raise ValidationError("batch-norm with batch statistics needs batch size >= 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv
        # Running stats follow the usual convention: biased variance
        # normalizes the batch, unbiased variance feeds the running estimate.
        n = x.shape[0]
        bl.running_mean[:] = (1 - BN_MOMENTUM) * bl.running_mean + BN_MOMENTUM * mu
        bl.running_var[:] = (1 - BN_MOMENTUM) * bl.running_var \
            + BN_MOMENTUM * var * (n / (n - 1))
    else:
        inv = 1.0 / np.sqrt(bl.running_var + BN_EPS)
        xhat = (x - bl.running_mean) * inv
    if cache is not None:
        cache["xhat"] = xhat
        cache["inv"] = inv
    return bl.gamma * xhat + bl.beta


def _bn_backward(bl: Block, cache: dict, dy: np.ndarray, mode: str):
    xhat, inv = cache["xhat"], cache["inv"]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * bl.gamma
    if mode == "batch":
        n = dy.shape[0]
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


def _block_forward(bl: Block, x, bn_mode, dropout_p, rng, cache: dict | None):
    z = x @ bl.W.T + bl.b
    if cache is not None:
        cache["x"] = x
    bn_cache = {} if cache is not None else None
    h = _bn_forward(bl, z, bn_mode, bn_cache)
    if cache is not None:
        cache["bn"] = bn_cache
        cache["pre_relu"] = h
    a = np.maximum(h, 0)
    if dropout_p > 0.0:
        if rng is None:
            raise ValidationError("train-mode forward with dropout requires an rng")
        mask = (rng.random(a.shape) >= dropout_p) / (1.0 - dropout_p)
        mask = mask.astype(a.dtype)
        a = a * mask
        if cache is not None:
            cache["mask"] = mask
    return a


def _block_backward(bl: Block, cache: dict, da, bn_mode):
    if "mask" in cache:
        da = da * cache["mask"]
    dh = da * (cache["pre_relu"] > 0)
    dz, dgamma, dbeta = _bn_backward(bl, cache["bn"], dh, bn_mode)
    x = cache["x"]
    dW = dz.T @ x
    db = dz.sum(axis=0)
    dx = dz @ bl.W
    return dx, [dW, db, dgamma, dbeta]


def forward(params: ModelParams, views, mode: str = "eval",
            rng: np.random.Generator | None = None,
            bn_mode: str | None = None, cache: dict | None = None) -> np.ndarray:
    """Compute class logits for one frame triplet or a batch of them.

    views: sequence of num_views arrays, each (embed_dim,) or (batch, embed_dim).
    mode "eval": dropout off, batch-norm uses running statistics; pure and
    bitwise deterministic. mode "train": dropout active (rng required when
    any rate > 0), batch-norm uses batch statistics and updates running
    stats in place. bn_mode overrides the batch-norm source ("batch" or
    "running"), which the gradient checks use to freeze normalization.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown forward mode {mode!r}")
    if bn_mode is None:
        bn_mode = "batch" if mode == "train" else "running"
    mats, single = _check_views(params, views)

    branch_outs = []
    for view_idx, branch in enumerate(params.branches):
        a = mats[view_idx]
        for layer_idx, bl in enumerate(branch):
            p = params.config.branch_dropout[layer_idx] if mode == "train" else 0.0
            c = {} if cache is not None else None
            a = _block_forward(bl, a, bn_mode, p, rng, c)
            if cache is not None:
                cache[("branch", view_idx, layer_idx)] = c
        branch_outs.append(a)

    fused = np.concatenate(branch_outs, axis=1)
    a = fused
    for layer_idx, bl in enumerate(params.head):
        c = {} if cache is not None else None
        a = _block_forward(bl, a, bn_mode, 0.0, None, c)
        if cache is not None:
            cache[("head", layer_idx)] = c

    logits = a @ params.out_W.T + params.out_b
    if cache is not None:
        cache["out_x"] = a
        cache["single"] = single
    return logits[0] if single else logits


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray,
             bn_mode: str = "batch") -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable array, given
    d(loss)/d(logits). Returns arrays parallel to trainable_arrays()."""
    if dlogits.ndim == 1:
        dlogits = dlogits[None, :]
    dout_W = dlogits.T @ cache["out_x"]
    dout_b = dlogits.sum(axis=0)
    da = dlogits @ params.out_W

    head_grads = []
    for layer_idx in reversed(range(len(params.head))):
        bl = params.head[layer_idx]
        da, grads = _block_backward(bl, cache[("head", layer_idx)], da, bn_mode)
        head_grads.append(grads)
    head_grads.reverse()

    width = params.config.branch_sizes[-1]
    branch_grads = []
    for view_idx, branch in enumerate(params.branches):
        d = da[:, view_idx * width:(view_idx + 1) * width]
        per_layer = []
        for layer_idx in reversed(range(len(branch))):
            bl = branch[layer_idx]
            d, grads = _block_backward(bl, cache[("branch", view_idx, layer_idx)],
                                       d, bn_mode)
            per_layer.append(grads)
        per_layer.reverse()
        branch_grads.append(per_layer)

    flat = []
    for per_layer in branch_grads:
        for grads in per_layer:
            flat.extend(grads)
    for grads in head_grads:
        flat.extend(grads)
    flat.extend([dout_W, dout_b])
    return flat


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def predict(params: ModelParams, views) -> tuple[int, np.ndarray]:
    """Eval-mode forward + softmax. Argmax ties break to the smallest class
    index (np.argmax convention), making predictions fully deterministic."""
    logits = forward(params, views, mode="eval")
    if logits.ndim != 1:
        raise ValidationError("predict expects a single frame triplet, not a batch")
    probs = softmax(logits)
    return int(np.argmax(logits)), probs


def predict_batch(params: ModelParams, views) -> tuple[np.ndarray, np.ndarray]:
    logits = forward(params, views, mode="eval")
    if logits.ndim == 1:
        logits = logits[None, :]
    return np.argmax(logits, axis=1), softmax(logits)


def save_checkpoint(params: ModelParams, path) -> None:
    """Checkpoint layout: u32 header length, header JSON (config + format
    version), little-endian float32 state blob in canonical order (running
    stats included), u32 CRC32 over header + blob."""
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": json.loads(params.config.to_json()),
    }, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in state_arrays(params)
    )
    crc = zlib.crc32(header + blob) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(blob)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    dtype=np.float32) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IntegrityError(f"checkpoint {path} is truncated")
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + header_len + 4:
        raise IntegrityError(f"checkpoint {path} is truncated")
    header = raw[4:4 + header_len]
    blob = raw[4 + header_len:-4]
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(header + blob) & 0xFFFFFFFF != crc_stored:
        raise IntegrityError(f"checkpoint {path} failed its CRC32 check")
    meta = json.loads(header.decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format version {meta.get('format_version')}")
    config = ModelConfig.from_json(json.dumps(meta["config"]))
    if expected_config is not None and config != expected_config:
        raise ValidationError(
            "checkpoint config does not match the requested model config")
    params = init_model(config, seed=0, dtype=dtype)
    arrays = state_arrays(params)
    expected_bytes = sum(a.size for a in arrays) * 4
    if len(blob) != expected_bytes:
        raise IntegrityError(
            f"checkpoint blob has {len(blob)} bytes, expected {expected_bytes}")
    offset = 0
    for a in arrays:
        nbytes = a.size * 4
        values = np.frombuffer(blob, dtype="<f4", count=a.size, offset=offset)
        a[:] = values.reshape(a.shape).astype(dtype)
        offset += nbytes
    return params
