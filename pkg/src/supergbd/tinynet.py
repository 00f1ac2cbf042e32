"""Small fully-connected edge classifier with manual forward/backward passes.

Hidden layers use a rectifier followed by inverted dropout (training only);
the single output unit is a sigmoid. The loss is mean binary cross-entropy,
optimized with Adam under a stepped learning-rate schedule. Everything is
plain numpy, float32 by default, and bit-deterministic given a seed.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .patch_graph import build_edge_pools, sample_batch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_EPS = 1e-7

CHECKPOINT_MAGIC = b"SGBD"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint bytes are malformed, corrupt, or out of range."""


@dataclass
class MlpModel:
    layer_dims: list[int]
    weights: list[np.ndarray]  # (d_i, d_{i+1}) per affine layer
    biases: list[np.ndarray]  # (d_{i+1},)
    dropout_rate: float = 0.3

    def __post_init__(self):
        dims = list(self.layer_dims)
        if len(dims) < 2 or dims[-1] != 1:
            raise ValueError(f"layer_dims must end in 1, got {dims}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch for dims {dims}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"non-finite parameters in layer {i}")

    @classmethod
    def initialize(
        cls,
        layer_dims,
        dropout_rate: float = 0.3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> "MlpModel":
        """Uniform init in ±sqrt(6/(fan_in+fan_out)), zero biases."""
        rng = rng or np.random.default_rng(0)
        dims = list(layer_dims)
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype))
            biases.append(np.zeros(d_out, dtype=dtype))
        return cls(layer_dims=dims, weights=weights, biases=biases, dropout_rate=dropout_rate)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            dropout_rate=self.dropout_rate,
        )

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.astype(dtype) for w in self.weights],
            biases=[b.astype(dtype) for b in self.biases],
            dropout_rate=self.dropout_rate,
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cached(model: MlpModel, x: np.ndarray, mode: str, rng):
    """Returns (probabilities, activations, pre-activations, dropout masks)."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"input shape {x.shape} incompatible with D_in={model.input_dim}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    if train and model.dropout_rate > 0 and rng is None:
        raise ValueError("train mode with dropout requires an rng")

    h = x
    activations = [x]
    pre = []
    masks = []
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        if i < n_layers - 1:
            h = np.maximum(z, 0)
            if train and model.dropout_rate > 0:
                keep = 1.0 - model.dropout_rate
                mask = (rng.random(h.shape) < keep).astype(h.dtype) / keep
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            activations.append(h)
    p = _sigmoid(pre[-1][:, 0])
    return p, activations, pre, masks


def forward(model: MlpModel, x: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
    """Batch of merge probabilities in (0, 1). Eval mode is deterministic."""
    p, _, _, _ = _forward_cached(model, np.asarray(x), mode, rng)
    return p


def forward_logits(model: MlpModel, x: np.ndarray, mode: str = "eval", rng=None) -> np.ndarray:
    _, _, pre, _ = _forward_cached(model, np.asarray(x), mode, rng)
    return pre[-1][:, 0]


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its analytic gradient d(loss)/dp."""
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    dldp = (pc - y) / (pc * (1.0 - pc)) / p.size
    return loss, dldp


def gradients(model: MlpModel, x: np.ndarray, y: np.ndarray, mode: str = "eval", rng=None):
    """Full backprop; returns (loss, weight grads, bias grads).

    Sigmoid + BCE are fused at the logit: dL/dz = (p - y) / B.
    """
    x = np.asarray(x, dtype=model.weights[0].dtype)
    y = np.asarray(y, dtype=model.weights[0].dtype)
    p, acts, pre, masks = _forward_cached(model, x, mode, rng)
    loss, _ = bce_loss(p, y)
    batch = x.shape[0]

    delta = ((p - y) / batch)[:, None].astype(x.dtype)
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            if masks[i - 1] is not None:
                delta = delta * masks[i - 1]
            delta = delta * (pre[i - 1] > 0)
    return loss, grads_w, grads_b


@dataclass
class AdamState:
    m_w: list
    v_w: list
    m_b: list
    v_b: list
    t: int = 0

    @classmethod
    def for_model(cls, model: MlpModel) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in model.weights],
            v_w=[np.zeros_like(w) for w in model.weights],
            m_b=[np.zeros_like(b) for b in model.biases],
            v_b=[np.zeros_like(b) for b in model.biases],
        )


def backward_and_step(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    state: AdamState,
    lr: float,
    rng=None,
) -> float:
    """One training step: backprop + Adam update in place."""
    loss, gw, gb = gradients(model, x, y, mode="train", rng=rng)
    if not np.isfinite(loss):
        raise RuntimeError(f"non-finite training loss {loss!r}; aborting")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    for params, grads, ms, vs in (
        (model.weights, gw, state.m_w, state.v_w),
        (model.biases, gb, state.m_b, state.v_b),
    ):
        for i, g in enumerate(grads):
            if not np.isfinite(g).all():
                raise RuntimeError(f"non-finite gradient in layer {i}; aborting")
            ms[i] *= ADAM_BETA1
            ms[i] += (1.0 - ADAM_BETA1) * g
            vs[i] *= ADAM_BETA2
            vs[i] += (1.0 - ADAM_BETA2) * g * g
            params[i] -= (lr * (ms[i] / bc1) / (np.sqrt(vs[i] / bc2) + ADAM_EPS)).astype(
                params[i].dtype
            )
    return loss


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    lr_step_epochs: int = 3
    lr_decay: float = 0.5
    batch_size: int = 256
    target_positive_fraction: float | None = 0.25  # None = natural ratio
    seed: int = 0
    features: tuple = ("rgb", "xyz", "normals")
    hidden_dims: tuple = (256, 1024, 256)
    dropout_rate: float = 0.3
    val_fraction: float = 0.1
    merge_threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** ((epoch - 1) // self.lr_step_epochs)


def train(packs, config: TrainConfig):
    """Train the edge merger on preprocessed frames.

    packs is a sequence of pipeline.FramePack with ground-truth-labeled
    graphs. A validation subset of frames is held out; after every epoch the
    current model segments the validation frames and the checkpoint with the
    highest pooled overlap F-score is returned, along with a per-epoch log.
    """
    from . import pipeline as _pipeline  # deferred; pipeline imports this module

    packs = list(packs)
    if not packs:
        raise ValueError("no training frames")
    seq = np.random.SeedSequence(config.seed)
    init_rng, drop_rng, samp_rng, split_rng = (np.random.default_rng(s) for s in seq.spawn(4))

    n_val = max(1, round(config.val_fraction * len(packs))) if len(packs) > 1 else 0
    order = split_rng.permutation(len(packs))
    val_packs = [packs[i] for i in order[:n_val]]
    train_packs = [packs[i] for i in order[n_val:]] or packs

    pools = build_edge_pools((p.graph for p in train_packs), config.features)
    if pools.positive.shape[0] == 0 or pools.negative.shape[0] == 0:
        raise ValueError("training corpus needs at least one positive and one negative edge")

    dims = [pools.positive.shape[1]] + list(config.hidden_dims) + [1]
    model = MlpModel.initialize(dims, config.dropout_rate, rng=init_rng)
    state = AdamState.for_model(model)
    steps_per_epoch = max(1, pools.total // config.batch_size)

    best = model.copy()
    best_f = -1.0
    log = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at_epoch(epoch)
        losses = np.empty(steps_per_epoch)
        for step in range(steps_per_epoch):
            x, y = sample_batch(pools, config.target_positive_fraction, config.batch_size, samp_rng)
            losses[step] = backward_and_step(model, x, y, state, lr, rng=drop_rng)
        val_f = float("nan")
        if val_packs:
            val_f = _pipeline.validation_overlap_f(
                model, val_packs, config.features, config.merge_threshold
            )
            if val_f > best_f:
                best_f = val_f
                best = model.copy()
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(losses.mean()),
                "val_overlap_f": val_f,
            }
        )
    if not val_packs:
        best = model.copy()
    return best, log


# --- checkpoint format -------------------------------------------------------
#
# Little-endian: magic "SGBD", u32 version=1, u32 L (affine layer count),
# (L+1) × u32 layer dims, f32 dropout_rate, then per layer the weight matrix
# row-major followed by the bias vector (all f32), then u32 CRC32 of all
# preceding bytes.


def save_checkpoint(model: MlpModel) -> bytes:
    dims = model.layer_dims
    if max(dims) > 0xFFFFFFFF:
        raise CheckpointError("layer dimension exceeds u32 range")
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(dims) - 1)
    buf += struct.pack(f"<{len(dims)}I", *dims)
    buf += struct.pack("<f", model.dropout_rate)
    for w, b in zip(model.weights, model.biases):
        buf += np.ascontiguousarray(w, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def load_checkpoint(data: bytes) -> MlpModel:
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    version, n_layers = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head = 12 + 4 * (n_layers + 1) + 4
    if len(data) < head + 4:
        raise CheckpointError("truncated checkpoint header")
    dims = list(struct.unpack_from(f"<{n_layers + 1}I", data, 12))
    (dropout,) = struct.unpack_from("<f", data, 12 + 4 * (n_layers + 1))
    expected = head + 4 * sum(d_in * d_out + d_out for d_in, d_out in zip(dims[:-1], dims[1:])) + 4
    if len(data) != expected:
        raise CheckpointError(f"checkpoint size {len(data)} != expected {expected}")
    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checkpoint CRC mismatch")
    weights, biases = [], []
    off = head
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f4", count=d_in * d_out, offset=off).reshape(d_in, d_out)
        off += 4 * d_in * d_out
        b = np.frombuffer(data, dtype="<f4", count=d_out, offset=off)
        off += 4 * d_out
        weights.append(w.copy())
        biases.append(b.copy())
    return MlpModel(layer_dims=dims, weights=weights, biases=biases, dropout_rate=float(dropout))


def write_checkpoint(model: MlpModel, path, manifest: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(save_checkpoint(model))
    if manifest is not None:
        doc = dict(manifest)
        doc["layer_dims"] = list(model.layer_dims)
        doc["parameter_count"] = model.parameter_count()
        Path(str(path) + ".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> MlpModel:
    return load_checkpoint(Path(path).read_bytes())


def read_checkpoint_manifest(path) -> dict | None:
    side = Path(str(path) + ".json")
    if side.exists():
        return json.loads(side.read_text())
    return None
