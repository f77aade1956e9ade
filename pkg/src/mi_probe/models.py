"""Toy bidirectional selective-scan encoders and the synthetic tasks they train on.

Two tasks share one input distribution. Every frame is a codeword from a
fixed codebook (held for a random-length segment) plus a background of
damped sinusoids. *Reconstruction* asks the model to return the input
frame; *classification* asks for the codeword index of each frame. A third
head, ``decoder_seq2seq``, adds a small decoder stack between the encoder
and the classifier output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericError, UsageError
from .mine import FeatureSequence
from .nn import adam_step, init_adam
from .ssm import (
    _matmul,
    affine,
    bimamba_block_backward,
    bimamba_block_cached,
    init_block,
)
from .tree import flatten, unflatten

TASKS = ("reconstruction", "classification")
HEAD_KINDS = ("reconstruction", "frame_classification", "decoder_seq2seq")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    task: str = "reconstruction"
    n_samples: int = 200
    length: int = 128
    dim: int = 16
    class_count: int = 8
    n_sinusoids: int = 3
    min_segment: int = 4
    max_segment: int = 16
    codeword_scale: float = 1.0
    background_scale: float = 1.0
    noise_scale: float = 0.05

    def validate(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.length < 32 or self.dim < 4 or self.n_samples < 1:
            raise UsageError("dataset needs length >= 32, dim >= 4 and at least one sample")
        if self.class_count < 2:
            raise UsageError("class_count must be at least 2")
        if not 1 <= self.min_segment <= self.max_segment:
            raise UsageError("segment bounds must satisfy 1 <= min_segment <= max_segment")


@dataclass
class SyntheticDataset:
    """Inputs ``(S, L, D)`` with reconstruction targets or per-frame labels ``(S, L)``."""

    task: str
    seed: int
    inputs: np.ndarray
    labels: np.ndarray
    clean: np.ndarray
    codebook: np.ndarray
    class_count: int

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def length(self) -> int:
        return self.inputs.shape[1]

    @property
    def dim(self) -> int:
        return self.inputs.shape[2]

    @property
    def targets(self) -> np.ndarray:
        return self.inputs if self.task == "reconstruction" else self.labels

    @property
    def samples(self):
        return [(FeatureSequence(self.inputs[i]), self.targets[i]) for i in range(self.n_samples)]

    def target_features(self, i: int) -> np.ndarray:
        """Frame-level target representation used for target-side probing."""
        if self.task == "reconstruction":
            return self.inputs[i]
        return np.eye(self.class_count)[self.labels[i]]

    def save(self, path) -> None:
        np.savez(
            path, task=np.array(self.task), seed=np.array(self.seed), inputs=self.inputs,
            labels=self.labels, clean=self.clean, codebook=self.codebook,
            class_count=np.array(self.class_count),
        )

    @classmethod
    def load(cls, path) -> "SyntheticDataset":
        with np.load(path, allow_pickle=False) as f:
            return cls(
                task=str(f["task"]), seed=int(f["seed"]), inputs=f["inputs"], labels=f["labels"],
                clean=f["clean"], codebook=f["codebook"], class_count=int(f["class_count"]),
            )


def _segment_labels(length, cfg, rng):
    labels = np.empty(length, dtype=np.int64)
    pos, prev = 0, -1
    while pos < length:
        span = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        label = int(rng.integers(cfg.class_count - 1))
        if label >= prev >= 0:
            label += 1  # never repeat the previous codeword
        labels[pos:pos + span] = label
        prev = label
        pos += span
    return labels


def _background(length, cfg, rng):
    t = np.arange(length, dtype=np.float64)
    out = np.zeros((length, cfg.dim))
    for _ in range(cfg.n_sinusoids):
        direction = rng.standard_normal(cfg.dim)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(0.05, 0.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        damping = rng.uniform(0.0, 0.02)
        amp = rng.uniform(0.5, 1.0)
        out += np.outer(amp * np.exp(-damping * t) * np.sin(freq * t + phase), direction)
    return out


def gen_synthetic_dataset(cfg: DataConfig, seed: int) -> SyntheticDataset:
    cfg.validate()
    rng = np.random.default_rng(seed)
    codebook = rng.standard_normal((cfg.class_count, cfg.dim))
    codebook *= cfg.codeword_scale / np.linalg.norm(codebook, axis=1, keepdims=True)
    inputs = np.empty((cfg.n_samples, cfg.length, cfg.dim))
    clean = np.empty_like(inputs)
    labels = np.empty((cfg.n_samples, cfg.length), dtype=np.int64)
    for i in range(cfg.n_samples):
        labels[i] = _segment_labels(cfg.length, cfg, rng)
        clean[i] = codebook[labels[i]]
        inputs[i] = (clean[i] + cfg.background_scale * _background(cfg.length, cfg, rng)
                     + cfg.noise_scale * rng.standard_normal((cfg.length, cfg.dim)))
    return SyntheticDataset(cfg.task, int(seed), inputs, labels, clean, codebook, cfg.class_count)


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    head: str = "reconstruction"
    input_dim: int = 16
    width: int = 12
    state_dim: int = 8
    n_layers: int = 6
    class_count: int = 8
    decoder_layers: int = 2
    tap_points: tuple | None = None

    def validate(self):
        if self.head not in HEAD_KINDS:
            raise UsageError(f"unknown head {self.head!r}; expected one of {HEAD_KINDS}")
        if self.n_layers < 1 or self.width < 1 or self.state_dim < 1:
            raise UsageError("n_layers, width and state_dim must be positive")
        if self.head == "decoder_seq2seq" and self.decoder_layers < 1:
            raise UsageError("decoder_seq2seq needs at least one decoder layer")

    def to_json(self) -> dict:
        d = asdict(self)
        d["tap_points"] = None if self.tap_points is None else list(self.tap_points)
        return d

    @classmethod
    def from_json(cls, data) -> "ModelConfig":
        data = dict(data)
        if data.get("tap_points") is not None:
            data["tap_points"] = tuple(int(t) for t in data["tap_points"])
        return cls(**data)


@dataclass(frozen=True)
class EncoderStack:
    """Input projection followed by bidirectional blocks.

    Tap ``0`` is the projected input; tap ``i`` is the output of block ``i``.
    """

    W_proj: np.ndarray
    b_proj: np.ndarray
    layers: tuple
    tap_points: tuple

    def __post_init__(self):
        if len(self.layers) < 1:
            raise UsageError("an encoder needs at least one layer")
        widths = {blk.width for blk in self.layers}
        if widths != {self.W_proj.shape[0]}:
            raise DimensionError(f"layer widths {sorted(widths)} differ from projection width {self.W_proj.shape[0]}")
        taps = tuple(int(t) for t in self.tap_points)
        if not taps or any(t < 0 or t > len(self.layers) for t in taps) or len(set(taps)) != len(taps):
            raise UsageError(f"tap points {taps} must be distinct indices in [0, {len(self.layers)}]")
        object.__setattr__(self, "tap_points", tuple(sorted(taps)))

    @property
    def width(self) -> int:
        return self.W_proj.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_proj.shape[1]


@dataclass(frozen=True)
class TaskHead:
    kind: str
    W: np.ndarray
    b: np.ndarray
    decoder: tuple = ()
    fuse_W: tuple = ()
    fuse_b: tuple = ()


def init_model(cfg: ModelConfig, seed: int):
    """Fresh ``(EncoderStack, TaskHead)`` for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(cfg.input_dim)
    layers = tuple(init_block(cfg.width, cfg.state_dim, rng) for _ in range(cfg.n_layers))
    taps = tuple(range(cfg.n_layers + 1)) if cfg.tap_points is None else tuple(cfg.tap_points)
    stack = EncoderStack(
        W_proj=rng.uniform(-scale, scale, (cfg.width, cfg.input_dim)),
        b_proj=np.zeros(cfg.width),
        layers=layers,
        tap_points=taps,
    )
    out_dim = cfg.input_dim if cfg.head == "reconstruction" else cfg.class_count
    hs = 1.0 / np.sqrt(cfg.width)
    decoder, fuse_w, fuse_b = (), (), ()
    if cfg.head == "decoder_seq2seq":
        decoder = tuple(init_block(cfg.width, cfg.state_dim, rng) for _ in range(cfg.decoder_layers))
        fuse_w = tuple(rng.uniform(-hs, hs, (cfg.width, cfg.width)) for _ in range(cfg.decoder_layers))
        fuse_b = tuple(np.zeros(cfg.width) for _ in range(cfg.decoder_layers))
    head = TaskHead(cfg.head, rng.uniform(-hs, hs, (out_dim, cfg.width)), np.zeros(out_dim),
                    decoder, fuse_w, fuse_b)
    return stack, head


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _encoder_all(stack: EncoderStack, x: np.ndarray):
    """Every layer's output on a ``(B, L, D)`` batch, plus caches."""
    if x.shape[-1] != stack.input_dim:
        raise DimensionError(f"input width {x.shape[-1]} != encoder input width {stack.input_dim}")
    h = affine(x, stack.W_proj, stack.b_proj)
    outs, caches = [h], []
    for blk in stack.layers:
        h, cache = bimamba_block_cached(blk, h)
        outs.append(h)
        caches.append(cache)
    return outs, caches


def encoder_forward(stack: EncoderStack, inputs: FeatureSequence):
    """Run the stack on one sample; returns ``(output, taps)`` as feature sequences."""
    x = inputs.values if isinstance(inputs, FeatureSequence) else np.asarray(inputs, dtype=np.float64)
    outs, _ = _encoder_all(stack, x[None])
    output = FeatureSequence(outs[-1][0])
    taps = [FeatureSequence(outs[k][0]) for k in stack.tap_points]
    return output, taps


def decoder_forward(head: TaskHead, enc_out: FeatureSequence) -> list:
    """Post-fusion output of every decoder block for one sample (empty without a decoder).

    These are exactly the ``h`` values the head's final projection sees.
    """
    x = enc_out.values if isinstance(enc_out, FeatureSequence) else np.asarray(enc_out, dtype=np.float64)
    _, h, _ = _head_forward(head, x[None], keep_all=True)
    return [FeatureSequence(o[0]) for o in h]


def _head_forward(head: TaskHead, enc_out: np.ndarray, keep_all: bool = False):
    caches, hs = [], []
    h = enc_out
    for blk, fw, fb in zip(head.decoder, head.fuse_W, head.fuse_b):
        out, cache = bimamba_block_cached(blk, h)
        h = out + affine(enc_out, fw, fb)
        caches.append(cache)
        hs.append(h)
    if keep_all:
        return affine(h, head.W, head.b), hs, caches
    return affine(h, head.W, head.b), h, caches


def _head_backward(head: TaskHead, enc_out, final, caches, grad_pred):
    m = enc_out.shape[-1]
    grads = {
        "W": grad_pred.reshape(-1, grad_pred.shape[-1]).T @ final.reshape(-1, m),
        "b": grad_pred.sum(axis=(0, 1)),
    }
    g_h = _matmul(grad_pred, head.W)
    g_enc = np.zeros_like(enc_out)
    for k in range(len(head.decoder) - 1, -1, -1):
        grads[f"fuse_W.{k}"] = g_h.reshape(-1, m).T @ enc_out.reshape(-1, m)
        grads[f"fuse_b.{k}"] = g_h.sum(axis=(0, 1))
        g_enc += _matmul(g_h, head.fuse_W[k])
        g_h, g_blk = bimamba_block_backward(head.decoder[k], caches[k], g_h)
        grads.update({f"decoder.{k}.{n}": v for n, v in g_blk.items()})
    return g_enc + g_h, grads


def _softmax_xent(logits, labels):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    return -picked.mean(), np.exp(log_probs)


def loss_and_grads(stack: EncoderStack, head: TaskHead, x: np.ndarray, target: np.ndarray):
    """Task loss on a ``(B, L, D)`` batch and gradients for both parameter trees."""
    outs, enc_caches = _encoder_all(stack, x)
    enc_out = outs[-1]
    pred, final, head_caches = _head_forward(head, enc_out)
    if head.kind == "reconstruction":
        diff = pred - target
        loss = float(np.mean(diff ** 2))
        grad_pred = 2.0 * diff / diff.size
    else:
        loss, probs = _softmax_xent(pred, target)
        loss = float(loss)
        grad_pred = probs
        np.put_along_axis(grad_pred, target[..., None],
                          np.take_along_axis(grad_pred, target[..., None], axis=-1) - 1.0, axis=-1)
        grad_pred /= target.size

    g, head_grads = _head_backward(head, enc_out, final, head_caches, grad_pred)
    enc_grads = {}
    for k in range(len(stack.layers) - 1, -1, -1):
        g, g_blk = bimamba_block_backward(stack.layers[k], enc_caches[k], g)
        enc_grads.update({f"layers.{k}.{n}": v for n, v in g_blk.items()})
    d = x.shape[-1]
    enc_grads["W_proj"] = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, d)
    enc_grads["b_proj"] = g.sum(axis=(0, 1))
    return loss, enc_grads, head_grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 3e-3
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise UsageError("steps >= 0, batch_size >= 1 and learning_rate > 0 are required")


@dataclass
class TrainResult:
    stack: EncoderStack
    head: TaskHead
    history: list = field(default_factory=list)


def _compatible(head_kind: str, task: str) -> bool:
    return (head_kind == "reconstruction") == (task == "reconstruction")


def train_task(stack: EncoderStack, head: TaskHead, data: SyntheticDataset, cfg: TrainConfig) -> TrainResult:
    """Minimise MSE (reconstruction) or per-frame cross-entropy with Adam.

    ``history`` holds the mean training loss of each epoch, an epoch being
    one pass over the dataset in shuffled mini-batches. A trailing partial
    epoch is recorded too.
    """
    cfg.validate()
    if not _compatible(head.kind, data.task):
        raise UsageError(f"head {head.kind!r} cannot train on a {data.task!r} dataset")
    if data.dim != stack.input_dim:
        raise DimensionError(f"dataset width {data.dim} != encoder input width {stack.input_dim}")
    rng = np.random.default_rng(cfg.seed)
    params = {"encoder": flatten(stack), "head": flatten(head)}
    flat = {f"encoder.{k}": v for k, v in params["encoder"].items()}
    flat.update({f"head.{k}": v for k, v in params["head"].items()})
    opt = init_adam(flat, learning_rate=cfg.learning_rate)
    targets = data.targets
    batch = min(cfg.batch_size, data.n_samples)

    history, epoch_losses = [], []
    order = rng.permutation(data.n_samples)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + batch > data.n_samples:
            history.append(float(np.mean(epoch_losses)))
            epoch_losses = []
            order = rng.permutation(data.n_samples)
            cursor = 0
        idx = np.sort(order[cursor:cursor + batch])
        cursor += batch
        loss, g_enc, g_head = loss_and_grads(stack, head, data.inputs[idx], targets[idx])
        if not np.isfinite(loss):
            raise NumericError(f"training loss diverged at step {step}", history=history + epoch_losses)
        epoch_losses.append(loss)
        grads = {f"encoder.{k}": v for k, v in g_enc.items()}
        grads.update({f"head.{k}": v for k, v in g_head.items()})
        norm = np.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grads = {k: v * (cfg.grad_clip / norm) for k, v in grads.items()}
        try:
            flat, opt = adam_step(flat, grads, opt)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}", history=history + epoch_losses) from exc
        stack = unflatten(stack, flat, "encoder.")
        head = unflatten(head, flat, "head.")
    if epoch_losses:
        history.append(float(np.mean(epoch_losses)))
    return TrainResult(stack, head, history)


def evaluate_loss(stack: EncoderStack, head: TaskHead, data: SyntheticDataset, batch_size: int = 25) -> float:
    total, count = 0.0, 0
    for start in range(0, data.n_samples, batch_size):
        sl = slice(start, start + batch_size)
        outs, _ = _encoder_all(stack, data.inputs[sl])
        pred, _, _ = _head_forward(head, outs[-1])
        n = data.inputs[sl].shape[0]
        if head.kind == "reconstruction":
            total += float(np.mean((pred - data.inputs[sl]) ** 2)) * n
        else:
            total += float(_softmax_xent(pred, data.labels[sl])[0]) * n
        count += n
    return total / count


def frame_accuracy(stack: EncoderStack, head: TaskHead, data: SyntheticDataset) -> float:
    outs, _ = _encoder_all(stack, data.inputs)
    pred, _, _ = _head_forward(head, outs[-1])
    return float(np.mean(pred.argmax(axis=-1) == data.labels))


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

MAGIC = b"MIPROBE\x00"
FORMAT_VERSION = 1


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelContainer:
    config: ModelConfig
    stack: EncoderStack
    head: TaskHead
    meta: dict = field(default_factory=dict)


def save_model(path, container: ModelContainer) -> None:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | float64 LE payload``."""
    arrays = {f"encoder.{k}": v for k, v in flatten(container.stack).items()}
    arrays.update({f"head.{k}": v for k, v in flatten(container.head).items()})
    entries, offset, blobs = [], 0, []
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": container.config.to_json(),
        "tap_points": list(container.stack.tap_points),
        "arrays": entries,
        "meta": container.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def _split_container(raw: bytes, path) -> tuple[dict, int]:
    if raw[:len(MAGIC)] != MAGIC:
        raise UsageError(f"{path}: not a model container")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise UsageError(f"{path}: unsupported container version {version}")
    start = len(MAGIC) + 12
    return json.loads(raw[start:start + hlen]), start + hlen


def read_header(path) -> dict:
    return _split_container(Path(path).read_bytes(), path)[0]


def load_model(path) -> ModelContainer:
    raw = Path(path).read_bytes()
    header, start = _split_container(raw, path)
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        off = start + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(entry["shape"]).copy()
    cfg = ModelConfig.from_json(header["model_config"])
    cfg = ModelConfig(**{**cfg.__dict__, "tap_points": tuple(header["tap_points"])})
    stack_t, head_t = init_model(cfg, 0)
    stack = unflatten(stack_t, arrays, "encoder.")
    head = unflatten(head_t, arrays, "head.")
    return ModelContainer(cfg, stack, head, header.get("meta", {}))
