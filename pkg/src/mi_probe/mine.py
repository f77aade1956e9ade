"""Mutual information neural estimation (MINE) on frame sequences.

Mutual information is the KL divergence between the joint distribution of
``(x, t)`` frame pairs and the product of their marginals. A statistics
network ``psi`` scores pairs; the Donsker-Varadhan lower bound

    I(X; T) >= E_joint[psi] - log E_marginal[exp(psi)]

becomes tight at the optimum, so training ``psi`` to maximise the bound
yields the estimate. Joint pairs are aligned frames of one sample; marginal
pairs re-pair the same frames through a derangement.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, NumericError, UsageError
from .nn import MlpParams, adam_step, init_adam, init_mlp, mlp_backward, mlp_forward_cached

SCORE_CLAMP = 50.0
LOG_FLOOR = 1e-6
SIDES = ("input_side", "target_side")


@dataclass(frozen=True)
class FeatureSequence:
    """An ``L x D`` matrix of frame features."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"feature sequence must be 2-D, got shape {v.shape}")
        if v.shape[0] < 2:
            raise DegenerateInputError("a feature sequence needs at least two frames")
        if not np.all(np.isfinite(v)):
            raise NumericError("feature sequence contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MineConfig:
    batch_size: int = 256
    train_steps: int = 2000
    ema_decay: float = 0.99
    eval_batches: int = 32
    seed: int = 0
    hidden: tuple = (256, 256)
    activation: str = "elu"
    learning_rate: float = 1e-3
    curve_stride: int = 20
    standardize: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise UsageError("batch_size must be at least 2")
        if not 0.0 <= self.ema_decay < 1.0:
            raise UsageError("ema_decay must lie in [0, 1); 0 gives the plain batch estimator")
        if self.train_steps < 0 or self.eval_batches < 1:
            raise UsageError("train_steps must be >= 0 and eval_batches >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def replace(self, **changes) -> "MineConfig":
        return MineConfig(**{**self.__dict__, **changes})


@dataclass
class MIEstimate:
    value_nats: float
    layer_index: int
    side: str
    sample_id: str
    final_loss_curve: list = field(default_factory=list)
    clamp_events: int = 0

    def to_json(self) -> dict:
        return {
            "value_nats": self.value_nats,
            "layer_index": self.layer_index,
            "side": self.side,
            "sample_id": self.sample_id,
            "final_loss_curve": list(self.final_loss_curve),
            "clamp_events": self.clamp_events,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "MIEstimate":
        return cls(
            value_nats=float(data["value_nats"]),
            layer_index=int(data["layer_index"]),
            side=str(data["side"]),
            sample_id=str(data["sample_id"]),
            final_loss_curve=[float(v) for v in data.get("final_loss_curve", [])],
            clamp_events=int(data.get("clamp_events", 0)),
        )


@dataclass
class AveragedCurve:
    layers: list
    per_layer_mean: list
    n_samples: int
    log_values: list | None = None
    clamped: list | None = None

    def to_json(self) -> dict:
        return {
            "layers": list(self.layers),
            "per_layer_mean": list(self.per_layer_mean),
            "n_samples": self.n_samples,
            "log_values": None if self.log_values is None else list(self.log_values),
            "clamped": None if self.clamped is None else list(self.clamped),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "AveragedCurve":
        return cls(
            layers=[int(v) for v in data["layers"]],
            per_layer_mean=[float(v) for v in data["per_layer_mean"]],
            n_samples=int(data["n_samples"]),
            log_values=None if data.get("log_values") is None else [float(v) for v in data["log_values"]],
            clamped=None if data.get("clamped") is None else [bool(v) for v in data["clamped"]],
        )


# ---------------------------------------------------------------------------
# marginal sampling
# ---------------------------------------------------------------------------

def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Fisher-Yates shuffle followed by a deterministic fixed-point repair.

    One block of ``n - 1`` uniforms drives the shuffle (index ``i`` from the
    top swaps with ``floor(u * (i + 1))``). Leftover fixed points are then
    rotated among themselves, or, when only one remains, swapped with the
    next index, so the result never maps any index to itself.
    """
    if n < 2:
        raise DegenerateInputError("marginal shuffling needs at least two frames")
    draws = rng.random(n - 1)
    perm = list(range(n))
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(draws[step] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    fixed = [k for k in range(n) if perm[k] == k]
    if len(fixed) >= 2:
        for pos, k in enumerate(fixed):
            perm[k] = fixed[(pos + 1) % len(fixed)]
    elif fixed:
        f = fixed[0]
        other = (f + 1) % n
        perm[f], perm[other] = perm[other], perm[f]
    return np.asarray(perm, dtype=np.int64)


def shuffle_marginal(x: FeatureSequence, t: FeatureSequence, rng: np.random.Generator):
    """Re-pair frames of ``t`` with frames of ``x`` to sample the product of marginals.

    Returns ``(x_frames, t_frames_permuted, permutation)``.
    """
    if x.length != t.length:
        raise DimensionError(f"sequences differ in length: {x.length} vs {t.length}")
    perm = derangement(x.length, rng)
    return x.values, t.values[perm], perm


# ---------------------------------------------------------------------------
# objective and gradient
# ---------------------------------------------------------------------------

def _log_mean_exp(values: np.ndarray) -> float:
    top = float(np.max(values))
    return top + float(np.log(np.mean(np.exp(values - top))))


def dv_objective(joint_scores, marginal_scores) -> float:
    """``mean(joint) - log(mean(exp(marginal)))`` with a max-shifted log-sum-exp."""
    joint = np.asarray(joint_scores, dtype=np.float64).ravel()
    marginal = np.asarray(marginal_scores, dtype=np.float64).ravel()
    if joint.size == 0 or marginal.size == 0:
        raise UsageError("dv_objective needs non-empty score vectors")
    return float(np.mean(joint)) - _log_mean_exp(marginal)


@dataclass
class GradientInfo:
    objective: float
    clamp_events: int
    batch_mean_exp: float


def mine_gradient(joint_batch: np.ndarray, marginal_batch: np.ndarray, net: MlpParams,
                  ema_denominator: float | None, ema_decay: float = 0.99):
    """Bias-corrected batch gradient of the DV bound (ascent direction).

    The denominator ``E_B[exp(psi)]`` of the marginal term is replaced by an
    exponential moving average, updated before use as
    ``decay * ema + (1 - decay) * batch_mean``. ``ema_decay=0`` (or a ``None``
    ema on the first call) reproduces the plain batch estimator, which is the
    exact gradient of :func:`dv_objective` on this batch.

    Returns ``(grads, new_ema, info)``.
    """
    if ema_denominator is not None and not ema_denominator > 0:
        raise UsageError("ema_denominator must be positive")
    n_joint = joint_batch.shape[0]
    n_marg = marginal_batch.shape[0]
    scores, cache = mlp_forward_cached(net, np.concatenate([joint_batch, marginal_batch]))
    clipped = np.clip(scores, -SCORE_CLAMP, SCORE_CLAMP)
    inside = (clipped == scores).astype(np.float64)
    clamp_events = int(scores.size - inside.sum())
    s_joint, s_marg = clipped[:n_joint], clipped[n_joint:]

    e_marg = np.exp(s_marg)
    batch_mean = float(np.mean(e_marg))
    if not np.isfinite(batch_mean) or batch_mean <= 0.0:
        raise NumericError("marginal exp term is not finite after clamping",
                           batch_mean=batch_mean, max_score=float(np.max(s_marg)))
    if ema_denominator is None:
        new_ema = batch_mean
    else:
        new_ema = ema_decay * ema_denominator + (1.0 - ema_decay) * batch_mean

    upstream = np.empty(n_joint + n_marg)
    upstream[:n_joint] = 1.0 / n_joint
    upstream[n_joint:] = -e_marg / (n_marg * new_ema)
    grads = mlp_backward(net, cache, upstream * inside)
    objective = float(np.mean(s_joint)) - float(np.log(batch_mean))
    return grads, new_ema, GradientInfo(objective, clamp_events, batch_mean)


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def _standardize(values: np.ndarray) -> np.ndarray:
    centred = values - values.mean(axis=0)
    scale = centred.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return centred / scale


def _draw_pairs(xv, tv, batch_size, rng):
    n = xv.shape[0]
    idx = rng.choice(n, size=batch_size, replace=False) if batch_size < n else rng.permutation(n)
    xb, tb = xv[idx], tv[idx]
    perm = derangement(batch_size, rng)
    return np.concatenate([xb, tb], axis=1), np.concatenate([xb, tb[perm]], axis=1)


def estimate_mi_sample(x: FeatureSequence, t: FeatureSequence, cfg: MineConfig,
                       sample_id: str = "0", layer_index: int = 0,
                       side: str = "input_side") -> MIEstimate:
    """Train a fresh statistics network on one sample and return its MI estimate (nats).

    The reported value is the DV bound averaged over ``cfg.eval_batches``
    freshly drawn batches after training, not the best value seen during it.
    """
    if x.length != t.length:
        raise DimensionError(f"sequences differ in length: {x.length} vs {t.length}")
    if cfg.batch_size > x.length:
        raise UsageError(f"batch_size {cfg.batch_size} exceeds sequence length {x.length}")
    if side not in SIDES:
        raise UsageError(f"unknown side {side!r}")
    if layer_index < 0:
        raise UsageError("layer_index must be non-negative")

    xv, tv = x.values, t.values
    if cfg.standardize:
        xv, tv = _standardize(xv), _standardize(tv)

    rng = np.random.default_rng(cfg.seed)
    net = init_mlp((x.dim + t.dim, *cfg.hidden, 1), rng, cfg.activation)
    opt = init_adam(net, learning_rate=cfg.learning_rate)
    ema = None
    curve = []
    clamp_events = 0
    for step in range(cfg.train_steps):
        joint, marginal = _draw_pairs(xv, tv, cfg.batch_size, rng)
        grads, ema, info = mine_gradient(joint, marginal, net, ema, cfg.ema_decay)
        clamp_events += info.clamp_events
        if not np.isfinite(info.objective):
            raise NumericError(f"DV objective diverged at step {step}", history=curve)
        if step % cfg.curve_stride == 0 or step == cfg.train_steps - 1:
            curve.append(info.objective)
        ascent = grads.replace_arrays({k: -v for k, v in grads.to_dict().items()})
        try:
            net, opt = adam_step(net, ascent, opt)
        except NumericError as exc:
            raise NumericError(f"{exc} at step {step}", history=curve) from exc

    values = []
    for _ in range(cfg.eval_batches):
        joint, marginal = _draw_pairs(xv, tv, cfg.batch_size, rng)
        scores, _ = mlp_forward_cached(net, np.concatenate([joint, marginal]))
        clipped = np.clip(scores, -SCORE_CLAMP, SCORE_CLAMP)
        clamp_events += int(np.count_nonzero(clipped != scores))
        values.append(dv_objective(clipped[: len(joint)], clipped[len(joint):]))
    value = float(np.mean(values))
    if not np.isfinite(value):
        raise NumericError("MI estimate is not finite", history=curve)
    return MIEstimate(value, layer_index, side, str(sample_id), curve, clamp_events)


# ---------------------------------------------------------------------------
# averaging across samples
# ---------------------------------------------------------------------------

def average_mi(estimates: Mapping[int, Sequence]) -> AveragedCurve:
    """Per-layer arithmetic mean of per-sample estimates.

    ``estimates`` maps layer index to that layer's estimates (``MIEstimate``
    objects or plain floats); every layer must hold the same number.
    """
    if not estimates:
        raise UsageError("no estimates to average")
    layers = sorted(estimates)
    sizes = {len(estimates[k]) for k in layers}
    if len(sizes) != 1:
        raise UsageError(f"ragged layer groups: sizes {sorted(sizes)}")
    n = sizes.pop()
    if n < 1:
        raise UsageError("every layer group needs at least one estimate")
    means = []
    for k in layers:
        vals = [e.value_nats if isinstance(e, MIEstimate) else float(e) for e in estimates[k]]
        means.append(float(np.mean(vals)))
    return AveragedCurve(layers=layers, per_layer_mean=means, n_samples=n)


def log_transform(curve: AveragedCurve, floor: float = LOG_FLOOR) -> AveragedCurve:
    """Natural log of each layer mean, floored at ``floor``; floored entries are flagged."""
    logs, flags = [], []
    for m in curve.per_layer_mean:
        clamped = not m > floor
        logs.append(float(np.log(floor if clamped else m)))
        flags.append(clamped)
    return AveragedCurve(curve.layers, list(curve.per_layer_mean), curve.n_samples, logs, flags)
