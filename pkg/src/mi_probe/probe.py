"""Layer-wise mutual-information probing and curve-shape classification."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, PartialProbeError, UsageError
from .mine import (
    SIDES,
    FeatureSequence,
    MIEstimate,
    MineConfig,
    average_mi,
    estimate_mi_sample,
    log_transform,
    AveragedCurve,
)
from .models import ModelContainer, SyntheticDataset, config_hash, decoder_forward, encoder_forward
from .seeding import derive_seed

log = logging.getLogger(__name__)

TREND_LABELS = ("reconstruction_shaped", "monotone_decreasing", "other")
MAX_FAILED_FRACTION = 0.10
TAP_CONVENTION = "per_block"


@dataclass(frozen=True)
class ProbeConfig:
    n_samples: int = 100
    sides: tuple = ("input_side",)
    mine: MineConfig = field(default_factory=MineConfig)
    taps: tuple | None = None
    noise_band: float = 0.1
    seed: int = 0
    include_decoder: bool = True

    def __post_init__(self):
        if self.n_samples < 1:
            raise UsageError("n_samples must be at least 1")
        sides = tuple(self.sides)
        if not sides or any(s not in SIDES for s in sides):
            raise UsageError(f"sides must be a non-empty subset of {SIDES}")
        object.__setattr__(self, "sides", tuple(s for s in SIDES if s in sides))
        if self.taps is not None:
            object.__setattr__(self, "taps", tuple(sorted({0, *map(int, self.taps)})))

    def to_json(self) -> dict:
        mine = dict(self.mine.__dict__)
        mine["hidden"] = list(mine["hidden"])
        return {
            "n_samples": self.n_samples,
            "sides": list(self.sides),
            "mine": mine,
            "taps": None if self.taps is None else list(self.taps),
            "noise_band": self.noise_band,
            "seed": self.seed,
            "include_decoder": self.include_decoder,
        }

    @classmethod
    def from_json(cls, data) -> "ProbeConfig":
        data = dict(data)
        mine = MineConfig(**{**data.pop("mine", {})})
        taps = data.pop("taps", None)
        return cls(mine=mine, taps=None if taps is None else tuple(taps), **data)


# ---------------------------------------------------------------------------
# trend classification
# ---------------------------------------------------------------------------

def smooth3(values) -> np.ndarray:
    """Centred 3-point moving average; the two ends average over the points they have."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return v.copy()
    sums = np.convolve(v, np.ones(3), mode="same")
    counts = np.convolve(np.ones_like(v), np.ones(3), mode="same")
    return sums / counts


def classify_trend(log_curve, noise_band: float = 0.1) -> str:
    """Label an MI-vs-depth curve.

    After smoothing: ``reconstruction_shaped`` when the minimum is interior
    and both ends sit more than ``noise_band`` above it (checked first);
    ``monotone_decreasing`` when no step rises by more than ``noise_band``
    and the curve drops by more than ``noise_band`` overall; else ``other``.
    """
    v = np.asarray(log_curve, dtype=np.float64)
    if v.size < 3:
        return "other"
    s = smooth3(v)
    k = int(np.argmin(s))
    if 0 < k < s.size - 1 and s[0] - s[k] > noise_band and s[-1] - s[k] > noise_band:
        return "reconstruction_shaped"
    if np.all(np.diff(s) <= noise_band) and s[0] - s[-1] > noise_band:
        return "monotone_decreasing"
    return "other"


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class LayerProbeReport:
    curves: dict
    estimates: list
    trend_labels: dict
    config_hash: str
    layers: list
    noise_band: float
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def clamped_layers(self, side: str) -> list:
        curve = self.curves[side]
        return [layer for layer, flag in zip(curve.layers, curve.clamped or []) if flag]

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "layers": list(self.layers),
            "noise_band": self.noise_band,
            "tap_convention": TAP_CONVENTION,
            "log_base": "e",
            "curves": {side: c.to_json() for side, c in sorted(self.curves.items())},
            "trend_labels": dict(sorted(self.trend_labels.items())),
            "clamped_layers": {side: self.clamped_layers(side) for side in sorted(self.curves)},
            "estimates": [e.to_json() for e in self.estimates],
            "failures": list(self.failures),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, data) -> "LayerProbeReport":
        return cls(
            curves={side: AveragedCurve.from_json(c) for side, c in data["curves"].items()},
            estimates=[MIEstimate.from_json(e) for e in data.get("estimates", [])],
            trend_labels=dict(data["trend_labels"]),
            config_hash=data["config_hash"],
            layers=list(data["layers"]),
            noise_band=float(data["noise_band"]),
            failures=list(data.get("failures", [])),
            meta=dict(data.get("meta", {})),
        )


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------

def _run_item(item):
    key, x, t, mine_cfg = item
    sample_id, layer, side = key
    try:
        return key, estimate_mi_sample(FeatureSequence(x), FeatureSequence(t), mine_cfg,
                                       sample_id=sample_id, layer_index=layer, side=side), None
    except NumericError as exc:
        return key, None, str(exc)


def decoder_tap_points(container: ModelContainer) -> tuple:
    """Layer indices given to decoder blocks: they continue the encoder's block numbering."""
    n_enc = len(container.stack.layers)
    return tuple(n_enc + k + 1 for k in range(len(container.head.decoder)))


def work_items(container: ModelContainer, data: SyntheticDataset, cfg: ProbeConfig):
    """Every ``(sample, layer, side)`` estimation job, each with its own derived seed.

    Samples whose forward pass is non-finite come back as failure records.
    """
    stack = container.stack
    dec_taps = decoder_tap_points(container) if cfg.include_decoder else ()
    available = set(stack.tap_points) | set(dec_taps)
    if 0 not in available:
        raise UsageError("the model must expose tap 0 (projected input) for probing")
    layers = sorted(available if cfg.taps is None else set(cfg.taps))
    missing = sorted(set(layers) - available)
    if missing:
        raise UsageError(f"taps {missing} are not exposed by the model (available: {sorted(available)})")
    items, failures = [], []
    for s in range(cfg.n_samples):
        sample_id = f"{s:05d}"
        try:
            enc_out, taps = encoder_forward(stack, FeatureSequence(data.inputs[s]))
            by_layer = dict(zip(stack.tap_points, taps))
            if dec_taps and set(dec_taps) & set(layers):
                by_layer.update(zip(dec_taps, decoder_forward(container.head, enc_out)))
        except NumericError as exc:
            failures.extend({"sample_id": sample_id, "layer": layer, "side": side, "error": str(exc)}
                            for side in cfg.sides for layer in layers)
            continue
        x = by_layer[0].values
        target = data.target_features(s)
        for side in cfg.sides:
            for layer in layers:
                t_feat = by_layer[layer].values
                a, b = (x, t_feat) if side == "input_side" else (t_feat, target)
                seed = derive_seed(cfg.seed, f"mine/{sample_id}/{layer}/{side}")
                items.append(((sample_id, layer, side), a, b, cfg.mine.replace(seed=seed)))
    return layers, items, failures


def probe_layers(container: ModelContainer, data: SyntheticDataset, cfg: ProbeConfig,
                 jobs: int = 1, meta: dict | None = None) -> LayerProbeReport:
    """Estimate MI at every tapped layer for the first ``cfg.n_samples`` samples.

    Input-side pairs the projected input (tap 0) with each tap; target-side
    pairs each tap with the frame-level target. Decoder blocks, when the head
    has them and ``cfg.include_decoder`` is set, extend the curve. Samples
    whose estimation fails at any layer are dropped from the averages; when
    10% or more fail, a :class:`PartialProbeError` carrying the partial
    report is raised.
    """
    if data.dim != container.stack.input_dim:
        raise UsageError(f"dataset width {data.dim} != model input width {container.stack.input_dim}")
    if cfg.n_samples > data.n_samples:
        raise UsageError(f"n_samples {cfg.n_samples} exceeds dataset size {data.n_samples}")
    if cfg.mine.batch_size > data.length:
        raise UsageError(f"MINE batch_size {cfg.mine.batch_size} exceeds sequence length {data.length}")
    layers, items, failures = work_items(container, data, cfg)
    log.info("probing %d layers x %d samples x %d sides (%d estimates, jobs=%d)",
             len(layers), cfg.n_samples, len(cfg.sides), len(items), jobs)

    results = {}
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_item, items, chunksize=max(1, len(items) // (4 * jobs))))
    else:
        outcomes = [_run_item(item) for item in items]
    for key, est, err in outcomes:
        if est is None:
            failures.append({"sample_id": key[0], "layer": key[1], "side": key[2], "error": err})
        else:
            results[key] = est

    failed_samples = sorted({f["sample_id"] for f in failures})
    kept = [f"{s:05d}" for s in range(cfg.n_samples) if f"{s:05d}" not in failed_samples]
    estimates = [results[k] for k in sorted(results)]
    curves, labels = {}, {}
    if kept:
        for side in cfg.sides:
            grouped = {layer: [results[(sid, layer, side)] for sid in kept] for layer in layers}
            curve = log_transform(average_mi(grouped))
            curves[side] = curve
            labels[side] = classify_trend(curve.log_values, cfg.noise_band)

    report = LayerProbeReport(
        curves=curves,
        estimates=estimates,
        trend_labels=labels,
        config_hash=config_hash({"model": container.meta.get("config_hash", ""), "probe": cfg.to_json()}),
        layers=layers,
        noise_band=cfg.noise_band,
        failures=failures,
        meta={
            "n_requested": cfg.n_samples,
            "n_failed_samples": len(failed_samples),
            "feature_normalisation": "per-dimension standardisation within each sample",
            "x_definition": "tap 0 (projected input)",
            **(meta or {}),
        },
    )
    if len(failed_samples) >= MAX_FAILED_FRACTION * cfg.n_samples and failed_samples:
        raise PartialProbeError(
            f"{len(failed_samples)} of {cfg.n_samples} samples failed MI estimation", report=report)
    return report


def default_jobs() -> int:
    return max(1, os.cpu_count() or 1)
