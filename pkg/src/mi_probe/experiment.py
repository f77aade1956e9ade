"""End-to-end experiment specs: generate data, train, probe, write artifacts."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import PartialProbeError, UsageError
from .mine import MineConfig
from .models import (
    DataConfig,
    ModelConfig,
    ModelContainer,
    TrainConfig,
    config_hash,
    gen_synthetic_dataset,
    init_model,
    save_model,
    train_task,
)
from .probe import ProbeConfig, probe_layers
from .report import write_report_artifacts
from .seeding import derive_seed

log = logging.getLogger(__name__)

MODEL_FILE = "model.mipm"
ARTIFACTS = (MODEL_FILE, "report.json", "curves.csv", "curves.svg")
FAILED_MARKER = "FAILED"
SEED_ROLES = ("data", "model", "train", "probe")
VARIANTS = ("reconstruction", "frame_classification", "decoder_seq2seq")

_SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")

# Desk-scale probe: a smaller statistics network and fewer samples than the
# estimator defaults, so a full run fits in minutes on one core.
DESK_MINE = MineConfig(batch_size=128, train_steps=400, eval_batches=8, hidden=(64, 64))
DESK_PROBE = ProbeConfig(n_samples=16, sides=("input_side",), mine=DESK_MINE)
DESK_TRAIN = TrainConfig(steps=800)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    task: str
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    output_dir: str = "runs"
    master_seed: int = 0

    def __post_init__(self):
        if not self.name or not _SAFE_NAME.match(self.name):
            raise UsageError(f"experiment name {self.name!r} must be non-empty and use only [A-Za-z0-9._-]")
        if self.data.task != self.task:
            object.__setattr__(self, "data", DataConfig(**{**self.data.__dict__, "task": self.task}))
        self.data.validate()
        self.model.validate()
        self.train.validate()
        if self.model.input_dim != self.data.dim:
            raise UsageError(f"model.input_dim {self.model.input_dim} != data.dim {self.data.dim}")
        if self.task == "reconstruction" and self.model.head != "reconstruction":
            raise UsageError(f"task reconstruction needs head 'reconstruction', got {self.model.head!r}")
        if self.task == "classification" and self.model.head == "reconstruction":
            raise UsageError("task classification needs a classification head")
        if self.task == "classification" and self.model.class_count != self.data.class_count:
            raise UsageError("model.class_count must equal data.class_count")

    def seed(self, role: str) -> int:
        if role not in SEED_ROLES:
            raise UsageError(f"unknown seed role {role!r}")
        return derive_seed(self.master_seed, role)

    @property
    def out_path(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "data": dict(self.data.__dict__),
            "model": self.model.to_json(),
            "train": dict(self.train.__dict__),
            "probe": self.probe.to_json(),
        }

    def hash(self) -> str:
        """Config hash over everything that affects results (not the output location)."""
        body = self.to_json()
        body.pop("output_dir")
        return config_hash(body)

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown experiment fields: {sorted(unknown)}")
        try:
            return cls(
                name=data["name"],
                task=data["task"],
                data=_build(DataConfig, {**data.get("data", {}), "task": data["task"]}),
                model=ModelConfig.from_json(_checked(ModelConfig, data.get("model", {}))),
                train=_build(TrainConfig, data.get("train", {})),
                probe=ProbeConfig.from_json(_checked(ProbeConfig, data.get("probe", {}))),
                output_dir=str(data.get("output_dir", "runs")),
                master_seed=int(data.get("master_seed", 0)),
            )
        except KeyError as exc:
            raise UsageError(f"experiment config is missing {exc}") from None
        except TypeError as exc:
            raise UsageError(f"bad experiment config: {exc}") from None


def _checked(cls, values: dict) -> dict:
    unknown = set(values) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return dict(values)


def _build(cls, values: dict):
    return cls(**_checked(cls, values))


def preset(variant: str, master_seed: int = 0, output_dir: str = "runs") -> ExperimentSpec:
    """Desk-scale spec for one of the three model variants.

    The reconstruction model uses a ``D/2`` bottleneck; the classification
    models keep the default width.
    """
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    task = "reconstruction" if variant == "reconstruction" else "classification"
    data = DataConfig(task=task)
    width = data.dim // 2 if task == "reconstruction" else ModelConfig.width
    return ExperimentSpec(
        name=f"{variant}-seed{master_seed}",
        task=task,
        data=data,
        model=ModelConfig(head=variant, input_dim=data.dim, width=width, class_count=data.class_count),
        train=DESK_TRAIN,
        probe=DESK_PROBE,
        output_dir=output_dir,
        master_seed=master_seed,
    )


def apply_overrides(raw: dict, overrides) -> dict:
    """Set ``dotted.path=value`` pairs on a JSON config dict; values parse as JSON when they can."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override {item!r} is not of the form dotted.path=value")
        path, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        keys = path.split(".")
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise UsageError(f"override path {path!r} crosses a non-object field")
        node[keys[-1]] = value
    return raw


def load_spec(path, overrides=(), seed: int | None = None) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["master_seed"] = seed
    return ExperimentSpec.from_json(raw)


@dataclass
class RunResult:
    spec: ExperimentSpec
    report: object
    history: list
    paths: dict
    timings: dict


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> RunResult:
    """Generate, train, probe and write the four artifacts under ``spec.out_path``.

    On any failure a ``FAILED`` marker describing the stage is written next
    to whatever artifacts already exist, and the error is re-raised.
    """
    out = spec.out_path
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    chash = spec.hash()
    timings, stage = {}, "data"
    try:
        t0 = time.perf_counter()
        data = gen_synthetic_dataset(spec.data, spec.seed("data"))
        stage = "train"
        stack, head = init_model(spec.model, spec.seed("model"))
        train_cfg = TrainConfig(**{**spec.train.__dict__, "seed": spec.seed("train")})
        trained = train_task(stack, head, data, train_cfg)
        timings["train_s"] = time.perf_counter() - t0
        log.info("%s: trained %d steps, final epoch loss %.5f", spec.name, train_cfg.steps,
                 trained.history[-1] if trained.history else float("nan"))
        meta = {"config_hash": chash, "experiment": spec.name, "loss_history": trained.history}
        container = ModelContainer(spec.model, trained.stack, trained.head, meta)
        save_model(out / MODEL_FILE, container)

        stage = "probe"
        t1 = time.perf_counter()
        probe_cfg = ProbeConfig(**{**spec.probe.__dict__, "seed": spec.seed("probe")})
        run_meta = {"experiment": spec.name, "experiment_hash": chash, "head": spec.model.head,
                    "master_seed": spec.master_seed}
        try:
            report = probe_layers(container, data, probe_cfg, jobs=jobs, meta=run_meta)
        except PartialProbeError as exc:
            if exc.report is not None:
                write_report_artifacts(exc.report, out, spec.name)
            raise
        timings["probe_s"] = time.perf_counter() - t1
        stage = "report"
        paths = write_report_artifacts(report, out, spec.name)
    except Exception as exc:
        marker.write_text(f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise
    paths["model"] = out / MODEL_FILE
    return RunResult(spec, report, trained.history, paths, timings)
