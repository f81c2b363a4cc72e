"""End-to-end quantization of a toy model: plans, traces, solvers, table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .calibration import (
    DEFAULT_PERCENTILE,
    DEFAULT_STEPS,
    DEFAULT_TRAJECTORIES,
    TraceBuffer,
    build_table,
    capture_traces,
    single_bucket_table,
)
from .errors import ConfigError
from .gptq import DEFAULT_BLOCK, DEFAULT_DAMPING, HessianAccumulator, gptq_quantize
from .package import QuantizedModel
from .quant import ActMode, QuantConfig, QuantizedLayer, rtn_quantize
from .rotation import RotationKind, apply_to_weight, build_plan, derive_plan
from .toy import InputSet, ToyModel

SOLVERS = ("gptq", "rtn")
TABLE_KINDS = ("per-step", "single-bucket")


@dataclass
class PipelineConfig:
    """Quantization settings; defaults follow the reference configuration."""

    rotation: str = "svd-hadamard"
    block_size: int = 64
    k_w: int = 4
    k_a: int = 4
    solver_llm: str = "gptq"
    solver_dit: str = "rtn"
    gptq_block: int = DEFAULT_BLOCK
    gptq_damp: float = DEFAULT_DAMPING
    percentile: float = DEFAULT_PERCENTILE
    steps: int = DEFAULT_STEPS
    n_calib: int = DEFAULT_TRAJECTORIES
    table: str = "per-step"

    def __post_init__(self):
        self.rotation = RotationKind.parse(self.rotation).value
        QuantConfig(self.k_w, self.k_a)
        for name in ("solver_llm", "solver_dit"):
            if getattr(self, name) not in SOLVERS:
                raise ConfigError(f"{name} must be one of {SOLVERS}, got {getattr(self, name)!r}")
        if self.table not in TABLE_KINDS:
            raise ConfigError(f"table must be one of {TABLE_KINDS}, got {self.table!r}")
        for name in ("block_size", "gptq_block", "steps", "n_calib"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.percentile <= 100:
            raise ConfigError(f"percentile must lie in (0, 100], got {self.percentile}")
        if self.gptq_damp < 0:
            raise ConfigError("gptq_damp must be non-negative")

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(self.k_w, self.k_a)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        if not isinstance(doc, dict) or set(doc) - known:
            extra = sorted(set(doc) - known) if isinstance(doc, dict) else doc
            raise ConfigError(f"unknown pipeline config fields: {extra}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None


def check_dims(model: ToyModel, cfg: PipelineConfig) -> None:
    kind = RotationKind.parse(cfg.rotation)
    if kind is RotationKind.IDENTITY:
        return
    for info in model.spec.layer_graph():
        if info.c_in % cfg.block_size:
            raise ConfigError(
                f"block size {cfg.block_size} does not divide {info.id} input width {info.c_in}"
            )


def build_plans(model: ToyModel, kind, block_size: int, base: dict | None = None) -> dict:
    """One rotation plan per linear layer.

    ``base`` may hold SVD plans for the same weights; SVD-bearing kinds are
    then derived from them instead of recomputed.
    """
    kind = RotationKind.parse(kind)
    plans = {}
    for info in model.spec.layer_graph():
        if base is not None and info.id in base and base[info.id].block_size == block_size:
            plans[info.id] = derive_plan(base[info.id], kind)
        else:
            plans[info.id] = build_plan(model.weight(info.id), kind, block_size, label=info.id)
    return plans


def calibration_subset(inputs: InputSet, n: int) -> InputSet:
    if n > len(inputs):
        raise ConfigError(f"asked for {n} calibration trajectories, model provides {len(inputs)}")
    return InputSet(inputs.prompts[:n], inputs.noise[:n])


def _solve(w_rot, cfg: PipelineConfig, solver: str, samples) -> tuple[np.ndarray, np.ndarray]:
    q_max = cfg.quant.q_max_w
    if solver == "rtn":
        return rtn_quantize(w_rot, q_max)
    acc = HessianAccumulator(w_rot.shape[0])
    for x in samples:
        acc.accumulate(x)
    return gptq_quantize(w_rot, acc, q_max, cfg.gptq_block, cfg.gptq_damp)


def quantize_model(
    model: ToyModel,
    calib: InputSet,
    cfg: PipelineConfig,
    plans: dict | None = None,
    traces: TraceBuffer | None = None,
) -> QuantizedModel:
    """Rotate, calibrate and quantize every linear layer of ``model``.

    LLM layers use per-token activation scales; DiT layers use the scale
    table. GPTQ Hessians are accumulated from the rotated calibration inputs.
    """
    check_dims(model, cfg)
    if plans is None:
        plans = build_plans(model, cfg.rotation, cfg.block_size)
    if traces is None:
        traces = capture_traces(model, calibration_subset(calib, cfg.n_calib), cfg.steps, plans)
    qcfg = cfg.quant
    graph = model.spec.layer_graph()
    dit = [i.id for i in graph if i.branch == "dit"]
    make_table = build_table if cfg.table == "per-step" else single_bucket_table
    table_meta = {"block_size": cfg.block_size, "rotation": cfg.rotation}
    table = make_table(traces, qcfg.q_max_a, cfg.steps, cfg.percentile, dit, table_meta) if dit else None
    layers = {}
    for info in graph:
        plan = plans[info.id]
        w_rot = apply_to_weight(model.weight(info.id), plan)
        if info.branch == "llm":
            samples = [traces.samples(info.id, 0)]
            solver, mode = cfg.solver_llm, ActMode.PER_TOKEN
        else:
            samples = [traces.samples(info.id, t) for t in range(cfg.steps)]
            solver, mode = cfg.solver_dit, ActMode.PER_STEP
        ints, scales = _solve(w_rot, cfg, solver, samples)
        layers[info.id] = QuantizedLayer(info.id, ints, scales, model.bias(info.id), plan, mode, qcfg)
    norms = {k: v for k, v in model.params.items() if k.startswith("norm/")}
    return QuantizedModel(model.spec, layers, norms, table, {"pipeline": cfg.to_json()})


def output_nmse(reference: list, candidate: list) -> float:
    """``sum ||y_hat - y||^2 / sum ||y||^2`` over trajectories."""
    num = sum(float(np.sum((np.asarray(c, np.float64) - r) ** 2)) for r, c in zip(reference, candidate))
    den = sum(float(np.sum(np.asarray(r, np.float64) ** 2)) for r in reference)
    if den == 0:
        return 0.0 if num == 0 else float("inf")
    return num / den
