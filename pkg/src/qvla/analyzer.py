"""Quantization-quality metrics and the JSON report.

* :func:`layer_error` - weight-only relative output error, W4A4 output nMSE
  and the A4 scale ceiling of one layer under one rotation/solver variant.
* :func:`magnitude_pipeline` - magnitude statistics of ``|X R|`` and of the
  rotated weight rows along a sequence of rotation kinds.
* :func:`step_gap_report` - per-(layer, step) activation quantization MSE
  under a per-step table and a single-bucket table.
* :func:`emit_report` - one deterministic JSON document.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .calibration import ScaleTable, TraceBuffer, quantization_mse
from .errors import ConfigError
from .gptq import DEFAULT_BLOCK, DEFAULT_DAMPING, HessianAccumulator, gptq_quantize
from .quant import QuantConfig, activation_scales_per_token, dequantize, quantize_symmetric, rtn_quantize
from .rotation import RotationKind, RotationPlan, apply_to_activation, apply_to_weight, build_plan

REPORT_SCHEMA = 1
PIPELINE_KINDS = ("identity", "permute", "svd", "svd-hadamard")
SOLVERS = ("none", "rtn", "gptq")
CEILING_PERCENTILE = 99.0


@dataclass(frozen=True)
class LayerErrorRecord:
    layer_id: str
    rotation: str
    solver: str
    rel_output_error: float
    nmse: float
    a4_ceiling: float

    @property
    def variant(self) -> str:
        return f"{self.rotation}/{self.solver}"

    def to_json(self) -> dict:
        return {
            "a4_ceiling": self.a4_ceiling,
            "layer": self.layer_id,
            "nmse": self.nmse,
            "rel_output_error": self.rel_output_error,
            "rotation": self.rotation,
            "solver": self.solver,
        }


def a4_ceiling(x_rot) -> float:
    """99th percentile over tokens of the per-token max ``|X R|``."""
    row_max = np.abs(np.asarray(x_rot, dtype=np.float64)).max(axis=1)
    return float(np.percentile(row_max, CEILING_PERCENTILE, method="linear"))


def layer_error(
    x,
    w,
    rotation="svd-hadamard",
    solver: str = "rtn",
    config: QuantConfig | None = None,
    block_size: int = 64,
    plan: RotationPlan | None = None,
    calib_x=None,
    layer_id: str = "",
    gptq_block: int = DEFAULT_BLOCK,
    gptq_damp: float = DEFAULT_DAMPING,
) -> LayerErrorRecord:
    """Evaluate one layer variant on activations ``x``.

    Activations are fake-quantized with per-token scales. ``solver="none"``
    keeps both operands in full precision. GPTQ Hessians come from
    ``calib_x`` (default ``x``) in the rotated basis.
    """
    if solver not in SOLVERS:
        raise ConfigError(f"solver must be one of {SOLVERS}, got {solver!r}")
    config = config or QuantConfig()
    kind = RotationKind.parse(rotation)
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigError(f"activation {x.shape} and weight {w.shape} are incompatible")
    if plan is None:
        plan = build_plan(w, kind, block_size, label=layer_id)
    elif plan.kind is not kind:
        raise ConfigError(f"plan kind {plan.kind.value} does not match variant {kind.value}")
    x_rot = apply_to_activation(x, plan)
    w_rot = apply_to_weight(w, plan)
    y = x.astype(np.float64) @ w.astype(np.float64)
    ceiling = a4_ceiling(x_rot)
    if solver == "none":
        return LayerErrorRecord(layer_id, kind.value, solver, 0.0, 0.0, ceiling)
    if solver == "rtn":
        ints, scales = rtn_quantize(w_rot, config.q_max_w)
    else:
        acc = HessianAccumulator(w.shape[0]).accumulate(
            apply_to_activation(x if calib_x is None else calib_x, plan))
        ints, scales = gptq_quantize(w_rot, acc, config.q_max_w, gptq_block, gptq_damp)
    w_hat = dequantize(ints, scales[None, :]).astype(np.float64)
    x_scales = activation_scales_per_token(x_rot, config.q_max_a)[:, None]
    x_hat = dequantize(quantize_symmetric(x_rot, x_scales, config.q_max_a), x_scales).astype(np.float64)
    y_norm2 = float(np.sum(y**2))
    if y_norm2 == 0:
        raise ConfigError(f"{layer_id}: reference output is identically zero")
    rel = float(np.linalg.norm(x_rot.astype(np.float64) @ w_hat - y) / math.sqrt(y_norm2))
    nmse = float(np.sum((x_hat @ w_hat - y) ** 2) / y_norm2)
    return LayerErrorRecord(layer_id, kind.value, solver, rel, nmse, ceiling)


@dataclass(frozen=True)
class DistributionSurface:
    kind: str
    channel_max: np.ndarray
    token_max: np.ndarray
    row_norms: np.ndarray

    @property
    def peak(self) -> float:
        return float(self.channel_max.max())

    @property
    def channel_ratio(self) -> float:
        med = float(np.median(self.channel_max))
        return self.peak / med if med > 0 else math.inf

    @property
    def row_norm_ratio(self) -> float:
        med = float(np.median(self.row_norms))
        return float(self.row_norms.max()) / med if med > 0 else math.inf

    @property
    def row_norm_std(self) -> float:
        return float(np.std(self.row_norms))

    def summary(self) -> dict:
        return {
            "channel_ratio": self.channel_ratio,
            "kind": self.kind,
            "peak": self.peak,
            "row_norm_ratio": self.row_norm_ratio,
            "row_norm_std": self.row_norm_std,
        }


def magnitude_pipeline(x, w, kinds=PIPELINE_KINDS, block_size: int = 64, plans=None) -> list:
    """One :class:`DistributionSurface` per rotation kind, in the given order."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    out = []
    for k in kinds:
        kind = RotationKind.parse(k)
        plan = (plans or {}).get(kind.value) or build_plan(w, kind, block_size)
        xr = np.abs(apply_to_activation(x, plan))
        wr = apply_to_weight(w, plan).astype(np.float64)
        out.append(DistributionSurface(kind.value, xr.max(axis=0), xr.max(axis=1),
                                       np.linalg.norm(wr, axis=1)))
    return out


def peaks_non_increasing(surfaces, rtol: float = 0.0) -> bool:
    peaks = [s.peak for s in surfaces]
    return all(b <= a * (1 + rtol) for a, b in zip(peaks, peaks[1:]))


def step_gap_report(traces: TraceBuffer, per_step: ScaleTable, bucket: ScaleTable, layers=None) -> dict:
    """Activation quantization MSE per (layer, step) under both tables.

    ``gap = mse_bucket - mse_per_step``; ``rel_gap`` divides by the per-step
    MSE. The mean gap is taken over all (layer, step) rows.
    """
    if per_step.T != bucket.T or per_step.q_max != bucket.q_max:
        raise ConfigError("per-step and bucket tables disagree on T or q_max")
    layers = sorted(per_step.layers if layers is None else layers)
    rows = []
    for layer in layers:
        if layer not in bucket.entries:
            raise ConfigError(f"bucket table lacks layer {layer!r}")
        for t in range(per_step.T):
            x = traces.samples(layer, t)
            if x.shape[1] != per_step.entries[layer].shape[1]:
                raise ConfigError(f"{layer}: traces have {x.shape[1]} channels, table "
                                  f"{per_step.entries[layer].shape[1]}")
            a = quantization_mse(x, per_step.scales(layer, t), per_step.q_max)
            b = quantization_mse(x, bucket.scales(layer, t), bucket.q_max)
            rows.append({
                "gap": b - a,
                "layer": layer,
                "mse_bucket": b,
                "mse_per_step": a,
                "rel_gap": (b - a) / a if a > 0 else (0.0 if b == 0 else math.inf),
                "step": t,
            })
    mean_gap = float(np.mean([r["gap"] for r in rows])) if rows else 0.0
    mean_rel = float(np.mean([r["rel_gap"] for r in rows])) if rows else 0.0
    return {"mean_gap": mean_gap, "mean_rel_gap": mean_rel, "rows": rows}


def _round(obj, digits: int = 9):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return str(obj)
        return float(f"{obj:.{digits}g}")
    if isinstance(obj, (np.floating,)):
        return _round(float(obj), digits)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    return obj


REFERENCE_VALUES = {
    "footprint_savings_ratio": 0.713,
    "step_gap_mean_rel": 0.025,
    "note": "values measured on full-size models; context only, not targets",
}


def emit_report(records=(), surfaces=None, gaps=None, manifest=None, config=None, extra=None) -> str:
    """Deterministic JSON report; floats carry 9 significant digits.

    Args:
        records: iterable of :class:`LayerErrorRecord`.
        surfaces: ``layer -> list of DistributionSurface``.
        gaps: output of :func:`step_gap_report`.
        manifest: a PackageManifest (or its JSON form).
        config: JSON-ready configuration echo.
        extra: additional JSON-ready sections.
    """
    surfaces = surfaces or {}
    footprint = manifest.to_json() if hasattr(manifest, "to_json") else (manifest or {})
    layer_rows = sorted((r.to_json() for r in records),
                        key=lambda r: (r["layer"], r["rotation"], r["solver"]))
    doc = {
        "config": config or {},
        "footprint": footprint,
        "layer_errors": layer_rows,
        "magnitude_pipeline": {
            layer: {
                "monotone": peaks_non_increasing(s),
                "stages": [x.summary() for x in s],
            }
            for layer, s in sorted(surfaces.items())
        },
        "reference": REFERENCE_VALUES,
        "schema_version": REPORT_SCHEMA,
        "step_gaps": gaps or {"mean_gap": 0.0, "mean_rel_gap": 0.0, "rows": []},
    }
    if footprint:
        doc["savings_ratio"] = footprint.get("savings_ratio", 0.0)
    for key, value in sorted((extra or {}).items()):
        doc[key] = value
    return json.dumps(_round(doc), sort_keys=True, indent=1) + "\n"


def write_csv(report: str | dict, directory) -> list[str]:
    """Flat CSV files (one per metric table) next to the JSON report."""
    doc = json.loads(report) if isinstance(report, str) else report
    os.makedirs(directory, exist_ok=True)
    written = []

    def dump(name, rows, columns):
        path = os.path.join(directory, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([row.get(c, "") for c in columns])
        written.append(path)

    dump("layer_errors.csv", doc.get("layer_errors", []),
         ["layer", "rotation", "solver", "rel_output_error", "nmse", "a4_ceiling"])
    dump("step_gaps.csv", doc.get("step_gaps", {}).get("rows", []),
         ["layer", "step", "mse_per_step", "mse_bucket", "gap", "rel_gap"])
    stages = [dict(stage, layer=layer) for layer, entry in doc.get("magnitude_pipeline", {}).items()
              for stage in entry["stages"]]
    dump("magnitude_pipeline.csv", stages,
         ["layer", "kind", "peak", "channel_ratio", "row_norm_ratio", "row_norm_std"])
    return written
