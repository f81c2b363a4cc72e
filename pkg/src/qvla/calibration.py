"""Activation traces and the per-step, per-channel activation scale table.

The table holds ``scale[layer][t, j] = robust_peak(X'[:, j] at step t) / q_max``
where ``X'`` is the rotated layer input pooled over all tokens of all
calibration trajectories and the robust peak is a high percentile of
``|X'|``. A single-bucket table collapses the step axis to the mean of the
per-step peaks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor_store import Tensor

DEFAULT_PERCENTILE = 99.9
DEFAULT_STEPS = 8
DEFAULT_TRAJECTORIES = 10


def _check_p(p: float) -> None:
    if not 0 < p <= 100:
        raise ConfigError(f"percentile must lie in (0, 100], got {p}")


def robust_peak(samples, p: float = DEFAULT_PERCENTILE) -> float:
    """``p``-th percentile of ``|samples|`` with linear interpolation."""
    _check_p(p)
    a = np.abs(np.asarray(samples, dtype=np.float64)).reshape(-1)
    if a.size == 0:
        raise ConfigError("robust_peak of an empty sample set")
    return float(np.percentile(a, p, method="linear"))


def channel_peaks(x, p: float = DEFAULT_PERCENTILE) -> np.ndarray:
    """Per-column :func:`robust_peak` of a ``samples x channels`` array."""
    _check_p(p)
    x = np.abs(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError(f"channel_peaks needs a non-empty 2-D array, got shape {x.shape}")
    return np.percentile(x, p, axis=0, method="linear")


class TraceBuffer:
    """Rotated layer inputs keyed by ``(layer, step)``.

    Samples are kept signed; estimators take absolute values. Step-independent
    layers are stored once under step 0.
    """

    def __init__(self):
        self._chunks: dict[tuple[str, int], list[np.ndarray]] = {}
        self._width: dict[str, int] = {}

    def add(self, layer: str, step: int, x) -> None:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2:
            raise ConfigError(f"{layer}: trace chunk must be 2-D, got shape {x.shape}")
        width = self._width.setdefault(layer, x.shape[1])
        if x.shape[1] != width:
            raise ConfigError(f"{layer}: trace width {x.shape[1]} != {width}")
        self._chunks.setdefault((layer, int(step)), []).append(x)

    def merge(self, other: "TraceBuffer") -> "TraceBuffer":
        for (layer, step), chunks in other._chunks.items():
            for c in chunks:
                self.add(layer, step, c)
        return self

    @property
    def layers(self) -> list[str]:
        return sorted(self._width)

    def steps(self, layer: str) -> list[int]:
        return sorted(s for (name, s) in self._chunks if name == layer)

    def samples(self, layer: str, step: int) -> np.ndarray:
        key = (layer, int(step))
        if key not in self._chunks:
            raise ConfigError(f"no traces for layer {layer!r} at step {step}")
        chunks = self._chunks[key]
        return chunks[0] if len(chunks) == 1 else np.concatenate(chunks)

    def to_tensors(self) -> dict[str, Tensor]:
        out = {}
        for layer, step in sorted(self._chunks):
            name = f"trace/{layer}/step{step}"
            out[name] = Tensor.from_array(name, self.samples(layer, step))
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "TraceBuffer":
        buf = cls()
        for name in sorted(tensors):
            if not name.startswith("trace/"):
                continue
            layer, _, step = name[len("trace/") :].rpartition("/step")
            if not layer or not step.isdigit():
                raise ConfigError(f"malformed trace tensor name {name!r}")
            buf.add(layer, int(step), tensors[name].to_array())
        return buf


@dataclass
class ScaleTable:
    """``layer -> (T, C)`` float32 activation scales."""

    entries: dict[str, np.ndarray]
    T: int
    q_max: int
    percentile: float = DEFAULT_PERCENTILE
    kind: str = "per-step"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"scale table needs at least one step, got T={self.T}")
        clean = {}
        for layer, arr in self.entries.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.ndim != 2 or arr.shape[0] != self.T:
                raise ConfigError(f"{layer}: table entry of shape {arr.shape}, expected ({self.T}, C)")
            if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
                raise ConfigError(f"{layer}: table scales must be finite and positive")
            clean[layer] = arr
        self.entries = clean

    @property
    def layers(self) -> list[str]:
        return sorted(self.entries)

    def scales(self, layer: str, step: int) -> np.ndarray:
        if layer not in self.entries:
            raise ConfigError(f"scale table has no entry for layer {layer!r}")
        if not 0 <= int(step) < self.T:
            raise ConfigError(f"step {step} outside calibrated range [0, {self.T})")
        return self.entries[layer][int(step)]

    def nbytes(self, layer: str) -> int:
        return 4 * self.entries[layer].size if layer in self.entries else 0

    def header(self) -> dict:
        return {
            "T": self.T,
            "estimator": {"kind": "percentile", "p": self.percentile},
            "kind": self.kind,
            "meta": self.meta,
            "q_max": self.q_max,
        }

    def to_json(self) -> dict:
        doc = self.header()
        doc["layers"] = {
            layer: {str(t): [float(v) for v in self.entries[layer][t]] for t in range(self.T)}
            for layer in self.layers
        }
        return doc

    @classmethod
    def from_json(cls, doc) -> "ScaleTable":
        try:
            T = int(doc["T"])
            entries = {
                layer: np.array([steps[str(t)] for t in range(T)], dtype=np.float32)
                for layer, steps in doc["layers"].items()
            }
            return cls(entries, T, int(doc["q_max"]), float(doc["estimator"]["p"]),
                       doc.get("kind", "per-step"), doc.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed scale table document: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    def to_tensors(self) -> dict[str, Tensor]:
        out = {"actscale.json": Tensor.from_json("actscale.json", self.header())}
        for layer in self.layers:
            for t in range(self.T):
                name = f"actscale/{layer}/step{t}"
                out[name] = Tensor.from_array(name, self.entries[layer][t])
        return out

    @classmethod
    def from_tensors(cls, tensors) -> "ScaleTable":
        if "actscale.json" not in tensors:
            raise ConfigError("container holds no scale table")
        head = tensors["actscale.json"].to_json()
        T = int(head["T"])
        rows: dict[str, dict[int, np.ndarray]] = {}
        for name, t in tensors.items():
            if name.startswith("actscale/"):
                layer, _, step = name[len("actscale/") :].rpartition("/step")
                rows.setdefault(layer, {})[int(step)] = t.to_array()
        entries = {}
        for layer, steps in rows.items():
            if sorted(steps) != list(range(T)):
                raise ConfigError(f"{layer}: scale table steps {sorted(steps)} incomplete for T={T}")
            entries[layer] = np.stack([steps[s] for s in range(T)])
        return cls(entries, T, int(head["q_max"]), float(head["estimator"]["p"]),
                   head.get("kind", "per-step"), head.get("meta", {}))


def _peaks_to_scales(peaks: np.ndarray, q_max: int) -> np.ndarray:
    scales = peaks / q_max
    # zero-activity channels quantize to 0 under any scale
    scales[peaks == 0] = 1.0 / q_max
    return scales.astype(np.float32)


def _step_peaks(traces: TraceBuffer, layers, T: int, p: float) -> dict[str, np.ndarray]:
    layers = traces.layers if layers is None else list(layers)
    if not layers:
        raise ConfigError("no layers to calibrate")
    out = {}
    for layer in layers:
        out[layer] = np.stack([channel_peaks(traces.samples(layer, t), p) for t in range(T)])
    return out


def build_table(traces: TraceBuffer, q_max: int, T: int, p: float = DEFAULT_PERCENTILE,
                layers=None, meta=None) -> ScaleTable:
    """Per-step table: one scale per (layer, step, channel)."""
    peaks = _step_peaks(traces, layers, T, p)
    entries = {layer: _peaks_to_scales(pk, q_max) for layer, pk in peaks.items()}
    return ScaleTable(entries, T, q_max, p, "per-step", dict(meta or {}))


def single_bucket_table(traces: TraceBuffer, q_max: int, T: int, p: float = DEFAULT_PERCENTILE,
                        layers=None, meta=None) -> ScaleTable:
    """Mean over steps of the per-step peaks, replicated across all steps."""
    peaks = _step_peaks(traces, layers, T, p)
    entries = {}
    for layer, pk in peaks.items():
        bucket = pk.mean(axis=0)
        # identical steps must give the identical scale, not a rounded mean
        flat = np.all(pk == pk[:1], axis=0)
        bucket[flat] = pk[0, flat]
        entries[layer] = np.repeat(_peaks_to_scales(bucket, q_max)[None, :], T, axis=0)
    return ScaleTable(entries, T, q_max, p, "single-bucket", dict(meta or {}))


def quantization_mse(x, scales, q_max: int) -> float:
    """Sum over channels of the mean squared fake-quantization error."""
    from .quant import dequantize, quantize_symmetric

    x = np.asarray(x, dtype=np.float32)
    s = np.asarray(scales, dtype=np.float32)[None, :]
    err = dequantize(quantize_symmetric(x, s, q_max), s).astype(np.float64) - x
    return float(np.mean(err**2, axis=0).sum())


def constructed_drift_traces(
    layers,
    T: int = DEFAULT_STEPS,
    gain=None,
    channels: int = 64,
    tokens: int = 640,
    spike_fraction: float = 0.05,
    bulk: float = 0.01,
    seed: int = 0,
) -> TraceBuffer:
    """Traces whose per-channel peak magnitudes follow a known gain profile.

    Each channel holds a fixed fraction of spike samples at magnitude
    ``a_j * g(t)`` and a bulk of tiny values (at most ``bulk * min(a) * min(g)``)
    that quantize to zero under any calibrated scale. ``layers`` maps layer
    name to ``"adaln"`` (gain applied) or ``"plain"`` (gain ignored). The
    spike positions and signs are redrawn every step.
    """
    rng = np.random.default_rng(seed)
    g = np.linspace(1.0, 0.8, T) if gain is None else np.asarray(gain, dtype=np.float64)
    if g.shape != (T,) or np.any(g <= 0):
        raise ConfigError("gain profile must hold T positive values")
    buf = TraceBuffer()
    n_spike = max(1, int(round(spike_fraction * tokens)))
    for layer, kind in sorted(dict(layers).items()):
        if kind not in ("adaln", "plain"):
            raise ConfigError(f"{layer}: trace kind must be 'adaln' or 'plain', got {kind!r}")
        amp = rng.uniform(1.0, 4.0, channels)
        floor = bulk * amp.min() * g.min()
        plain_x = None
        for t in range(T):
            if kind == "plain" and plain_x is not None:
                buf.add(layer, t, plain_x)
                continue
            x = rng.uniform(-floor, floor, (tokens, channels))
            for j in range(channels):
                rows = rng.choice(tokens, n_spike, replace=False)
                mag = amp[j] * (g[t] if kind == "adaln" else 1.0)
                x[rows, j] = mag * rng.choice([-1.0, 1.0], n_spike)
            x = x.astype(np.float32)
            buf.add(layer, t, x)
            if kind == "plain":
                plain_x = x
    return buf


def capture_traces(model, inputs, T: int, plans=None, layers=None) -> TraceBuffer:
    """Run the FP32 toy model over every trajectory and record linear inputs.

    Args:
        model: :class:`~qvla.toy.ToyModel`.
        inputs: :class:`~qvla.toy.InputSet` of calibration trajectories.
        T: Euler step count.
        plans: optional ``layer -> RotationPlan``; recorded inputs are rotated
            by the layer's plan so they live in the quantization basis.
        layers: optional subset of layer ids to record.

    LLM-branch inputs do not depend on the step and are recorded under step 0.
    """
    from .rotation import apply_to_activation
    from .toy import forward_fp32

    wanted = None if layers is None else set(layers)
    plans = plans or {}
    buf = TraceBuffer()

    def hook(layer, step, x):
        if wanted is not None and layer not in wanted:
            return
        if layer in plans:
            x = apply_to_activation(x, plans[layer])
        buf.add(layer, 0 if step is None else step, x)

    for i in range(len(inputs)):
        forward_fp32(model, inputs.prompts[i], inputs.noise[i], T, hook=hook)
    return buf
