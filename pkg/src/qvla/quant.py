"""Symmetric uniform quantization and the fake low-bit linear layer.

For bit-width ``k`` the integer range is ``[-q_max, q_max]`` with
``q_max = 2**(k-1) - 1``; ``-2**(k-1)`` is never produced. Rounding is
round-half-to-even. Weight scales are per output channel, LLM activation
scales per token (computed on the fly) and DiT activation scales come from
a per-step, per-channel table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .rotation import RotationPlan, apply_to_activation, apply_to_weight
from .tensor_store import I4_MAX, Tensor

MIN_BITS = 2
MAX_BITS = 16


def q_max_for(bits: int) -> int:
    if not isinstance(bits, (int, np.integer)) or not MIN_BITS <= bits <= MAX_BITS:
        raise ConfigError(f"bit-width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return 2 ** (int(bits) - 1) - 1


@dataclass(frozen=True)
class QuantConfig:
    """Weight and activation bit-widths."""

    k_w: int = 4
    k_a: int = 4

    def __post_init__(self):
        q_max_for(self.k_w)
        q_max_for(self.k_a)

    @property
    def q_max_w(self) -> int:
        return q_max_for(self.k_w)

    @property
    def q_max_a(self) -> int:
        return q_max_for(self.k_a)

    def to_json(self) -> dict:
        return {"k_w": self.k_w, "k_a": self.k_a}


class ActMode(str, enum.Enum):
    """How activation scales are obtained at inference."""

    PER_TOKEN = "per-token"
    PER_STEP = "per-step"


def quantize_symmetric(z, delta, q_max: int) -> np.ndarray:
    """``clamp(round_half_even(z / delta), -q_max, q_max)`` as int32.

    ``delta`` broadcasts against ``z``. Division happens in float64 so the
    result does not depend on the input precision.
    """
    z = np.asarray(z, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("quantize_symmetric: non-finite input")
    if np.any(delta <= 0) or not np.all(np.isfinite(delta)):
        raise NumericError("quantize_symmetric: scales must be finite and positive")
    return np.clip(np.rint(z / delta), -q_max, q_max).astype(np.int32)


def dequantize(q, delta) -> np.ndarray:
    return (np.asarray(q, dtype=np.float32) * np.asarray(delta, dtype=np.float32)).astype(np.float32)


def _peak_scales(peak: np.ndarray, q_max: int) -> np.ndarray:
    scales = (peak.astype(np.float32) / np.float32(q_max)).astype(np.float32)
    scales[peak == 0] = 1.0
    return scales


def weight_scales_per_channel(w, q_max: int) -> np.ndarray:
    """``max_i |W[i, j]| / q_max`` for each output column ``j``; zero column -> 1."""
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ConfigError(f"weight must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("weight_scales_per_channel: non-finite weight")
    return _peak_scales(np.abs(w).max(axis=0), q_max)


def activation_scales_per_token(x, q_max: int) -> np.ndarray:
    """``max_c |X[t, c]| / q_max`` for each row ``t``; zero row -> 1."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ConfigError(f"activation must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("activation_scales_per_token: non-finite activation")
    return _peak_scales(np.abs(x).max(axis=1), q_max)


def rtn_quantize(w_rot, q_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Round-to-nearest per output channel. Returns ``(ints, scales)``."""
    scales = weight_scales_per_channel(w_rot, q_max)
    return quantize_symmetric(np.asarray(w_rot, dtype=np.float32), scales[None, :], q_max), scales


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Integer weights in the rotated basis plus everything needed to run them.

    ``ints`` is ``C_in x C_out`` and ``weight_scales`` has length ``C_out``.
    """

    name: str
    ints: np.ndarray
    weight_scales: np.ndarray
    bias: np.ndarray | None
    plan: RotationPlan
    act_mode: ActMode
    config: QuantConfig

    def __post_init__(self):
        ints = np.asarray(self.ints, dtype=np.int32)
        scales = np.asarray(self.weight_scales, dtype=np.float32)
        if ints.ndim != 2 or scales.shape != (ints.shape[1],):
            raise ConfigError(f"{self.name}: ints {ints.shape} and scales {scales.shape} disagree")
        if ints.shape[0] != self.plan.n_channels:
            raise ConfigError(f"{self.name}: plan width {self.plan.n_channels} != C_in {ints.shape[0]}")
        q = self.config.q_max_w
        if np.abs(ints).max(initial=0) > q:
            raise ConfigError(f"{self.name}: integer weights exceed +-{q}")
        if not np.all(scales > 0):
            raise ConfigError(f"{self.name}: weight scales must be positive")
        object.__setattr__(self, "ints", ints)
        object.__setattr__(self, "weight_scales", scales)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float32)
            if bias.shape != (ints.shape[1],):
                raise ConfigError(f"{self.name}: bias shape {bias.shape} != ({ints.shape[1]},)")
            object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "act_mode", ActMode(self.act_mode))

    @property
    def c_in(self) -> int:
        return self.ints.shape[0]

    @property
    def c_out(self) -> int:
        return self.ints.shape[1]

    def dequantized_weight(self) -> np.ndarray:
        return dequantize(self.ints, self.weight_scales[None, :])

    def weight_tensor(self) -> Tensor:
        name = f"w/{self.name}"
        if self.config.q_max_w <= I4_MAX:
            return Tensor.from_ints(name, self.ints)
        # wider integers are stored exactly as F32
        return Tensor.from_array(name, self.ints.astype(np.float32))

    def to_tensors(self) -> dict[str, Tensor]:
        out = {f"w/{self.name}": self.weight_tensor()}
        out[f"wscale/{self.name}"] = Tensor.from_array(f"wscale/{self.name}", self.weight_scales)
        if self.bias is not None:
            out[f"bias/{self.name}"] = Tensor.from_array(f"bias/{self.name}", self.bias)
        out.update(self.plan.to_tensors(self.name))
        return out

    def meta(self) -> dict:
        return {
            "act_mode": self.act_mode.value,
            "config": self.config.to_json(),
            "has_bias": self.bias is not None,
            "rotation": self.plan.meta(),
            "shape": [self.c_in, self.c_out],
        }

    @classmethod
    def from_tensors(cls, name: str, meta: dict, tensors) -> "QuantizedLayer":
        config = QuantConfig(**meta["config"])
        plan = RotationPlan.from_tensors(name, meta["rotation"], tensors)
        w = tensors[f"w/{name}"].to_array()
        ints = w.astype(np.int32)
        bias = tensors[f"bias/{name}"].to_array() if meta["has_bias"] else None
        scales = tensors[f"wscale/{name}"].to_array()
        return cls(name, ints.reshape(meta["shape"]), scales, bias, plan, meta["act_mode"], config)


def quantize_layer(
    name: str,
    w,
    bias,
    plan: RotationPlan,
    config: QuantConfig,
    act_mode=ActMode.PER_TOKEN,
    ints=None,
    scales=None,
) -> QuantizedLayer:
    """Rotate ``w`` by ``plan`` and quantize it with RTN unless ``ints``/``scales`` are given."""
    if ints is None:
        ints, scales = rtn_quantize(apply_to_weight(w, plan), config.q_max_w)
    return QuantizedLayer(name, ints, scales, bias, plan, act_mode, config)


def quantize_activation(x_rot, layer: QuantizedLayer, step=None, table=None) -> np.ndarray:
    """Fake-quantize a rotated activation according to the layer's mode."""
    q_max = layer.config.q_max_a
    if layer.act_mode is ActMode.PER_TOKEN:
        scales = activation_scales_per_token(x_rot, q_max)[:, None]
    else:
        if table is None or step is None:
            raise ConfigError(f"{layer.name}: per-step activation mode needs a step and a scale table")
        scales = np.asarray(table.scales(layer.name, step), dtype=np.float32)[None, :]
        if scales.shape[1] != x_rot.shape[1]:
            raise ConfigError(f"{layer.name}: table has {scales.shape[1]} channels, input {x_rot.shape[1]}")
    return dequantize(quantize_symmetric(x_rot, scales, q_max), scales)


def fake_quant_linear(x, layer: QuantizedLayer, step=None, table=None) -> np.ndarray:
    """``(D_X * Q_X) @ (D_W * Q_W) + b`` on the rotated input, in float32.

    The activation scale is per token, or per channel from ``table`` at
    ``step``, so the scale product is an outer product over (token, channel).
    """
    x = np.asarray(x, dtype=np.float32)
    x_rot = apply_to_activation(x, layer.plan)
    y = quantize_activation(x_rot, layer, step, table) @ layer.dequantized_weight()
    if layer.bias is not None:
        y = y + layer.bias
    return y.astype(np.float32)
