"""Quantized model packages: assembly, footprint accounting and loading.

A package is a ``.qtz`` container with

* ``w/<layer>``, ``wscale/<layer>``, ``bias/<layer>`` and ``rot/<layer>/...``
  for every quantized linear layer,
* ``actscale/<layer>/step<t>`` plus ``actscale.json`` for the DiT scale table,
* ``norm/...`` full-precision normalization parameters,
* ``manifest.json`` with the quantization config, per-layer metadata and
  the byte accounting.

Byte accounting covers every tensor except the ``manifest.json`` and
``actscale.json`` documents. The baseline stores every floating-point
parameter of the model at 2 bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import ScaleTable
from .errors import ConfigError
from .quant import ActMode, QuantizedLayer, fake_quant_linear
from .tensor_store import Tensor, read_container, write_container
from .toy import ToyModelSpec, forward_with

SCHEMA_VERSION = 1
FP16_BYTES = 2
_DOCUMENTS = ("manifest.json", "actscale.json")


@dataclass
class PackageManifest:
    layers: dict = field(default_factory=dict)
    other_bytes: int = 0
    baseline_params: int = 0

    @property
    def totals(self) -> dict:
        keys = ("packed_bytes", "scale_bytes", "bias_bytes", "rotation_bytes", "perm_bytes", "table_bytes")
        out = {k: sum(entry[k] for entry in self.layers.values()) for k in keys}
        out["other_bytes"] = self.other_bytes
        return out

    @property
    def total_bytes(self) -> int:
        return sum(self.totals.values())

    @property
    def baseline_fp16_bytes(self) -> int:
        return FP16_BYTES * self.baseline_params

    @property
    def savings_ratio(self) -> float:
        if self.baseline_fp16_bytes == 0:
            return 0.0
        return 1.0 - self.total_bytes / self.baseline_fp16_bytes

    def to_json(self) -> dict:
        return {
            "baseline_fp16_bytes": self.baseline_fp16_bytes,
            "layers": {k: dict(v) for k, v in sorted(self.layers.items())},
            "savings_ratio": self.savings_ratio,
            "total_bytes": self.total_bytes,
            "totals": self.totals,
        }


def _merge(into: dict, new: dict) -> None:
    for name, t in new.items():
        if name in into:
            raise ConfigError(f"tensor name collision: {name!r}")
        into[name] = t


def assemble_package(layers, table: ScaleTable | None = None, extra=None, meta=None):
    """Build the package tensors and footprint accounting.

    Args:
        layers: ``id -> QuantizedLayer``.
        table: DiT activation scale table; required if any layer is per-step.
        extra: ``name -> float array`` of other full-precision parameters.
        meta: JSON-ready description echoed into ``manifest.json``.

    Returns:
        ``(tensors, PackageManifest)``.
    """
    layers = dict(layers or {})
    extra = dict(extra or {})
    tensors: dict[str, Tensor] = {}
    manifest = PackageManifest()
    params = 0
    for name in sorted(layers):
        layer = layers[name]
        if layer.name != name:
            raise ConfigError(f"layer key {name!r} does not match layer name {layer.name!r}")
        part = layer.to_tensors()
        _merge(tensors, part)
        table_bytes = 0
        if layer.act_mode is ActMode.PER_STEP:
            if table is None or name not in table.entries:
                raise ConfigError(f"{name}: per-step layer has no scale table entry")
            table_bytes = table.nbytes(name)
        manifest.layers[name] = {
            "bias_bytes": part[f"bias/{name}"].nbytes if layer.bias is not None else 0,
            "packed_bytes": part[f"w/{name}"].nbytes,
            "perm_bytes": layer.plan.perm_nbytes,
            "rotation_bytes": layer.plan.rotation_nbytes,
            "scale_bytes": part[f"wscale/{name}"].nbytes,
            "table_bytes": table_bytes,
        }
        params += layer.c_in * layer.c_out + (layer.c_out if layer.bias is not None else 0)
    if table is not None:
        _merge(tensors, {k: v for k, v in table.to_tensors().items()
                         if k == "actscale.json" or k.rsplit("/", 1)[0][len("actscale/"):] in layers})
    for name in sorted(extra):
        arr = np.asarray(extra[name], dtype=np.float32)
        _merge(tensors, {name: Tensor.from_array(name, arr)})
        manifest.other_bytes += 4 * arr.size
        params += arr.size
    manifest.baseline_params = params
    doc = {
        "footprint": manifest.to_json(),
        "layers": {name: layers[name].meta() for name in sorted(layers)},
        "meta": meta or {},
        "schema_version": SCHEMA_VERSION,
    }
    _merge(tensors, {"manifest.json": Tensor.from_json("manifest.json", doc)})
    return tensors, manifest


def load_package(tensors):
    """Inverse of :func:`assemble_package`: ``(layers, table, extra, manifest_doc)``."""
    if "manifest.json" not in tensors:
        raise ConfigError("container holds no manifest.json; not a quantized package")
    doc = tensors["manifest.json"].to_json()
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported package schema {doc.get('schema_version')!r}")
    layers = {name: QuantizedLayer.from_tensors(name, m, tensors) for name, m in doc["layers"].items()}
    table = ScaleTable.from_tensors(tensors) if "actscale.json" in tensors else None
    extra = {n: t.to_array() for n, t in tensors.items() if n.startswith("norm/")}
    return layers, table, extra, doc


@dataclass
class QuantizedModel:
    """Quantized toy model: fake-quant layers plus full-precision norm parameters."""

    spec: ToyModelSpec
    layers: dict
    norms: dict
    table: ScaleTable | None = None
    meta: dict = field(default_factory=dict)

    def package(self):
        meta = dict(self.meta)
        meta["spec"] = self.spec.to_json()
        return assemble_package(self.layers, self.table, self.norms, meta)

    def save(self, path) -> PackageManifest:
        tensors, manifest = self.package()
        write_container(tensors, path)
        return manifest

    @classmethod
    def from_tensors(cls, tensors) -> "QuantizedModel":
        layers, table, extra, doc = load_package(tensors)
        meta = dict(doc.get("meta", {}))
        if "spec" not in meta:
            raise ConfigError("package manifest has no model spec")
        spec = ToyModelSpec.from_json(meta.pop("spec"))
        return cls(spec, layers, extra, table, meta)

    @classmethod
    def load(cls, path) -> "QuantizedModel":
        return cls.from_tensors(read_container(path))

    def forward(self, prompt, noise, T: int | None = None) -> np.ndarray:
        return forward_fakequant(self, prompt, noise, T)


def forward_fakequant(qmodel: QuantizedModel, prompt, noise, T: int | None = None) -> np.ndarray:
    """Toy-model forward with every linear replaced by :func:`fake_quant_linear`."""
    T = qmodel.spec.steps if T is None else T
    table = qmodel.table
    if table is not None and table.T != T:
        raise ConfigError(f"scale table covers {table.T} steps, forward asked for {T}")
    layers = qmodel.layers

    def linear(layer, x, step):
        if layer not in layers:
            raise ConfigError(f"package has no layer {layer!r}")
        return fake_quant_linear(x, layers[layer], step, table)

    return forward_with(qmodel.spec, qmodel.norms, linear, prompt, noise, T)
