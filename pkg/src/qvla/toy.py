"""Seeded two-branch toy network: an LLM-like stack feeding a DiT-like action head.

LLM block (pre-norm)::

    h += o(attn(q(a), k(a), v(a)))      a = LN1(h) + offsets
    h += down(gelu(up(LN2(h) + offsets)))

DiT block, identical except that the attention input goes through an
adaptive norm driven by a sinusoidal step embedding ``e_t`` and a gain
``g(t)``::

    a = g(t) * (LN(h) * (gamma + A_s e_t) + beta + A_b e_t + offsets)

The DiT input is the action state ``x_t`` plus the token mean of the
normalized LLM output; the velocity is ``f = h_M - h_0`` and the Euler step
is ``x_{t+1} = x_t + f / T``.

Layer ids are ``llm<b>.<kind>`` / ``dit<b>.<kind>`` with kinds q, k, v, o,
up, down. Norm sites are ``llm<b>.ln1``, ``llm<b>.ln2``, ``dit<b>.adaln1``
and ``dit<b>.ln2``.

Outlier entries ``{"layer", "channels", "multiplier"}`` act in two ways:

* on a linear layer, the listed input-channel rows of the weight are scaled
  by ``multiplier``;
* on a norm site, ``multiplier`` is added as a token-constant offset to the
  listed output channels (a massive-activation channel). At an adaptive
  norm the offset is scaled by ``g(t)`` like the rest of the output.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .tensor_store import Tensor

LINEAR_KINDS = ("q", "k", "v", "o", "up", "down")
ADALN_PROJ_STD = 0.02
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5

_LAYER_RE = re.compile(r"^(llm|dit)(\d+)\.(q|k|v|o|up|down)$")
_NORM_RE = re.compile(r"^(llm(\d+)\.(ln1|ln2)|dit(\d+)\.(adaln1|ln2))$")
_ALIAS_RE = re.compile(r"^(q|k|v|o|up|down)(\d+)$")


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def resolve_site(name: str) -> str:
    """Canonical layer or norm-site id; ``q0`` is shorthand for ``llm0.q``."""
    m = _ALIAS_RE.match(name)
    if m:
        return f"llm{m.group(2)}.{m.group(1)}"
    if _LAYER_RE.match(name) or _NORM_RE.match(name):
        return name
    raise ConfigError(f"unknown layer or norm site {name!r}")


@dataclass(frozen=True)
class Outlier:
    layer: str
    channels: tuple
    multiplier: float

    @classmethod
    def parse(cls, text: str) -> "Outlier":
        """``LAYER:CH[,CH...]:MULT``, e.g. ``q0:3:50`` or ``dit1.adaln1:5,9:30``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"outlier {text!r} is not LAYER:CHANNELS:MULTIPLIER")
        try:
            channels = tuple(int(c) for c in parts[1].split(","))
            mult = float(parts[2])
        except ValueError:
            raise ConfigError(f"outlier {text!r} has non-numeric channels or multiplier") from None
        return cls(parts[0], channels, mult)

    def to_json(self) -> dict:
        return {"channels": list(self.channels), "layer": self.layer, "multiplier": self.multiplier}


@dataclass(frozen=True)
class LayerInfo:
    id: str
    branch: str
    block: int
    kind: str
    norm_source: str
    c_in: int
    c_out: int


def _default_outliers(seed: int, dim: int, llm_blocks: int, dit_blocks: int) -> list:
    rng = np.random.default_rng([seed, 7919])
    out = []
    for b in range(llm_blocks):
        out.append(Outlier(f"llm{b}.ln1", tuple(sorted(rng.choice(dim, 2, replace=False).tolist())), 40.0))
        out.append(Outlier(f"llm{b}.ln2", (int(rng.integers(dim)),), 40.0))
    for b in range(dit_blocks):
        out.append(Outlier(f"dit{b}.adaln1", tuple(sorted(rng.choice(dim, 2, replace=False).tolist())), 40.0))
        # a dominant massive channel keeps the plain-norm input range stable
        # while the Euler state moves
        out.append(Outlier(f"dit{b}.ln2", (int(rng.integers(dim)),), 100.0))
    out.append(Outlier("llm0.q", (int(rng.integers(dim)),), 50.0))
    return out


@dataclass
class ToyModelSpec:
    """Generator description. ``outliers=None`` selects the seeded default set."""

    seed: int = 0
    dim: int = 128
    llm_blocks: int = 3
    dit_blocks: int = 3
    tokens: int = 16
    action_tokens: int = 16
    mlp_ratio: int = 4
    time_dim: int = 32
    steps: int = 8
    n_calib: int = 10
    n_eval: int = 10
    row_skew: float = 1.0
    residual_scale: float = 0.1
    drift_start: float = 1.0
    drift_end: float = 0.8
    outliers: list | None = None

    def __post_init__(self):
        for name in ("dim", "llm_blocks", "dit_blocks", "tokens", "action_tokens", "mlp_ratio",
                     "time_dim", "steps", "n_calib", "n_eval"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"spec field {name} must be a positive integer, got {value!r}")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.residual_scale < 0:
            raise ConfigError("residual_scale must be >= 0")
        if self.row_skew < 0 or self.drift_start <= 0 or self.drift_end <= 0:
            raise ConfigError("row_skew must be >= 0 and drift gains > 0")
        if self.outliers is None:
            self.outliers = _default_outliers(self.seed, self.dim, self.llm_blocks, self.dit_blocks)
        parsed = []
        for o in self.outliers:
            if isinstance(o, str):
                o = Outlier.parse(o)
            elif isinstance(o, dict):
                o = Outlier(o["layer"], tuple(o["channels"]), float(o["multiplier"]))
            site = resolve_site(o.layer)
            if not o.multiplier > 0 or not math.isfinite(o.multiplier):
                raise ConfigError(f"outlier multiplier must be positive, got {o.multiplier}")
            parsed.append(Outlier(site, tuple(int(c) for c in o.channels), float(o.multiplier)))
        self.outliers = parsed
        layers = {info.id: info for info in self.layer_graph()}
        for o in parsed:
            width = layers[o.layer].c_in if o.layer in layers else self._norm_width(o.layer)
            if any(not 0 <= c < width for c in o.channels):
                raise ConfigError(f"outlier channels {list(o.channels)} out of range for {o.layer}")

    def _norm_width(self, site: str) -> int:
        m = _NORM_RE.match(site)
        block = int(m.group(2) if m.group(2) is not None else m.group(4))
        limit = self.llm_blocks if site.startswith("llm") else self.dit_blocks
        if block >= limit:
            raise ConfigError(f"norm site {site} refers to a missing block")
        return self.dim

    def gain(self, T: int | None = None) -> np.ndarray:
        """``g(t)`` for ``t = 0..T-1``, linear from ``drift_start`` to ``drift_end``."""
        T = self.steps if T is None else T
        if T == 1:
            return np.array([self.drift_start])
        return np.linspace(self.drift_start, self.drift_end, T)

    def layer_graph(self) -> list[LayerInfo]:
        d, h = self.dim, self.dim * self.mlp_ratio
        shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "up": (d, h), "down": (h, d)}
        out = []
        for branch, blocks in (("llm", self.llm_blocks), ("dit", self.dit_blocks)):
            for b in range(blocks):
                for kind in LINEAR_KINDS:
                    if kind in ("q", "k", "v"):
                        src = "adaln" if branch == "dit" else "plain"
                    elif kind == "up":
                        src = "plain"
                    else:
                        src = "none"
                    out.append(LayerInfo(f"{branch}{b}.{kind}", branch, b, kind, src, *shapes[kind]))
        return out

    @property
    def n_params(self) -> int:
        total = sum(i.c_in * i.c_out + i.c_out for i in self.layer_graph())
        # gamma, beta and the outlier offset at every norm site
        norms = 3 * self.dim * (2 * self.llm_blocks + 2 * self.dit_blocks)
        adaln = 2 * self.dim * self.time_dim * self.dit_blocks
        return total + norms + adaln

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["outliers"] = [o.to_json() for o in self.outliers]
        return doc

    @classmethod
    def from_json(cls, doc) -> "ToyModelSpec":
        if not isinstance(doc, dict):
            raise ConfigError("toy model spec must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid toy model spec: {exc}") from None

    @classmethod
    def load(cls, path) -> "ToyModelSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None


@dataclass
class InputSet:
    prompts: np.ndarray  # n x tokens x d
    noise: np.ndarray  # n x action_tokens x d

    def __len__(self) -> int:
        return self.prompts.shape[0]


@dataclass
class ToyModel:
    spec: ToyModelSpec
    params: dict = field(default_factory=dict)

    def weight(self, layer: str) -> np.ndarray:
        return self.params[f"w/{layer}"]

    def bias(self, layer: str) -> np.ndarray:
        return self.params[f"bias/{layer}"]

    def to_tensors(self, inputs: dict | None = None) -> dict[str, Tensor]:
        out = {"spec.json": Tensor.from_json("spec.json", self.spec.to_json())}
        for name, arr in self.params.items():
            out[name] = Tensor.from_array(name, arr)
        for split, inp in (inputs or {}).items():
            out[f"input/{split}/prompts"] = Tensor.from_array(f"input/{split}/prompts", inp.prompts)
            out[f"input/{split}/noise"] = Tensor.from_array(f"input/{split}/noise", inp.noise)
        return out

    @classmethod
    def from_tensors(cls, tensors) -> tuple["ToyModel", dict]:
        if "spec.json" not in tensors:
            raise ConfigError("container holds no spec.json; not a toy model")
        spec = ToyModelSpec.from_json(tensors["spec.json"].to_json())
        params = {n: t.to_array() for n, t in tensors.items()
                  if n.startswith(("w/", "bias/", "norm/"))}
        inputs = {}
        for split in ("calib", "eval"):
            if f"input/{split}/prompts" in tensors:
                inputs[split] = InputSet(tensors[f"input/{split}/prompts"].to_array(),
                                         tensors[f"input/{split}/noise"].to_array())
        model = cls(spec, params)
        missing = [i.id for i in spec.layer_graph() if f"w/{i.id}" not in params]
        if missing:
            raise ConfigError(f"model container is missing weights for {missing[:3]}")
        return model, inputs


def norm_sites(spec: ToyModelSpec) -> list[tuple[str, str]]:
    sites = []
    for b in range(spec.llm_blocks):
        sites += [(f"llm{b}.ln1", "plain"), (f"llm{b}.ln2", "plain")]
    for b in range(spec.dit_blocks):
        sites += [(f"dit{b}.adaln1", "adaln"), (f"dit{b}.ln2", "plain")]
    return sites


def generate(spec: ToyModelSpec) -> tuple[ToyModel, dict[str, InputSet]]:
    """Build weights and the disjoint calibration / evaluation input sets."""
    root = np.random.SeedSequence(spec.seed)
    w_seq, calib_seq, eval_seq = root.spawn(3)
    rng = np.random.default_rng(w_seq)
    params: dict[str, np.ndarray] = {}
    for info in spec.layer_graph():
        rows = rng.lognormal(0.0, spec.row_skew, size=(info.c_in, 1)) if spec.row_skew else 1.0
        w = rng.standard_normal((info.c_in, info.c_out)) * rows / math.sqrt(info.c_in)
        if info.kind in ("o", "down"):
            w = w * spec.residual_scale
        params[f"w/{info.id}"] = w
        params[f"bias/{info.id}"] = 0.02 * rng.standard_normal(info.c_out)
    d, e = spec.dim, spec.time_dim
    for site, kind in norm_sites(spec):
        params[f"norm/{site}/gamma"] = 1.0 + 0.1 * rng.standard_normal(d)
        params[f"norm/{site}/beta"] = 0.1 * rng.standard_normal(d)
        params[f"norm/{site}/offset"] = np.zeros(d)
        if kind == "adaln":
            params[f"norm/{site}/scale_proj"] = ADALN_PROJ_STD * rng.standard_normal((d, e))
            params[f"norm/{site}/shift_proj"] = ADALN_PROJ_STD * rng.standard_normal((d, e))
    for o in spec.outliers:
        if f"w/{o.layer}" in params:
            params[f"w/{o.layer}"][list(o.channels)] *= o.multiplier
        else:
            params[f"norm/{o.layer}/offset"][list(o.channels)] += o.multiplier
    params = {k: v.astype(np.float32) for k, v in params.items()}

    def inputs(seq, n):
        r = np.random.default_rng(seq)
        prompts = r.standard_normal((n, spec.tokens, d)).astype(np.float32)
        noise = r.standard_normal((n, spec.action_tokens, d)).astype(np.float32)
        return InputSet(prompts, noise)

    return ToyModel(spec, params), {"calib": inputs(calib_seq, spec.n_calib),
                                    "eval": inputs(eval_seq, spec.n_eval)}


def step_embedding(t: int, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the flow time ``1000 * t / T``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = (1000.0 * t / T) * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)]).astype(np.float32)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def _attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    s = (q @ k.T) / np.float32(math.sqrt(q.shape[1]))
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return (p / p.sum(axis=1, keepdims=True)) @ v


def _check(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation at {where}")
    return x


class _Runtime:
    """Shared topology; ``linear(layer_id, x, step)`` supplies the matmuls."""

    def __init__(self, spec: ToyModelSpec, params: dict, linear):
        self.spec = spec
        self.p = params
        self.linear = linear

    def _plain_norm(self, site: str, x: np.ndarray) -> np.ndarray:
        p = self.p
        out = _layer_norm(x) * p[f"norm/{site}/gamma"] + p[f"norm/{site}/beta"] + p[f"norm/{site}/offset"]
        return out.astype(np.float32)

    def _ada_norm(self, site: str, x: np.ndarray, t: int, T: int, gain: float) -> np.ndarray:
        p = self.p
        e = step_embedding(t, T, self.spec.time_dim)
        scale = p[f"norm/{site}/gamma"] + p[f"norm/{site}/scale_proj"] @ e
        shift = p[f"norm/{site}/beta"] + p[f"norm/{site}/shift_proj"] @ e + p[f"norm/{site}/offset"]
        return (np.float32(gain) * (_layer_norm(x) * scale + shift)).astype(np.float32)

    def _block(self, prefix: str, h: np.ndarray, a: np.ndarray, step) -> np.ndarray:
        lin = self.linear
        q, k, v = (lin(f"{prefix}.{kind}", a, step) for kind in ("q", "k", "v"))
        h = _check(h + lin(f"{prefix}.o", _attention(q, k, v), step), f"{prefix}.o")
        return h

    def _mlp(self, prefix: str, h: np.ndarray, step) -> np.ndarray:
        lin = self.linear
        u = gelu(lin(f"{prefix}.up", self._plain_norm(f"{prefix}.ln2", h), step))
        return _check(h + lin(f"{prefix}.down", u.astype(np.float32), step), f"{prefix}.down")

    def condition(self, prompt: np.ndarray) -> np.ndarray:
        h = np.asarray(prompt, dtype=np.float32)
        for b in range(self.spec.llm_blocks):
            prefix = f"llm{b}"
            h = self._block(prefix, h, self._plain_norm(f"{prefix}.ln1", h), None)
            h = self._mlp(prefix, h, None)
        return _layer_norm(h).mean(axis=0).astype(np.float32)

    def velocity(self, x: np.ndarray, cond: np.ndarray, t: int, T: int, gain: float) -> np.ndarray:
        h0 = (x + cond).astype(np.float32)
        h = h0
        for b in range(self.spec.dit_blocks):
            prefix = f"dit{b}"
            h = self._block(prefix, h, self._ada_norm(f"{prefix}.adaln1", h, t, T, gain), t)
            h = self._mlp(prefix, h, t)
        return h - h0

    def run(self, prompt: np.ndarray, noise: np.ndarray, T: int) -> np.ndarray:
        if T < 1:
            raise ConfigError(f"Euler step count must be positive, got {T}")
        gains = self.spec.gain(T)
        cond = self.condition(prompt)
        x = np.asarray(noise, dtype=np.float32)
        for t in range(T):
            x = _check(x + self.velocity(x, cond, t, T, gains[t]) / np.float32(T), f"euler step {t}")
        return x


def forward_fp32(model: ToyModel, prompt, noise, T: int | None = None, hook=None) -> np.ndarray:
    """Full-precision forward of one trajectory; returns the final action state.

    ``hook(layer_id, step, x)`` sees every linear-layer input; LLM layers
    report ``step=None``.
    """
    params = model.params

    def linear(layer, x, step):
        if hook is not None:
            hook(layer, step, x)
        return (x @ params[f"w/{layer}"] + params[f"bias/{layer}"]).astype(np.float32)

    T = model.spec.steps if T is None else T
    return _Runtime(model.spec, params, linear).run(prompt, noise, T)


def forward_with(spec: ToyModelSpec, params: dict, linear, prompt, noise, T: int) -> np.ndarray:
    """Forward with a caller-supplied ``linear(layer_id, x, step)``."""
    return _Runtime(spec, params, linear).run(prompt, noise, T)
