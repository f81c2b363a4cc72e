"""Command-line pipeline: ``gen-toy -> calibrate -> quantize -> eval``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
Setting ``QVLA_THREADS`` caps the BLAS thread pools; it must be read before
numpy is imported, hence the environment handling at the top of this module.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("QVLA_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402

import numpy as np  # noqa: E402

from .analyzer import (  # noqa: E402
    emit_report,
    layer_error,
    magnitude_pipeline,
    step_gap_report,
    write_csv,
)
from .calibration import TraceBuffer, build_table, capture_traces, single_bucket_table  # noqa: E402
from .errors import ConfigError, QvlaError  # noqa: E402
from .package import QuantizedModel  # noqa: E402
from .pipeline import (  # noqa: E402
    PipelineConfig,
    build_plans,
    calibration_subset,
    check_dims,
    output_nmse,
    quantize_model,
)
from .rotation import RotationKind, RotationPlan, apply_to_activation, derive_plan  # noqa: E402
from .tensor_store import Tensor, read_container, write_container  # noqa: E402
from .toy import Outlier, ToyModel, ToyModelSpec, forward_fp32, generate  # noqa: E402

CALIB_SCHEMA = 1
# flag name -> PipelineConfig field
_PIPELINE_FLAGS = {
    "rotation": "rotation",
    "block_size": "block_size",
    "w_bits": "k_w",
    "a_bits": "k_a",
    "solver_llm": "solver_llm",
    "solver_dit": "solver_dit",
    "gptq_block": "gptq_block",
    "gptq_damp": "gptq_damp",
    "percentile": "percentile",
    "steps": "steps",
    "n_calib": "n_calib",
    "table": "table",
}
# settings fixed by a calibration container
_CALIB_FIELDS = ("rotation", "block_size", "percentile", "steps", "n_calib")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _pipeline_config(args) -> PipelineConfig:
    doc = PipelineConfig().to_json()
    if getattr(args, "config", None):
        doc.update(PipelineConfig.load(args.config).to_json())
    if getattr(args, "bits", None) is not None:
        doc["k_w"] = doc["k_a"] = args.bits
    for flag, name in _PIPELINE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[name] = value
    return PipelineConfig.from_json(doc)


def _explicit(args) -> set:
    out = {name for flag, name in _PIPELINE_FLAGS.items() if getattr(args, flag, None) is not None}
    if getattr(args, "bits", None) is not None:
        out |= {"k_w", "k_a"}
    return out


def _load_model(path):
    model, inputs = ToyModel.from_tensors(read_container(path))
    for split in ("calib", "eval"):
        if split not in inputs:
            raise ConfigError(f"{path}: model container has no {split} inputs")
    return model, inputs


def _say(args, text):
    if not getattr(args, "quiet", False):
        print(text)


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def cmd_gen_toy(args) -> int:
    # the raw document, so that unspecified outliers are drawn for the final seed
    doc = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.dim is not None:
        doc["dim"] = args.dim
    if args.outlier:
        doc["outliers"] = [Outlier.parse(o).to_json() for o in args.outlier]
    spec = ToyModelSpec.from_json(doc)
    model, inputs = generate(spec)
    write_container(model.to_tensors(inputs), args.out)
    _say(args, f"wrote {args.out}: {spec.n_params} parameters, "
               f"{len(spec.layer_graph())} linear layers")
    return 0


def _calib_tensors(cfg: PipelineConfig, plans: dict, traces: TraceBuffer, table, spec) -> dict:
    doc = {
        "config": {name: cfg.to_json()[name] for name in _CALIB_FIELDS},
        "k_a": cfg.k_a,
        "model_seed": spec.seed,
        "plans": {layer: plans[layer].meta() for layer in sorted(plans)},
        "schema_version": CALIB_SCHEMA,
    }
    out = {"calib.json": Tensor.from_json("calib.json", doc)}
    for layer in sorted(plans):
        out.update(plans[layer].to_tensors(layer))
    out.update(traces.to_tensors())
    if table is not None:
        out.update(table.to_tensors())
    return out


def _read_calib(path):
    tensors = read_container(path)
    if "calib.json" not in tensors:
        raise ConfigError(f"{path}: not a calibration container")
    doc = tensors["calib.json"].to_json()
    if doc.get("schema_version") != CALIB_SCHEMA:
        raise ConfigError(f"{path}: unsupported calibration schema {doc.get('schema_version')!r}")
    plans = {layer: RotationPlan.from_tensors(layer, meta, tensors)
             for layer, meta in doc["plans"].items()}
    return doc, plans, TraceBuffer.from_tensors(tensors)


def cmd_calibrate(args) -> int:
    cfg = _pipeline_config(args)
    model, inputs = _load_model(args.model)
    check_dims(model, cfg)
    plans = build_plans(model, cfg.rotation, cfg.block_size)
    traces = capture_traces(model, calibration_subset(inputs["calib"], cfg.n_calib), cfg.steps, plans)
    dit = [i.id for i in model.spec.layer_graph() if i.branch == "dit"]
    make = build_table if cfg.table == "per-step" else single_bucket_table
    meta = {"block_size": cfg.block_size, "rotation": cfg.rotation}
    table = make(traces, cfg.quant.q_max_a, cfg.steps, cfg.percentile, dit, meta) if dit else None
    write_container(_calib_tensors(cfg, plans, traces, table, model.spec), args.out)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(table.dumps() + "\n" if table is not None else "{}\n")
    _say(args, f"wrote {args.out}: {len(dit)} DiT layers x {cfg.steps} steps")
    return 0


def cmd_quantize(args) -> int:
    cfg = _pipeline_config(args)
    model, inputs = _load_model(args.model)
    plans = traces = None
    if args.calib:
        doc, plans, traces = _read_calib(args.calib)
        if doc["model_seed"] != model.spec.seed:
            raise ConfigError(f"{args.calib} was calibrated on seed {doc['model_seed']}, "
                              f"model has seed {model.spec.seed}")
        stored = doc["config"]
        explicit = _explicit(args)
        clash = [f for f in _CALIB_FIELDS if f in explicit and stored[f] != cfg.to_json()[f]]
        if clash:
            raise ConfigError(f"flags {clash} conflict with calibration container {args.calib}")
        cfg = PipelineConfig.from_json({**cfg.to_json(), **stored})
    qmodel = quantize_model(model, inputs["calib"], cfg, plans, traces)
    manifest = qmodel.save(args.out)
    _say(args, f"wrote {args.out}: {manifest.total_bytes} bytes, "
               f"savings_ratio {manifest.savings_ratio:.4f} vs FP16")
    return 0


def _compare_kinds(text: str) -> list:
    kinds = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        kind = RotationKind.parse(item).value
        if kind not in kinds:
            kinds.append(kind)
    if not kinds:
        raise ConfigError("--compare needs at least one rotation kind")
    return kinds


def cmd_eval(args) -> int:
    model, inputs = _load_model(args.model)
    qmodel = QuantizedModel.load(args.package) if args.package else None
    if qmodel is not None:
        if qmodel.spec.to_json() != model.spec.to_json():
            raise ConfigError(f"{args.package} was not produced from {args.model}")
        cfg = PipelineConfig.from_json(qmodel.meta.get("pipeline", {}))
    else:
        cfg = _pipeline_config(args)
    kinds = _compare_kinds(args.compare)
    check_dims(model, PipelineConfig(**{**cfg.to_json(), "rotation": "svd"}))
    graph = model.spec.layer_graph()

    base = build_plans(model, "svd", cfg.block_size)
    plans = {k: {layer: derive_plan(p, k) for layer, p in base.items()}
             for k in set(kinds) | {"identity", "permute", "svd", "svd-hadamard", cfg.rotation}}
    calib = calibration_subset(inputs["calib"], cfg.n_calib)
    raw_calib = capture_traces(model, calib, cfg.steps)
    raw_eval = capture_traces(model, inputs["eval"], cfg.steps)

    def pooled(buf, layer):
        return np.concatenate([buf.samples(layer, t) for t in buf.steps(layer)])

    records, surfaces = [], {}
    for info in graph:
        x_eval, x_calib = pooled(raw_eval, info.id), pooled(raw_calib, info.id)
        w = model.weight(info.id)
        if qmodel is None:
            solver = "none"
        else:
            solver = cfg.solver_llm if info.branch == "llm" else cfg.solver_dit
        for k in kinds:
            records.append(layer_error(x_eval, w, k, solver, cfg.quant, cfg.block_size,
                                       plans[k][info.id], x_calib, info.id,
                                       cfg.gptq_block, cfg.gptq_damp))
        stage = {k: plans[k][info.id] for k in ("identity", "permute", "svd", "svd-hadamard")}
        surfaces[info.id] = magnitude_pipeline(x_eval, w, plans=stage, block_size=cfg.block_size)

    gaps = None
    dit = [i.id for i in graph if i.branch == "dit"]
    if dit:
        rot = plans[cfg.rotation]
        rotated_calib, rotated_eval = TraceBuffer(), TraceBuffer()
        for layer in dit:
            for t in range(cfg.steps):
                rotated_calib.add(layer, t, apply_to_activation(raw_calib.samples(layer, t), rot[layer]))
                rotated_eval.add(layer, t, apply_to_activation(raw_eval.samples(layer, t), rot[layer]))
        q_max = cfg.quant.q_max_a
        per_step = build_table(rotated_calib, q_max, cfg.steps, cfg.percentile, dit)
        bucket = single_bucket_table(rotated_calib, q_max, cfg.steps, cfg.percentile, dit)
        gaps = step_gap_report(rotated_eval, per_step, bucket)

    ev = inputs["eval"]
    reference = [forward_fp32(model, ev.prompts[i], ev.noise[i], cfg.steps) for i in range(len(ev))]
    if qmodel is None:
        candidate = reference
        manifest = None
    else:
        candidate = [qmodel.forward(ev.prompts[i], ev.noise[i], cfg.steps) for i in range(len(ev))]
        manifest = qmodel.package()[1]
    config = {
        "compare": kinds,
        "model": {"n_params": model.spec.n_params, "seed": model.spec.seed},
        "package": bool(qmodel),
        "pipeline": cfg.to_json(),
    }
    extra = {"end_to_end": {"output_nmse": output_nmse(reference, candidate), "trajectories": len(ev)}}
    report = emit_report(records, surfaces, gaps, manifest, config, extra)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report)
    if args.csv:
        write_csv(report, args.csv)
    _say(args, f"wrote {args.out}: {len(records)} layer records, "
               f"end-to-end nMSE {extra['end_to_end']['output_nmse']:.6g}")
    return 0


def _add_pipeline_flags(p, solvers=True):
    p.add_argument("--config", help="PipelineConfig JSON file")
    p.add_argument("--rotation", help="identity|none|permute|svd|svd-hadamard (default svd-hadamard)")
    p.add_argument("--block-size", dest="block_size", type=int, help="rotation block size (default 64)")
    p.add_argument("--steps", type=int, help="Euler steps T (default 8)")
    p.add_argument("--percentile", type=float, help="robust-peak percentile (default 99.9)")
    p.add_argument("--n-calib", dest="n_calib", type=int, help="calibration trajectories (default 10)")
    p.add_argument("--table", choices=("per-step", "single-bucket"), help="DiT scale table kind")
    p.add_argument("--bits", type=int, help="set both weight and activation bits (default 4)")
    p.add_argument("--w-bits", dest="w_bits", type=int, help="weight bits")
    p.add_argument("--a-bits", dest="a_bits", type=int, help="activation bits")
    if solvers:
        p.add_argument("--solver-llm", dest="solver_llm", choices=("gptq", "rtn"))
        p.add_argument("--solver-dit", dest="solver_dit", choices=("gptq", "rtn"))
        p.add_argument("--gptq-block", dest="gptq_block", type=int, help="GPTQ lazy block (default 128)")
        p.add_argument("--gptq-damp", dest="gptq_damp", type=float, help="GPTQ damping ratio (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qvla", description="W4A4 rotation quantization toolkit for toy VLA models")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress lines")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-toy", parents=[common], help="generate a seeded toy model with calibration/eval inputs")
    p.add_argument("--out", required=True, help="output model container (.qtz)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--outlier", action="append", metavar="LAYER:CH[,CH]:MULT",
                   help="outlier entry; repeatable; replaces the default set")
    p.add_argument("--config", help="ToyModelSpec JSON file")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("calibrate", parents=[common], help="capture traces and build the DiT scale table")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="calibration container (.qtz)")
    p.add_argument("--json", help="also write the scale table as JSON")
    _add_pipeline_flags(p, solvers=False)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", parents=[common], help="rotate, solve and package the model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="quantized package (.qtz)")
    p.add_argument("--calib", help="reuse a calibration container")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", parents=[common], help="layer errors, magnitude pipeline, step gaps and footprint")
    p.add_argument("--model", required=True)
    p.add_argument("--package", help="quantized package; omitted means no quantization")
    p.add_argument("--compare", default="identity,svd,svd-hadamard",
                   help="comma-separated rotation kinds to evaluate per layer")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="directory for flat CSV tables")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"qvla {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (QvlaError, OSError, ArithmeticError, ValueError) as exc:
        print(f"qvla {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
