import pytest

from qvla.pipeline import PipelineConfig, build_plans, output_nmse, quantize_model
from qvla.toy import ToyModelSpec, forward_fp32, generate

ABLATION_SEEDS = range(10)
# name -> (rotation, DiT scale table)
ABLATION_VARIANTS = {
    "svd-hadamard+per-step": ("svd-hadamard", "per-step"),
    "svd-hadamard": ("svd-hadamard", "single-bucket"),
    "svd": ("svd", "single-bucket"),
    "identity": ("identity", "single-bucket"),
}


def ablation_run(seed: int) -> dict:
    """W4A4 final-output nMSE of every ablation variant on one seeded toy model."""
    model, inputs = generate(ToyModelSpec(seed=seed))
    ev = inputs["eval"]
    reference = [forward_fp32(model, ev.prompts[i], ev.noise[i]) for i in range(len(ev))]
    svd = build_plans(model, "svd", 64)
    out = {}
    for name, (rotation, table) in ABLATION_VARIANTS.items():
        cfg = PipelineConfig(rotation=rotation, table=table)
        qmodel = quantize_model(model, inputs["calib"], cfg, plans=build_plans(model, rotation, 64, base=svd))
        outputs = [qmodel.forward(ev.prompts[i], ev.noise[i]) for i in range(len(ev))]
        out[name] = output_nmse(reference, outputs)
    return out


@pytest.fixture(scope="session")
def ablation():
    return {seed: ablation_run(seed) for seed in ABLATION_SEEDS}
