"""QLoRA-style fine-tuning toolkit: NF4 quantization, LoRA adapters, 8-bit Adam."""

from ._core import (
    ConfigError,
    Error,
    QuantizedTensor,
    check_markdown,
    compliance_rate,
    decode,
    encode_text,
    estimate_memory,
    generate_corpus,
    loss_reduction,
    lora_param_count,
    lr_at,
    nf4_codebook,
    nf4_max_gap,
    plan_phase,
    quant_error_stats,
    quantize_nf4,
    run_cli,
)

__all__ = [
    "ConfigError",
    "Error",
    "QuantizedTensor",
    "check_markdown",
    "compliance_rate",
    "decode",
    "encode_text",
    "estimate_memory",
    "generate_corpus",
    "loss_reduction",
    "lora_param_count",
    "lr_at",
    "nf4_codebook",
    "nf4_max_gap",
    "plan_phase",
    "quant_error_stats",
    "quantize_nf4",
    "run_cli",
]
