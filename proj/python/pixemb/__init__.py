"""Pixel-embedding quantized classifier toolkit (native core)."""

from ._core import (
    PixembError,
    embed_forward,
    embed_infer,
    merge_table,
    merged_payload,
    one_hot,
    packed_conv2d,
    quantize_activation,
    quantize_weight,
    set_num_threads,
    synthetic_dataset,
    __version__,
)

__all__ = [
    "PixembError",
    "embed_forward",
    "embed_infer",
    "merge_table",
    "merged_payload",
    "one_hot",
    "packed_conv2d",
    "quantize_activation",
    "quantize_weight",
    "set_num_threads",
    "synthetic_dataset",
    "__version__",
]
