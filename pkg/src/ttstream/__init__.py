"""Streaming transformer-transducer speech recognition inference on numpy."""
from .encoder import encode_offline
from .estimator import StreamingTransducer
from .exceptions import (
    BadMagicError,
    ConfigError,
    FormatError,
    InvalidMaskError,
    ManifestError,
    SequencingError,
    ShapeError,
    SizeMismatchError,
    TruncatedError,
    TTStreamError,
    UnknownDtypeError,
)
from .maskgen import MaskSpec, avg_lookahead, build_mask, reception_field
from .model import EncoderConfig, ModelConfig, count_parameters
from .modelio import (
    load_checkpoint,
    random_init,
    read_features,
    save_checkpoint,
    stack_frames,
    write_features,
)
from .quant import quantize_model
from .streaming import encode_streaming, open_stream, step_block, step_chunk, verify_equivalence
from .transducer import beam_search, greedy_decode, oracle_decode, transducer_forward_logprob

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "ConfigError", "EncoderConfig", "FormatError", "InvalidMaskError",
    "ManifestError", "MaskSpec", "ModelConfig", "SequencingError", "ShapeError",
    "SizeMismatchError", "StreamingTransducer", "TTStreamError", "TruncatedError",
    "UnknownDtypeError", "avg_lookahead", "beam_search", "build_mask", "count_parameters",
    "encode_offline", "encode_streaming", "greedy_decode", "load_checkpoint", "open_stream",
    "oracle_decode", "quantize_model", "random_init", "read_features", "reception_field",
    "save_checkpoint", "stack_frames", "step_block", "step_chunk", "transducer_forward_logprob",
    "verify_equivalence", "write_features",
]
