from mdpipe.perturb.codec import (
    ALL_CONDITIONS,
    CodecCondition,
    CodecError,
    FallbackCodecBackend,
    TranscoderBackend,
    apply_codec,
    default_backend,
    sample_codec_condition,
)
from mdpipe.perturb.resample import narrowband_roundtrip, resample, simulate_bandwidth

__all__ = [
    "ALL_CONDITIONS",
    "CodecCondition",
    "CodecError",
    "FallbackCodecBackend",
    "TranscoderBackend",
    "apply_codec",
    "default_backend",
    "narrowband_roundtrip",
    "resample",
    "sample_codec_condition",
    "simulate_bandwidth",
]
