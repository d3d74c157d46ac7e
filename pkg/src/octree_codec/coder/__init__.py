from .baseline import AdaptiveModel
from .codec import (Bitstream, BitstreamError, DecodeCorruptionError, ModelMismatchError,
                    decode, encode)
from .rangecoder import RangeDecoder, RangeEncoder

__all__ = ["AdaptiveModel", "Bitstream", "BitstreamError", "DecodeCorruptionError",
           "ModelMismatchError", "decode", "encode", "RangeDecoder", "RangeEncoder"]
