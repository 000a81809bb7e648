"""Bit-exact CPU emulation of Tensor Core MMA arithmetic."""

from .formats import BF16, FP8_E4M3, FP16, FP32, FloatFormat, UnpackedValue, decode, encode
from .pipeline import AMPERE, HOPPER, LOVELACE, PipelineProfile, Tile, shipped_profile, tile_mma

__version__ = "0.1.0"

__all__ = [
    "BF16", "FP8_E4M3", "FP16", "FP32", "FloatFormat", "UnpackedValue", "decode", "encode",
    "AMPERE", "HOPPER", "LOVELACE", "PipelineProfile", "Tile", "shipped_profile", "tile_mma",
]
