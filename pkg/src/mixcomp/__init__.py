"""Mixed Posit4/FixP4 weight quantization with a bit-exact MAC model.

Layers whose weights suit the tapered Posit grid better than a uniform
fixed-point grid are picked by a gradient-weighted error score and stored
as 4-bit Posit; the rest stay 4-bit fixed point.
"""

from .posit import (
    NAR,
    PositConfig,
    RawPosit,
    ScaleVariant,
    posit_decode,
    posit_decode_raw,
    posit_quantize,
    posit_table,
    posit_val_general,
)
from .quantize import FixP4, FixPParams, PactParams, Posit4, PositGrid

__all__ = [
    "NAR",
    "FixP4",
    "FixPParams",
    "PactParams",
    "Posit4",
    "PositConfig",
    "PositGrid",
    "RawPosit",
    "ScaleVariant",
    "posit_decode",
    "posit_decode_raw",
    "posit_quantize",
    "posit_table",
    "posit_val_general",
]
__version__ = "0.1.0"
