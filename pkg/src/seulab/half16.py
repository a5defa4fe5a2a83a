"""IEEE-754 binary16 patterns and single-bit upsets on them.

Bit layout, LSB = position 0:

    position:  15   14 13 12 11 10   9 8 7 6 5 4 3 2 1 0
    field:     sign [--exponent--]   [------mantissa-----]

The exponent field has bias 15.  Position 14 is the exponent MSB: every
stored weight with magnitude below 1 has it clear, and a 0->1 upset there
multiplies a normal value's magnitude by exactly 2**16.

Patterns are plain ints in [0, 0xFFFF].  All 65536 patterns are legal
inputs everywhere, including subnormals, signed zeros, infinities and
NaNs.  Decoding is exact because every binary16 value is representable
in a Python float (binary64).
"""

from __future__ import annotations

import math
from enum import Enum
from fractions import Fraction

SIGN_POSITION = 15
EXPONENT_MSB = 14
EXPONENT_LSB = 10
MANTISSA_WIDTH = 10
EXPONENT_BIAS = 15

SIGN_MASK = 0x8000
EXPONENT_MASK = 0x7C00
MANTISSA_MASK = 0x03FF

POSITIVE_INFINITY = 0x7C00
NEGATIVE_INFINITY = 0xFC00
CANONICAL_NAN = 0x7E00
MAX_FINITE = 0x7BFF  # 65504.0


class BitField(Enum):
    """Which field of the binary16 layout a bit position belongs to."""

    SIGN = "sign"
    EXPONENT = "exponent"
    MANTISSA = "mantissa"


def _check_pattern(bits: int) -> None:
    if not isinstance(bits, int) or isinstance(bits, bool):
        raise TypeError(f"pattern must be an int, got {type(bits).__name__}")
    if not 0 <= bits <= 0xFFFF:
        raise ValueError(f"pattern out of range [0, 0xFFFF]: {bits:#x}")


def _check_position(position: int) -> None:
    if not isinstance(position, int) or isinstance(position, bool):
        raise TypeError(f"bit position must be an int, got {type(position).__name__}")
    if not 0 <= position <= 15:
        raise ValueError(f"bit position out of range [0, 15]: {position}")


def exponent_field(bits: int) -> int:
    """Raw 5-bit exponent field of a pattern."""
    _check_pattern(bits)
    return (bits & EXPONENT_MASK) >> EXPONENT_LSB


def mantissa_field(bits: int) -> int:
    """Raw 10-bit mantissa field of a pattern."""
    _check_pattern(bits)
    return bits & MANTISSA_MASK


def is_nan(bits: int) -> bool:
    _check_pattern(bits)
    return (bits & EXPONENT_MASK) == EXPONENT_MASK and (bits & MANTISSA_MASK) != 0


def is_infinite(bits: int) -> bool:
    _check_pattern(bits)
    return (bits & EXPONENT_MASK) == EXPONENT_MASK and (bits & MANTISSA_MASK) == 0


def is_finite(bits: int) -> bool:
    _check_pattern(bits)
    return (bits & EXPONENT_MASK) != EXPONENT_MASK


def decode_half(bits: int) -> float:
    """Decode a binary16 pattern to its exact value.

    Subnormals decode as (m/1024) * 2**-14, normals as
    (1 + m/1024) * 2**(e-15).  Exponent field 31 gives +/-inf when the
    mantissa is zero and NaN otherwise.  Total over all 65536 patterns;
    the result is exact (binary16 is a subset of binary64).
    """
    _check_pattern(bits)
    sign = -1.0 if bits & SIGN_MASK else 1.0
    e = (bits & EXPONENT_MASK) >> EXPONENT_LSB
    m = bits & MANTISSA_MASK
    if e == 0x1F:
        if m:
            return math.nan
        return sign * math.inf
    if e == 0:
        return sign * math.ldexp(m, -24)
    return sign * math.ldexp((1 << MANTISSA_WIDTH) + m, e - EXPONENT_BIAS - MANTISSA_WIDTH)


def encode_half(value: float) -> int:
    """Encode a real value as a binary16 pattern, rounding to nearest even.

    Overflow saturates to the signed infinity.  Every NaN input encodes
    to the one canonical quiet-NaN pattern 0x7E00.  Signed zeros keep
    their sign.
    """
    value = float(value)
    if math.isnan(value):
        return CANONICAL_NAN
    sign = SIGN_MASK if math.copysign(1.0, value) < 0.0 else 0
    mag = abs(value)
    if math.isinf(mag):
        return sign | EXPONENT_MASK
    if mag == 0.0:
        return sign
    # frexp is exact: mag = frac * 2**e2 with frac in [0.5, 1).
    _, e2 = math.frexp(mag)
    exponent = e2 - 1
    if exponent > EXPONENT_BIAS:
        return sign | EXPONENT_MASK
    if exponent < 1 - EXPONENT_BIAS:
        # Subnormal candidate: round in units of 2**-24.  Python's round()
        # on Fraction is half-to-even, matching IEEE default rounding.
        units = round(Fraction(mag) * (1 << 24))
        if units == 0:
            return sign
        if units == 1 << MANTISSA_WIDTH:
            return sign | (1 << EXPONENT_LSB)  # rounded up to 2**-14
        return sign | units
    units = round(Fraction(mag) * Fraction(2) ** (MANTISSA_WIDTH - exponent))
    if units == 1 << (MANTISSA_WIDTH + 1):
        exponent += 1
        units = 1 << MANTISSA_WIDTH
        if exponent > EXPONENT_BIAS:
            return sign | EXPONENT_MASK
    return sign | ((exponent + EXPONENT_BIAS) << EXPONENT_LSB) | (units - (1 << MANTISSA_WIDTH))


def flip_bit(bits: int, position: int) -> int:
    """Flip exactly one bit of a pattern.  Involution: flipping twice is identity."""
    _check_pattern(bits)
    _check_position(position)
    return bits ^ (1 << position)


def bit_field_of(position: int) -> BitField:
    """Field membership of a bit position: 15 sign, 14..10 exponent, 9..0 mantissa."""
    _check_position(position)
    if position == SIGN_POSITION:
        return BitField.SIGN
    if position >= EXPONENT_LSB:
        return BitField.EXPONENT
    return BitField.MANTISSA


def critical_flip_amplification(bits: int) -> float:
    """Magnitude ratio |decode(flip_bit(h, 14))| / |decode(h)|.

    Defined for finite nonzero patterns whose bit-14 flip stays finite,
    i.e. exponent field <= 14 (all magnitudes below 1, plus subnormals).
    For any normal in that range the ratio is exactly 2**16 = 65536; for
    subnormals it is larger because the flip also lands in the normal
    range.  Rejects zero, inf, NaN and exponent fields 15..31: field 15
    flips into the inf/NaN encodings and fields >= 16 already have the
    exponent MSB set, so the 0->1 amplification regime does not apply.
    """
    _check_pattern(bits)
    if bits & ~SIGN_MASK == 0:
        raise ValueError("amplification undefined for zero")
    e = (bits & EXPONENT_MASK) >> EXPONENT_LSB
    if e > EXPONENT_BIAS:
        raise ValueError(
            "amplification defined only for patterns with a clear exponent MSB "
            f"(got exponent field {e})"
        )
    if e == EXPONENT_BIAS:
        raise ValueError(
            "exponent field 15 flips into the non-finite encodings; "
            "amplification undefined"
        )
    flipped = flip_bit(bits, EXPONENT_MSB)
    return abs(decode_half(flipped)) / abs(decode_half(bits))
