"""Signed fixed-point encoding of real-valued quantities into integers.

RSSI measurements (dBm) are scaled by ``MEASUREMENT_SCALE`` = 10**5, giving
five decimal places of precision.  All cost-domain quantities (squared
distances, negative-log probabilities, accumulated path costs) live uniformly
at ``COST_SCALE`` = 10**10 so that products of two measurement-scale values
and negative-log costs add without any rescaling, which matters because
division is not available under the homomorphic encryption layer.
"""

from __future__ import annotations

from dataclasses import dataclass

MEASUREMENT_SCALE = 10**5
COST_SCALE = MEASUREMENT_SCALE**2

# Bit bound on the magnitude of any plaintext cost value.
DEFAULT_L_COST = 63
# Statistical security parameter for additive/multiplicative blinding.
DEFAULT_KAPPA = 40

# Plausible RSSI range (dBm) accepted from measurement sources.
RSSI_MIN_DBM = -110.0
RSSI_MAX_DBM = 0.0


class EncodingRangeError(ValueError):
    """A value does not fit the configured fixed-point magnitude bound."""


@dataclass(frozen=True)
class FixedPointParams:
    """Scaling and bit-bound parameters shared by both protocol parties.

    ``measurement_scale`` scales raw dBm readings; ``cost_scale`` (its square)
    scales every cost-domain value.  ``l_cost`` bounds the bit length of any
    plaintext magnitude, and ``kappa`` is the statistical blinding parameter.
    The relation ``l_cost + kappa + 1 < key_bits/2`` must hold for the
    blinded-comparison arithmetic to stay inside the plaintext ring.
    """

    measurement_scale: int = MEASUREMENT_SCALE
    l_cost: int = DEFAULT_L_COST
    kappa: int = DEFAULT_KAPPA

    @property
    def cost_scale(self) -> int:
        return self.measurement_scale**2

    @property
    def max_magnitude(self) -> int:
        return 1 << self.l_cost

    def check_magnitude(self, value: int, what: str = "value") -> int:
        if not -self.max_magnitude < value < self.max_magnitude:
            raise EncodingRangeError(
                f"{what} {value} exceeds the 2^{self.l_cost} magnitude bound"
            )
        return value


DEFAULT_PARAMS = FixedPointParams()


def fp_encode(x: float, scale: int, l_cost: int = DEFAULT_L_COST) -> int:
    """Scale ``x`` by ``scale`` and round to the nearest integer.

    Raises :class:`EncodingRangeError` when the result would exceed the
    ``2^l_cost`` magnitude bound.
    """
    v = round(x * scale)
    if not -(1 << l_cost) < v < (1 << l_cost):
        raise EncodingRangeError(
            f"{x} at scale {scale} exceeds the 2^{l_cost} magnitude bound"
        )
    return v


def fp_decode(v: int, scale: int) -> float:
    """Inverse of :func:`fp_encode` up to the 1/(2*scale) rounding error."""
    return v / scale
