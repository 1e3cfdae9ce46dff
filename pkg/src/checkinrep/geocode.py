"""Deterministic coordinate and timestamp featurization.

Coordinates are geohashed by recursive bisection of the latitude and
longitude ranges. The resulting code carries two views of the same cell:

* ``bits`` -- the interleaved binary sequence used as a model feature,
  with latitude on even positions and longitude on odd positions;
* ``text`` -- the conventional Base32 geohash string (longitude bit
  first), so it stays decodable by standard geohash tooling.

Timestamps are discretized into 48 hour-of-week-type slots: hour of day
for weekdays, hour of day + 24 for weekends.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

BASE32 = "0123456789bcdefghjkmnpqrstuvwxyz"
_BASE32_INDEX = {c: i for i, c in enumerate(BASE32)}

LAT_MIN, LAT_MAX = -90.0, 90.0
LON_MIN, LON_MAX = -180.0, 180.0

NUM_TIME_SLOTS = 48
WEEKEND_OFFSET = 24

DEFAULT_PRECISION_BITS = 32


class CoordinateError(ValueError):
    """Raised for coordinates outside the open (lat, lon) domain."""


@dataclass(frozen=True)
class GeohashCode:
    """Geohash cell of one coordinate pair.

    ``bits[2i]`` is the i-th latitude bit and ``bits[2i+1]`` the i-th
    longitude bit. ``text`` encodes the same bisection path in the
    longitude-first Base32 convention, truncated to whole characters.
    """

    bits: str
    text: str

    @property
    def char_indices(self) -> tuple[int, ...]:
        """5-bit groups of ``bits`` as integers in [0, 32).

        The tail group is zero-padded, so every bit of the cell is
        visible to a per-character embedding table.
        """
        out = []
        for i in range(0, len(self.bits), 5):
            group = self.bits[i : i + 5].ljust(5, "0")
            out.append(int(group, 2))
        return tuple(out)


def _axis_bits(value: float, lo: float, hi: float, n: int) -> str:
    # Value equal to the midpoint goes to the upper half.
    out = []
    for _ in range(n):
        mid = (lo + hi) / 2.0
        if value >= mid:
            out.append("1")
            lo = mid
        else:
            out.append("0")
            hi = mid
    return "".join(out)


def _check_domain(lat: float, lon: float) -> None:
    if not (LAT_MIN < lat < LAT_MAX):
        raise CoordinateError(f"latitude {lat!r} outside ({LAT_MIN}, {LAT_MAX})")
    if not (LON_MIN < lon < LON_MAX):
        raise CoordinateError(f"longitude {lon!r} outside ({LON_MIN}, {LON_MAX})")


def geohash_encode(lat: float, lon: float, precision_bits: int = DEFAULT_PRECISION_BITS) -> GeohashCode:
    """Encode a coordinate pair into a geohash cell of ``precision_bits`` total bits.

    ``precision_bits`` must be even; each axis contributes half of the bits.
    """
    _check_domain(lat, lon)
    if precision_bits < 2 or precision_bits % 2 != 0:
        raise ValueError(f"precision_bits must be a positive even integer, got {precision_bits}")
    per_axis = precision_bits // 2
    e_lat = _axis_bits(lat, LAT_MIN, LAT_MAX, per_axis)
    e_lon = _axis_bits(lon, LON_MIN, LON_MAX, per_axis)

    bits = "".join(a + b for a, b in zip(e_lat, e_lon))

    # Base32 text follows the standard longitude-first interleaving and
    # keeps only whole 5-bit characters.
    inter = "".join(a + b for a, b in zip(e_lon, e_lat))
    n_chars = len(inter) // 5
    text = "".join(BASE32[int(inter[5 * i : 5 * i + 5], 2)] for i in range(n_chars))
    return GeohashCode(bits=bits, text=text)


def geohash_decode(text: str) -> tuple[tuple[float, float], tuple[float, float]]:
    """Decode a Base32 geohash string into ((lat_lo, lat_hi), (lon_lo, lon_hi))."""
    lat_lo, lat_hi = LAT_MIN, LAT_MAX
    lon_lo, lon_hi = LON_MIN, LON_MAX
    is_lon = True
    for c in text:
        try:
            v = _BASE32_INDEX[c]
        except KeyError:
            raise ValueError(f"invalid geohash character {c!r}") from None
        for shift in range(4, -1, -1):
            bit = (v >> shift) & 1
            if is_lon:
                mid = (lon_lo + lon_hi) / 2.0
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2.0
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            is_lon = not is_lon
    return (lat_lo, lat_hi), (lon_lo, lon_hi)


def cell_contains(cell: tuple[tuple[float, float], tuple[float, float]], lat: float, lon: float) -> bool:
    (lat_lo, lat_hi), (lon_lo, lon_hi) = cell
    return lat_lo <= lat <= lat_hi and lon_lo <= lon <= lon_hi


def time_slot(t: float, tz_offset_hours: float = 0.0) -> int:
    """Discretize an epoch timestamp into one of 48 slots.

    Weekday events map to their local hour [0, 24); Saturday and Sunday
    events map to 24 + hour. ``tz_offset_hours`` shifts UTC into the
    dataset's local civic time.
    """
    local = datetime.fromtimestamp(t, tz=timezone.utc) + timedelta(hours=tz_offset_hours)
    slot = local.hour
    if local.weekday() >= 5:
        slot += WEEKEND_OFFSET
    return slot
