"""Geohash and time-slot featurization against an independent bisection oracle."""

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from checkinrep.geocode import (
    BASE32,
    CoordinateError,
    cell_contains,
    geohash_decode,
    geohash_encode,
    time_slot,
)

# ---------------------------------------------------------------------------
# Independent oracle: straightforward bisection, written without reference to
# the implementation.
# ---------------------------------------------------------------------------


def oracle_axis_bits(value, lo, hi, n):
    bits = []
    for _ in range(n):
        mid = (lo + hi) / 2
        if value >= mid:
            bits.append("1")
            lo = mid
        else:
            bits.append("0")
            hi = mid
    return "".join(bits)


def oracle_base32_lonfirst(lat, lon, total_bits):
    la = oracle_axis_bits(lat, -90.0, 90.0, total_bits // 2)
    lo = oracle_axis_bits(lon, -180.0, 180.0, total_bits // 2)
    inter = "".join(x + y for x, y in zip(lo, la))
    chars = len(inter) // 5
    return "".join(BASE32[int(inter[5 * i : 5 * i + 5], 2)] for i in range(chars))


finite_lat = st.floats(min_value=-89.999, max_value=89.999, allow_nan=False)
finite_lon = st.floats(min_value=-179.999, max_value=179.999, allow_nan=False)


class TestGeohashEncode:
    def test_classic_vector_prefix(self):
        code = geohash_encode(57.64911, 10.40744, 30)
        assert code.text.startswith("u4pru")

    def test_first_bits_on_boundary_point(self):
        # midpoint values go to the upper half, so both first bits are 1
        code = geohash_encode(45.0, 0.0, 2)
        assert code.bits == "11"

    def test_round_trip_cell_contains_origin(self):
        for lat, lon in [(57.64911, 10.40744), (-33.9, 151.2), (0.1, -0.1)]:
            code = geohash_encode(lat, lon, 32)
            assert cell_contains(geohash_decode(code.text), lat, lon)

    @given(finite_lat, finite_lon)
    @settings(max_examples=200, deadline=None)
    def test_interleaving_invariant(self, lat, lon):
        code = geohash_encode(lat, lon, 32)
        e_lat = oracle_axis_bits(lat, -90.0, 90.0, 16)
        e_lon = oracle_axis_bits(lon, -180.0, 180.0, 16)
        for i in range(16):
            assert code.bits[2 * i] == e_lat[i]
            assert code.bits[2 * i + 1] == e_lon[i]

    @given(finite_lat, finite_lon)
    @settings(max_examples=100, deadline=None)
    def test_text_matches_bisection_oracle(self, lat, lon):
        assert geohash_encode(lat, lon, 30).text == oracle_base32_lonfirst(lat, lon, 30)

    @given(finite_lat, finite_lon)
    @settings(max_examples=100, deadline=None)
    def test_monotone_containment(self, lat, lon):
        coarse = geohash_decode(geohash_encode(lat, lon, 20).text)
        fine = geohash_decode(geohash_encode(lat, lon, 40).text)
        assert coarse[0][0] <= fine[0][0] and fine[0][1] <= coarse[0][1]
        assert coarse[1][0] <= fine[1][0] and fine[1][1] <= coarse[1][1]

    def test_char_indices_cover_all_bits(self):
        code = geohash_encode(57.64911, 10.40744, 32)
        assert len(code.char_indices) == math.ceil(32 / 5)
        assert all(0 <= c < 32 for c in code.char_indices)
        # first index is the first five bits of the lat-first sequence
        assert code.char_indices[0] == int(code.bits[:5], 2)

    def test_out_of_range_rejected(self):
        with pytest.raises(CoordinateError):
            geohash_encode(95.0, 0.0)
        with pytest.raises(CoordinateError):
            geohash_encode(0.0, 180.0)

    def test_odd_precision_rejected(self):
        with pytest.raises(ValueError):
            geohash_encode(1.0, 1.0, 31)


class TestTimeSlot:
    def test_weekday_hour(self):
        # 2010-10-19 was a Tuesday; 13:30 UTC
        t = 1287495000
        assert time_slot(t) == 13

    def test_weekend_offset(self):
        # 2023-01-07 was a Saturday; 13:30 UTC
        t = 1673098200
        assert time_slot(t) == 24 + 13

    def test_monday_midnight(self):
        # 2023-01-02 00:00 UTC, a Monday
        assert time_slot(1672617600) == 0

    def test_tz_offset_shifts_day_boundary(self):
        # Friday 23:00 UTC becomes Saturday 01:00 at +2h offset
        t = 1673046000  # 2023-01-06 23:00 UTC
        assert time_slot(t, tz_offset_hours=0.0) == 23
        assert time_slot(t, tz_offset_hours=2.0) == 24 + 1

    def test_image_is_exactly_48_slots_over_a_week(self):
        base = 1672617600  # Monday 00:00 UTC
        seen = {time_slot(base + h * 3600) for h in range(24 * 7)}
        assert seen == set(range(48))
