import math

import numpy as np
import pytest

import oracles
from atinuke.errors import ConfigError, IndexRangeError
from atinuke.positional import build_table, lookup_positions, sequence_positions


@pytest.mark.parametrize("dim", [2, 4, 16, 18])
def test_row_zero_alternates(dim):
    row = build_table(dim, 8).row(0)
    assert row.tolist() == [0.0, 1.0] * (dim // 2)


def test_dim2_pos1():
    # mpmath at 30 digits: sin(1), cos(1)
    np.testing.assert_allclose(build_table(2, 4).row(1), [0.841470984807896507, 0.540302305868139717], rtol=0, atol=1e-15)


def test_dim4_pos2_second_pair():
    # divisor 10000**(2/4) = 100, angle 0.02
    row = build_table(4, 4).row(2)
    np.testing.assert_allclose(row[2:], [0.0199986666933330794, 0.999800006666577778], rtol=0, atol=1e-15)


def test_matches_high_precision_oracle():
    d = 12
    table = build_table(d, 300).table.data
    for pos in (0, 1, 7, 63, 299):
        for col in range(d):
            assert table[pos, col] == pytest.approx(oracles.pe_entry(pos, col, d), abs=1e-12)


def test_bounded():
    t = build_table(16, 2000).table.data
    assert np.abs(t).max() <= 1.0


def test_distinct_rows():
    t = np.round(build_table(16, 512).table.data, 9)
    assert len({row.tobytes() for row in t}) == 512


@pytest.mark.parametrize("dim", [1, 3, 7, 0])
def test_odd_dim_rejected(dim):
    with pytest.raises(ConfigError):
        build_table(dim, 10)


def test_bad_max_len():
    with pytest.raises(ConfigError):
        build_table(4, 0)


def test_deterministic_and_shared():
    assert build_table(6, 10) is build_table(6, 10)
    assert build_table(6, 10).table.data.tobytes() == build_table.__wrapped__(6, 10).table.data.tobytes()


class TestLookup:
    def test_single(self):
        out = lookup_positions(build_table(6, 10), [[0]])
        assert out.shape == (1, 1, 6)
        assert out.tolist() == [[[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]]]

    def test_batch_rows_identical(self):
        out = lookup_positions(build_table(6, 10), [[0, 1], [0, 1]]).data
        assert out[0].tobytes() == out[1].tobytes()

    def test_boundary(self):
        table = build_table(4, 10)
        lookup_positions(table, [[9]])
        with pytest.raises(IndexRangeError):
            lookup_positions(table, [[10]])

    def test_sequence_positions(self):
        assert sequence_positions(2, 3).tolist() == [[0, 1, 2], [0, 1, 2]]

    def test_divisor_follows_2i_over_d(self):
        # column 2i uses 10000**(2i/d), not 10000**(4i/d)
        d = 8
        row = build_table(d, 5).row(3)
        for i in range(d // 2):
            assert row[2 * i] == pytest.approx(math.sin(3 / 10000 ** (2 * i / d)), abs=1e-15)
