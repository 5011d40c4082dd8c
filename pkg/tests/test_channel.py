import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from harqmdp.channel import ChannelModel, capacity, db_to_linear, linear_to_db
from harqmdp.errors import DomainError


@pytest.mark.parametrize("snr, expected", [(0, 0.0), (1, 1.0), (3, 2.0)])
def test_capacity_values(snr, expected):
    assert capacity(snr) == pytest.approx(expected, abs=1e-15)


def test_capacity_rejects_negative():
    with pytest.raises(DomainError):
        capacity(-0.1)
    with pytest.raises(DomainError):
        capacity(np.array([1.0, -1.0]))


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_capacity_strictly_increasing(a, b):
    if a < b:
        assert capacity(a) < capacity(b) or b - a < 1e-9 * max(1, a)


def test_pdf_cdf_examples():
    ch = ChannelModel(3.0)
    assert ch.cdf(0) == 0
    assert ch.cdf(3.0 * math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert ch.pdf(0) == pytest.approx(1 / 3.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        ChannelModel(0.0)
    with pytest.raises(DomainError):
        ChannelModel(-1.0)
    ch = ChannelModel(1.0)
    with pytest.raises(DomainError):
        ch.pdf(-1)
    with pytest.raises(DomainError):
        ch.cdf(-1)
    with pytest.raises(DomainError):
        ch.inv_cdf(1.0)
    with pytest.raises(DomainError):
        ch.inv_cdf(-0.1)


@pytest.mark.parametrize("g", [0.1, 1.0, 10.0, 1000.0])
def test_pdf_integrates_to_one(g):
    ch = ChannelModel(g)
    val, _ = integrate.quad(ch.pdf, 0, np.inf, epsabs=1e-13)
    assert val == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("g", [0.5, 10.0, 3000.0])
def test_inverse_roundtrip(g):
    ch = ChannelModel(g)
    x = np.linspace(0, 5 * g, 101)
    assert np.allclose(ch.inv_cdf(ch.cdf(x)), x, rtol=1e-12, atol=1e-12 * g)


@given(st.floats(1e-3, 1e4), st.floats(0, 0.999999))
def test_cdf_of_inverse(g, u):
    ch = ChannelModel(g)
    assert ch.cdf(ch.inv_cdf(u)) == pytest.approx(u, abs=1e-12)


def test_cdf_monotone_and_limits():
    ch = ChannelModel(7.0)
    x = np.linspace(0, 500, 1001)
    c = ch.cdf(x)
    assert np.all(np.diff(c) >= 0)
    assert c[0] == 0 and c[-1] == pytest.approx(1.0, abs=1e-12)


def test_ergodic_capacity_oracle():
    # independent oracle: exponential-integral identity
    ch = ChannelModel(20.0)
    assert ch.ergodic_capacity() == pytest.approx(ch.ergodic_capacity_closed_form(), rel=1e-9)
    assert ch.ergodic_capacity() == pytest.approx(3.7430, abs=5e-4)


@pytest.mark.parametrize("db", [-20, 0, 13, 35, 60])
def test_ergodic_matches_closed_form(db):
    ch = ChannelModel.from_db(db)
    assert ch.ergodic_capacity() == pytest.approx(ch.ergodic_capacity_closed_form(), rel=1e-8)


def test_ergodic_limits_and_monotone():
    assert ChannelModel(1e-8).ergodic_capacity() < 1e-7
    assert ChannelModel(10.0).ergodic_capacity() < ChannelModel(20.0).ergodic_capacity()


def test_sample_examples():
    class Fixed:
        def __init__(self, u):
            self.u = u

        def random(self, size=None):
            return self.u

    assert ChannelModel(1.0).sample(Fixed(0.0)) == 0.0
    assert ChannelModel(1.0).sample(Fixed(0.5)) == pytest.approx(math.log(2))


def test_sample_determinism_and_mean():
    ch = ChannelModel(5.0)
    a = ch.sample(np.random.default_rng(3), 10**6)
    b = ch.sample(np.random.default_rng(3), 10**6)
    assert np.array_equal(a, b)
    assert abs(a.mean() - 5.0) < 4 * 5.0 / 1e3


def test_db_conversion():
    assert db_to_linear(10) == pytest.approx(10.0)
    assert linear_to_db(100.0) == pytest.approx(20.0)
    assert ChannelModel.from_db(13.0103).mean_snr == pytest.approx(20.0, rel=1e-5)
