from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from primgrasp import Category, RotatedPrimitive

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def angles():
    # (-pi/2, pi/2]; nextafter keeps the open end open
    return st.floats(np.nextafter(-math.pi / 2, 0.0), math.pi / 2, allow_nan=False)


@st.composite
def primitives(draw, categories=tuple(Category), lo=1.0, hi=200.0, extent=500.0):
    cat = Category(draw(st.sampled_from(categories)))
    w = draw(st.floats(lo, hi))
    h = w if cat.symmetric else draw(st.floats(lo, hi))
    theta = draw(angles())
    cx = draw(st.floats(-extent, extent))
    cy = draw(st.floats(-extent, extent))
    return RotatedPrimitive(cat, cx, cy, w, h, theta)


def random_primitive(rng, categories=(Category.RECTANGLE,), extent=40.0, size=(2.0, 30.0)):
    cat = Category(categories[int(rng.integers(len(categories)))])
    w = float(rng.uniform(*size))
    h = w if cat.symmetric else float(rng.uniform(*size))
    theta = float(rng.uniform(-math.pi / 2, math.pi / 2))
    if theta == -math.pi / 2:
        theta = math.pi / 2
    return RotatedPrimitive(cat, float(rng.uniform(-extent, extent)), float(rng.uniform(-extent, extent)), w, h, theta)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS:
        terminalreporter.write_line(line)
