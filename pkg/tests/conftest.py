"""Shared fixtures and builders for the gridrisk test suite."""

from __future__ import annotations

import numpy as np
import pytest

from gridrisk.ingest import INFRA_TYPES, TractProfile, WeatherSchema

SCHEMA = WeatherSchema()
HEADER = "station,valid," + ",".join(SCHEMA.names)

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def weather_row(station: str, valid: str, values) -> str:
    """One weather.csv line; ``None`` entries become empty (missing) cells."""
    cells = ["" if v is None else repr(float(v)) for v in values]
    return ",".join([station, valid, *cells])


def weather_csv(rows) -> str:
    return "\n".join([HEADER, *(weather_row(*r) for r in rows)]) + "\n"


def make_tract(tract_id="T1", population=1000, k_income=3, k_year=2, lat=42.3, lon=-83.0,
               income=None, year=None, infra=None, households=400, houses=450) -> TractProfile:
    income = income or tuple((100.0 * (i + 1), 10.0) for i in range(k_income))
    year = year or tuple((50.0 * (i + 1), 5.0) for i in range(k_year))
    infra = infra or tuple(range(1, len(INFRA_TYPES) + 1))
    return TractProfile(tract_id, (lat, lon), population, households, houses, income, year, infra)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
