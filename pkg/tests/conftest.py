import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


def make_record(**overrides):
    from memfigless.domain import validate_record

    raw = {
        "request_id": "f-00000001",
        "payload": [100.0],
        "memory_size": 512,
        "memory_used": 128.0,
        "billed_duration": 250,
        "cost_usd": 2.1e-06,
        "cold_start": False,
        "init_duration": 0.0,
        "function_error": "none",
        "timestamp": 1,
    }
    raw.update(overrides)
    return validate_record(raw)


@pytest.fixture
def record_factory():
    return make_record
