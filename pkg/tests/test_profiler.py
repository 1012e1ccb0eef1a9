import json

import numpy as np
import pytest

from memfigless.domain import FunctionError
from memfigless.errors import DimensionMismatch, EmptyDataset, EmptyGrid, SchemaError
from memfigless.profiler import (
    Dataset,
    ProfilePlan,
    default_payload_grid,
    default_plan,
    expand_payload_grid,
    expand_plan,
    payload_bounds,
    run_profile,
    sample_payload_stream,
    summarize,
)
from memfigless.sim import FunctionModel, SimBackend, preset_models


def small_model():
    return FunctionModel(name="f", payload_dims=1, mem_base=200.0, mem_per_unit=0.05, mem_exp=1.0,
                         work_base=0.5, work_exp=1.0)


def small_plan(**kw):
    base = dict(function="f", payload_grid=((100.0,), (2000.0,), (5000.0,)),
                memory_min=128, memory_max=640, memory_step=128, iterations=2, seed=3)
    base.update(kw)
    return ProfilePlan(**base)


def test_default_memory_grid_has_23_sizes():
    plan = default_plan("matmul", 1)
    assert plan.memory_grid[0] == 128 and plan.memory_grid[-1] == 2944
    assert len(plan.memory_grid) == 23


@pytest.mark.parametrize("dims", [1, 2])
def test_default_payload_grid_has_50_points(dims):
    grid = expand_payload_grid(default_payload_grid(dims))
    assert len(grid) == 50
    arr = np.array(grid)
    assert arr.min() == 10 and arr.max() <= 10000
    assert all(len(p) == dims for p in grid)


def test_record_count_is_grid_product():
    plan = default_plan("matmul", 1)
    assert len(expand_plan(plan)) == 23 * 50 * 3


def test_expand_plan_order():
    cells = expand_plan(small_plan())
    assert cells[:3] == [((100.0,), 128), ((100.0,), 128), ((100.0,), 256)]
    assert len(cells) == 3 * 5 * 2


def test_expand_payload_grid_forms():
    assert expand_payload_grid([1, 2]) == [(1.0,), (2.0,)]
    assert expand_payload_grid({"min": 0, "max": 10, "step": 5}) == [(0.0,), (5.0,), (10.0,)]
    two = expand_payload_grid([{"min": 1, "max": 2, "step": 1}, {"min": 5, "max": 6, "step": 1}])
    assert two == [(1.0, 5.0), (1.0, 6.0), (2.0, 5.0), (2.0, 6.0)]
    with pytest.raises(EmptyGrid):
        expand_payload_grid([])
    with pytest.raises(SchemaError):
        expand_payload_grid({"min": 5, "max": 1, "step": 1})


@pytest.mark.parametrize("kw", [
    {"payload_grid": ()},
    {"payload_grid": ((1.0,), (1.0, 2.0))},
    {"memory_step": 0},
    {"memory_min": 64},
    {"memory_max": 4096},
    {"iterations": 0},
])
def test_plan_validation(kw):
    with pytest.raises((SchemaError, EmptyGrid)):
        small_plan(**kw)


def test_plan_round_trip(tmp_path):
    plan = small_plan()
    path = tmp_path / "plan.json"
    plan.save(path)
    assert ProfilePlan.load(path) == plan
    assert ProfilePlan.load(path).digest() == plan.digest()
    with pytest.raises(SchemaError):
        ProfilePlan.from_dict({**plan.to_dict(), "surprise": 1})


def test_run_profile_records_and_failures():
    plan = small_plan()
    ds = run_profile(plan, SimBackend(small_model(), seed=3))
    assert len(ds) == len(expand_plan(plan))
    assert [(r.payload, r.memory_size) for r in ds.records] == expand_plan(plan)
    # required memory is 205..450 MB, so the low sizes fail and stay in the data
    assert any(r.function_error is FunctionError.OOM for r in ds.records)
    assert ds.provenance == plan.digest()


def test_run_profile_dimension_check():
    plan = small_plan(payload_grid=((1.0, 2.0),))
    with pytest.raises(DimensionMismatch):
        run_profile(plan, SimBackend(small_model()))


def test_dataset_round_trip_and_bytes(tmp_path):
    plan = small_plan()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    run_profile(plan, SimBackend(small_model(), seed=3)).save(a)
    run_profile(plan, SimBackend(small_model(), seed=3)).save(b)
    assert a.read_bytes() == b.read_bytes()
    ds = Dataset.load(a)
    assert ds.function == "f" and len(ds) == 30 and ds.plan == plan.to_dict()


def test_dataset_load_rejects_other_files(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps({"format": "other"}) + "\n")
    with pytest.raises(SchemaError):
        Dataset.load(p)
    p.write_text("")
    with pytest.raises(SchemaError):
        Dataset.load(p)


def test_summary_statistics():
    ds = run_profile(small_plan(), SimBackend(small_model(), seed=3))
    s = summarize(ds)
    ok = [r for r in ds.records if r.succeeded]
    assert s.n_success == len(ok)
    assert s.duration_mean == pytest.approx(np.mean([r.billed_duration for r in ok]))
    assert s.oom_rate[128] == 1.0 and s.oom_rate[640] == 0.0
    assert "oom rate" in s.table()


def test_summary_needs_success():
    ds = run_profile(small_plan(memory_max=128), SimBackend(small_model(), seed=3))
    with pytest.raises(EmptyDataset):
        summarize(ds)


def test_payload_stream_within_bounds_and_deterministic():
    bounds = [(10.0, 10000.0), (5.0, 50.0)]
    s1 = sample_payload_stream(bounds, 100, seed=4)
    assert s1 == sample_payload_stream(bounds, 100, seed=4)
    arr = np.array(s1)
    assert (arr[:, 0] >= 10).all() and (arr[:, 0] <= 10000).all()
    assert (arr[:, 1] >= 5).all() and (arr[:, 1] <= 50).all()
    assert payload_bounds([(1, 9), (3, 2)]) == [(1.0, 3.0), (2.0, 9.0)]


def test_presets_profile_on_default_plans():
    for name, m in preset_models().items():
        plan = default_plan(name, m.payload_dims, iterations=1)
        assert plan.payload_dims == m.payload_dims
