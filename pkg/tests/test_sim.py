import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memfigless.domain import MEM_MAX, MEM_MIN, FunctionError, SLOConstraints, billed_ms, compute_cost
from memfigless.errors import DimensionMismatch, MemoryOutOfRange, SchemaError, UnknownFunction
from memfigless.sim import (
    OOM_ABORT_MS,
    FunctionModel,
    InstancePool,
    SimBackend,
    ground_truth_duration,
    invoke,
    load_models,
    meets_slo_noise_free,
    optimal_config_oracle,
    payload_magnitude,
    preset,
    preset_models,
    required_memory,
)

PRESET_NAMES = ["matmul", "linpack", "pyaes", "graph-mst", "graph-bfs",
                "graph-pagerank", "dynamic-html", "chameleon"]


def model(**kw):
    base = dict(name="f", payload_dims=1, mem_base=50.0, mem_per_unit=0.01, mem_exp=1.0,
                work_base=1.0, work_exp=1.0, noise_sigma=0.0)
    base.update(kw)
    return FunctionModel(**base)


INF = SLOConstraints(math.inf, math.inf)


def test_required_memory_examples():
    assert required_memory(model(mem_per_unit=0.0), [1234]) == 50.0
    assert required_memory(model(), [10000]) == pytest.approx(150.0, rel=1e-12)
    assert required_memory(model(mem_exp=2.0, mem_per_unit=1e-6), [10000]) == pytest.approx(150.0, rel=1e-12)


def test_geometric_mean_magnitude():
    assert payload_magnitude((4.0, 9.0)) == pytest.approx(6.0, rel=1e-12)
    assert payload_magnitude((7.0,)) == pytest.approx(7.0, rel=1e-12)
    assert payload_magnitude((0.0, 9.0)) == 0.0


def test_duration_examples():
    m = model(work_base=2.0, ref_memory=1000.0, max_speedup=2.0)
    w = 2.0 * 500
    assert ground_truth_duration(m, [500], 1000) == w
    assert ground_truth_duration(m, [500], 2000) == w / 2
    assert ground_truth_duration(m, [500], 4000) == w / 2


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        required_memory(model(), [1, 2])
    with pytest.raises(DimensionMismatch):
        ground_truth_duration(model(payload_dims=2), [1], 512)


@pytest.mark.parametrize("kw", [
    {"payload_dims": 0}, {"work_base": 0.0}, {"mem_exp": 0.0}, {"max_speedup": 0.5},
    {"noise_sigma": -0.1}, {"cold_start_ms": (10.0, 20.0)}, {"timeout_ms": 0.0},
])
def test_model_validation(kw):
    with pytest.raises(SchemaError):
        model(**kw)


def test_model_dict_round_trip(tmp_path):
    m = model(cold_start_ms=(300.0, 20.0))
    assert FunctionModel.from_dict(m.to_dict()) == m
    with pytest.raises(SchemaError):
        FunctionModel.from_dict({**m.to_dict(), "bogus": 1})
    path = tmp_path / "m.json"
    import json
    path.write_text(json.dumps([m.to_dict()]))
    assert load_models(path) == {"f": m}


payloads = st.floats(1, 1e4, allow_nan=False)
memories = st.integers(MEM_MIN, MEM_MAX)


@given(payloads, memories, memories)
def test_duration_non_increasing_in_memory(p, m1, m2):
    for mdl in preset_models().values():
        x = [p] * mdl.payload_dims
        lo, hi = sorted((m1, m2))
        assert ground_truth_duration(mdl, x, lo) >= ground_truth_duration(mdl, x, hi)


@given(payloads, payloads, memories)
def test_payload_monotone(p1, p2, m):
    lo, hi = sorted((p1, p2))
    for mdl in preset_models().values():
        a, b = [lo] * mdl.payload_dims, [hi] * mdl.payload_dims
        assert ground_truth_duration(mdl, a, m) <= ground_truth_duration(mdl, b, m)
        assert required_memory(mdl, a) <= required_memory(mdl, b)


@given(st.floats(1, 1e4), st.floats(1, 1e4), st.floats(1, 1e4), memories)
def test_payload_monotone_per_component(a, b, c, m):
    mdl = preset("pyaes")
    lo, hi = sorted((a, b))
    assert ground_truth_duration(mdl, [lo, c], m) <= ground_truth_duration(mdl, [hi, c], m)
    assert required_memory(mdl, [c, lo]) <= required_memory(mdl, [c, hi])


def test_presets_complete_and_valid():
    models = preset_models()
    assert sorted(models) == sorted(PRESET_NAMES)
    assert models["pyaes"].payload_dims == 2
    for m in models.values():
        assert m.mem_per_unit > 0 and m.work_base > 0
        # diminishing returns: flat beyond the cap, so some memory gives no speedup
        assert m.ref_memory * m.max_speedup <= MEM_MAX
    with pytest.raises(UnknownFunction):
        preset("nope")


def test_invoke_oom_boundary():
    m = model(mem_base=300.0, mem_per_unit=0.0)
    pool = InstancePool()
    r = invoke(m, [10], 299, pool, 0, 0)
    assert r.function_error is FunctionError.OOM
    assert r.billed_duration == OOM_ABORT_MS and r.memory_used == 299
    assert invoke(m, [10], 300, pool, 0, 1).function_error is FunctionError.NONE


def test_invoke_noise_free_warm_path():
    m = model(work_base=1.3, ref_memory=1769.0)
    pool = InstancePool()
    first = invoke(m, [100], 512, pool, 0, 0)
    assert first.cold_start and first.init_duration > 0
    second = invoke(m, [100], 512, pool, 0, 1)
    assert not second.cold_start and second.init_duration == 0.0
    assert second.billed_duration == math.ceil(ground_truth_duration(m, [100], 512))
    cost, gb_s = compute_cost(second.billed_duration, 512)
    assert second.cost_usd == cost and second.billed_gb_s == gb_s
    assert first.billed_duration == billed_ms(ground_truth_duration(m, [100], 512) + first.init_duration)


def test_invoke_timeout():
    m = model(work_base=100.0, timeout_ms=1000.0)
    pool = InstancePool()
    invoke(m, [100], 1769, pool, 0, 0)  # warm one up is impossible: it times out
    r = invoke(m, [100], 1769, pool, 0, 1)
    assert r.function_error is FunctionError.TIMEOUT
    assert r.cold_start  # failures leave no warm instance
    assert r.billed_duration == math.ceil(1000.0 + r.init_duration)


def test_invoke_memory_range():
    with pytest.raises(MemoryOutOfRange):
        invoke(model(), [1], 127, InstancePool(), 0, 0)
    with pytest.raises(MemoryOutOfRange):
        invoke(model(), [1], 3009, InstancePool(), 0, 0)
    with pytest.raises(MemoryOutOfRange):
        invoke(model(), [1], 256.5, InstancePool(), 0, 0)


@given(st.floats(1, 1e4), st.integers(MEM_MIN, MEM_MAX), st.integers(0, 2**31))
def test_oom_iff_below_floor(p, mem, seed):
    m = preset("graph-mst")
    r = invoke(m, [p], mem, InstancePool(), seed, 0)
    assert (r.function_error is FunctionError.OOM) == (mem < required_memory(m, [p]))


def test_keep_alive_expiry():
    pool = InstancePool(keep_alive=5)
    pool.release(512, 0)
    assert pool.has_warm(512, now=5)
    assert not pool.has_warm(512, now=6)
    assert pool.counts() == {}


def test_pool_acquire_consumes():
    pool = InstancePool()
    pool.release(256, 0)
    pool.release(256, 1)
    assert pool.counts() == {256: 2}
    assert pool.acquire(256, 2)
    assert pool.acquire(256, 2)
    assert not pool.acquire(256, 2)


def _stream(seed):
    b = SimBackend(preset_models(), seed=seed)
    rng = np.random.default_rng(3)
    out = []
    for _ in range(200):
        name = ["matmul", "pyaes"][int(rng.integers(2))]
        dims = b.model(name).payload_dims
        out.append(b.invoke(name, list(rng.uniform(10, 10000, dims).round()), int(rng.integers(128, 3009))))
    return out


def test_replay_determinism():
    assert _stream(11) == _stream(11)
    assert _stream(11) != _stream(12)


def test_backend_counter_and_ids():
    b = SimBackend(model(), seed=0)
    r0, r1 = b.invoke("f", [1], 128), b.invoke("f", [1], 128)
    assert (r0.timestamp, r1.timestamp) == (0, 1)
    assert r0.request_id != r1.request_id
    assert b.has_warm("f", 128)
    with pytest.raises(UnknownFunction):
        b.invoke("g", [1], 128)


def test_oracle_examples():
    m = model(mem_base=300.0, mem_per_unit=0.0)
    assert optimal_config_oracle(m, [10], INF) == 300
    assert optimal_config_oracle(m, [10], INF, memory_step=128) == 384
    fast = ground_truth_duration(m, [10], 3008)
    assert optimal_config_oracle(m, [10], SLOConstraints(fast * 0.99, math.inf)) is None


def _brute_oracle(m, p, c):
    best = None
    for mem in range(MEM_MIN, MEM_MAX + 1):
        if mem < required_memory(m, p):
            continue
        d = ground_truth_duration(m, p, mem)
        if d <= c.deadline_ms and compute_cost(billed_ms(d), mem).cost_usd <= c.budget_usd:
            best = mem
            break
    return best


@given(st.sampled_from(PRESET_NAMES), st.floats(10, 10000), st.floats(50, 60000), st.floats(1e-6, 2e-3))
def test_oracle_consistency(name, p, deadline, budget):
    m = preset(name)
    x = [p] * m.payload_dims
    c = SLOConstraints(deadline, budget)
    got = optimal_config_oracle(m, x, c)
    assert got == _brute_oracle(m, x, c)
    if got is not None:
        assert meets_slo_noise_free(m, x, got, deadline)
        r = invoke(FunctionModel(**{**m.to_dict(), "cold_start_ms": tuple(m.cold_start_ms), "noise_sigma": 0.0}),
                   x, got, InstancePool(), 0, 0)
        assert r.function_error is FunctionError.NONE
        assert got == MEM_MIN or not meets_slo_noise_free(m, x, got - 1, deadline) \
            or compute_cost(billed_ms(ground_truth_duration(m, x, got - 1)), got - 1).cost_usd > budget


def test_meets_slo_noise_free():
    m = model(mem_base=300.0, mem_per_unit=0.0)
    assert not meets_slo_noise_free(m, [10], 299, math.inf)
    d = ground_truth_duration(m, [10], 512)
    assert meets_slo_noise_free(m, [10], 512, d)
    assert not meets_slo_noise_free(m, [10], 512, d * 0.999)
