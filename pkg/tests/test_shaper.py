import ipaddress
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eip.identity import Locator
from eip.shaper import Admission, BucketKey, Shaper, ShaperConfig


def key(text: str) -> BucketKey:
    return BucketKey.for_locator(Locator.parse(text))


def test_bucket_keys_group_prefixes():
    assert key("192.0.2.1") == key("192.0.2.254")
    assert key("192.0.2.1") != key("192.0.3.1")
    assert key("2001:db8:0:100::1") == key("2001:db8:0:1ff::9")
    assert key("2001:db8:0:100::1") != key("2001:db8:0:200::1")
    assert key("0.0.0.1") != key("::1")
    assert str(key("192.0.2.77")) == "192.0.2.0/24"


def test_config_validation():
    assert ShaperConfig(2.5).capacity == 3
    assert ShaperConfig(10, burst=4).capacity == 4
    for bad in (dict(r_shap=0), dict(r_shap=1, burst=0)):
        with pytest.raises(ValueError):
            ShaperConfig(**bad)


def test_burst_then_steady_rate():
    s = Shaper(ShaperConfig(10))
    k = key("10.0.0.1")
    assert all(s.admit(k, 0.0) for _ in range(10))
    assert s.admit(k, 0.0) is Admission.DROP
    assert s.admit(k, 0.1) is Admission.ALLOW
    assert s.admit(k, 0.1) is Admission.DROP


@pytest.mark.parametrize("r_shap", [1, 2.5, 10, 40])
def test_converges_to_rate_under_tenfold_load(r_shap):
    s = Shaper(ShaperConfig(r_shap))
    k = key("198.51.100.9")
    step = 1 / (10 * r_shap)
    n = int(60 / step)
    allowed = sum(bool(s.admit(k, i * step)) for i in range(n))
    assert abs(allowed / 60 - r_shap) / r_shap < 0.1


def test_outstanding_gauge_and_anomalies():
    s = Shaper(ShaperConfig(5))
    k = key("10.1.1.1")
    for _ in range(3):
        s.admit(k, 0.0)
    s.on_solution(k)
    assert s.outstanding(k) == 2
    s.on_solution(k)
    s.on_solution(k)
    assert s.outstanding(k) == 0 and s.anomalies == 0
    s.on_solution(k)
    s.on_solution(key("10.9.9.9"))
    assert s.anomalies == 2
    # solutions never refill tokens
    assert sum(bool(s.admit(k, 0.0)) for _ in range(5)) == 2


def test_idle_buckets_are_evicted_without_bonus_tokens():
    s = Shaper(ShaperConfig(2))
    a, b = key("10.0.0.1"), key("10.0.1.1")
    s.admit(a, 0.0)
    s.admit(b, 100.0)
    assert a not in s.buckets and b in s.buckets
    assert len(s.buckets) == 1


def test_metrics_csv():
    s = Shaper(ShaperConfig(1))
    k = key("10.0.0.1")
    s.admit(k, 0.0)
    s.admit(k, 0.0)
    s.on_solution(k)
    assert s.metrics_csv().splitlines() == ["bucket,allowed,dropped,solved,outstanding", "10.0.0.0/24,1,1,1,0"]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.5, 50))
def test_isolation_and_conservation(seed, r_shap):
    rng = random.Random(seed)
    cfg = ShaperConfig(r_shap)
    shared = Shaper(cfg)
    prefixes = [f"10.{i}.0." for i in range(5)]
    solo = {p: Shaper(cfg) for p in prefixes}
    offered = {p: 0 for p in prefixes}
    t = 0.0
    for _ in range(400):
        t += rng.expovariate(5 * r_shap)
        p = rng.choice(prefixes)
        # different hosts inside one /24 share a bucket
        k = BucketKey.for_locator(Locator(ipaddress.IPv4Address(f"{p}{rng.randrange(256)}")))
        offered[p] += 1
        got = shared.admit(k, t)
        assert got == solo[p].admit(k, t)  # other prefixes never influence a bucket
        if got and rng.random() < 0.5:
            shared.on_solution(k)
            solo[p].on_solution(k)
    assert shared.anomalies == 0
    for p in prefixes:
        k = key(p + "1")
        b = shared.buckets.get(k)
        if b is None:
            continue
        # eviction may reset counters but never invents events
        assert b.allowed + b.dropped <= offered[p]
        assert b.outstanding == b.allowed - b.solved >= 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=1, max_size=300), st.floats(0.5, 20))
def test_allowed_never_exceeds_token_budget(times, r_shap):
    s = Shaper(ShaperConfig(r_shap))
    k = key("10.0.0.1")
    times = sorted(times)
    allowed = sum(bool(s.admit(k, t)) for t in times)
    assert allowed <= s.config.capacity + r_shap * (times[-1] - times[0]) + 1e-9
