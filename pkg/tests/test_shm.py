import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrbsp.core import TransportKind
from mrbsp.errors import (CaptureError, PlaceError, RemoteExecutionError,
                          TooManyThreads, UsageError)
from mrbsp.shm import (DistSlice, PlaceRuntime, ShmDistArray, closure,
                       current_runtime)
from mrbsp.transport import make_transport


@pytest.fixture(params=["inproc", "tcp"])
def rt(request):
    transport = None
    if request.param == "tcp":
        transport = make_transport(TransportKind.TCP, 4)
    with PlaceRuntime(4, workers_per_place=2, transport=transport) as runtime:
        yield runtime
    if transport is not None:
        transport.close()


@closure
def add(a, b):
    return a + b


@closure
def where():
    return current_runtime().here


@closure
def new_counter():
    return current_runtime().make_ref([0])


@closure
def read_counter(ref):
    return current_runtime().deref(ref)[0]


@closure
def try_deref(ref):
    try:
        current_runtime().deref(ref)
        return "ok"
    except PlaceError:
        return "PlaceError"


@closure
def bump(ref, times):
    rt = current_runtime()
    cell = rt.deref(ref)
    for _ in range(times):
        with rt.atomic():
            cell[0] += 1


@closure
def offer_local_max(values):
    current_runtime().offer(max(values))


@closure
def boom():
    raise ValueError("remote failure")


@closure
def identity(x):
    return x


def test_at_self_place(rt):
    assert rt.at(0, add, 2, 3) == 5
    assert rt.at(2, where) == 2


def test_locality(rt):
    ref = rt.at(1, new_counter)
    assert rt.at(1, read_counter, ref) == 0
    with pytest.raises(PlaceError):
        rt.deref(ref)  # driver runs at place 0


@given(st.integers(0, 3), st.integers(0, 3))
def test_remote_deref_always_rejected(home, p):
    with PlaceRuntime(4) as runtime:
        ref = runtime.at(home, new_counter)
        expected = "ok" if p == home else "PlaceError"
        assert runtime.at(p, try_deref, ref) == expected


def test_atomic_counter_from_three_places(rt):
    ref = rt.at(0, new_counter)
    with rt.finish():
        for p in (1, 2, 3):
            rt.at_async(p, _bump_remote, ref, 200)
    assert rt.at(0, read_counter, ref) == 600


@closure
def _bump_remote(ref, times):
    rt = current_runtime()
    for _ in range(times):
        rt.at(ref.home, bump, ref, 1)


def test_finish_max_reducer(rt):
    data = [[3, 9], [42, 1], [-7], [5, 5, 5]]
    with rt.finish(reducer=max) as fs:
        for p in range(4):
            rt.at_async(p, offer_local_max, data[p])
    assert fs.result == 42


def test_finish_empty_body(rt):
    with rt.finish() as fs:
        pass
    assert fs.count == 0


@closure
def spawn_many(ref, n):
    rt = current_runtime()
    with rt.finish():
        for _ in range(n):
            rt.async_(bump, ref, 1)


def test_nested_finish_waits_for_all(rt):
    ref = rt.at(2, new_counter)
    with rt.finish() as outer:
        rt.at_async(2, spawn_many, ref, 100)
    assert rt.at(2, read_counter, ref) == 100
    assert outer.count == 0
    assert not rt.places[2].pool.queue


@closure
def append_many(ref, n):
    rt = current_runtime()
    with rt.finish():
        for i in range(n):
            rt.async_(_append_one, ref, i)


def _append_one(ref, i):
    rt = current_runtime()
    lst = rt.deref(ref)
    with rt.atomic():
        lst.append(i)


@closure
def new_list():
    return current_runtime().make_ref([])


@closure
def list_len(ref):
    return len(current_runtime().deref(ref))


def test_atomic_append_1000_and_occupancy(rt):
    ref = rt.at(1, new_list)
    rt.at(1, append_many, ref, 1000)
    assert rt.at(1, list_len, ref) == 1000
    assert rt.places[1].max_occupancy <= 1


def test_atomic_occupancy_stress():
    with PlaceRuntime(1, workers_per_place=4) as rt:
        ref = rt.make_ref([0])
        with rt.finish():
            for _ in range(10_000):
                rt.async_(bump, ref, 1)
        assert rt.deref(ref)[0] == 10_000
        assert rt.places[0].max_occupancy == 1
        assert all(s["max_live"] <= s["cap"] for s in rt.pool_stats())


def _hold(ref, release):
    rt = current_runtime()
    with rt.atomic():
        ref_obj = rt.deref(ref)
        release.wait(5)  # holds the place lock while blocked
        ref_obj[0] += 1


def test_contention_storm_exhausts_cap():
    with PlaceRuntime(1, workers_per_place=2, cap=8) as rt:
        ref = rt.make_ref([0])
        release = threading.Event()
        with pytest.raises(TooManyThreads) as info:
            with rt.finish():
                rt.async_(_hold, ref, release)
                time.sleep(0.05)
                for _ in range(64):
                    rt.async_(bump, ref, 1)
                threading.Timer(1.0, release.set).start()
        assert info.value.cap == 8
        stats = rt.pool_stats()[0]
        assert stats["max_live"] <= 8
        assert stats["parks"] >= 6


def test_atomic_nesting_is_usage_error():
    with PlaceRuntime(1) as rt:
        with rt.atomic():
            with pytest.raises(UsageError):
                with rt.atomic():
                    pass
            with pytest.raises(UsageError):
                rt.at(0, add, 1, 2)


def test_capture_errors(rt):
    with pytest.raises(CaptureError):
        rt.at(1, identity, threading.Lock())
    with pytest.raises(UsageError):
        rt.at(1, lambda: 1)


def test_remote_panic(rt):
    with pytest.raises(RemoteExecutionError) as info:
        rt.at(3, boom)
    assert isinstance(info.value.cause, ValueError)


def test_async_outside_finish():
    with PlaceRuntime(1) as rt:
        with pytest.raises(UsageError):
            rt.async_(print)


@pytest.mark.parametrize("total,n,place,expected", [
    (100, 4, 2, range(50, 75)),
    (0, 4, 0, range(0, 0)),
    (10, 4, 3, range(8, 10)),
])
def test_local_indices(total, n, place, expected):
    with PlaceRuntime(n) as rt:
        arr = ShmDistArray.from_values(rt, list(range(total)))
        got = rt.at(place, _indices, arr.refs[place])
        assert got == (expected.start, expected.stop)
        assert arr.to_list() == list(range(total))


@closure
def _indices(ref):
    rt = current_runtime()
    r = rt.local_indices(rt.deref(ref))
    return r.start, r.stop


def test_local_indices_wrong_place():
    with PlaceRuntime(2) as rt:
        d = DistSlice(4, 1, 2, [1, 2])
        with pytest.raises(PlaceError):
            rt.local_indices(d)
        with pytest.raises(PlaceError):
            rt.read(DistSlice(4, 0, 2, [1, 2]), 0)
