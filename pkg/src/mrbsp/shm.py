"""Shared-memory / PGAS backend.

Each place owns a heap of mutable objects, one atomic lock and a pool of
worker threads that run activities. The four constructs map to methods
of ``PlaceRuntime``:

* ``at(p, fn, *args)`` ships ``fn`` (a registered closure) and its
  pickled arguments to place ``p``, runs it there and returns the result.
* ``async_(fn, *args)`` / ``at_async(p, fn, *args)`` start an activity
  here / at ``p`` under the innermost enclosing finish.
* ``with rt.finish(): ...`` waits for every activity spawned inside,
  transitively and across places; activities may ``offer`` values to it.
* ``with rt.atomic(): ...`` is place-wide mutual exclusion.

A worker that would block entering an atomic section parks and the pool
starts a replacement first. Live workers (running plus parked) never
exceed the cap; a park that would need one more aborts the run with
TooManyThreads. Workers waiting on ``at`` or ``finish`` run other queued
activities of their place instead of blocking.
"""

import itertools
import logging
import pickle
import threading
import weakref
from collections import deque
from concurrent.futures import Future
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from .core import PICKLE_PROTOCOL, block_range
from .errors import (AddressError, CaptureError, ClosedError, PlaceError,
                     RemoteExecutionError, TooManyThreads, TransportError,
                     UsageError)

log = logging.getLogger(__name__)

AT_CHANNEL = 2
# Nesting bound for workers that run queued activities while they wait.
# Deeper waits only serve synchronous ``at`` bodies, which keeps the stack
# bounded while still guaranteeing that every pending ``at`` can be served.
MAX_HELP_DEPTH = 24

_CLOSURES = {}


def closure(fn):
    """Register ``fn`` as remotely executable; returns it unchanged."""
    cid = "%s:%s" % (fn.__module__, fn.__qualname__)
    existing = _CLOSURES.get(cid)
    if existing is not None and existing is not fn:
        log.debug("re-registering closure %s", cid)
    _CLOSURES[cid] = fn
    fn.closure_id = cid
    return fn


def _closure_id(fn):
    cid = getattr(fn, "closure_id", None)
    if cid is None or _CLOSURES.get(cid) is not fn:
        raise UsageError("%r is not a registered closure (use @closure)" % (fn,))
    return cid


def _capture(args):
    try:
        return pickle.dumps(args, protocol=PICKLE_PROTOCOL)
    except Exception as exc:
        raise CaptureError("cannot serialize captured values: %s" % exc) from exc


class GlobalRef(NamedTuple):
    home: int
    handle: int


@dataclass
class DistSlice:
    global_len: int
    owner: int
    offset: int
    elements: list = field(default_factory=list)

    @property
    def stop(self):
        return self.offset + len(self.elements)


class _Ctx(threading.local):
    runtime = None
    place = 0
    finish = None
    worker = None
    in_atomic = False
    help_depth = 0


_ctx = _Ctx()


class FinishScope:
    """Termination counter for one ``finish`` block, with an optional reducer."""

    _ids = itertools.count()

    def __init__(self, runtime, reducer=None, initial=None):
        self.id = next(self._ids)
        self.runtime = runtime
        self.reducer = reducer
        self.result = initial
        self._has_result = initial is not None
        self.count = 0
        self.spawned = 0
        self.errors = []
        self.lock = threading.Lock()
        self.done = threading.Event()
        self.done.set()
        self._waiter_pool = None

    def enter(self):
        with self.lock:
            self.count += 1
            self.spawned += 1
            self.done.clear()

    def leave(self, exc=None):
        with self.lock:
            if exc is not None:
                self.errors.append(exc)
            self.count -= 1
            finished = self.count == 0
            if finished:
                self.done.set()
            pool = self._waiter_pool
        if finished and pool is not None:
            pool.wake()

    def offer(self, value):
        if self.reducer is None:
            raise UsageError("offer() inside a finish without a reducer")
        with self.lock:
            if self._has_result:
                self.result = self.reducer(self.result, value)
            else:
                self.result = value
                self._has_result = True

    def wait(self):
        pool = _current_pool()
        if pool is None:
            self.done.wait()
        else:
            with self.lock:
                self._waiter_pool = pool
            pool.help_until(self.done.is_set)
        if self.errors:
            for e in self.errors:
                if isinstance(e, TooManyThreads):
                    raise e
            raise self.errors[0]


class _Activity:
    __slots__ = ("fn", "args", "scope", "future")

    def __init__(self, fn, args, scope, future=None):
        self.fn = fn
        self.args = args
        self.scope = scope
        self.future = future


class ActivityPool:
    """Block-and-replace worker pool of one place."""

    def __init__(self, runtime, place, target, cap):
        self.runtime = runtime
        self.place = place
        self.target = target
        self.cap = cap
        self.queue = deque()
        self.cond = threading.Condition()
        self.live = 0
        self.parked = 0
        self.max_live = 0
        self.parks = 0
        self.running = True
        self._names = itertools.count()

    def start(self):
        with self.cond:
            for _ in range(self.target):
                self._spawn_locked()

    def _spawn_locked(self):
        self.live += 1
        self.max_live = max(self.max_live, self.live)
        t = threading.Thread(target=self._run, daemon=True,
                             name="place%d-w%d" % (self.place, next(self._names)))
        t.start()

    def submit(self, activity, front=False):
        with self.cond:
            if front:
                self.queue.appendleft(activity)
            else:
                self.queue.append(activity)
            self.cond.notify()

    def wake(self):
        with self.cond:
            self.cond.notify_all()

    def park(self):
        """Account for a worker about to block; start its replacement first."""
        with self.cond:
            if self.live >= self.cap:
                exc = TooManyThreads(self.place, self.cap)
                log.warning("%s", exc)
                raise exc
            self.parked += 1
            self.parks += 1
            self._spawn_locked()

    def unpark(self):
        with self.cond:
            self.parked -= 1

    def _run(self):
        _ctx.runtime = self.runtime
        _ctx.worker = self
        _ctx.place = self.place
        while True:
            with self.cond:
                while True:
                    if not self.running or self.live - self.parked > self.target:
                        self.live -= 1
                        self.cond.notify()
                        return
                    if self.queue:
                        act = self.queue.popleft()
                        break
                    self.cond.wait()
            self.runtime._run_activity(self.place, act)

    def help_until(self, predicate, sync_only=False):
        """Run queued activities until ``predicate()`` holds.

        With ``sync_only`` only synchronous ``at`` bodies are taken.
        """
        while not predicate():
            with self.cond:
                if predicate():
                    return
                act = None
                if self.queue and (not sync_only or self.queue[0].future is not None):
                    act = self.queue.popleft()
                if act is None:
                    self.cond.wait(0.05)
                    continue
            saved = (_ctx.place, _ctx.finish)
            _ctx.help_depth += 1
            try:
                self.runtime._run_activity(self.place, act)
            finally:
                _ctx.help_depth -= 1
                _ctx.place, _ctx.finish = saved

    def stop(self):
        with self.cond:
            self.running = False
            self.cond.notify_all()


def _current_pool():
    return _ctx.worker


class Place:
    def __init__(self, runtime, index, workers, cap):
        self.index = index
        self.heap = {}
        self.atomic_lock = threading.Lock()
        self.occupancy = 0
        self.max_occupancy = 0
        self.pool = ActivityPool(runtime, index, workers, cap)


class PlaceRuntime:
    """All places of one cluster hosted in this process.

    ``transport`` is only used for remote ``at`` in Tcp mode; in-process
    clusters hand the serialized closure straight to the target pool.
    """

    def __init__(self, n_places, workers_per_place=2, cap=1000, transport=None):
        if cap < workers_per_place:
            raise UsageError("cap below workers_per_place")
        self.n_places = n_places
        self.places = [Place(self, p, workers_per_place, cap)
                       for p in range(n_places)]
        self.transport = transport
        self.aborted = None
        self._handles = itertools.count(1)
        self._req_ids = itertools.count()
        self._pending = {}
        self._scopes = weakref.WeakValueDictionary()
        self._lock = threading.Lock()
        self._receivers = []
        self._started = False

    def start(self):
        for place in self.places:
            place.pool.start()
        if self.transport is not None:
            for p in range(self.n_places):
                t = threading.Thread(target=self._receive_loop, args=(p,),
                                     daemon=True, name="at-recv-%d" % p)
                t.start()
                self._receivers.append(t)
        self._started = True
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def shutdown(self):
        for place in self.places:
            place.pool.stop()

    # -- place context -------------------------------------------------

    @property
    def here(self):
        return _ctx.place

    def _check_place(self, p):
        if not isinstance(p, int) or not 0 <= p < self.n_places:
            raise AddressError("unknown place %r" % (p,))

    def _check_usable(self, what):
        if _ctx.in_atomic:
            raise UsageError("%s inside an atomic section" % what)
        if self.aborted is not None:
            raise self.aborted

    def abort(self, exc):
        with self._lock:
            if self.aborted is None:
                self.aborted = exc
        for place in self.places:
            place.pool.wake()

    def reset(self):
        """Clear an abort so the runtime can be reused for another run."""
        self.aborted = None

    # -- heap ----------------------------------------------------------

    def make_ref(self, obj):
        handle = next(self._handles)
        self.places[_ctx.place].heap[handle] = obj
        return GlobalRef(_ctx.place, handle)

    def deref(self, ref):
        if ref.home != _ctx.place:
            raise PlaceError("GlobalRef homed at place %d dereferenced at place %d"
                             % (ref.home, _ctx.place))
        try:
            return self.places[ref.home].heap[ref.handle]
        except KeyError:
            raise PlaceError("dangling GlobalRef %r" % (ref,)) from None

    def free(self, ref):
        if ref.home != _ctx.place:
            raise PlaceError("free of remote GlobalRef %r" % (ref,))
        self.places[ref.home].heap.pop(ref.handle, None)

    # -- activities ----------------------------------------------------

    def _run_activity(self, place, act):
        _ctx.runtime = self
        _ctx.place = place
        _ctx.finish = act.scope
        exc = self.aborted
        result = None
        if exc is None:
            try:
                result = act.fn(*act.args)
            except TooManyThreads as e:
                self.abort(e)
                exc = e
            except BaseException as e:
                exc = e
        if act.future is not None:
            if exc is None:
                act.future.set_result(result)
            else:
                act.future.set_exception(exc)
        if act.future is None and act.scope is not None:
            act.scope.leave(exc)

    def _enter_scope(self):
        scope = _ctx.finish
        if scope is None:
            raise UsageError("async outside of any finish")
        scope.enter()
        return scope

    def async_(self, fn, *args):
        """Start ``fn(*args)`` as a new activity at the current place."""
        self._check_usable("async")
        scope = self._enter_scope()
        self.places[_ctx.place].pool.submit(_Activity(fn, args, scope))

    def at_async(self, p, fn, *args):
        """``at(p) async fn(*args)``: start an activity at ``p`` without waiting."""
        self._check_place(p)
        self._check_usable("at")
        cid = _closure_id(fn)
        env = _capture(args)
        scope = self._enter_scope()
        if p == _ctx.place:
            self.places[p].pool.submit(_Activity(_CLOSURES[cid], pickle.loads(env),
                                                 scope))
        elif self.transport is not None:
            self._scopes[scope.id] = scope
            self._send(p, ("spawn", cid, env, scope.id))
        else:
            self.places[p].pool.submit(
                _Activity(_exec_closure, (cid, env), scope))

    def at(self, p, fn, *args):
        """Run registered closure ``fn(*args)`` at place ``p`` and return its result.

        Arguments and result cross the place boundary by serialization,
        even when ``p`` is the current place.
        """
        self._check_place(p)
        self._check_usable("at")
        cid = _closure_id(fn)
        env = _capture(args)
        if p == _ctx.place:
            saved = _ctx.runtime
            _ctx.runtime = self
            try:
                result = _CLOSURES[cid](*pickle.loads(env))
            finally:
                _ctx.runtime = saved
            return pickle.loads(_capture(result))
        future = Future()
        if self.transport is not None:
            req = next(self._req_ids)
            with self._lock:
                self._pending[req] = future
            scope = _ctx.finish
            if scope is not None:
                self._scopes[scope.id] = scope
            self._send(p, ("call", req, _ctx.place, cid, env,
                           scope.id if scope is not None else None))
        else:
            self.places[p].pool.submit(
                _Activity(_exec_closure_reply, (cid, env), _ctx.finish, future),
                front=True)
        self._await(future)
        exc = future.exception()
        if exc is not None:
            if isinstance(exc, (TooManyThreads, RemoteExecutionError)):
                raise exc
            raise RemoteExecutionError(p, exc) from exc
        return pickle.loads(future.result())

    def _await(self, future):
        pool = _current_pool()
        if pool is None:
            _wait_future(future)
            return
        future.add_done_callback(lambda _f: pool.wake())
        pool.help_until(future.done, sync_only=_ctx.help_depth >= MAX_HELP_DEPTH)

    @contextmanager
    def finish(self, reducer=None, initial=None):
        """Wait for all activities spawned in the block; yields the scope."""
        if _ctx.in_atomic:
            raise UsageError("finish inside an atomic section")
        scope = FinishScope(self, reducer, initial)
        saved = _ctx.finish
        _ctx.finish = scope
        try:
            yield scope
        except BaseException:
            _ctx.finish = saved
            pool = _current_pool()
            if pool is None:
                scope.done.wait()
            else:
                pool.help_until(scope.done.is_set)
            raise
        _ctx.finish = saved
        scope.wait()

    def offer(self, value):
        scope = _ctx.finish
        if scope is None:
            raise UsageError("offer() outside of any finish")
        scope.offer(value)

    @contextmanager
    def atomic(self):
        """Place-wide critical section; must not nest or call at/async/atomic."""
        if _ctx.in_atomic:
            raise UsageError("nested atomic section")
        if self.aborted is not None:
            raise self.aborted
        place = self.places[_ctx.place]
        lock = place.atomic_lock
        if not lock.acquire(blocking=False):
            worker = _ctx.worker if _ctx.worker is place.pool else None
            if worker is not None:
                try:
                    worker.park()
                except TooManyThreads as exc:
                    self.abort(exc)
                    raise
                try:
                    lock.acquire()
                finally:
                    worker.unpark()
            else:
                lock.acquire()
        place.occupancy += 1
        if place.occupancy > place.max_occupancy:
            place.max_occupancy = place.occupancy
        _ctx.in_atomic = True
        try:
            yield
        finally:
            _ctx.in_atomic = False
            place.occupancy -= 1
            lock.release()

    # -- distributed arrays ---------------------------------------------

    def local_indices(self, d):
        """Index range of ``d`` accessible from the current place."""
        if d.owner != _ctx.place:
            raise PlaceError("slice owned by place %d queried at place %d"
                             % (d.owner, _ctx.place))
        return range(d.offset, d.stop)

    def read(self, d, index):
        if index not in self.local_indices(d):
            raise PlaceError("index %d not local to place %d" % (index, _ctx.place))
        return d.elements[index - d.offset]

    def write(self, d, index, value):
        if index not in self.local_indices(d):
            raise PlaceError("index %d not local to place %d" % (index, _ctx.place))
        d.elements[index - d.offset] = value

    # -- tcp plumbing ---------------------------------------------------

    def _send(self, p, message):
        try:
            self.transport.send(_ctx.place, p, AT_CHANNEL,
                                pickle.dumps(message, protocol=PICKLE_PROTOCOL))
        except TransportError as exc:
            self.abort(exc)
            raise

    def _receive_loop(self, p):
        pool = self.places[p].pool
        while True:
            try:
                msg = self.transport.recv(p, AT_CHANNEL)
            except ClosedError as exc:
                if self.transport.failure is not None:
                    self._fail_pending(exc)
                return
            except TransportError as exc:
                self._fail_pending(exc)
                return
            body = pickle.loads(msg.payload)
            kind = body[0]
            if kind == "call":
                _, req, caller, cid, env, scope_id = body
                scope = self._scopes.get(scope_id) if scope_id is not None else None
                future = Future()
                future.add_done_callback(
                    lambda f, req=req, caller=caller, p=p: self._reply(p, caller, req, f))
                pool.submit(_Activity(_exec_closure_reply, (cid, env), scope, future),
                            front=True)
            elif kind == "spawn":
                _, cid, env, scope_id = body
                pool.submit(_Activity(_exec_closure, (cid, env),
                                      self._scopes[scope_id]))
            elif kind == "reply":
                _, req, ok, data = body
                with self._lock:
                    future = self._pending.pop(req)
                if ok:
                    future.set_result(data)
                else:
                    future.set_exception(pickle.loads(data))

    def _reply(self, p, caller, req, future):
        exc = future.exception()
        if exc is None:
            message = ("reply", req, True, future.result())
        else:
            try:
                data = pickle.dumps(exc, protocol=PICKLE_PROTOCOL)
            except Exception:
                data = pickle.dumps(RemoteExecutionError(p, repr(exc)))
            message = ("reply", req, False, data)
        try:
            self.transport.send(p, caller, AT_CHANNEL,
                                pickle.dumps(message, protocol=PICKLE_PROTOCOL))
        except TransportError as exc:
            self.abort(exc)
            self._fail_pending(exc)

    def _fail_pending(self, exc):
        self.abort(exc)
        with self._lock:
            pending = list(self._pending.values())
            self._pending.clear()
        for f in pending:
            if not f.done():
                f.set_exception(exc)

    # -- instrumentation -------------------------------------------------

    def pool_stats(self):
        return [dict(place=pl.index, live=pl.pool.live, parked=pl.pool.parked,
                     max_live=pl.pool.max_live, parks=pl.pool.parks,
                     cap=pl.pool.cap, max_occupancy=pl.max_occupancy)
                for pl in self.places]


def _wait_future(future):
    try:
        future.exception()
    except Exception:
        pass


def _exec_closure(cid, env):
    return _CLOSURES[cid](*pickle.loads(env))


def _exec_closure_reply(cid, env):
    result = _CLOSURES[cid](*pickle.loads(env))
    return _capture(result)


# -- distributed array helpers ------------------------------------------------

@closure
def _store_slice(global_len, offset, elements):
    rt = current_runtime()
    return rt.make_ref(DistSlice(global_len, rt.here, offset, list(elements)))


@closure
def _slice_elements(ref):
    return current_runtime().deref(ref).elements


@closure
def _drop_ref(ref):
    current_runtime().free(ref)


def current_runtime():
    """The runtime executing the calling closure or activity."""
    rt = _ctx.runtime
    if rt is None:
        raise UsageError("not running inside a PlaceRuntime")
    return rt


class ShmDistArray:
    """Global handle to a block-distributed 1-D array: one GlobalRef per place."""

    def __init__(self, runtime, global_len, refs):
        self.runtime = runtime
        self.global_len = global_len
        self.refs = list(refs)

    @classmethod
    def from_values(cls, runtime, values):
        values = list(values)
        n = runtime.n_places
        refs = []
        for p in range(n):
            r = block_range(len(values), n, p)
            refs.append(runtime.at(p, _store_slice, len(values), r.start,
                                   values[r.start:r.stop]))
        return cls(runtime, len(values), refs)

    @classmethod
    def from_slices(cls, runtime, slices):
        refs, offset = [], 0
        total = sum(len(s) for s in slices)
        for p, chunk in enumerate(slices):
            refs.append(runtime.at(p, _store_slice, total, offset, chunk))
            offset += len(chunk)
        return cls(runtime, total, refs)

    @property
    def n_nodes(self):
        return len(self.refs)

    def slices(self):
        return [self.runtime.at(p, _slice_elements, ref)
                for p, ref in enumerate(self.refs)]

    def to_list(self):
        return [x for s in self.slices() for x in s]

    def free(self):
        for p, ref in enumerate(self.refs):
            self.runtime.at(p, _drop_ref, ref)
