"""Exception hierarchy shared by every layer of the framework."""


class ClusterError(Exception):
    """Base class for all framework errors."""


class ConfigError(ClusterError):
    pass


class AddressError(ClusterError):
    """A node, actor or agent address does not resolve."""


class TransportError(ClusterError):
    """The transport lost a connection or exceeded a resource bound.

    Any TransportError aborts the whole run: there is no recovery path.
    """


class ClosedError(TransportError):
    pass


class DecodeError(TransportError):
    pass


class RecvTimeout(TimeoutError, ClusterError):
    pass


class SpawnError(ClusterError):
    pass


class AggregationTimeout(TimeoutError, ClusterError):
    def __init__(self, missing, timeout):
        self.missing = sorted(missing)
        self.timeout = timeout
        super().__init__(
            "no reply within %.3gs from node(s) %s" % (timeout, self.missing))


class AggregatorError(ClusterError):
    pass


class CaptureError(ClusterError):
    """A closure environment could not be serialized for remote execution."""


class RemoteExecutionError(ClusterError):
    def __init__(self, place, cause):
        self.place = place
        self.cause = cause
        super().__init__("activity at place %s failed: %r" % (place, cause))


class PlaceError(ClusterError):
    """Place-local state touched from the wrong place."""


class UsageError(ClusterError):
    pass


class TooManyThreads(ClusterError):
    """The worker pool hit its cap while a worker had to be replaced."""

    def __init__(self, place, cap, completed_phases=None):
        self.place = place
        self.cap = cap
        self.completed_phases = completed_phases
        msg = "too many threads at place %s (cap %d)" % (place, cap)
        if completed_phases is not None:
            msg += " after %d completed phase(s)" % completed_phases
        super().__init__(msg)


class PartitionError(ClusterError):
    def __init__(self, key, dest, n_nodes):
        self.key = key
        super().__init__(
            "partition(%r) = %r is outside [0, %d)" % (key, dest, n_nodes))


class ShuffleBarrierError(ClusterError):
    def __init__(self, node, deltas):
        # deltas: {peer: announced - received}
        self.node = node
        self.deltas = dict(deltas)
        parts = ", ".join("missing %d from n%d" % (d, p)
                          for p, d in sorted(self.deltas.items()))
        super().__init__("shuffle barrier at n%d: %s" % (node, parts))


class BarrierError(ClusterError):
    def __init__(self, phase, unconfirmed):
        self.phase = phase
        self.unconfirmed = sorted(unconfirmed)
        super().__init__("phase %d barrier: unconfirmed node(s) %s"
                         % (phase, self.unconfirmed))


class MaxPhasesExceeded(ClusterError):
    pass


class PhaseIsolationError(ClusterError):
    pass


class RangeError(ClusterError):
    pass


class EmptyInputError(ClusterError):
    pass


class SinkMemoryError(ClusterError):
    pass
