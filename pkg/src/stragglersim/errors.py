"""Exception types shared across the package."""


class StragglerSimError(Exception):
    """Base class for all errors raised by this package."""


class IncompleteCoverage(StragglerSimError):
    """A duration mapping does not cover every cell of an op-type tensor."""

    def __init__(self, op_type, missing, extra=()):
        self.op_type = op_type
        self.missing = tuple(missing)
        self.extra = tuple(extra)
        parts = [f"{op_type.value}: {len(self.missing)} cell(s) missing"]
        if self.extra:
            parts.append(f"{len(self.extra)} unexpected cell(s)")
        super().__init__(", ".join(parts))


class MissingPeer(StragglerSimError):
    """A send without its matching recv, or an incomplete collective."""


class CycleDetected(StragglerSimError):
    """The dependency graph (or its group-coupled closure) is not acyclic."""


class ZeroIdeal(StragglerSimError):
    """Slowdown is undefined because the ideal completion time is zero."""


class NotStraggling(StragglerSimError):
    """Attribution requested for a job whose simulated time does not exceed ideal."""


class InsufficientSamples(StragglerSimError):
    """Too few forward/backward samples on the probe stage for a correlation."""


class EmptyMicrobatch(StragglerSimError):
    """A microbatch must contain at least one sequence."""


class TooFewSequences(StragglerSimError):
    """Cannot split fewer sequences than the requested microbatch count."""


class EmptyGrid(StragglerSimError):
    """A heatmap needs at least one cell."""


class TraceIOError(StragglerSimError):
    """Base class for trace parsing/serialization failures."""


class HeaderMissing(TraceIOError):
    """The first line of a trace file is not a valid header object."""


class MalformedLine(TraceIOError):
    def __init__(self, line_no, reason):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class UnknownOpType(TraceIOError):
    def __init__(self, line_no, name):
        self.line_no = line_no
        self.name = name
        super().__init__(f"line {line_no}: unknown op type {name!r}")


class ValidationFailed(TraceIOError):
    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"{len(self.violations)} violation(s): {head}{more}")


class ConfigError(StragglerSimError):
    """Invalid generator or CLI configuration."""
