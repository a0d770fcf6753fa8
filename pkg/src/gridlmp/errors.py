"""Exception hierarchy shared by all gridlmp modules."""

from __future__ import annotations


class GridLmpError(Exception):
    """Base class for every error raised by gridlmp."""


# -- case files ------------------------------------------------------------

class MissingTable(GridLmpError):
    def __init__(self, name: str):
        super().__init__(f"case file has no '{name}' table")
        self.name = name


class MalformedRow(GridLmpError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnsupportedCostModel(GridLmpError):
    pass


class SchemaVersionMismatch(GridLmpError):
    pass


class IslandedBus(GridLmpError):
    def __init__(self, bus_id):
        super().__init__(f"bus {bus_id} is not connected to the in-service AC network")
        self.bus_id = bus_id


class NegativeResistance(GridLmpError):
    def __init__(self, branch):
        super().__init__(f"branch {branch} has negative series resistance")
        self.branch = branch


class InvalidGrid(GridLmpError):
    """Grid invariants violated; ``issues`` lists every failed check."""

    def __init__(self, issues: list[str]):
        super().__init__("; ".join(issues))
        self.issues = list(issues)


# -- grid transformations --------------------------------------------------

class IncompatibleShifts(GridLmpError):
    pass


class UnknownBranch(GridLmpError):
    def __init__(self, branch_id):
        super().__init__(f"no AC branch with id {branch_id}")
        self.branch_id = branch_id


class Disconnected(GridLmpError):
    pass


# -- constraint matrices ---------------------------------------------------

class ZeroImpedanceBranch(GridLmpError):
    pass


class AngleRangeOutOfDomain(GridLmpError):
    pass


class DimensionMismatch(GridLmpError):
    pass


# -- solving and certificates ----------------------------------------------

class PreconditionError(GridLmpError):
    pass


class DualReconstructionMismatch(GridLmpError):
    pass


class StrongDualityViolation(GridLmpError):
    pass


class TooLarge(GridLmpError):
    def __init__(self, n: int, cap: int):
        super().__init__(f"{n} buses exceeds the SDR size cap of {cap}")
        self.n = n
        self.cap = cap


class NoStrictPoint(GridLmpError):
    pass


class Infeasible(GridLmpError):
    pass


class DisconnectedAcSubgraph(GridLmpError):
    pass


class ZeroDenominator(GridLmpError):
    pass


class CertificateInconsistency(GridLmpError):
    pass


class SubdifferentialViolation(GridLmpError):
    pass


class BaseInfeasible(GridLmpError):
    pass
