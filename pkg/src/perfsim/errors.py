"""Exception hierarchy shared by all perfsim modules."""


class PerfSimError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


# trace model
class SchemaError(PerfSimError):
    pass


class DanglingTensor(PerfSimError):
    pass


class OrderError(PerfSimError):
    pass


class WorldMismatch(PerfSimError):
    pass


class CollectiveMismatch(PerfSimError):
    pass


# communication model
class NonSquareMatrix(PerfSimError):
    pass


class InsufficientData(PerfSimError):
    pass


class DegenerateRegions(PerfSimError):
    pass


# kernel models
class EmptyDataset(PerfSimError):
    pass


class NonPositiveLatency(PerfSimError):
    pass


class FeatureMismatch(PerfSimError):
    pass


class ZeroWork(PerfSimError):
    pass


class UnknownModel(PerfSimError):
    pass


# sharding
class NotCostBased(PerfSimError):
    pass


class CapacityExceeded(PerfSimError):
    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


# metrics
class LengthMismatch(PerfSimError):
    pass


class NonPositiveActual(PerfSimError):
    pass
