class ReservoirLabError(Exception):
    """Base class for every error raised by reservoir-lab."""


class ConfigError(ReservoirLabError):
    pass


class InvalidHyperparams(ReservoirLabError):
    pass


class NonFiniteState(ReservoirLabError):
    """The integrated trajectory blew up."""

    def __init__(self, step: int, state):
        self.step = step
        self.state = state
        super().__init__(f"Non-finite state at integrator step {step}: {state}")


class DegenerateSignal(ReservoirLabError):
    pass


class SpectralRadiusFailure(ReservoirLabError):
    pass


class DimensionMismatch(ReservoirLabError):
    pass


class SliceTooShort(ReservoirLabError):
    pass


class SingularSystem(ReservoirLabError):
    pass


class RankDeficient(ReservoirLabError):
    pass


class DatasetTooShort(ReservoirLabError):
    """The dataset cannot hold a single fold of the requested schedule."""

    def __init__(self, required: int, available: int, what: str = "schedule"):
        self.required = required
        self.available = available
        super().__init__(f"{what} needs at least {required} steps, dataset has {available}")


class FactorizationFailure(ReservoirLabError):
    pass


class DuplicatePoints(ReservoirLabError):
    pass


class ShapeMismatch(ReservoirLabError):
    pass


class ZeroVariance(ReservoirLabError):
    pass


class EmptyInput(ReservoirLabError):
    pass


class RecordExists(ReservoirLabError):
    pass
