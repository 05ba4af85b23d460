"""Exception hierarchy.

Every error the library raises derives from :class:`EpiflowError`; the CLI maps
the three families below onto its exit codes (2 config, 3 input, 4 numerical).
"""


class EpiflowError(Exception):
    """Base class for library errors."""


class ConfigError(EpiflowError, ValueError):
    """Invalid configuration value, key or preset."""


class InputError(EpiflowError, ValueError):
    """Input data that cannot be used (too few points, bad files, ...)."""


class NumericalError(EpiflowError, ArithmeticError):
    """A computation hit a degenerate or ill-conditioned configuration."""


# geometry
class InvalidIntrinsics(ConfigError):
    pass


class ChartSingularity(NumericalError):
    """Pose is antipodal to the chart base and cannot be expressed in it."""


# five-point
class DegenerateSample(NumericalError):
    pass


class InvalidPolynomial(InputError):
    pass


# robust estimation
class InsufficientData(InputError):
    pass


class EstimationFailed(NumericalError):
    pass


# implicit differentiation
class DegenerateGeometry(NumericalError):
    pass


# losses
class EpipoleSingularity(NumericalError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"points map onto the epipole: indices {self.indices[:20]}")


class EmptyMask(InputError):
    pass


# pose / odometry
class CheiralityAmbiguous(NumericalError):
    pass


class TriangulationDegenerate(NumericalError):
    pass


class InsufficientTrajectory(InputError):
    def __init__(self, message, usable_lengths=()):
        self.usable_lengths = list(usable_lengths)
        super().__init__(message)


class ScaleUndefined(UserWarning):
    """Ground-truth step has zero length; the estimated translation is dropped."""


# synthesis
class DegenerateScene(InputError):
    pass
