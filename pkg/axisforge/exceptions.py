AXIS_NAMES = ("X", "Y", "Z")


class AxisForgeError(Exception):
    ...


class GeometryError(AxisForgeError):
    ...

class InvalidIntrinsics(GeometryError, ValueError):
    ...

class InvalidPose(GeometryError, ValueError):
    ...

class NonPositiveDepth(GeometryError):
    ...


class _AxisError:
    """Mixin carrying the index of the offending axis / channel."""

    def __init__(self, axis: int, detail: str = ""):
        self.axis = axis
        name = AXIS_NAMES[axis] if 0 <= axis < 3 else str(axis)
        msg = f"axis {name}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

    @property
    def axis_name(self):
        return AXIS_NAMES[self.axis]


class DegenerateAxis(_AxisError, GeometryError):
    ...


class RenderError(AxisForgeError):
    ...

class InvalidDegradation(RenderError, ValueError):
    ...


class ExtractionError(AxisForgeError):
    ...

class EmptyChannel(_AxisError, ExtractionError):
    ...

class DegenerateChannel(_AxisError, ExtractionError):
    ...

class VanishingMass(_AxisError, ExtractionError):
    ...

class NoIntersection(ExtractionError):
    ...

class OutsideImage(ExtractionError):
    ...


class SolverError(AxisForgeError):
    ...

class InvalidOmega(SolverError, ValueError):
    ...

class NoValidSolution(SolverError):
    ...

class IllConditioned(SolverError):
    ...

class AllCandidatesRejected(SolverError):
    ...


class DiffusionError(AxisForgeError):
    ...

class InvalidSchedule(DiffusionError, ValueError):
    ...

class InvalidSigma(DiffusionError, ValueError):
    ...

class DivergedLoss(DiffusionError):
    ...

class CheckpointError(DiffusionError):
    ...


class PipelineError(AxisForgeError):
    ...

class IoError(PipelineError):
    ...

class ConfigError(PipelineError, ValueError):
    ...

class InvalidRecordId(PipelineError, ValueError):
    ...

class DegenerateSamplingExhausted(PipelineError):
    ...

class MissingPrediction(PipelineError):
    ...
