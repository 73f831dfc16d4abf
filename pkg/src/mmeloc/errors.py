"""Exception hierarchy shared by all stages."""


class MmeLocError(Exception):
    pass


# geometry
class NonPositiveDepth(MmeLocError, ValueError):
    pass


class NoConvergence(MmeLocError, ArithmeticError):
    pass


# simulator
class InvalidConfig(MmeLocError, ValueError):
    pass


class DroneOutOfView(MmeLocError):
    pass


# radar
class NoPeak(MmeLocError):
    pass


class OutOfRange(MmeLocError, ValueError):
    pass


class InconsistentAngles(MmeLocError, ValueError):
    pass


# events / cct
class StaleTrack(MmeLocError):
    pass


class DegenerateFit(MmeLocError):
    pass


# gajo
class InsufficientHistory(MmeLocError):
    pass


class Diverged(MmeLocError):
    def __init__(self, msg="", fallback=None):
        super().__init__(msg)
        self.fallback = fallback


# solver
class SolverFailure(MmeLocError):
    pass


class NonFiniteJacobian(SolverFailure):
    pass


class RankDeficient(SolverFailure):
    def __init__(self, variable, value=0.0):
        super().__init__(f"rank deficient at variable {variable!r} (|R_jj|={value:.3g})")
        self.variable = variable


class SingularR(SolverFailure):
    pass


# harness
class ConfigError(MmeLocError):
    pass


class SchemaError(ConfigError):
    def __init__(self, path, reason="missing or malformed"):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class PipelineError(MmeLocError):
    def __init__(self, stage, cause=None):
        msg = f"pipeline failed in stage {stage!r}"
        if cause is not None:
            msg += f": {cause}"
        super().__init__(msg)
        self.stage = stage


class InsufficientOverlap(MmeLocError):
    pass


class IoError(MmeLocError, OSError):
    pass
