"""Exception types shared across the package."""


class SamplerFailure(RuntimeError):
    """All chains (or particles) became non-finite; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateBridgeError(RuntimeError):
    """Every importance weight vanished at some SMC stage."""

    def __init__(self, stage, message=None):
        super().__init__(message or f"all importance weights are zero at SMC stage {stage}")
        self.stage = stage


class TrainingFailure(RuntimeError):
    """The persistent particle cloud collapsed during EBM training."""

    def __init__(self, iteration, message=None):
        super().__init__(message or f"particle cloud collapsed at training iteration {iteration}")
        self.iteration = iteration


class InitializationError(RuntimeError):
    """Chain initialization never reached a finite log-density."""

    def __init__(self, retries, message=None):
        super().__init__(message or f"no finite log-density found after {retries} attempts")
        self.retries = retries


class TaskUnsuitableError(RuntimeError):
    """Too many simulation failures to honor the requested budget."""
