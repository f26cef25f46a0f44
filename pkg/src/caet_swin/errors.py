class FormatError(ValueError):
    """A volume or checkpoint container failed validation.

    ``code`` is one of: bad-magic, bad-version, bad-header, truncated,
    dim-overflow, checksum.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, message: str, phase: str | None = None):
        super().__init__(message)
        self.phase = phase


class PhaseError(RuntimeError):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase


class MissingDependency(FileNotFoundError):
    """An upstream checkpoint needed by a training phase is absent."""
