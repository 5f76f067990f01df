class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced where only finite values are allowed."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigMismatchError(ValueError):
    """Two model configurations differ where they must agree."""

    def __init__(self, message: str, fields: dict):
        detail = ", ".join(f"{k}: {a!r} != {b!r}" for k, (a, b) in fields.items())
        super().__init__(f"{message}: {detail}")
        self.fields = fields


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
