"""Exception hierarchy shared by every pipeline stage."""


class PipelineError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


# dataset
class MissingHeader(PipelineError):
    pass


class MalformedRow(PipelineError):
    def __init__(self, line_no: int, detail: str = ""):
        super().__init__(f"line {line_no}: malformed row {detail}".rstrip())
        self.line_no = line_no


class UnknownClass(PipelineError):
    def __init__(self, dx: str, line_no: int):
        super().__init__(f"line {line_no}: unknown class {dx!r}")
        self.dx = dx
        self.line_no = line_no


class AllAgesMissing(PipelineError):
    pass


class MissingFile(PipelineError):
    def __init__(self, path):
        super().__init__(f"no such file: {path}")
        self.path = path


class DecodeError(PipelineError):
    def __init__(self, path, detail: str = ""):
        super().__init__(f"cannot decode {path}: {detail}".rstrip(": "))
        self.path = path


class EmptyImage(PipelineError):
    pass


class AlreadyNormalized(PipelineError):
    pass


class DegenerateSplit(PipelineError):
    pass


# balance / augment
class EmptyClass(PipelineError):
    def __init__(self, cls: int):
        super().__init__(f"class {cls} has no samples")
        self.cls = cls


class SingularTransform(PipelineError):
    pass


# model
class ShapeUnderflow(PipelineError):
    def __init__(self, stage: str, shape):
        super().__init__(f"spatial size collapsed at {stage}: {shape}")
        self.stage = stage


class ShapeMismatch(PipelineError):
    def __init__(self, name: str, expected=None, got=None):
        msg = f"shape mismatch for {name}"
        if expected is not None:
            msg += f": expected {tuple(expected)}, got {tuple(got)}"
        super().__init__(msg)
        self.name = name


class OutOfRange(PipelineError):
    pass


class VersionMismatch(PipelineError):
    pass


class CorruptFile(PipelineError):
    pass


# training / metrics
class EmptyValidation(PipelineError):
    pass


class EmptyInput(PipelineError):
    pass


class CodeOutOfRange(PipelineError):
    pass
