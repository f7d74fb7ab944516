"""Error taxonomy shared across the package.

Every failure the library raises deliberately goes through one of these types so
callers (and the CLI) can map a failure class to an exit code without parsing
message strings.
"""


class DcgenError(Exception):
    """Base class for all deliberate errors raised by this package."""


class ContractViolation(DcgenError):
    """An API precondition was broken (shape mismatch, non-scalar loss, bad argument)."""


class NumericError(DcgenError):
    """A NaN or non-finite value appeared during evaluation.

    Carries the name of the op whose output first went bad.
    """

    def __init__(self, op_name: str, message: str = ""):
        self.op_name = op_name
        super().__init__(message or f"non-finite values produced by op '{op_name}'")


class ConfigError(DcgenError):
    """Bad configuration: unknown key, unparseable value, missing required setting."""


class StateError(DcgenError):
    """Operation invalid in the current state (missing prerequisite, double merge)."""


class FormatError(DcgenError):
    """A serialized file is malformed: bad magic, truncation, overlapping tensors."""


class VersionError(FormatError):
    """A serialized file has an unsupported format version."""

    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"checkpoint format version {found} unsupported (this build reads version {supported})")


class TrainingError(DcgenError):
    """Training diverged or hit an internal assertion; carries the failing step."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class InputError(DcgenError):
    """Runtime inputs incompatible (disjoint step grids, missing columns)."""


class ParseError(InputError):
    """A text file failed to parse; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")
