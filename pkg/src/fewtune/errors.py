"""Exception hierarchy shared across the package.

Exit-code mapping in the CLI relies on these base classes: usage errors
are argparse's business, DataError maps to 3, ContractError to 4.
"""


class FewtuneError(Exception):
    """Base class for all package errors."""


class ShapeError(FewtuneError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(FewtuneError):
    """A configuration value is outside its documented domain."""


class ContractError(FewtuneError):
    """A caller violated an operation's contract."""


class DegenerateBatchError(ContractError):
    """Batch statistics requested on a batch with fewer than two rows."""


class QueryIsolationError(ContractError):
    """The real query set was read while fine-tuning had it locked."""


class DataError(FewtuneError):
    """A dataset could not be loaded or cannot serve the request."""


class CapacityError(DataError):
    """A dataset lacks the classes or images an episode shape requires."""


class DataLoadError(DataError):
    """A dataset directory or image file could not be decoded."""
