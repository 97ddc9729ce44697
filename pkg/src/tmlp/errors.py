"""Exception types shared across the package.

Every error carries a short machine-readable code (the class name) so the
CLI can emit single-line parsable diagnostics.
"""


class TmlpError(Exception):
    """Base class for all errors raised by this package."""

    @property
    def code(self) -> str:
        return type(self).__name__


class MissingKey(TmlpError):
    pass


class UnknownTask(TmlpError):
    pass


class OverlappingColumns(TmlpError):
    pass


class MissingHeader(TmlpError):
    pass


class MissingColumn(TmlpError):
    pass


class UnparsableNumeric(TmlpError):
    def __init__(self, row: int, col: str, value: str):
        super().__init__(f"row {row}, column {col!r}: cannot parse {value!r} as a number")
        self.row = row
        self.col = col
        self.value = value


class NotFitted(TmlpError):
    pass


class BadFractions(TmlpError):
    pass


class EmptyDataset(TmlpError):
    pass


class SingleClassLabels(TmlpError):
    pass


class FeatureCountMismatch(TmlpError):
    pass


class ShapeMismatch(TmlpError):
    pass


class BadProbability(TmlpError):
    pass


class IndexOutOfVocabulary(TmlpError):
    pass


class LabelOutOfRange(TmlpError):
    pass


class SchemaMismatch(TmlpError):
    pass


class CorruptModel(TmlpError):
    pass


class GateAbsent(TmlpError):
    pass


class LabelColumnMissing(TmlpError):
    pass


class EmptyEnsemble(TmlpError):
    pass


class NonNumericalFeature(TmlpError):
    pass
