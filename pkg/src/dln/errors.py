"""Exception hierarchy shared by the library and the command-line front end."""


class DlnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DlnError, ValueError):
    """Array shapes disagree with each other or with the model."""


class DataError(DlnError):
    """Input files or datasets are missing, malformed or inconsistent."""


class NumericalError(DlnError, ArithmeticError):
    """A computation produced non-finite values or lost positive definiteness."""
