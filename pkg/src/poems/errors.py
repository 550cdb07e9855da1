"""Exception hierarchy shared by every module."""


class PoemsError(Exception):
    """Base class; carries a short tag naming the module that raised it."""

    module = "poems"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class ShapeError(PoemsError, ValueError):
    module = "shape"


class ContractError(PoemsError, ValueError):
    module = "contract"


class NumericError(PoemsError, FloatingPointError):
    module = "numeric"


class IngestionError(PoemsError, ValueError):
    module = "data"
