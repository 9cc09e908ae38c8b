"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


class ValidationError(ValueError):
    """A domain object was constructed with invalid values.

    The message names the offending field.
    """


class BudgetError(RuntimeError):
    """A requested mesh exceeds the configured cell budget."""

    def __init__(self, required, budget):
        self.required = int(required)
        self.budget = int(budget)
        super().__init__(
            f"mesh needs {self.required} cells, over the budget of {self.budget}; "
            f"raise the budget (mesh.cell_budget or PROTOCELL_CELL_BUDGET) to at least {self.required}"
        )


class DivergenceError(RuntimeError):
    """An iterative solve diverged or stalled.

    Carries the residual history so callers can report or post-mortem it.
    """

    def __init__(self, message, history=None):
        self.history = list(history) if history is not None else []
        super().__init__(message)


class GeometryError(ValueError):
    """A sampling line or surface falls outside the meshed domain."""


class ExtractError(ValueError):
    """A field dump does not match the mesh/config it is being used with."""
