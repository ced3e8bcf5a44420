"""Exception types shared across the package."""


class UwauthError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(UwauthError, ValueError):
    """A distribution parameter lies outside its valid domain."""


class DegenerateDataError(UwauthError, ValueError):
    """Input data carries no usable structure (constant samples, single class, ...)."""


class ComponentCollapseError(UwauthError, RuntimeError):
    """An EM mixture component lost essentially all responsibility mass."""

    def __init__(self, component: int, mass: float, floor: float):
        self.component = component
        self.mass = mass
        self.floor = floor
        super().__init__(
            f"mixture component {component} collapsed: responsibility mass "
            f"{mass:.3e} below floor {floor:.3e}"
        )


class NumericsError(UwauthError, RuntimeError):
    """A numerical routine failed to reach its accuracy target."""


class ConfigError(UwauthError, ValueError):
    """An experiment or scenario configuration is invalid."""


class CsvParseError(UwauthError, ValueError):
    """A CSV input file violates the documented schema."""
