class ConfigError(ValueError):
    """Invalid scenario or map input; ``where`` names the offending field."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateGeometry(ValueError):
    """Stop line and lane line are (nearly) parallel."""


class CoincidentPositions(ValueError):
    """Two vehicles are too close for a usable range Jacobian."""


class StaleData(ValueError):
    """Beacon or range is older than the allowed staleness bound."""
