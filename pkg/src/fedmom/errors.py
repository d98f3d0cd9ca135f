class ConfigError(ValueError):
    """A configuration value is missing, mistyped, or violates a constraint."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class DivergenceError(ArithmeticError):
    """An iterate became non-finite."""

    def __init__(self, round: int | None = None, client: int | None = None, step: int | None = None):
        self.round = round
        self.client = client
        self.step = step
        super().__init__(self._describe())

    def _describe(self) -> str:
        parts = [f"{name}={value}" for name, value in
                 (("round", self.round), ("client", self.client), ("step", self.step))
                 if value is not None]
        return "non-finite iterate (" + ", ".join(parts) + ")"

    def at_round(self, round: int) -> "DivergenceError":
        return DivergenceError(round, self.client, self.step)
