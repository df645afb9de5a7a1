from dataclasses import dataclass

from ..errors import ConfigurationError


@dataclass(frozen=True)
class LrSchedule:
    """Per-round learning rate: step decay or ``eta0 / (1 + t)``."""

    eta0: float
    decay_rate: float = 1.0
    decay_every: int = 1
    mode: str = "step"

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ConfigurationError("eta0 must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ConfigurationError("decay_rate must lie in (0, 1]")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be >= 1")
        if self.mode not in ("step", "diminishing"):
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")

    def __call__(self, t: int) -> float:
        if self.mode == "diminishing":
            return self.eta0 / (1 + t)
        return self.eta0 * self.decay_rate ** (t // self.decay_every)
