"""Training configuration: one frozen dataclass covering every component choice."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

from .accounting import InvalidParameterError, PrivacyBudget
from .gradients import UpdateMode
from .trees import SplitMethod

__all__ = [
    "CandidateMethod",
    "FeatureMode",
    "NoisePlacement",
    "TrainConfig",
]


class CandidateMethod(Enum):
    UNIFORM = "uniform"
    LOG = "log"
    QUANTILE = "quantile"
    ITERATIVE_HESSIAN = "ih"


class FeatureMode(Enum):
    CYCLICAL = "cyclical"
    RANDOM = "random"


class NoisePlacement(Enum):
    CENTRAL = "central"  # noise added once at the (simulated) secure aggregate
    LOCAL = "local"  # every client noises its own release


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run depends on besides the data itself.

    k is the feature-interaction width (None means all features); B is the
    batch size of the prediction update, with B = 1 giving plain boosting.
    Averaging (random-forest) runs behave as a single batch of size T because
    their gradients never depend on predictions. m (number of features) may
    stay None until data is attached.
    """

    T: int = 100
    d: int = 4
    Q: int = 32
    split_method: SplitMethod = SplitMethod.TOTALLY_RANDOM
    update_mode: UpdateMode = UpdateMode.NEWTON
    candidate_method: CandidateMethod = CandidateMethod.UNIFORM
    ih_rounds: int = 5
    feature_mode: FeatureMode = FeatureMode.CYCLICAL
    k: int | None = None
    B: int = 1
    eta: float = 0.3
    beta: float = 2.0
    lam: float = 1.0
    gamma: float = 0.0
    budget: PrivacyBudget | None = None
    seed: int = 0
    m: int | None = None
    centered_batch: bool = True
    noise_placement: NoisePlacement = NoisePlacement.CENTRAL
    name: str | None = None

    def __post_init__(self):
        if self.T < 1 or self.d < 1:
            raise InvalidParameterError("need T >= 1 and d >= 1")
        if self.Q < 2:
            raise InvalidParameterError("need at least Q = 2 split candidates")
        if not (1 <= self.B <= self.T):
            raise InvalidParameterError(f"need 1 <= B <= T, got B={self.B}, T={self.T}")
        if self.eta <= 0:
            raise InvalidParameterError("learning rate eta must be positive")
        if self.beta < 0 or self.lam < 0 or self.gamma < 0:
            raise InvalidParameterError("beta, lam, gamma must be non-negative")
        if self.ih_rounds < 1:
            raise InvalidParameterError("ih_rounds must be >= 1")
        if self.m is not None and self.m < 1:
            raise InvalidParameterError("m must be >= 1")
        if self.k is not None:
            if self.k < 1 or (self.m is not None and self.k > self.m):
                raise InvalidParameterError(f"need 1 <= k <= m, got k={self.k}, m={self.m}")
        if self.budget is not None and self.lam <= 0:
            raise InvalidParameterError("private training requires lam > 0 (noisy Hessians)")

    def resolved_k(self) -> int:
        if self.k is not None:
            return self.k
        if self.m is None:
            raise InvalidParameterError("k defaults to m, but m is not set")
        return self.m

    @property
    def effective_batch_size(self) -> int:
        """Averaging ensembles are one T-sized batch; others use B as given."""
        return self.T if self.update_mode is UpdateMode.AVERAGING else self.B

    def with_m(self, m: int) -> "TrainConfig":
        return dataclasses.replace(self, m=m)

    def with_budget(self, budget: PrivacyBudget | None) -> "TrainConfig":
        return dataclasses.replace(self, budget=budget)

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def to_flat_dict(self) -> dict:
        """Plain key/value form used by the CLI, config files, and sidecars."""
        out = {
            "T": self.T,
            "d": self.d,
            "Q": self.Q,
            "split_method": self.split_method.value,
            "update_mode": self.update_mode.value,
            "candidate_method": self.candidate_method.value,
            "ih_rounds": self.ih_rounds,
            "feature_mode": self.feature_mode.value,
            "k": self.k,
            "B": self.B,
            "eta": self.eta,
            "beta": self.beta,
            "lam": self.lam,
            "gamma": self.gamma,
            "seed": self.seed,
            "m": self.m,
            "centered_batch": self.centered_batch,
            "noise_placement": self.noise_placement.value,
            "name": self.name,
            "epsilon": self.budget.epsilon if self.budget else None,
            "delta": self.budget.delta if self.budget else None,
        }
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        epsilon = flat.pop("epsilon", None)
        delta = flat.pop("delta", None)
        budget = None
        if epsilon is not None:
            if delta is None:
                raise InvalidParameterError("epsilon given without delta")
            budget = PrivacyBudget(float(epsilon), float(delta))
        kwargs = {}
        enum_fields = {
            "split_method": SplitMethod,
            "update_mode": UpdateMode,
            "candidate_method": CandidateMethod,
            "feature_mode": FeatureMode,
            "noise_placement": NoisePlacement,
        }
        valid = {f.name for f in dataclasses.fields(cls)}
        for key, value in flat.items():
            if key not in valid:
                raise InvalidParameterError(f"unknown config field: {key!r}")
            if value is None:
                continue
            if key in enum_fields:
                value = enum_fields[key](value)
            kwargs[key] = value
        return cls(budget=budget, **kwargs)
