"""Client activation policies.

Client indices are 0-based throughout the package.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ActivationSet:
    round: int
    active: tuple

    def passive(self, num_clients):
        act = set(self.active)
        return tuple(m for m in range(num_clients) if m not in act)

    def __contains__(self, m):
        return m in self.active

    def __len__(self):
        return len(self.active)


@dataclass(frozen=True)
class FullActivation:
    kind = "full"

    def decide(self, sample, rng=None):
        return ActivationSet(sample.round, tuple(range(len(sample.parts))))


@dataclass(frozen=True)
class RandomActivation:
    """Each client joins independently with its own probability."""

    probs: tuple
    kind = "random"

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"activation probabilities must lie in [0, 1]: {probs}")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, p, num_clients):
        return cls((p,) * num_clients)

    def decide(self, sample, rng):
        if len(self.probs) != len(sample.parts):
            raise ValueError(
                f"{len(self.probs)} probabilities for {len(sample.parts)} clients"
            )
        # one uniform per client every round, whatever the outcome
        u = rng.random(len(self.probs))
        return ActivationSet(
            sample.round, tuple(int(m) for m in np.flatnonzero(u < np.asarray(self.probs)))
        )


@dataclass(frozen=True)
class EventActivation:
    """A client fires when the mean of its features strictly exceeds ``threshold``."""

    threshold: float
    kind = "event"

    def decide(self, sample, rng=None):
        return ActivationSet(
            sample.round,
            tuple(m for m, x in enumerate(sample.parts) if float(x.mean()) > self.threshold),
        )


def decide_activation(policy, sample, rng=None):
    return policy.decide(sample, rng)
