"""Counter-based random streams keyed by (seed, replica, round, client, purpose).

Every random draw in a run comes from a stream addressed by its logical
position, never from shared mutable state, so results do not depend on the
order in which workers happen to execute clients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PURPOSES = {
    "problem": 0,
    "cohort": 1,
    "local": 2,
    "init": 3,
}


def rng_stream(
    master_seed: int,
    round: int,
    client: int,
    purpose: str,
    replica: int = 0,
) -> np.random.Generator:
    """Return a Philox generator for one (round, client, purpose) slot."""
    try:
        tag = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown stream purpose {purpose!r}") from None
    for name, value in (("master_seed", master_seed), ("round", round),
                        ("client", client), ("replica", replica)):
        if int(value) != value or value < 0:
            raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    seq = np.random.SeedSequence(
        entropy=int(master_seed),
        spawn_key=(int(replica), int(round), int(client), tag),
    )
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class StreamSource:
    """Hands out streams for one replica of one run."""

    master_seed: int
    replica: int = 0

    def stream(self, round: int, client: int, purpose: str) -> np.random.Generator:
        return rng_stream(self.master_seed, round, client, purpose, replica=self.replica)

    def state(self) -> dict:
        return {
            "scheme": "philox-seedsequence",
            "master_seed": self.master_seed,
            "replica": self.replica,
        }

    @classmethod
    def from_state(cls, state: dict) -> "StreamSource":
        if state.get("scheme") != "philox-seedsequence":
            raise ValueError(f"unsupported rng scheme {state.get('scheme')!r}")
        return cls(int(state["master_seed"]), int(state.get("replica", 0)))
