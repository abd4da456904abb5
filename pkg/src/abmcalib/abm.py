"""Stochastic agent-based SIR simulator over a fully connected population.

Daily dynamics (synchronous update from the start-of-day state):

* every infectious agent makes ``K ~ Poisson(c_rate)`` contacts, each aimed
  uniformly (with replacement) at one of the other ``n - 1`` agents;
* each contact landing on a susceptible agent transmits with probability
  ``p_tran``; repeated contacts are independent trials (only transmitting
  contacts are drawn, which has the same distribution);
* afterwards every agent infectious at the start of the day recovers with
  probability ``p_recov``; the newly infected become infectious tomorrow.

``incidence[0]`` holds the ``i0`` seed cases.

Random streams are numpy ``PCG64`` generators.  Ensemble member ``r`` of a
run seeded with ``seed`` uses ``child_seed(seed, r)``, the first 64-bit word
of ``SeedSequence(seed, spawn_key=(r,))``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SUSCEPTIBLE, INFECTIOUS, RECOVERED = 0, 1, 2

DEFAULT_HORIZON = 60


@dataclass(frozen=True)
class EpiParams:
    n: int
    i0: int
    c_rate: float
    p_tran: float
    p_recov: float
    r0: float | None = None

    def __post_init__(self):
        for name in ("c_rate", "p_tran", "p_recov"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite, got {getattr(self, name)}")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        if int(self.i0) != self.i0 or not 1 <= self.i0 <= self.n:
            raise ValueError(f"i0 must be an integer in [1, n={self.n}], got {self.i0}")
        if not self.c_rate > 0:
            raise ValueError(f"c_rate must be positive, got {self.c_rate}")
        if not 0.0 <= self.p_tran <= 1.0:
            raise ValueError(f"p_tran must lie in [0, 1], got {self.p_tran}")
        if not 0.0 < self.p_recov <= 1.0:
            raise ValueError(f"p_recov must lie in (0, 1], got {self.p_recov}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "i0", int(self.i0))
        if self.r0 is None:
            object.__setattr__(self, "r0", self.p_tran * self.c_rate / self.p_recov)
        if not math.isfinite(self.r0):
            raise ValueError(f"r0 must be finite, got {self.r0}")


@dataclass
class EpiCurve:
    """Daily incidence over a fixed horizon.

    ``compartments`` is only filled when the simulator is asked to track it:
    an ``(horizon, 3)`` array of S, I, R counts at the end of each day.
    """

    incidence: np.ndarray
    mask: np.ndarray | None = None
    compartments: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.incidence = np.asarray(self.incidence, dtype=np.int64)
        if self.incidence.ndim != 1 or self.incidence.size < 1:
            raise ValueError("incidence must be a non-empty 1-d sequence")
        if (self.incidence < 0).any():
            raise ValueError("incidence must be non-negative")
        if self.mask is None:
            self.mask = np.ones(self.incidence.size, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.incidence.shape:
                raise ValueError("mask and incidence lengths differ")

    @property
    def horizon(self) -> int:
        return int(self.incidence.size)

    @property
    def prevalence(self) -> np.ndarray:
        """Infectious agents at the end of each day (debug output)."""
        if self.compartments is None:
            raise ValueError("curve was simulated without compartment tracking")
        return self.compartments[:, INFECTIOUS]


def child_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit seed for sub-run ``index`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def simulate(params: EpiParams, horizon: int = DEFAULT_HORIZON, seed: int = 0,
             track_compartments: bool = False) -> EpiCurve:
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be a positive integer, got {horizon}")
    rng = make_rng(seed)
    n = params.n
    status = np.zeros(n, dtype=np.int8)
    # agents are exchangeable, so the seeds can be the first i0 indices
    status[: params.i0] = INFECTIOUS
    incidence = np.zeros(horizon, dtype=np.int64)
    incidence[0] = params.i0
    comps = np.zeros((horizon, 3), dtype=np.int64) if track_compartments else None
    if comps is not None:
        comps[0] = (n - params.i0, params.i0, 0)

    infectious = np.arange(params.i0)
    # A contact that does not transmit changes nothing, so only transmitting
    # contacts are drawn: Poisson(c_rate) thinned by p_tran is Poisson(c_rate * p_tran).
    rate = params.c_rate * params.p_tran
    for day in range(1, horizon):
        if infectious.size == 0:
            if comps is not None:
                comps[day:] = comps[day - 1]
            break
        contacts = rng.poisson(rate, size=infectious.size)
        source = np.repeat(infectious, contacts)
        target = rng.integers(0, n - 1, size=source.size)
        target += target >= source  # skip self
        newly = np.unique(target[status[target] == SUSCEPTIBLE])
        stays = rng.random(infectious.size) >= params.p_recov
        status[infectious[~stays]] = RECOVERED
        status[newly] = INFECTIOUS
        infectious = np.concatenate((infectious[stays], newly))
        incidence[day] = newly.size
        if comps is not None:
            comps[day] = np.bincount(status, minlength=3)

    return EpiCurve(incidence, compartments=comps)


def simulate_ensemble(params: EpiParams, horizon: int = DEFAULT_HORIZON, reps: int = 100,
                      seed: int = 0) -> list[EpiCurve]:
    if int(reps) != reps or reps < 1:
        raise ValueError(f"reps must be a positive integer, got {reps}")
    return [simulate(params, horizon, child_seed(seed, r)) for r in range(reps)]


def ensemble_matrix(curves: list[EpiCurve]) -> np.ndarray:
    return np.stack([c.incidence for c in curves])


def write_curve_csv(curve: EpiCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "incidence"])
        for day, value in enumerate(curve.incidence.tolist()):
            w.writerow([day, value])


def read_curve_csv(path) -> EpiCurve:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["day", "incidence"]:
        raise ValueError(f"{path}: expected header 'day,incidence'")
    days = [int(r[0]) for r in rows[1:]]
    if days != list(range(len(days))):
        raise ValueError(f"{path}: days must run 0..horizon-1")
    return EpiCurve(np.array([int(r[1]) for r in rows[1:]], dtype=np.int64))
