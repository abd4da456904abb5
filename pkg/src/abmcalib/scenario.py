"""Prior sampling, labelled dataset generation and min-max input scaling."""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .abm import DEFAULT_HORIZON, EpiCurve, EpiParams, child_seed, simulate

FEATURES = ("incidence", "n", "p_recov")


@dataclass(frozen=True)
class PriorConfig:
    n: tuple[float, float] = (5000, 10000)
    p_recov: tuple[float, float] = (0.071, 0.25)
    i0: tuple[float, float] = (100, 2000)
    r0: tuple[float, float] = (1.0, 5.0)
    c_rate: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self):
        for name in ("n", "p_recov", "i0", "r0", "c_rate"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ValueError(f"prior range for {name} must satisfy 0 < lower < upper, got {(lo, hi)}")
        if self.i0[1] > self.n[0]:
            raise ValueError("initial infected upper bound exceeds the smallest population")


@dataclass
class Scenario:
    params: EpiParams
    curve: EpiCurve
    seed: int


@dataclass
class Observation:
    """What is observed of an outbreak: the curve plus the known covariates."""

    curve: EpiCurve
    n: int
    p_recov: float


@dataclass
class ModelInput:
    sequence: np.ndarray  # scaled incidence, (horizon,)
    static: np.ndarray  # scaled (n, p_recov)
    mask: np.ndarray  # bool, (horizon,)


def sample_params(prior: PriorConfig, rng: np.random.Generator) -> EpiParams:
    """Draw one scenario; ``p_tran`` follows from ``r0 * p_recov / c_rate``."""
    n = int(round(rng.uniform(*prior.n)))
    p_recov = float(rng.uniform(*prior.p_recov))
    i0 = int(round(rng.uniform(*prior.i0)))
    r0 = float(rng.uniform(*prior.r0))
    c_rate = float(rng.uniform(*prior.c_rate))
    p_tran = r0 * p_recov / c_rate
    return EpiParams(n=n, i0=i0, c_rate=c_rate, p_tran=p_tran, p_recov=p_recov, r0=r0)


def _simulate_job(args):
    params, horizon, seed = args
    return simulate(params, horizon, seed)


def generate_dataset(count: int, horizon: int = DEFAULT_HORIZON, prior: PriorConfig | None = None,
                     seed: int = 0, jobs: int = 1) -> list[Scenario]:
    """Draw ``count`` scenarios and simulate each.

    Parameters come sequentially from ``default_rng(seed)``; scenario ``i`` is
    simulated with ``child_seed(seed, i)``, so results do not depend on ``jobs``.
    """
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count}")
    prior = prior or PriorConfig()
    rng = np.random.default_rng(seed)
    params = [sample_params(prior, rng) for _ in range(count)]
    seeds = [child_seed(seed, i) for i in range(count)]
    jobs_args = [(p, horizon, s) for p, s in zip(params, seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            curves = list(pool.map(_simulate_job, jobs_args, chunksize=16))
    else:
        curves = [_simulate_job(a) for a in jobs_args]
    return [Scenario(p, c, s) for p, c, s in zip(params, curves, seeds)]


class Scalers:
    """Per-feature (min, max) pairs fitted on training data only."""

    def __init__(self, bounds: dict[str, tuple[float, float]]):
        missing = set(FEATURES) - set(bounds)
        if missing:
            raise ValueError(f"scalers missing features: {sorted(missing)}")
        self.bounds = {k: (float(bounds[k][0]), float(bounds[k][1])) for k in FEATURES}
        for name, (lo, hi) in self.bounds.items():
            if not hi > lo:
                raise ValueError(f"feature {name!r} is constant in the training data (min == max == {lo})")

    @classmethod
    def fit_arrays(cls, incidence: np.ndarray, n: np.ndarray, p_recov: np.ndarray) -> "Scalers":
        incidence = np.asarray(incidence, dtype=float)
        n = np.asarray(n, dtype=float)
        p_recov = np.asarray(p_recov, dtype=float)
        if incidence.size == 0 or n.size == 0:
            raise ValueError("cannot fit scalers on an empty training set")
        return cls({
            "incidence": (incidence.min(), incidence.max()),
            "n": (n.min(), n.max()),
            "p_recov": (p_recov.min(), p_recov.max()),
        })

    def scale(self, feature: str, x):
        lo, hi = self.bounds[feature]
        return (np.asarray(x, dtype=float) - lo) / (hi - lo)

    def unscale(self, feature: str, z):
        lo, hi = self.bounds[feature]
        return np.asarray(z, dtype=float) * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {k: {"min": lo, "max": hi} for k, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Scalers":
        try:
            return cls({k: (doc[k]["min"], doc[k]["max"]) for k in FEATURES})
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scalers document: {exc}") from exc

    def __eq__(self, other):
        return isinstance(other, Scalers) and self.bounds == other.bounds

    def __repr__(self):
        return f"Scalers({self.bounds})"


def fit_scalers(train: list[Scenario]) -> Scalers:
    if not train:
        raise ValueError("cannot fit scalers on an empty training set")
    return Scalers.fit_arrays(
        np.concatenate([s.curve.incidence for s in train]),
        [s.params.n for s in train],
        [s.params.p_recov for s in train],
    )


def as_observation(item) -> Observation:
    if isinstance(item, Observation):
        return item
    if isinstance(item, Scenario):
        return Observation(item.curve, item.params.n, item.params.p_recov)
    raise TypeError(f"expected Scenario or Observation, got {type(item).__name__}")


def encode_input(item, scalers: Scalers, horizon: int = DEFAULT_HORIZON,
                 allow_padding: bool = False) -> ModelInput:
    """Min-max scale one observation (no clipping).

    A curve shorter than ``horizon`` is right-padded with zeros and masked out,
    but only when ``allow_padding`` is set.
    """
    obs = as_observation(item)
    inc = obs.curve.incidence
    mask = obs.curve.mask
    if inc.size > horizon:
        raise ValueError(f"curve length {inc.size} exceeds model horizon {horizon}")
    if inc.size < horizon:
        if not allow_padding:
            raise ValueError(f"curve length {inc.size} != horizon {horizon} (enable padding to accept it)")
        pad = horizon - inc.size
        inc = np.concatenate([inc, np.zeros(pad, dtype=inc.dtype)])
        mask = np.concatenate([mask, np.zeros(pad, dtype=bool)])
    seq = scalers.scale("incidence", inc)
    seq = np.where(mask, seq, 0.0)
    static = np.array([scalers.scale("n", obs.n), scalers.scale("p_recov", obs.p_recov)], dtype=float)
    return ModelInput(seq, static, mask.copy())


def decode_input(mi: ModelInput, scalers: Scalers) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`encode_input` on the observed days: (incidence, n, p_recov)."""
    inc = scalers.unscale("incidence", mi.sequence[mi.mask])
    return inc, float(scalers.unscale("n", mi.static[0])), float(scalers.unscale("p_recov", mi.static[1]))


def encode_batch(items, scalers: Scalers, horizon: int = DEFAULT_HORIZON, allow_padding: bool = False):
    """Stack encoded inputs into ``(x, static, mask)`` arrays of shapes (B, T, 1), (B, 2), (B, T)."""
    encoded = [encode_input(it, scalers, horizon, allow_padding) for it in items]
    x = np.stack([e.sequence for e in encoded])[:, :, None]
    static = np.stack([e.static for e in encoded])
    mask = np.stack([e.mask for e in encoded])
    return x, static, mask


def targets(scenarios: list[Scenario]) -> np.ndarray:
    """Regression targets ``(p_tran, c_rate, r0)`` on their natural scales, shape (B, 3)."""
    return np.array([[s.params.p_tran, s.params.c_rate, s.params.r0] for s in scenarios], dtype=float)


def split_train_val(scenarios: list[Scenario], val_fraction: float = 0.1, seed: int = 0):
    if not 0 < val_fraction < 1:
        raise ValueError(f"validation fraction must lie in (0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(len(scenarios))
    n_val = max(1, int(round(len(scenarios) * val_fraction)))
    if n_val >= len(scenarios):
        raise ValueError("not enough scenarios for a train/validation split")
    val = [scenarios[i] for i in sorted(order[:n_val])]
    train = [scenarios[i] for i in sorted(order[n_val:])]
    return train, val


# -- files ----------------------------------------------------------------

_PARAM_COLS = ["scenario", "seed", "n", "i0", "c_rate", "p_tran", "p_recov", "r0"]


def write_dataset_csv(scenarios: list[Scenario], path) -> None:
    horizon = scenarios[0].curve.horizon if scenarios else DEFAULT_HORIZON
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_PARAM_COLS + [f"day{d}" for d in range(horizon)])
        for i, s in enumerate(scenarios):
            p = s.params
            if s.curve.horizon != horizon:
                raise ValueError("all scenarios in one dataset file must share a horizon")
            w.writerow([i, s.seed, p.n, p.i0, repr(p.c_rate), repr(p.p_tran), repr(p.p_recov), repr(p.r0)]
                       + s.curve.incidence.tolist())


def read_dataset_csv(path) -> list[Scenario]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[: len(_PARAM_COLS)] != _PARAM_COLS:
            raise ValueError(f"{path}: unexpected dataset header")
        horizon = len(header) - len(_PARAM_COLS)
        if header[len(_PARAM_COLS):] != [f"day{d}" for d in range(horizon)]:
            raise ValueError(f"{path}: day columns must be day0..day{horizon - 1}")
        out = []
        for row in reader:
            params = EpiParams(n=int(row[2]), i0=int(row[3]), c_rate=float(row[4]), p_tran=float(row[5]),
                               p_recov=float(row[6]), r0=float(row[7]))
            curve = EpiCurve(np.array([int(v) for v in row[8:]], dtype=np.int64))
            out.append(Scenario(params, curve, int(row[1])))
    return out


def write_scalers_json(scalers: Scalers, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scalers.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_scalers_json(path) -> Scalers:
    with open(path, encoding="utf-8") as fh:
        return Scalers.from_dict(json.load(fh))
