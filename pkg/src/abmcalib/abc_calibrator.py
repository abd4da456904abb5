"""Likelihood-free MCMC (ABC) calibration of (c_rate, p_recov, p_tran).

The summary statistic is the full incidence series; a candidate is scored
by the Gaussian kernel ``exp(-|S' - S_obs|^2 / (2 eps^2))`` with
``eps = kernel_factor * |S_obs|``.  Proposals are log-normal for the two
rates and logit-normal for the transmission probability, and a move is
accepted with probability ``min(1, K'/K)`` (no proposal-asymmetry term).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .abm import EpiCurve, EpiParams, child_seed, simulate


@dataclass(frozen=True)
class AbcTheta:
    c_rate: float
    p_recov: float
    p_tran: float

    def in_range(self) -> bool:
        return (math.isfinite(self.c_rate) and self.c_rate > 0
                and 0 < self.p_recov < 1 and 0 < self.p_tran < 1)


@dataclass(frozen=True)
class AbcConfig:
    """Chain settings.

    ``n`` and ``i0`` are held fixed at the observed scenario's values.  With
    ``common_random_numbers`` every simulation in the chain reuses one seed,
    so identical parameters always score identically; by default each
    iteration draws a fresh simulation seed.
    """

    n: int
    i0: int
    iterations: int = 2000
    burn_in: int = 1000
    sigma: float = 0.1
    kernel_factor: float = 0.05
    seed: int = 0
    init: AbcTheta = field(default_factory=lambda: AbcTheta(10.0, 0.1605, 0.05))
    max_redraws: int = 100
    common_random_numbers: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError(f"burn-in must satisfy 0 <= burn_in < iterations, got {self.burn_in}")
        if not self.sigma > 0:
            raise ValueError("proposal scale must be positive")
        if not self.kernel_factor > 0:
            raise ValueError("kernel factor must be positive")
        if not self.init.in_range():
            raise ValueError(f"initial state out of range: {self.init}")


@dataclass
class AbcTrace:
    c_rate: np.ndarray
    p_recov: np.ndarray
    p_tran: np.ndarray
    kernel: np.ndarray
    log_kernel: np.ndarray
    accepted: np.ndarray
    initial: AbcTheta | None = None
    initial_log_kernel: float | None = None
    epsilon: float | None = None

    def __len__(self):
        return len(self.c_rate)

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if len(self) else float("nan")

    def samples(self) -> np.ndarray:
        """(iterations, 3) array with columns c_rate, p_recov, p_tran."""
        return np.column_stack([self.c_rate, self.p_recov, self.p_tran])


def logit(p):
    return math.log(p) - math.log1p(-p)


def expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def propose(theta: AbcTheta, sigma: float, rng: np.random.Generator, max_redraws: int = 100) -> AbcTheta | None:
    """Draw a candidate; ``None`` when no ``p_recov < 1`` was found within ``max_redraws`` tries."""
    c_rate = theta.c_rate * math.exp(sigma * rng.standard_normal())
    p_recov = None
    for _ in range(max_redraws):
        cand = theta.p_recov * math.exp(sigma * rng.standard_normal())
        if cand < 1.0:
            p_recov = cand
            break
    p_tran = expit(logit(theta.p_tran) + sigma * rng.standard_normal())
    if p_recov is None:
        return None
    out = AbcTheta(c_rate, p_recov, p_tran)
    return out if out.in_range() else None


def _check_series(s_sim, s_obs):
    a = np.asarray(s_sim, dtype=float)
    b = np.asarray(s_obs, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"series lengths differ: {a.shape} vs {b.shape}")
    return a, b


def log_kernel_weight(s_sim, s_obs, eps: float) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    a, b = _check_series(s_sim, s_obs)
    d2 = float(np.sum((a - b) ** 2))
    return -d2 / (2.0 * eps * eps)


def kernel_weight(s_sim, s_obs, eps: float) -> float:
    """Gaussian kernel of the Euclidean distance between two series.

    Very distant series underflow to 0.0 in double precision; the chain works
    with :func:`log_kernel_weight`, which does not.
    """
    return math.exp(log_kernel_weight(s_sim, s_obs, eps))


def epsilon_for(s_obs, kernel_factor: float = 0.05) -> float:
    return kernel_factor * float(np.linalg.norm(np.asarray(s_obs, dtype=float)))


def _simulate_theta(theta: AbcTheta, cfg: AbcConfig, horizon: int, seed: int) -> np.ndarray:
    params = EpiParams(n=cfg.n, i0=cfg.i0, c_rate=theta.c_rate, p_tran=theta.p_tran, p_recov=theta.p_recov)
    return simulate(params, horizon, seed).incidence


def run_lfmcmc(s_obs, config: AbcConfig) -> AbcTrace:
    """Run one chain. Row ``k`` of the trace is the state after the accept/reject at iteration ``k``.

    Proposal draws and acceptance uniforms come from ``default_rng(seed)``.
    The initial simulation uses ``child_seed(seed, 0)`` and iteration ``k``
    uses ``child_seed(seed, k + 1)`` (or always ``child_seed(seed, 0)`` with
    common random numbers).
    """
    if isinstance(s_obs, EpiCurve):
        s_obs = s_obs.incidence
    s_obs = np.asarray(s_obs, dtype=float)
    horizon = s_obs.size
    eps = epsilon_for(s_obs, config.kernel_factor)
    if not eps > 0:
        raise ValueError("observed series is identically zero; kernel scale undefined")
    rng = np.random.default_rng(config.seed)

    def sim_seed(k):
        return child_seed(config.seed, 0 if config.common_random_numbers else k)

    it = config.iterations
    c_rate = np.empty(it)
    p_recov = np.empty(it)
    p_tran = np.empty(it)
    logk = np.empty(it)
    accepted = np.zeros(it, dtype=bool)

    current = config.init
    try:
        cur_logk = log_kernel_weight(_simulate_theta(current, config, horizon, sim_seed(0)), s_obs, eps)
    except ValueError as exc:
        raise RuntimeError(f"simulation failed at chain initialisation: {exc}") from exc
    init_logk = cur_logk
    for k in range(it):
        cand = propose(current, config.sigma, rng, config.max_redraws)
        u = rng.random()
        if cand is not None:
            try:
                cand_logk = log_kernel_weight(_simulate_theta(cand, config, horizon, sim_seed(k + 1)), s_obs, eps)
            except ValueError as exc:
                raise RuntimeError(f"simulation failed at iteration {k}: {exc}") from exc
            if u < math.exp(min(cand_logk - cur_logk, 0.0)):
                current, cur_logk = cand, cand_logk
                accepted[k] = True
        c_rate[k], p_recov[k], p_tran[k] = current.c_rate, current.p_recov, current.p_tran
        logk[k] = cur_logk
    return AbcTrace(c_rate, p_recov, p_tran, np.exp(logk), logk, accepted,
                    initial=config.init, initial_log_kernel=init_logk, epsilon=eps)


def point_estimate(trace: AbcTrace, burn_in: int) -> dict:
    """Coordinate-wise median of the post-burn-in chain; ``r0 = p_tran * c_rate / p_recov``."""
    if burn_in < 0 or burn_in >= len(trace):
        raise ValueError(f"empty post-burn-in window (burn_in={burn_in}, length={len(trace)})")
    c = float(np.median(trace.c_rate[burn_in:]))
    pr = float(np.median(trace.p_recov[burn_in:]))
    pt = float(np.median(trace.p_tran[burn_in:]))
    return {"c_rate": c, "p_recov": pr, "p_tran": pt, "r0": pt * c / pr}


def calibrate(s_obs, config: AbcConfig) -> tuple[dict, AbcTrace]:
    trace = run_lfmcmc(s_obs, config)
    return point_estimate(trace, config.burn_in), trace


# -- trace files ---------------------------------------------------------------

TRACE_HEADER = ["iter", "c_rate", "p_recov", "p_tran", "kernel", "accepted"]


def write_trace_csv(trace: AbcTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for k in range(len(trace)):
            w.writerow([k, repr(float(trace.c_rate[k])), repr(float(trace.p_recov[k])),
                        repr(float(trace.p_tran[k])), repr(float(trace.kernel[k])), int(trace.accepted[k])])


def read_trace_csv(path) -> AbcTrace:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRACE_HEADER:
        raise ValueError(f"{path}: expected header {','.join(TRACE_HEADER)}")
    body = rows[1:]
    if [int(r[0]) for r in body] != list(range(len(body))):
        raise ValueError(f"{path}: iterations must run 0..n-1")
    col = lambda j: np.array([float(r[j]) for r in body])  # noqa: E731
    kernel = col(4)
    with np.errstate(divide="ignore"):
        logk = np.log(kernel)
    return AbcTrace(col(1), col(2), col(3), kernel, logk, np.array([r[5] == "1" for r in body], dtype=bool))
