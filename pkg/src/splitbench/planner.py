"""Cut-index planning.

Delays are predicted by two least-squares fits over a handful of profiled
cuts: transmission against boundary bytes per unit bandwidth, client
compute against cumulative client flops. The single-objective problem is
an argmin over those predictions; the full objective (with accuracy and
resilience) is a brute-force ranking over measured runs. ``gamma`` and
``kappa`` carry whatever unit conversion the user wants between seconds
and the dimensionless accuracy/resilience terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import BYTES_PER_VALUE
from .netsim import ComputeModel, EpochPlan, LinkModel, run_epoch
from .profiles import LayerProfile

_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class PlannerWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    kappa: float = 0.0

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.kappa)
        if any(v < 0 for v in vals):
            raise ValueError("planner weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one planner weight must be positive")


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=np.float64) + self.intercept


@dataclass
class ProfileEstimates:
    cuts: tuple[int, ...]
    I: np.ndarray
    C: np.ndarray
    transmission_fit: LinearFit | None = None
    compute_fit: LinearFit | None = None
    I_obs: dict[int, float] | None = None
    C_obs: dict[int, float] | None = None
    A: dict[int, float] | None = None
    R: dict[int, float] | None = None

    def index(self, d: int) -> int:
        return self.cuts.index(d)

    def with_observations(self, A: Mapping[int, float] | None = None, R: Mapping[int, float] | None = None,
                          I_obs: Mapping[int, float] | None = None,
                          C_obs: Mapping[int, float] | None = None) -> "ProfileEstimates":
        conv = lambda m: None if m is None else {int(k): float(v) for k, v in m.items()}
        return ProfileEstimates(self.cuts, self.I, self.C, self.transmission_fit, self.compute_fit,
                                conv(I_obs) if I_obs is not None else self.I_obs,
                                conv(C_obs) if C_obs is not None else self.C_obs,
                                conv(A) if A is not None else self.A, conv(R) if R is not None else self.R)


# -- profiling -----------------------------------------------------------------------
def measure_delays(profile: LayerProfile, d: int, link: LinkModel, compute: ComputeModel,
                   batch: int = 32) -> tuple[float, float]:
    """Simulate one FSL batch at cut ``d``; return (activation transfer, client compute) seconds."""
    plan = EpochPlan.build("FSL", profile, d, num_clients=1, batches_per_client=1, batch_size=batch, link=link,
                           client_compute=compute, server_compute=compute)
    t = run_epoch(plan)
    transfer = sum(e - s for ent, _, s, e in t.transfers if ent.startswith("server"))
    wires = {(ent, s, e) for ent, _, s, e in t.transfers}
    client = sum(e - s for ent, cat, s, e in t.intervals
                 if ent.startswith("client") and cat == "client_fb" and (ent, s, e) not in wires)
    return transfer, client


def _features(profile: LayerProfile, cuts: Sequence[int], link: LinkModel, batch: int):
    bytes_over_b = np.array([BYTES_PER_VALUE * batch * profile.boundary_elements(d) / link.bandwidth
                             for d in cuts])
    flops = np.array([batch * profile.slice(0, d).forward_flops() for d in cuts], dtype=np.float64)
    return bytes_over_b, flops


def _ols(x: np.ndarray, y: np.ndarray) -> LinearFit:
    if np.ptp(x) == 0:
        # a flat feature carries no slope information
        return LinearFit(0.0, float(np.mean(y)))
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    return LinearFit(float(slope), float(intercept))


def fit_delay_models(profile: LayerProfile, link: LinkModel, compute: ComputeModel,
                     profile_cuts: Iterable[int] | None = None, batch: int = 32) -> ProfileEstimates:
    """Fit I(d|b) and C(d) on ``profile_cuts`` and predict both for every valid cut.

    ``profile_cuts`` defaults to every other cut, leaving the rest held out.
    """
    all_cuts = tuple(range(len(profile) + 1))
    fit_cuts = sorted(set(all_cuts[::2] if profile_cuts is None else profile_cuts))
    if len(fit_cuts) < 2:
        raise ValueError(f"need at least 2 profiling points, got {len(fit_cuts)}")
    bad = [d for d in fit_cuts if d not in all_cuts]
    if bad:
        raise ValueError(f"profiling cuts {bad} outside [0, {len(profile)}]")
    measured = [measure_delays(profile, d, link, compute, batch) for d in fit_cuts]
    xi, xc = _features(profile, fit_cuts, link, batch)
    i_fit = _ols(xi, np.array([m[0] for m in measured]))
    c_fit = _ols(xc, np.array([m[1] for m in measured]))
    fi, fc = _features(profile, all_cuts, link, batch)
    return ProfileEstimates(all_cuts, i_fit(fi), c_fit(fc), i_fit, c_fit)


# -- optimisation ----------------------------------------------------------------------
def _argmin_small_d(cuts: Sequence[int], values: np.ndarray) -> int:
    best = float(np.min(values))
    tol = _TIE_RTOL * max(abs(best), np.finfo(float).tiny)
    return min(d for d, v in zip(cuts, values) if v <= best + tol)


def delay_objective(est: ProfileEstimates, weights: PlannerWeights) -> np.ndarray:
    return weights.alpha * est.I + weights.beta * est.C


def select_cut(est: ProfileEstimates, weights: PlannerWeights, candidates: Iterable[int] | None = None) -> int:
    """argmin over ``d`` of ``alpha*I + beta*C``; near-ties go to the smaller ``d``."""
    obj = delay_objective(est, weights)
    if candidates is None:
        return _argmin_small_d(est.cuts, obj)
    cand = sorted(set(candidates))
    missing = [d for d in cand if d not in est.cuts]
    if missing:
        raise ValueError(f"candidate cuts {missing} have no estimates")
    return _argmin_small_d(cand, np.array([obj[est.index(d)] for d in cand]))


@dataclass(frozen=True)
class FrontierEntry:
    cut: int
    score: float
    terms: dict = field(default_factory=dict)


def enumerate_frontier(est: ProfileEstimates, weights: PlannerWeights,
                       candidates: Iterable[int] | None = None) -> list[FrontierEntry]:
    """Rank cuts by ``-alpha*I' - beta*C' + gamma*A + kappa*R`` (descending).

    Observed I'/C' are used where supplied, predictions elsewhere. Every
    candidate needs measured A and R unless the matching weight is zero.
    """
    cand = list(est.cuts) if candidates is None else sorted(set(candidates))
    gaps = []
    for name, table, w in (("A", est.A, weights.gamma), ("R", est.R, weights.kappa)):
        if w == 0:
            continue
        missing = [d for d in cand if table is None or d not in table]
        if missing:
            gaps.append(f"{name} missing for cuts {missing}")
    if gaps:
        raise ValueError("; ".join(gaps))
    out = []
    for d in cand:
        i_val = est.I_obs[d] if est.I_obs and d in est.I_obs else float(est.I[est.index(d)])
        c_val = est.C_obs[d] if est.C_obs and d in est.C_obs else float(est.C[est.index(d)])
        terms = {"I": -weights.alpha * i_val, "C": -weights.beta * c_val,
                 "A": weights.gamma * est.A[d] if weights.gamma else 0.0,
                 "R": weights.kappa * est.R[d] if weights.kappa else 0.0}
        out.append(FrontierEntry(d, terms["I"] + terms["C"] + terms["A"] + terms["R"], terms))
    # descending score, smaller cut first on ties
    out.sort(key=lambda e: (-e.score, e.cut))
    return out


def planner_report(est: ProfileEstimates, weights: PlannerWeights, candidates: Iterable[int] | None = None) -> dict:
    cand = None if candidates is None else sorted(set(candidates))
    report = {
        "weights": {"alpha": weights.alpha, "beta": weights.beta, "gamma": weights.gamma, "kappa": weights.kappa},
        "fits": {"transmission": vars(est.transmission_fit) if est.transmission_fit else None,
                 "compute": vars(est.compute_fit) if est.compute_fit else None},
        "per_cut": [{"cut": d, "I": float(est.I[k]), "C": float(est.C[k]),
                     "objective": float(weights.alpha * est.I[k] + weights.beta * est.C[k])}
                    for k, d in enumerate(est.cuts) if cand is None or d in cand],
        "selected_cut": select_cut(est, weights, cand),
    }
    if weights.gamma or weights.kappa:
        report["frontier"] = [{"cut": e.cut, "score": e.score, "terms": e.terms}
                              for e in enumerate_frontier(est, weights, cand)]
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
