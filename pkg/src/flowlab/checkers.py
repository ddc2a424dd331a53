"""Certified checks of matrix inequalities and identities along density flows.

Every checker returns a :class:`CheckReport` whose ``worst_margin`` is signed
slack: for an inequality it is the smallest (value - bound) encountered, for
an identity it is minus the largest deviation.  "Pass" always means
``worst_margin >= -tolerance`` with every required hypothesis stamped.  When
the trajectory's stamps do not cover the statement, or the series failed its
resolution certificate, the checker refuses: nan margin, hypotheses_ok false,
never a pass verdict.

Checkers that bundle sub-checks with different discretization floors (the
concavity profiles, the relative envelope test) fold them into one margin by
shifting each sub-margin by the difference of tolerances, which preserves the
pass invariant exactly.  Bounds that evaluate to +inf (an eigenvalue at or
past its Riccati pole) count as violations, not as vacuously true.

Direction sampling is always the eigenbasis of the initial matrix plus a
fixed number of unit vectors from a seeded generator, so reruns reproduce
margins bit for bit.

The entropic-cost checkers (`check_evi`, `check_contraction`) pin the cost to
horizon 1 with viscosity sqrt(2) and evolve marginals by the unit-diffusivity
heat semigroup (variance grows like t).  Auxiliary interpolations are solved
from scratch at every evaluation point; each one must reproduce the entropy
difference of its endpoints through the trace of its matrix entropy to within
``TRACE_IDENTITY_TOL``, otherwise the whole check is refused as internally
inconsistent.
"""

from __future__ import annotations

import math

import numpy as np

from .flows import (FlowTrajectory, heat_flow, reverse_trajectory,
                    schrodinger_bridge)
from .functionals import FunctionalSeries, assemble_series, cost_accumulate
from .matrixcomp import (MatrixOdePath, check_matrix_ode, concavity_profile,
                         cumulative_trapezoid, log_trace_lower_bound,
                         riccati_lower_bound, sym_eig, trace_lower_bound)
from .report import CheckReport

__all__ = [
    "TRACE_IDENTITY_TOL",
    "COST_SIGMA",
    "default_tolerance",
    "direction_set",
    "check_T_inequality",
    "check_S_inequality",
    "check_entropy_growth",
    "check_turnpike",
    "check_energy",
    "check_matrix_energy",
    "check_cost_identity",
    "check_cost_inequality",
    "check_longtime",
    "check_evi",
    "check_contraction",
    "check_time_symmetry",
]

# Default-tolerance constants: tol = max(1e-6, FD_CONSTANT dt^2 + RES_CONSTANT g)
# where g is the worst resolution-certificate gap of the series.
FD_CONSTANT = 1.0
RES_CONSTANT = 10.0
RANDOM_DIRECTIONS = 8

# Entropic-cost normalization shared by check_evi / check_contraction.
COST_SIGMA = math.sqrt(2.0)
TRACE_IDENTITY_TOL = 1e-6


def default_tolerance(series: FunctionalSeries, c_fd: float = FD_CONSTANT,
                      c_sp: float = RES_CONSTANT) -> float:
    """Tolerance floor from the time step and the resolution certificate."""
    dt = float(np.max(np.diff(series.times)))
    gaps = [series.resolution.get("fisher_gap", 0.0),
            series.resolution.get("production_gap", 0.0)]
    gap = max(float(g) for g in gaps if math.isfinite(float(g)))
    return max(1e-6, c_fd * dt * dt + c_sp * gap)


def direction_set(M0, seed: int = 0, extra: int = RANDOM_DIRECTIONS) -> list:
    """Eigenbasis of M0 followed by ``extra`` seeded random unit vectors."""
    M0 = np.asarray(M0, dtype=np.float64)
    _, vecs = sym_eig(M0)
    dirs = [np.ascontiguousarray(vecs[:, j]) for j in range(M0.shape[0])]
    rng = np.random.default_rng(seed)
    for _ in range(extra):
        v = rng.normal(size=M0.shape[0])
        nrm = float(np.linalg.norm(v))
        while nrm < 1e-12:
            v = rng.normal(size=M0.shape[0])
            nrm = float(np.linalg.norm(v))
        dirs.append(v / nrm)
    return dirs


class _Ledger:
    """Running worst margin with witness, folding foreign tolerances.

    ``add(m, w, sub_tol=s)`` maps the sub-check's pass boundary m = -s onto
    the ledger's boundary -tol, so one (margin, tolerance) pair decides all
    folded sub-checks at once.
    """

    def __init__(self, tol: float):
        self.tol = float(tol)
        self.worst = math.inf
        self.witness: dict = {}

    def add(self, margin: float, witness: dict, sub_tol: float | None = None):
        m = float(margin)
        if sub_tol is not None and math.isfinite(m):
            m = m - self.tol + float(sub_tol)
        if m < self.worst:
            self.worst = m
            self.witness = dict(witness)

    def final(self) -> float:
        # +inf means nothing was measured (every bound vacuous); a -inf
        # stands for a bound that the path has already escaped and must
        # survive as a violation.
        return 0.0 if self.worst == math.inf else self.worst


def _spatially_resolved(series: FunctionalSeries) -> bool:
    # A broken entropy-rate identity is evidence against the flow itself
    # (continuity), not against the grid, so only the spatial form gaps
    # decide whether a checker refuses outright.
    res = series.resolution
    return bool(res.get("fisher_resolved", True)) \
        and bool(res.get("production_resolved", True))


def _hypotheses_view(series: FunctionalSeries) -> dict:
    view = dict(series.stamps)
    view["resolution_certified"] = _spatially_resolved(series)
    view["entropy_rate_certified"] = bool(
        series.resolution.get("entropy_rate_resolved", True))
    return view


def _refusal(name: str, tol: float, view: dict, missing: list,
             extra_notes: tuple = ()) -> CheckReport:
    notes = ["refused: unsatisfied hypotheses: " + ", ".join(missing)]
    notes.extend(extra_notes)
    return CheckReport.evaluate(name, math.nan, tol, hypotheses_ok=False,
                                hypotheses=view, notes=notes)


def _gate(name: str, series: FunctionalSeries, required: list,
          tol: float) -> CheckReport | None:
    view = _hypotheses_view(series)
    missing = [k for k in required if not view.get(k, False)]
    if not _spatially_resolved(series):
        missing.append("resolution_certified")
    if missing:
        return _refusal(name, tol, view, missing)
    return None


def _matrix_consequences(ledger: _Ledger, label: str, times: np.ndarray,
                         values: np.ndarray, forcing: np.ndarray | None,
                         dirs: list, ode_tol: float,
                         log_bound_rhs: float) -> None:
    """Differential inequality plus its Riccati-comparison consequences.

    Checks, for the sampled path M(t) with PSD forcing P(t):
      - dM/dt - M^2 - P >= 0 at interior samples,
      - <w,M(t)w> >= q0/(1 - t q0) in every direction (skipping nothing:
        a bound at +inf is a violation),
      - tr M(t) >= sum_i lam_i / (1 - t lam_i),
      - concavity of exp(-int <w,Mw>),
      - the window -1/t <= <w,M(t)w> <= 1/(tau-t) at interior samples,
      - the integrated bound  -sum_i log(1 - tau lam_i) <= ``log_bound_rhs``.
    """
    t0 = float(times[0])
    tau = float(times[-1]) - t0
    M0 = values[0]

    ode = check_matrix_ode(MatrixOdePath(times, values, forcing=forcing),
                           tol=ode_tol, name=f"{label} ode")
    ledger.add(ode.worst_margin,
               {"check": f"{label} differential inequality", **ode.witness},
               sub_tol=ode_tol)

    interior = range(1, times.size - 1)
    bare = MatrixOdePath(times, values)
    for k, w in enumerate(dirs):
        q = np.einsum("i,tij,j->t", w, values, w)
        for i in interior:
            t = float(times[i]) - t0
            bound = riccati_lower_bound(M0, w, t)
            margin = q[i] - bound if math.isfinite(bound) else -math.inf
            ledger.add(margin, {"check": f"{label} directional Riccati bound",
                                "time": float(times[i]), "direction": k})
            ledger.add(q[i] + 1.0 / t,
                       {"check": f"{label} window lower bound",
                        "time": float(times[i]), "direction": k})
            ledger.add(1.0 / (tau - t) - q[i],
                       {"check": f"{label} window upper bound",
                        "time": float(times[i]), "direction": k})
        prof = concavity_profile(bare, w, name=f"{label} concavity")
        ledger.add(prof.worst_margin,
                   {"check": f"{label} concavity profile", "direction": k,
                    **prof.witness},
                   sub_tol=prof.tolerance)

    trace = np.trace(values, axis1=1, axis2=2)
    for i in interior:
        t = float(times[i]) - t0
        bound = trace_lower_bound(M0, t)
        margin = trace[i] - bound if math.isfinite(bound) else -math.inf
        ledger.add(margin, {"check": f"{label} trace bound",
                            "time": float(times[i])})

    log_bound = log_trace_lower_bound(M0, tau)
    margin = log_bound_rhs - log_bound if math.isfinite(log_bound) else -math.inf
    ledger.add(margin, {"check": f"{label} integrated log-trace bound"})


def _tolerance_metrics(series: FunctionalSeries, tol: float) -> dict:
    return {
        "tolerance": tol,
        "fd_constant": FD_CONSTANT,
        "resolution_constant": RES_CONSTANT,
        "dt": float(np.max(np.diff(series.times))),
        "resolution_gap": max(float(series.resolution.get("fisher_gap", 0.0)),
                              float(series.resolution.get("production_gap", 0.0))),
    }


def check_T_inequality(series: FunctionalSeries, tol: float | None = None,
                       seed: int = 0,
                       extra_directions: int = RANDOM_DIRECTIONS) -> CheckReport:
    """Riccati domination of both signed production-shift matrices.

    Certifies d/dt T+- >= T+-^2 + R with the recorded remainder forcing R,
    then every comparison consequence (directional and trace Riccati lower
    bounds, concavity profiles, the -1/t .. 1/(tau-t) window, the integrated
    log-trace bound against int tr T+- dt).
    """
    if tol is None:
        tol = default_tolerance(series)
    refusal = _gate("t_inequality", series, ["theorem_hypotheses"], tol)
    if refusal is not None:
        return refusal

    ledger = _Ledger(tol)
    for label, values in (("t_plus", series.t_plus),
                          ("t_minus", series.t_minus)):
        dirs = direction_set(values[0], seed=seed, extra=extra_directions)
        lhs = float(np.trapezoid(np.trace(values, axis1=1, axis2=2),
                                 series.times))
        _matrix_consequences(ledger, label, series.times, values,
                             series.remainder, dirs, tol, lhs)

    metrics = _tolerance_metrics(series, tol)
    metrics["directions"] = series.dim + extra_directions
    return CheckReport.evaluate("t_inequality", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness, metrics=metrics)


def check_S_inequality(series: FunctionalSeries, tol: float | None = None,
                       seed: int = 0,
                       extra_directions: int = RANDOM_DIRECTIONS) -> CheckReport:
    """Riccati domination of the production matrix with viscous forcing.

    Certifies d/dt S >= S^2 + (sigma^2/4) I^2 + R and the same consequence
    family as :func:`check_T_inequality`; the integrated bound is checked
    against the exact entropy difference, whose agreement with tr E(tau) is
    reported as a metric.
    """
    if tol is None:
        tol = default_tolerance(series)
    refusal = _gate("s_inequality", series, ["theorem_hypotheses"], tol)
    if refusal is not None:
        return refusal

    fisher_sq = np.einsum("tij,tjk->tik", series.fisher, series.fisher)
    forcing = series.remainder + (series.sigma**2 / 4.0) * fisher_sq
    delta_entropy = float(series.entropy[-1] - series.entropy[0])

    ledger = _Ledger(tol)
    dirs = direction_set(series.production[0], seed=seed,
                         extra=extra_directions)
    _matrix_consequences(ledger, "production", series.times,
                         series.production, forcing, dirs, tol, delta_entropy)

    metrics = _tolerance_metrics(series, tol)
    metrics["directions"] = series.dim + extra_directions
    metrics["entropy_delta"] = delta_entropy
    metrics["entropy_trace_gap"] = abs(
        float(np.trace(series.matrix_entropy[-1])) - delta_entropy)
    return CheckReport.evaluate("s_inequality", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness, metrics=metrics)


def check_entropy_growth(series: FunctionalSeries,
                         tol: float = 1e-6) -> CheckReport:
    """Spectral bracket on the entropy increment over the horizon.

    Lower bound -sum log(1 - tau lam_i(S(0))) always; the matching upper
    bound sum log(1 + tau lam_i(S(tau))) only when the flow carries the
    planning-boundary stamp, otherwise that side is skipped with a note.
    """
    refusal = _gate("entropy_growth", series, ["theorem_hypotheses"], tol)
    if refusal is not None:
        return refusal

    tau = series.tau
    delta = float(series.entropy[-1] - series.entropy[0])
    lower = log_trace_lower_bound(series.production[0], tau)
    ledger = _Ledger(tol)
    margin = delta - lower if math.isfinite(lower) else -math.inf
    ledger.add(margin, {"check": "entropy growth lower bound"})

    notes = []
    upper = math.nan
    if series.stamps.get("planning_boundary", False):
        vals, _ = sym_eig(series.production[-1])
        args = 1.0 + tau * vals
        upper = -math.inf if np.any(args <= 0.0) else float(np.sum(np.log(args)))
        ledger.add(upper - delta, {"check": "entropy growth upper bound"})
    else:
        notes.append("upper bound skipped: no planning boundary stamp")

    metrics = {"entropy_delta": delta, "lower_bound": lower,
               "upper_bound": upper, "tau": tau}
    return CheckReport.evaluate("entropy_growth", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness, notes=notes,
                                metrics=metrics)


def check_turnpike(series: FunctionalSeries, tol: float = 1e-6) -> CheckReport:
    """Interior Fisher-information ceiling (1/sigma)(1/t + 1/(tau-t)).

    Needs positive viscosity on top of the usual hypotheses; the largest
    Fisher eigenvalue is compared with the ceiling at every interior sample.
    """
    refusal = _gate("turnpike", series, ["theorem_hypotheses"], tol)
    if refusal is not None:
        return refusal
    if series.sigma <= 0.0:
        return _refusal("turnpike", tol, _hypotheses_view(series),
                        ["positive_viscosity"])

    t0 = float(series.times[0])
    tau = series.tau
    ledger = _Ledger(tol)
    for i in range(1, series.samples - 1):
        t = float(series.times[i]) - t0
        ceiling = (1.0 / t + 1.0 / (tau - t)) / series.sigma
        top = float(sym_eig(series.fisher[i])[0][0])
        ledger.add(ceiling - top, {"check": "fisher ceiling",
                                   "time": float(series.times[i]),
                                   "largest_eigenvalue": top})
    return CheckReport.evaluate("turnpike", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness,
                                metrics={"sigma": series.sigma, "tau": tau})


def check_energy(series: FunctionalSeries, tol: float = 1e-5) -> CheckReport:
    """Conservation of the scalar energy along a viscous flow.

    Margin is -max |E(t) - E(0)| / (1 + |E(0)|); needs a static potential
    without interaction and positive viscosity (the stamped hypothesis).
    """
    refusal = _gate("energy", series, ["static_potential"], tol)
    if refusal is not None:
        return refusal

    drift = np.abs(series.energy - series.energy[0])
    worst = int(np.argmax(drift))
    scale = 1.0 + abs(float(series.energy[0]))
    margin = -float(drift[worst]) / scale
    return CheckReport.evaluate(
        "energy", margin, tol, hypotheses=_hypotheses_view(series),
        witness={"check": "energy conservation",
                 "time": float(series.times[worst])},
        metrics={"initial": float(series.energy[0]),
                 "max_drift": float(drift[worst]), "scale": scale})


def check_matrix_energy(series: FunctionalSeries,
                        tol: float = 1e-5) -> CheckReport:
    """Entrywise constancy of the matrix energy (1/2)V - (sigma^2/8)I.

    Holds for entropic interpolations (free coefficients, positive
    viscosity); margin is minus the largest entrywise drift.
    """
    refusal = _gate("matrix_energy", series, ["entropic_interpolation"], tol)
    if refusal is not None:
        return refusal

    path = series.matrix_energy_path()
    drift = np.abs(path - path[0]).reshape(series.samples, -1).max(axis=1)
    worst = int(np.argmax(drift))
    return CheckReport.evaluate(
        "matrix_energy", -float(drift[worst]), tol,
        hypotheses=_hypotheses_view(series),
        witness={"check": "matrix energy constancy",
                 "time": float(series.times[worst])},
        metrics={"max_drift": float(drift[worst])})


def _cost_pieces(series: FunctionalSeries) -> dict:
    C_mat, C = cost_accumulate(series)
    fu = float(np.trapezoid(series.congestion_integral
                            - series.potential_integral, series.times))
    return {
        "C_mat": C_mat,
        "C": C,
        "fu_integral": fu,
        "delta_entropy": float(series.entropy[-1] - series.entropy[0]),
        "initial_energy": float(series.energy[0]),
        "trace_t_plus": float(np.trapezoid(
            np.trace(series.t_plus, axis1=1, axis2=2), series.times)),
        "trace_t_minus": float(np.trapezoid(
            np.trace(series.t_minus, axis1=1, axis2=2), series.times)),
        "trace_fisher": float(np.trapezoid(
            np.trace(series.fisher, axis1=1, axis2=2), series.times)),
    }


def check_cost_identity(series: FunctionalSeries,
                        tol: float = 1e-4) -> CheckReport:
    """Exchange identities between accumulated cost and production shifts.

    (sigma/2) int tr T+- dt = (sigma/2) dE +- [C - tau E(0)] -+ 2 int (F - U),
    together with C - tau E(0) = (sigma^2/4) int tr I dt + 2 int (F - U).
    Margins are minus the absolute identity gaps (quadrature limited).
    """
    refusal = _gate("cost_identity", series, ["static_potential"], tol)
    if refusal is not None:
        return refusal

    p = _cost_pieces(series)
    sigma, tau = series.sigma, series.tau
    excess = p["C"] - tau * p["initial_energy"]

    ledger = _Ledger(tol)
    for sign, lhs_key in ((1.0, "trace_t_plus"), (-1.0, "trace_t_minus")):
        lhs = (sigma / 2.0) * p[lhs_key]
        rhs = (sigma / 2.0) * p["delta_entropy"] + sign * excess \
            - sign * 2.0 * p["fu_integral"]
        ledger.add(-abs(lhs - rhs),
                   {"check": "cost exchange identity",
                    "branch": "plus" if sign > 0 else "minus"})
    fisher_side = (sigma**2 / 4.0) * p["trace_fisher"] \
        + 2.0 * p["fu_integral"]
    ledger.add(-abs(excess - fisher_side),
               {"check": "cost excess identity"})

    metrics = {k: v for k, v in p.items() if k != "C_mat"}
    metrics["cost_excess"] = excess
    return CheckReport.evaluate("cost_identity", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness, metrics=metrics)


def check_cost_inequality(series: FunctionalSeries,
                          tol: float | None = None) -> CheckReport:
    """Spectral bracket on the exchanged cost expression.

    Lower bound (sigma/2) of -sum log(1 - tau lam_i(T+-(0))); upper bound
    (sigma/2) of sum log(1 + tau lam_i(T+-(tau))) under the planning stamp.
    """
    if tol is None:
        tol = default_tolerance(series)
    refusal = _gate("cost_inequality", series,
                    ["static_potential", "theorem_hypotheses"], tol)
    if refusal is not None:
        return refusal

    p = _cost_pieces(series)
    sigma, tau = series.sigma, series.tau
    excess = p["C"] - tau * p["initial_energy"]
    planning = series.stamps.get("planning_boundary", False)

    ledger = _Ledger(tol)
    notes = []
    for sign, key, values in ((1.0, "plus", series.t_plus),
                              (-1.0, "minus", series.t_minus)):
        mid = (sigma / 2.0) * p["delta_entropy"] + sign * excess \
            - sign * 2.0 * p["fu_integral"]
        lower = log_trace_lower_bound(values[0], tau)
        margin = mid - (sigma / 2.0) * lower if math.isfinite(lower) else -math.inf
        ledger.add(margin, {"check": "cost lower bound", "branch": key})
        if planning:
            vals, _ = sym_eig(values[-1])
            args = 1.0 + tau * vals
            if np.any(args <= 0.0):
                ledger.add(-math.inf,
                           {"check": "cost upper bound", "branch": key})
            else:
                upper = (sigma / 2.0) * float(np.sum(np.log(args)))
                ledger.add(upper - mid,
                           {"check": "cost upper bound", "branch": key})
    if not planning:
        notes.append("upper bounds skipped: no planning boundary stamp")

    metrics = _tolerance_metrics(series, tol)
    metrics["cost_excess"] = excess
    return CheckReport.evaluate("cost_inequality", ledger.final(), tol,
                                hypotheses=_hypotheses_view(series),
                                witness=ledger.witness, notes=notes,
                                metrics=metrics)


def check_longtime(scenario, tau_list=(1.0, 2.0, 4.0), tol: float = 1e-6,
                   samples: int = 129, envelope_rtol: float = 0.05,
                   envelope_step: float = 0.05,
                   bridge_tol: float = 1e-11) -> CheckReport:
    """Horizon-sweep bounds for entropic interpolations of one marginal pair.

    ``scenario`` is (mu_a, mu_z, sigma).  For each tau the interpolation is
    solved from scratch, then: the constant matrix energy O_tau obeys
    -O_tau <= (sigma/2tau) Id; accumulated costs grow at most like
    (sigma/2) log tau past tau = 1; the kinetic matrix V + sigma S +
    (sigma^2/4) I decays like 1/(tau - t); and the horizon derivative of the
    cost, taken by a central difference of half-width ``envelope_step`` at
    each interior tau, matches -O_tau within ``envelope_rtol`` entrywise.
    """
    mu_a, mu_z, sigma = scenario
    taus = [float(t) for t in tau_list]
    if len(taus) < 3 or any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau_list must be ascending with at least 3 entries")
    if not any(t == 1.0 for t in taus):
        raise ValueError("tau_list must contain 1.0 to anchor the cost bound")
    if sigma <= 0.0:
        raise ValueError("long-time bounds need positive viscosity")

    runs = []
    for tau in taus:
        traj = schrodinger_bridge(mu_a, mu_z, sigma, tau, samples,
                                  tol=bridge_tol)
        series = assemble_series(traj)
        if not _spatially_resolved(series):
            return _refusal("longtime", tol, _hypotheses_view(series),
                            ["resolution_certified"],
                            (f"tau={tau:g} interpolation under-resolved",))
        C_mat, _ = cost_accumulate(series)
        energy_path = series.matrix_energy_path()
        O_avg = np.trapezoid(energy_path, series.times, axis=0) / tau
        runs.append((tau, series, C_mat, O_avg))

    dim = runs[0][1].dim
    eye = np.eye(dim)
    C1 = next(C for tau, _, C, _ in runs if tau == 1.0)

    ledger = _Ledger(tol)
    for tau, series, C_mat, O_avg in runs:
        floor = (sigma / (2.0 * tau)) * eye + O_avg
        ledger.add(float(sym_eig(floor)[0][-1]),
                   {"check": "matrix energy floor", "tau": tau})
        if tau > 1.0:
            growth = C1 + (sigma / 2.0) * math.log(tau) * eye - C_mat
            ledger.add(float(sym_eig(growth)[0][-1]),
                       {"check": "cost growth bound", "tau": tau})
        E_tau = series.matrix_entropy[-1]
        ceiling_mat = sigma * E_tau + 2.0 * C1 + sigma * math.log(tau) * eye
        for i in range(1, series.samples - 1):
            t = float(series.times[i])
            lhs = series.velocity[i] + sigma * series.production[i] \
                + (sigma**2 / 4.0) * series.fisher[i]
            gap = ceiling_mat / (tau - t) - lhs
            ledger.add(float(sym_eig(gap)[0][-1]),
                       {"check": "kinetic decay bound", "tau": tau,
                        "time": t})

    def cost_matrix_at(tau: float) -> np.ndarray:
        traj = schrodinger_bridge(mu_a, mu_z, sigma, tau, samples,
                                  tol=bridge_tol)
        return cost_accumulate(assemble_series(traj))[0]

    envelope_errors = []
    for j in range(1, len(runs) - 1):
        tau = taus[j]
        slope = (cost_matrix_at(tau + envelope_step)
                 - cost_matrix_at(tau - envelope_step)) / (2.0 * envelope_step)
        target = -runs[j][3]
        rel = float(np.max(np.abs(slope - target)
                           / (np.abs(target) + 1e-12)))
        envelope_errors.append(rel)
        ledger.add(envelope_rtol - rel,
                   {"check": "cost envelope derivative", "tau": tau,
                    "relative_error": rel},
                   sub_tol=0.0)

    metrics = {"tau_list": taus, "sigma": sigma, "samples": samples,
               "envelope_rtol": envelope_rtol,
               "envelope_step": envelope_step,
               "envelope_relative_errors": envelope_errors}
    return CheckReport.evaluate("longtime", ledger.final(), tol,
                                hypotheses=_hypotheses_view(runs[0][1]),
                                witness=ledger.witness, metrics=metrics)


def _evolve(mu, t: float):
    # Unit-diffusivity heat semigroup: variance grows exactly like t.
    if t == 0.0:
        return mu
    return heat_flow(mu, 1.0, t, 5).densities[-1]


def _unit_cost(mu_a, nu, samples: int, bridge_tol: float):
    traj = schrodinger_bridge(mu_a, nu, COST_SIGMA, 1.0, samples,
                              tol=bridge_tol)
    return assemble_series(traj)


def _orthonormal_bases(dim: int, seed: int) -> list:
    bases = [np.eye(dim)]
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    bases.append(q)
    return bases


def _basis_quadratics(E1: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("ik,ij,jk->k", basis, E1, basis)


def check_evi(mu_a, mu_z, t_grid=(0.0, 0.2), fd_step: float = 1e-3,
              tol: float = 1e-3, seed: int = 0, samples: int = 385,
              fd_samples: int = 129, bridge_tol: float = 1e-12) -> CheckReport:
    """Evolution variational bound for the unit entropic cost along heat flow.

    At each t the second marginal is evolved by the unit-diffusivity
    semigroup, the interpolation is re-solved, and the finite-difference
    derivative of the cost (Richardson-checked at twice the step) is compared
    with (1/2) sum_i [1 - exp <w_i, E_1 w_i>] over two orthonormal bases.
    Refuses if any auxiliary interpolation breaks the trace identity.
    """
    ts = [float(t) for t in t_grid]
    if not ts or any(t < 0.0 for t in ts):
        raise ValueError("t_grid must be nonnegative")
    if fd_step <= 0.0:
        raise ValueError("fd_step must be positive")

    cache: dict = {}

    def cost_at(t: float) -> float:
        if t not in cache:
            series = _unit_cost(mu_a, _evolve(mu_z, t), fd_samples, bridge_tol)
            cache[t] = cost_accumulate(series)[1]
        return cache[t]

    def derivative(t: float, h: float) -> float:
        if t - 2.0 * h < 0.0:
            return (-3.0 * cost_at(t) + 4.0 * cost_at(t + h)
                    - cost_at(t + 2.0 * h)) / (2.0 * h)
        return (cost_at(t + h) - cost_at(t - h)) / (2.0 * h)

    ledger = _Ledger(tol)
    trace_gaps = []
    richardson_gaps = []
    lhs_values = []
    rhs_values = []
    hypotheses = {}
    for t in ts:
        center = _unit_cost(mu_a, _evolve(mu_z, t), samples, bridge_tol)
        hypotheses = _hypotheses_view(center)
        E1 = center.matrix_entropy[-1]
        delta = float(center.entropy[-1] - center.entropy[0])
        gap = abs(float(np.trace(E1)) - delta)
        trace_gaps.append(gap)
        if gap > TRACE_IDENTITY_TOL:
            break

        lhs = derivative(t, fd_step)
        richardson_gaps.append(abs(lhs - derivative(t, 2.0 * fd_step)) / 3.0)
        lhs_values.append(lhs)

        per_t = []
        for b_idx, basis in enumerate(_orthonormal_bases(center.dim, seed)):
            q = _basis_quadratics(E1, basis)
            rhs = 0.5 * float(np.sum(1.0 - np.exp(q)))
            per_t.append(rhs)
            ledger.add(rhs - lhs, {"check": "evi bound", "time": t,
                                   "basis": b_idx})
        rhs_values.append(per_t)

    metrics = {"fd_step": fd_step, "samples": samples,
               "fd_samples": fd_samples, "sigma": COST_SIGMA,
               "trace_identity_gaps": trace_gaps,
               "richardson_gaps": richardson_gaps,
               "lhs": lhs_values, "rhs": rhs_values}
    if max(trace_gaps) > TRACE_IDENTITY_TOL:
        return CheckReport.evaluate(
            "evi", math.nan, tol, hypotheses_ok=False, hypotheses=hypotheses,
            notes=[f"refused: trace identity gap {max(trace_gaps):.3e} "
                   f"exceeds {TRACE_IDENTITY_TOL:g}"],
            metrics=metrics)
    return CheckReport.evaluate("evi", ledger.final(), tol,
                                hypotheses=hypotheses,
                                witness=ledger.witness, metrics=metrics)


def check_contraction(mu_a, mu_z, tau_heat: float = 0.5, n_steps: int = 6,
                      tol: float = 1e-3, samples: int = 385,
                      bridge_tol: float = 1e-12) -> CheckReport:
    """Cost contraction under simultaneous heat evolution of both marginals.

    The unit entropic cost after evolving both marginals for ``tau_heat``
    must undershoot the initial cost by at least the time integral of
    sum_i sinh^2(<e_i, E_1 e_i> / 2) in the axis basis.  The antisymmetry of
    E_1 under marginal exchange is measured at the first node and reported.
    """
    if tau_heat < 0.0:
        raise ValueError("tau_heat must be nonnegative")
    if n_steps < 2 and tau_heat > 0.0:
        raise ValueError("need at least two evolution nodes")

    nodes = np.array([0.0]) if tau_heat == 0.0 \
        else np.linspace(0.0, tau_heat, n_steps)
    costs = []
    integrand = []
    trace_gaps = []
    hypotheses = {}
    first_E1 = None
    for t in nodes:
        series = _unit_cost(_evolve(mu_a, float(t)), _evolve(mu_z, float(t)),
                            samples, bridge_tol)
        hypotheses = _hypotheses_view(series)
        E1 = series.matrix_entropy[-1]
        if first_E1 is None:
            first_E1 = E1
        delta = float(series.entropy[-1] - series.entropy[0])
        trace_gaps.append(abs(float(np.trace(E1)) - delta))
        if trace_gaps[-1] > TRACE_IDENTITY_TOL:
            break
        costs.append(cost_accumulate(series)[1])
        integrand.append(float(np.sum(np.sinh(np.diag(E1) / 2.0) ** 2)))

    metrics = {"tau_heat": tau_heat, "n_steps": int(nodes.size),
               "samples": samples, "sigma": COST_SIGMA,
               "trace_identity_gaps": trace_gaps}
    if max(trace_gaps) > TRACE_IDENTITY_TOL:
        return CheckReport.evaluate(
            "contraction", math.nan, tol, hypotheses_ok=False,
            hypotheses=hypotheses,
            notes=[f"refused: trace identity gap {max(trace_gaps):.3e} "
                   f"exceeds {TRACE_IDENTITY_TOL:g}"],
            metrics=metrics)

    swapped = _unit_cost(mu_z, mu_a, samples, bridge_tol)
    antisym_gap = float(np.abs(swapped.matrix_entropy[-1] + first_E1).max())

    dissipated = float(np.trapezoid(integrand, nodes)) if nodes.size > 1 else 0.0
    margin = costs[0] - dissipated - costs[-1]

    metrics.update({"initial_cost": costs[0], "final_cost": costs[-1],
                    "dissipation_integral": dissipated,
                    "antisymmetry_gap": antisym_gap})
    return CheckReport.evaluate("contraction", margin, tol,
                                hypotheses=hypotheses,
                                witness={"check": "cost contraction",
                                         "tau_heat": tau_heat},
                                metrics=metrics)


def check_time_symmetry(traj: FlowTrajectory, tol: float = 1e-8,
                        ode_tol: float | None = None) -> CheckReport:
    """Functional relabeling under time reversal, then reversed-path checks.

    The reversed trajectory must satisfy S~(t) = -S(tau - t), I~(t) =
    I(tau - t), T~+- (t) = -T-+ (tau - t) exactly (margin is minus the
    largest deviation); when the hypotheses are stamped, the reversed
    production shifts are then pushed through the differential inequality at
    their own tolerance.
    """
    if traj.truncated:
        return CheckReport.evaluate(
            "time_symmetry", math.nan, tol, hypotheses_ok=False,
            hypotheses={"truncated": True},
            notes=["refused: truncated trajectory cannot be reversed"])

    forward = assemble_series(traj)
    reversed_series = assemble_series(reverse_trajectory(traj))

    ledger = _Ledger(tol)
    identities = (
        ("production reversal", reversed_series.production
         + forward.production[::-1]),
        ("fisher reversal", reversed_series.fisher - forward.fisher[::-1]),
        ("t_plus reversal", reversed_series.t_plus
         + forward.t_minus[::-1]),
        ("t_minus reversal", reversed_series.t_minus
         + forward.t_plus[::-1]),
    )
    deviations = {}
    for label, gap in identities:
        dev = float(np.abs(gap).max())
        deviations[label] = dev
        ledger.add(-dev, {"check": label})

    notes = []
    if reversed_series.stamps.get("theorem_hypotheses", False) \
            and _spatially_resolved(reversed_series):
        if ode_tol is None:
            ode_tol = default_tolerance(reversed_series)
        for label, values in (("reversed t_plus", reversed_series.t_plus),
                              ("reversed t_minus", reversed_series.t_minus)):
            rep = check_matrix_ode(
                MatrixOdePath(reversed_series.times, values,
                              forcing=reversed_series.remainder),
                tol=ode_tol, name=f"{label} ode")
            ledger.add(rep.worst_margin,
                       {"check": f"{label} differential inequality",
                        **rep.witness},
                       sub_tol=ode_tol)
    else:
        notes.append("reversed differential inequality skipped: "
                     "hypotheses not stamped on the reversed flow")

    metrics = {"deviations": deviations, "ode_tolerance": ode_tol}
    return CheckReport.evaluate("time_symmetry", ledger.final(), tol,
                                hypotheses=_hypotheses_view(reversed_series),
                                witness=ledger.witness, notes=notes,
                                metrics=metrics)
