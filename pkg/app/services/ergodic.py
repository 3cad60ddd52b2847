"""
Critical constant, correctors and the Lax-Oleinik fixed point.

The critical constant is estimated three ways: min L (closed form), V_T/T for
growing T and lam v_lam for vanishing lam. Correctors are the vanishing
discount limit of v_lam after normalizing L by the critical constant.
"""
import itertools
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.optimize import minimize

from app.exceptions import ConsistencyError, InputError
from app.services.hjb import (
    Grid,
    SolverConfig,
    ValueField,
    interpolate,
    lax_oleinik_apply,
    scheme_residual,
    solve_discounted,
    solve_finite_horizon,
)
from app.services.lagrangian import LagrangianSpec, eval_lagrangian, shifted
from app.services.srgeometry import nonholonomy_degree, sr_distance_field
from app.services.systems import ControlSystemSpec
from app.services.trajectory import rollout
from app.utils.logger import get_logger
from app.utils.metrics import track_duration

logger = get_logger(__name__)


class HorizonEntry(BaseModel):
    T: float
    values: List[float]
    sup: float
    inf: float


class DiscountedEntry(BaseModel):
    lam: float
    values: List[float]
    sup: float
    inf: float


class TauberianGap(BaseModel):
    T: float
    lam: float
    gap: float


class ErgodicEstimate(BaseModel):
    mane_horizon: List[HorizonEntry] = []
    mane_discounted: List[DiscountedEntry] = []
    mane_closed_form: Optional[float] = None
    probe_set: List[List[float]] = []
    discrepancies: List[TauberianGap] = []

    def spreads(self) -> List[float]:
        return [e.sup - e.inf for e in self.mane_horizon]


class DominationReport(BaseModel):
    worst: float
    violations: int
    n_trajectories: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


class CorrectorReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    chi: ValueField
    chi_bar: Optional[ValueField] = None
    mane_shift: float = 0.0
    lambdas: List[float] = []
    cauchy_gaps: List[float] = []
    status: str = "ok"
    residuals: Dict[str, Optional[float]] = {}
    domination_violations: Optional[int] = None
    sr_lipschitz_samples: List[Dict[str, float]] = []
    fixed_point_gap: Optional[float] = None
    semigroup_time: Optional[float] = None
    equibound: Optional[float] = None
    moduli: List[float] = []
    equicontinuity: Optional[float] = None


# ---------------------------------------------------------------------------
# Probes and the closed form
# ---------------------------------------------------------------------------

def default_probes(R: float, dimension: int) -> np.ndarray:
    """Origin plus +-R/2 and +-R along each axis."""
    probes = [np.zeros(dimension)]
    for fraction in (0.5, 1.0):
        for axis in range(dimension):
            for sign in (1.0, -1.0):
                p = np.zeros(dimension)
                p[axis] = sign * fraction * R
                probes.append(p)
    return np.array(probes)


def _check_probes(grid: Grid, probes: np.ndarray) -> np.ndarray:
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if probes.shape[-1] != grid.dimension:
        raise InputError("probes must have the grid dimension", expected=grid.dimension)
    inner_lower = np.array(grid.lower) + grid.spacing
    inner_upper = np.array(grid.upper) - grid.spacing
    if np.any(probes < inner_lower - 1e-12) or np.any(probes > inner_upper + 1e-12):
        raise InputError("probes must lie in the grid interior")
    return probes


def mane_closed_form(
    spec: LagrangianSpec,
    sample_box: Tuple[Sequence[float], Sequence[float]],
    n_samples: int = 4096,
    seed: int = 0,
    control_radius: float = 3.0,
) -> float:
    """
    The critical constant equals min L. Quadratic Lagrangians return
    L(x*, u*); otherwise the best sample is refined by bounded local descent.
    """
    if spec.kind == "quadratic_plus_potential":
        return float(eval_lagrangian(spec, spec.x_star, spec.u_star))

    lower = np.concatenate([np.asarray(sample_box[0], dtype=float), spec.u_star - control_radius])
    upper = np.concatenate([np.asarray(sample_box[1], dtype=float), spec.u_star + control_radius])
    d = spec.dimension
    rng = np.random.default_rng(seed)
    samples = rng.uniform(lower, upper, size=(n_samples, len(lower)))
    samples = np.vstack([samples, np.concatenate([spec.x_star, spec.u_star])])
    values = eval_lagrangian(spec, samples[:, :d], samples[:, d:])
    best = int(np.argmin(values))

    def objective(z: np.ndarray) -> float:
        return float(eval_lagrangian(spec, z[:d], z[d:]))

    result = minimize(objective, samples[best], method="L-BFGS-B", bounds=list(zip(lower, upper)),
                      options={"ftol": 1e-15, "gtol": 1e-12})
    return float(min(values[best], result.fun))


# ---------------------------------------------------------------------------
# Estimates
# ---------------------------------------------------------------------------

def estimate_mane_horizon(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    probes,
    T_list: Sequence[float],
    config: SolverConfig,
) -> List[HorizonEntry]:
    """V_T(probe) / T for each T, from one finite-horizon run with checkpoints."""
    probes = _check_probes(grid, probes)
    T_list = sorted(float(t) for t in T_list)
    with track_duration("ergodic", "horizon"):
        fields = solve_finite_horizon(system, spec, grid, T_list[-1], config, checkpoints=T_list)
    entries = []
    for T, field_ in zip(T_list, fields):
        values = field_(probes) / T
        entries.append(HorizonEntry(T=T, values=values.tolist(), sup=float(values.max()), inf=float(values.min())))
        logger.info("ergodic.horizon.entry", extra={"operation": "estimate_mane_horizon", "horizon": T,
                                                    "value": float(values.max())})
    return entries


def estimate_mane_discounted(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    probes,
    lambda_list: Sequence[float],
    config: SolverConfig,
) -> List[DiscountedEntry]:
    """lam v_lam(probe) per lam, each solve warm-started from the previous field."""
    probes = _check_probes(grid, probes)
    lambdas = [float(lam) for lam in lambda_list]
    if any(lam <= 0 for lam in lambdas) or any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise InputError("lambda list must be positive and decreasing", lambdas=lambdas)
    entries = []
    previous = None
    with track_duration("ergodic", "discounted"):
        for lam in lambdas:
            previous = solve_discounted(system, spec, grid, lam, config, initial=previous)
            values = lam * previous(probes)
            entries.append(DiscountedEntry(lam=lam, values=values.tolist(),
                                           sup=float(values.max()), inf=float(values.min())))
    return entries


def tauberian_check(estimate: ErgodicEstimate, rel_tol: float = 1e-9) -> float:
    """Max over probes and matched pairs lam = 1/T of |lam v_lam - V_T / T|."""
    gaps = []
    for h in estimate.mane_horizon:
        for dsc in estimate.mane_discounted:
            if abs(dsc.lam * h.T - 1.0) <= rel_tol:
                gap = float(np.max(np.abs(np.array(h.values) - np.array(dsc.values))))
                gaps.append(TauberianGap(T=h.T, lam=dsc.lam, gap=gap))
    if not gaps:
        raise InputError("no matched (T, lam = 1/T) pairs in the estimate")
    estimate.discrepancies = gaps
    return max(g.gap for g in gaps)


# ---------------------------------------------------------------------------
# Correctors
# ---------------------------------------------------------------------------

def lambda_sequence(lam0: float = 0.4, terms: int = 4) -> List[float]:
    return [lam0 * 2.0 ** (-k) for k in range(terms)]


def _grid_box(grid: Grid) -> Tuple[Sequence[float], Sequence[float]]:
    return grid.lower, grid.upper


def _lipschitz_samples(system, chi: ValueField, n_bases: int, seed: int) -> List[Dict[str, float]]:
    grid = chi.grid
    rng = np.random.default_rng(seed)
    interior = np.argwhere(grid.interior_mask())
    chosen = interior[rng.choice(len(interior), size=min(n_bases, len(interior)), replace=False)]
    points = grid.points()
    degree = nonholonomy_degree(system, float(np.max(np.abs(grid.upper))), seed=seed)
    samples = []
    for index in chosen:
        base = points[tuple(index)]
        distance = sr_distance_field(system, base, grid).values
        euclid = np.linalg.norm(points - base, axis=-1)
        diff = np.abs(chi.values - chi.values[tuple(index)])
        reach = (distance > 0) & (distance < 1e5)
        lipschitz = float(np.max(diff[reach] / distance[reach])) if np.any(reach) else 0.0
        away = euclid > 0
        holder = float(np.max(diff[away] / euclid[away] ** (1.0 / degree)))
        samples.append({"base_index": float(np.ravel_multi_index(tuple(index), grid.shape)),
                        "lipschitz": lipschitz, "holder": holder, "degree": float(degree)})
    return samples


def extract_corrector(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    grid: Grid,
    lambdas: Optional[Sequence[float]] = None,
    config: Optional[SolverConfig] = None,
    lipschitz_bases: int = 2,
    seed: int = 0,
) -> Tuple[ValueField, CorrectorReport]:
    """
    chi = v_lam for the smallest lam after shifting L by -min L. The Cauchy
    gaps sup |v_{lam_{k+1}} - v_{lam_k}| are reported; a non-decreasing trend
    sets status "warning".
    """
    config = config or SolverConfig()
    lambdas = list(lambdas or lambda_sequence())
    mane = mane_closed_form(spec, _grid_box(grid))
    normalized = shifted(spec, -mane)

    fields: List[ValueField] = []
    previous = None
    with track_duration("ergodic", "corrector"):
        for lam in lambdas:
            previous = solve_discounted(system, normalized, grid, lam, config, initial=previous)
            fields.append(previous)
    gaps = [b.sup_distance(a) for a, b in zip(fields, fields[1:])]
    status = "ok"
    if any(later > earlier for earlier, later in zip(gaps, gaps[1:])):
        status = "warning"
        logger.warning("ergodic.corrector.non_cauchy", extra={"operation": "extract_corrector", "value": gaps})

    chi = ValueField(grid, fields[-1].values, {"lam": lambdas[-1], "mane_shift": mane})
    residual, _ = scheme_residual(system, normalized, chi, config)
    samples = []
    if system.is_driftless and lipschitz_bases > 0:
        samples = _lipschitz_samples(system, chi, lipschitz_bases, seed)

    ball = grid.ball_mask(spec.K_radius)
    report = CorrectorReport(
        chi=chi,
        mane_shift=mane,
        lambdas=lambdas,
        cauchy_gaps=gaps,
        status=status,
        residuals={"scheme": residual.residual, "hamiltonian": residual.hamiltonian_residual},
        sr_lipschitz_samples=samples,
        equibound=float(max(lam * np.max(np.abs(f.values[ball])) for lam, f in zip(lambdas, fields))),
    )
    logger.info("ergodic.corrector.done",
                extra={"operation": "extract_corrector", "status": status, "residual": residual.residual})
    return chi, report


def check_domination(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    phi: ValueField,
    n_trajectories: int = 200,
    T: float = 1.0,
    N: int = 20,
    seed: int = 0,
    tolerance: float = 1e-3,
    control_scale: float = 1.0,
) -> DominationReport:
    """
    phi(gamma(b)) - phi(gamma(a)) <= int_a^b L along random integrated
    trajectories; trajectories leaving the grid are discarded.
    """
    grid = phi.grid
    rng = np.random.default_rng(seed)
    center = 0.5 * (np.array(grid.lower) + np.array(grid.upper))
    half = 0.25 * (np.array(grid.upper) - np.array(grid.lower))
    x0 = rng.uniform(center - half, center + half, size=(n_trajectories, grid.dimension))
    controls = spec.u_star + control_scale * rng.standard_normal((n_trajectories, N, spec.control_dimension))
    times = np.linspace(0.0, T, N + 1)
    states, running = rollout(system, x0, controls, times, spec)

    inside = np.all(grid.contains(states), axis=-1)
    states, running = states[inside], running[inside]
    if len(states) == 0:
        return DominationReport(worst=-np.inf, violations=0, n_trajectories=0, tolerance=tolerance)

    level = interpolate(grid, phi.values, states, boundary="clamp") - running
    # max over a < b of level[b] - level[a]
    prefix_min = np.minimum.accumulate(level, axis=-1)
    excess = level[:, 1:] - prefix_min[:, :-1]
    worst = excess.max(axis=-1)
    return DominationReport(
        worst=float(worst.max()),
        violations=int(np.sum(worst > tolerance)),
        n_trajectories=int(len(states)),
        tolerance=tolerance,
    )


def continuity_modulus(field: ValueField, radius: Optional[float] = None) -> float:
    """
    sup |phi(x) - phi(y)| over node pairs with |x - y| <= radius; the
    default radius is the coarsest grid spacing.
    """
    grid = field.grid
    h = grid.spacing
    radius = float(np.max(h)) if radius is None else float(radius)
    reach = [int(np.floor(radius / hi + 1e-9)) for hi in h]
    zero = (0,) * grid.dimension
    values = field.values
    worst = 0.0
    for offset in itertools.product(*(range(-r, r + 1) for r in reach)):
        # one of each +-offset pair
        if offset <= zero or np.linalg.norm(np.multiply(offset, h)) > radius * (1.0 + 1e-9):
            continue
        head = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(offset, grid.shape))
        tail = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(offset, grid.shape))
        diff = values[head] - values[tail]
        if diff.size:
            worst = max(worst, float(np.max(np.abs(diff))))
    return worst


def lax_oleinik_fixed_point(
    system: ControlSystemSpec,
    spec: LagrangianSpec,
    chi: ValueField,
    config: SolverConfig,
    t_step: float = 0.5,
    max_time: float = 50.0,
    report: Optional[CorrectorReport] = None,
    margin: int = 2,
    n_domination: int = 200,
    seed: int = 0,
) -> Tuple[ValueField, CorrectorReport]:
    """
    Iterate T_{t_step} from chi until the sup-change drops below tolerance.
    The iterates must be nondecreasing on nodes at least ``margin`` cells from
    the boundary; a drop beyond 2 * tolerance raises ConsistencyError.
    The continuity modulus of every iterate is recorded in ``report.moduli``.
    """
    if t_step <= 0 or max_time < t_step:
        raise InputError("need 0 < t_step <= max_time", t_step=t_step, max_time=max_time)
    grid = chi.grid
    tolerance = config.tolerance
    if np.min(chi.values) < -tolerance:
        logger.warning("ergodic.fixed_point.negative_start",
                       extra={"operation": "lax_oleinik_fixed_point", "value": float(np.min(chi.values))})
    domination = check_domination(system, spec, chi, n_trajectories=n_domination, seed=seed)

    check = np.zeros(grid.shape, dtype=bool)
    check[tuple(slice(margin, n - margin) for n in grid.shape)] = True

    current = chi
    elapsed = 0.0
    gap = np.inf
    sup_abs = float(np.max(np.abs(chi.values)))
    moduli = [continuity_modulus(chi)]
    with track_duration("ergodic", "lax_oleinik_fixed_point"):
        while elapsed < max_time - 1e-12:
            nxt = lax_oleinik_apply(system, spec, current, t_step, config)
            elapsed += t_step
            delta = nxt.values - current.values
            drop = float(-np.min(delta[check])) if np.any(check) else 0.0
            if drop > 2.0 * tolerance:
                raise ConsistencyError("Lax-Oleinik iterates decreased", value=drop, time=elapsed)
            gap = float(np.max(np.abs(delta)))
            sup_abs = max(sup_abs, float(np.max(np.abs(nxt.values))))
            moduli.append(continuity_modulus(nxt))
            current = nxt
            if gap < tolerance:
                break

    chi_bar = ValueField(grid, current.values, {"time": elapsed})
    report = report or CorrectorReport(chi=chi)
    report.chi_bar = chi_bar
    report.fixed_point_gap = gap
    report.semigroup_time = elapsed
    report.domination_violations = domination.violations
    report.equibound = max(report.equibound or 0.0, sup_abs)
    report.moduli = moduli
    report.equicontinuity = max(moduli)
    logger.info("ergodic.fixed_point.done",
                extra={"operation": "lax_oleinik_fixed_point", "residual": gap, "horizon": elapsed})
    return chi_bar, report
