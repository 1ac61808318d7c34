"""Joint user selection, power allocation, and time-sharing optimization.

The outer problem maximizes a concave utility of deterministic-equivalent
average rates over randomized policies (a set of composite controls with
time-sharing probabilities). It alternates a simplex-constrained concave
maximization of the probabilities with a weighted-sum-rate oracle that
returns the best single control for the current utility gradient, either by
exhaustive subset enumeration or by greedy user addition. Power allocation
inside the oracle is water filling against the per-BS deterministic
transmit-power budget.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .det_equiv import GainCache, ZERO_GAIN, de_rate_power
from .errors import ConvergenceError, ParameterError, ValidationError
from .precoder import CompositeControl, outer_precoder

log = logging.getLogger(__name__)

ENUMERATION_GUARD = 20
GREEDY_IMPROVE_TOL = 1e-12
WATERFILL_TOL = 1e-10
Q_GRAD_TOL = 1e-8
Q_MAX_ITER = 10_000
PROB_SNAP = 1e-10


# ---------------------------------------------------------------------------
# utility functions
# ---------------------------------------------------------------------------

@dataclass
class UtilityFunction:
    """Separable concave utility U(r) = sum_k weights[k] * u(r_k)."""

    kind: str  # "alpha_fair", "pfs", or "sum_rate"
    weights: np.ndarray
    alpha: float = 1.0
    eps: float = 1e-4
    lipschitz_hint: float = 1.0

    def value_and_grad(self, rbar):
        rbar = np.asarray(rbar, dtype=float)
        if np.any(rbar < 0):
            raise ParameterError("average rates must be non-negative")
        if self.kind == "sum_rate":
            return float(np.dot(self.weights, rbar)), self.weights.copy()
        if self.kind == "pfs" or (self.kind == "alpha_fair" and self.alpha == 1.0):
            shifted = rbar + self.eps
            value = float(np.dot(self.weights, np.log(shifted)))
            return value, self.weights / shifted
        shifted = rbar + self.eps
        value = float(np.dot(self.weights, shifted ** (1.0 - self.alpha) / (1.0 - self.alpha)))
        return value, self.weights * shifted ** (-self.alpha)

    def curvature(self, rbar):
        """Per-user second derivatives weights[k] * u''(rbar_k) (<= 0)."""
        rbar = np.asarray(rbar, dtype=float)
        if self.kind == "sum_rate":
            return np.zeros_like(rbar)
        shifted = rbar + self.eps
        if self.kind == "pfs" or (self.kind == "alpha_fair" and self.alpha == 1.0):
            return -self.weights / shifted**2
        return -self.alpha * self.weights * shifted ** (-self.alpha - 1.0)

    def value(self, rbar):
        return self.value_and_grad(rbar)[0]


def utility_value_grad(util, rbar):
    """Utility value and its gradient (the per-user rate weights)."""
    return util.value_and_grad(rbar)


def _default_weights(num_users, weights):
    if weights is None:
        return np.full(num_users, 1.0 / num_users)
    w = np.asarray(weights, dtype=float)
    if w.shape != (num_users,) or np.any(w < 0):
        raise ParameterError("weights must be a non-negative vector, one per user")
    return w


def pfs_utility(num_users, eps=1e-4, weights=None):
    if eps <= 0:
        raise ParameterError("pfs requires eps > 0")
    w = _default_weights(num_users, weights)
    return UtilityFunction("pfs", w, alpha=1.0, eps=eps, lipschitz_hint=1.0 / eps**2)


def alpha_fair_utility(alpha, num_users, eps=1e-4, weights=None):
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    w = _default_weights(num_users, weights)
    hint = 1.0 / eps**2 if eps > 0 else 1.0
    return UtilityFunction("alpha_fair", w, alpha=float(alpha), eps=eps, lipschitz_hint=hint)


def sum_rate_utility(num_users, weights=None):
    w = _default_weights(num_users, weights)
    return UtilityFunction("sum_rate", w, lipschitz_hint=1.0)


# ---------------------------------------------------------------------------
# water filling
# ---------------------------------------------------------------------------

@dataclass
class WaterfillResult:
    powers: dict  # user -> p
    levels: dict  # bs -> water level, None when no user is active there


def waterfill(rate_weights, gains, serving, m, p_c, tol=WATERFILL_TOL, max_iter=200):
    """Per-BS water filling p_k = (w_k M xi_k / level - 1)^+ with the level
    tuned by bisection until (1/M) sum p_i / xi_i meets p_c.

    Users with zero weight or zero gain get zero power and leave the budget
    to the rest; a BS with no active user keeps level None.
    """
    if p_c <= 0:
        raise ParameterError("p_c must be positive")
    powers = {k: 0.0 for k in rate_weights}
    levels = {}
    by_bs = {}
    for k in rate_weights:
        by_bs.setdefault(serving[k], []).append(k)
    for n, users in sorted(by_bs.items()):
        active = [
            k for k in users if rate_weights[k] > 0.0 and gains[k] > ZERO_GAIN
        ]
        if not active:
            levels[n] = None
            continue
        top = np.array([rate_weights[k] * m * gains[k] for k in active])
        inv_gain = np.array([1.0 / gains[k] for k in active])

        def spent(level):
            return float(np.sum(np.maximum(top / level - 1.0, 0.0) * inv_gain)) / m

        hi = float(np.max(top))
        lo = hi
        while spent(lo) < p_c:
            lo *= 0.5
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:
                break
            used = spent(mid)
            if abs(used - p_c) <= tol * p_c:
                lo = hi = mid
                break
            if used > p_c:
                lo = mid
            else:
                hi = mid
        level = 0.5 * (lo + hi)
        levels[n] = level
        for k, t in zip(active, top):
            powers[k] = float(max(t / level - 1.0, 0.0))
    return WaterfillResult(powers, levels)


# ---------------------------------------------------------------------------
# weighted sum rate and the selection oracles
# ---------------------------------------------------------------------------

@dataclass
class SelectionValue:
    value: float
    gains: dict  # user -> xi
    powers: dict  # user -> p
    levels: dict  # bs -> water level


def weighted_sum_rate(selected, rate_weights, corr_set, graph, nu, p_c, gain_cache=None):
    """Best weighted sum of DE rates achievable with user set ``selected``:
    water-filled powers against the per-BS DE power budget."""
    selected = tuple(sorted(set(selected)))
    if not selected:
        return SelectionValue(0.0, {}, {}, {})
    cache = gain_cache or GainCache(corr_set, graph, nu)
    sel = set(selected)
    gains = {}
    serving = {}
    for n in range(graph.num_bs):
        users = tuple(k for k in graph.assoc_users[n] if k in sel)
        if not users:
            continue
        blocked = tuple(k for k in graph.neighbor_users[n] if k in sel)
        bs_gains, _, _ = cache.gains(n, users, blocked)
        for k in users:
            gains[k] = bs_gains[k]
            serving[k] = n
    weights = {k: float(rate_weights[k]) for k in selected}
    wf = waterfill(weights, gains, serving, corr_set.dim, p_c)
    value = float(
        sum(weights[k] * np.log1p(wf.powers[k]) for k in selected)
    )
    return SelectionValue(value, gains, wf.powers, wf.levels)


def assemble_control(selected, corr_set, graph, powers):
    """Composite control for a user set: blocked-complement outer precoders
    per BS plus the given powers."""
    sel = set(selected)
    outer = {}
    per_bs = {}
    for n in range(graph.num_bs):
        users = tuple(k for k in graph.assoc_users[n] if k in sel)
        blocked = tuple(k for k in graph.neighbor_users[n] if k in sel)
        per_bs[n] = users
        outer[n] = outer_precoder(corr_set, users, blocked, n)
    power = {k: float(powers[k]) for k in sel}
    return CompositeControl(outer=outer, selected=per_bs, power=power)


@dataclass
class OracleResult:
    control: CompositeControl
    value: float
    selected: tuple
    rates: np.ndarray  # DE rate vector over all users


def de_rate_vector(control, num_users):
    rates = np.zeros(num_users)
    for users in control.selected.values():
        for k in users:
            rates[k] = np.log1p(control.power[k])
    return rates


def best_control_exhaustive(rate_weights, corr_set, graph, nu, p_c, gain_cache=None):
    """Exact weighted-sum-rate oracle: enumerate every user subset.

    Ties break toward fewer users, then lexicographically, so the empty set
    wins when no selection strictly improves on zero.
    """
    num_users = graph.num_users
    if num_users > ENUMERATION_GUARD:
        raise ParameterError(
            f"exhaustive enumeration is limited to {ENUMERATION_GUARD} users "
            f"(got {num_users}); use the greedy oracle instead"
        )
    cache = gain_cache or GainCache(corr_set, graph, nu)
    best_set = ()
    best = SelectionValue(0.0, {}, {}, {})
    for size in range(1, num_users + 1):
        for cand in itertools.combinations(range(num_users), size):
            res = weighted_sum_rate(cand, rate_weights, corr_set, graph, nu, p_c, cache)
            if res.value > best.value:
                best_set, best = cand, res
    control = assemble_control(best_set, corr_set, graph, best.powers)
    return OracleResult(control, best.value, best_set, de_rate_vector(control, num_users))


def best_control_greedy(rate_weights, corr_set, graph, nu, p_c, gain_cache=None):
    """Greedy weighted-sum-rate oracle: add the best strictly improving user
    until none remains. Candidates whose gain fixed point fails to converge
    are skipped with a warning rather than aborting the search."""
    num_users = graph.num_users
    cache = gain_cache or GainCache(corr_set, graph, nu)
    current_set = ()
    current = SelectionValue(0.0, {}, {}, {})
    while len(current_set) < num_users:
        best_cand = None
        best_res = None
        for k in range(num_users):
            if k in current_set:
                continue
            cand = tuple(sorted(current_set + (k,)))
            try:
                res = weighted_sum_rate(cand, rate_weights, corr_set, graph, nu, p_c, cache)
            except ConvergenceError as exc:
                log.warning("skipping candidate %s: %s", cand, exc)
                continue
            if best_res is None or res.value > best_res.value:
                best_cand, best_res = cand, res
        if best_res is None or best_res.value <= current.value + GREEDY_IMPROVE_TOL:
            break
        current_set, current = best_cand, best_res
    control = assemble_control(current_set, corr_set, graph, current.powers)
    return OracleResult(control, current.value, current_set, de_rate_vector(control, num_users))


# ---------------------------------------------------------------------------
# time-sharing probabilities
# ---------------------------------------------------------------------------

def project_simplex(v):
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, v.size + 1)
    cond = u + (1.0 - css) / idx > 0
    rho = int(np.max(idx[cond]))
    tau = (css[rho - 1] - 1.0) / rho
    return np.maximum(v - tau, 0.0)


def _face_newton(rates, util, q, active, max_iter=200):
    """Maximize the utility over one face of the simplex (fixed support).

    Equality-constrained Newton steps in the active coordinates with a
    feasibility-capped Armijo line search. Returns the face optimum and the
    indices that hit zero on the way.
    """
    idx = np.flatnonzero(active)
    ra = rates[idx]
    ones = np.ones(idx.size)
    for _ in range(max_iter):
        rbar = q @ rates
        val, mu = util.value_and_grad(rbar)
        grad = ra @ mu
        curv = util.curvature(rbar)
        hess = (ra * curv) @ ra.T
        # KKT system for max: [-H 1; 1^T 0] [d; lam] = [g; 0]
        shift = max(1e-12, 1e-12 * float(np.max(np.abs(hess))))
        kkt = np.zeros((idx.size + 1, idx.size + 1))
        kkt[: idx.size, : idx.size] = -hess + shift * np.eye(idx.size)
        kkt[: idx.size, idx.size] = ones
        kkt[idx.size, : idx.size] = ones
        rhs = np.concatenate([grad, [0.0]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            break
        direction = sol[: idx.size]
        slope = float(grad @ direction)
        if slope <= 0 or float(np.max(np.abs(direction))) <= 1e-16:
            break
        # cap the step so q stays non-negative
        shrink = direction < 0
        cap = 1.0
        if np.any(shrink):
            cap = min(1.0, float(np.min(q[idx][shrink] / -direction[shrink])))
        step = cap
        accepted = False
        for _ in range(60):
            cand = q.copy()
            cand[idx] = np.maximum(q[idx] + step * direction, 0.0)
            cand /= cand.sum()
            cand_val = util.value(cand @ rates)
            if cand_val >= val + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        q = cand
        if slope * step <= 1e-15 * max(1.0, abs(val)):
            break
    dropped = idx[q[idx] <= PROB_SNAP]
    return q, dropped


def optimize_time_sharing(rates_matrix, util, tol=Q_GRAD_TOL, max_iter=Q_MAX_ITER, init=None):
    """Maximize util over time-sharing probabilities for fixed controls.

    rates_matrix has one row of per-user DE rates per control. Active-set
    Newton on the simplex: optimize over the current support, drop
    coordinates that reach zero, re-admit any coordinate whose gradient
    beats the support's common multiplier, until the simplex-projected
    gradient norm falls below tol. Probabilities below 1e-10 are snapped to
    zero and the rest renormalized.
    """
    rates = np.atleast_2d(np.asarray(rates_matrix, dtype=float))
    count = rates.shape[0]
    if count < 1:
        raise ParameterError("need at least one control")
    if count == 1:
        return np.array([1.0])
    if init is None:
        q = np.full(count, 1.0 / count)
    else:
        q = project_simplex(np.asarray(init, dtype=float))
        q[q < PROB_SNAP] = 0.0
        if q.sum() <= 0:
            q = np.full(count, 1.0 / count)
        else:
            q /= q.sum()
    active = q > 0
    converged = False
    for _ in range(4 * count + 16):
        q, dropped = _face_newton(rates, util, q, active)
        if dropped.size:
            active[dropped] = False
            q[dropped] = 0.0
            if not np.any(active):
                active[int(np.argmax(rates @ util.value_and_grad(q @ rates)[1]))] = True
                q[active] = 1.0
            q /= q.sum()
        _, mu = util.value_and_grad(q @ rates)
        grad = rates @ mu
        pg = float(np.linalg.norm(project_simplex(q + grad) - q))
        if pg <= tol:
            converged = True
            break
        # re-admit the most promising zero coordinate, if any beats the face
        level = float(np.max(grad[active]))
        outside = np.flatnonzero(~active)
        if outside.size == 0:
            break
        best = outside[int(np.argmax(grad[outside]))]
        if grad[best] <= level + 1e-14 * max(1.0, abs(level)):
            break
        active[best] = True
    if not converged:
        _, mu = util.value_and_grad(q @ rates)
        pg = float(np.linalg.norm(project_simplex(q + rates @ mu) - q))
        if pg > tol:
            log.warning("time-sharing solver stopped at projected gradient %.3e > %.1e", pg, tol)
    q = np.where(q < PROB_SNAP, 0.0, q)
    total = q.sum()
    if total <= 0:
        raise ParameterError("all probabilities snapped to zero")
    return q / total


def _reduce_support(rates, q, max_support):
    """Shrink the support of q without moving the mixed rate vector, walking
    along null directions of the (rates, sum-to-one) constraints."""
    q = q.copy()
    while int(np.count_nonzero(q)) > max_support:
        idx = np.flatnonzero(q)
        a = np.vstack([rates[idx].T, np.ones(idx.size)])
        _, s, vt = np.linalg.svd(a)
        null = vt[-1]
        if float(np.linalg.norm(a @ null)) > 1e-9 * max(float(s[0]), 1.0):
            # constraints are numerically full rank: exact reduction is not
            # possible, drop the weakest member instead
            drop = idx[int(np.argmin(q[idx]))]
            log.warning("support reduction drops control %d with q=%.3e", drop, q[drop])
            q[drop] = 0.0
            q /= q.sum()
            continue
        if not np.any(null > 1e-15):
            null = -null
        steps = q[idx][null > 1e-15] / null[null > 1e-15]
        alpha = float(np.min(steps))
        moved = np.maximum(q[idx] - alpha * null, 0.0)
        moved[moved < PROB_SNAP] = 0.0
        q[idx] = moved
        q /= q.sum()
    return q


# ---------------------------------------------------------------------------
# the policy optimizer
# ---------------------------------------------------------------------------

@dataclass
class ControlPolicy:
    """Time-sharing policy: composite controls used with probabilities q."""

    controls: list
    probs: np.ndarray

    def average_rates(self, num_users):
        out = np.zeros(num_users)
        for q, control in zip(self.probs, self.controls):
            out += q * de_rate_vector(control, num_users)
        return out

    def validate(self, corr_set, graph, nu, p_c, gain_cache=None):
        q = np.asarray(self.probs, dtype=float)
        if len(self.controls) != q.size or q.size == 0:
            raise ValidationError("probability vector length must match controls")
        if np.any(q < 0) or np.any(q > 1) or abs(float(q.sum()) - 1.0) > 1e-10:
            raise ValidationError("probabilities must lie in [0,1] and sum to one")
        if len(self.controls) > graph.num_users:
            raise ValidationError(
                f"policy holds {len(self.controls)} controls, more than K={graph.num_users}"
            )
        cache = gain_cache or GainCache(corr_set, graph, nu)
        for control in self.controls:
            control.validate(corr_set, graph)
            de = de_rate_power(control, corr_set, graph, nu, cache)
            if np.any(de.powers > p_c + 1e-6):
                raise ValidationError(
                    f"a control exceeds the DE power budget: {de.powers.max()!r} > {p_c}"
                )
        return self


@dataclass
class TraceRecord:
    iteration: int
    utility: float
    support: int
    slack: float  # oracle slack at this iteration's gradient
    mixed_rates: np.ndarray = None  # q-mixed DE rates at this iteration
    oracle_rates: np.ndarray = None  # DE rates of the oracle's new control


@dataclass
class PolicyResult:
    policy: ControlPolicy
    trace: list
    certificate: float | None
    certificate_kind: str
    converged: bool
    utility: float
    rate_weights: np.ndarray = field(default=None)


def _duplicate(control, others):
    for other in others:
        if control.selected != other.selected:
            continue
        if control.power.keys() == other.power.keys() and all(
            control.power[k] == other.power[k] for k in control.power
        ):
            return True
    return False


def optimize_policy(
    corr_set,
    graph,
    util,
    nu,
    p_c,
    mode="greedy",
    eps_stop=1e-6,
    max_outer=100,
    gain_cache=None,
    q_tol=Q_GRAD_TOL,
):
    """Alternating optimization of the time-sharing policy.

    Starts from the oracle's control at the raw utility weights, then
    repeats: (1) re-optimize probabilities over the collected controls and
    prune zero-probability ones; (2) take the utility gradient at the mixed
    rates and ask the oracle (exhaustive or greedy per ``mode``) for a new
    control. Stops when the utility changes by at most eps_stop between
    iterations. The per-iteration slack gradient @ (oracle rates - mixed
    rates) is recorded; in exhaustive mode its final value certifies global
    optimality, in greedy mode the certificate is the exhaustive-vs-greedy
    oracle gap at the final gradient (when enumeration is feasible).
    """
    if mode not in ("exhaustive", "greedy"):
        raise ParameterError(f"mode must be 'exhaustive' or 'greedy', got {mode!r}")
    oracle = best_control_exhaustive if mode == "exhaustive" else best_control_greedy
    cache = gain_cache or GainCache(corr_set, graph, nu)
    num_users = graph.num_users

    first = oracle(util.weights, corr_set, graph, nu, p_c, cache)
    controls = [first.control]
    rate_rows = [first.rates]

    trace = []
    prev_utility = None
    prev_q = None
    prev_controls = None
    converged = False
    last_grad = None
    last_new = None
    for iteration in range(max_outer):
        rates = np.stack(rate_rows, axis=0)
        init = None
        if prev_q is not None:
            init = np.concatenate([prev_q, np.zeros(len(controls) - prev_q.size)])
        q = optimize_time_sharing(rates, util, tol=q_tol, init=init)
        if int(np.count_nonzero(q)) > num_users:
            q = _reduce_support(rates, q, num_users)
        keep = np.flatnonzero(q)
        controls = [controls[j] for j in keep]
        rate_rows = [rate_rows[j] for j in keep]
        q = q[keep] / q[keep].sum()
        mixed = q @ np.stack(rate_rows, axis=0)
        utility_value, grad = util.value_and_grad(mixed)

        new = oracle(grad, corr_set, graph, nu, p_c, cache)
        slack = float(grad @ (new.rates - mixed))
        trace.append(
            TraceRecord(iteration, utility_value, len(controls), slack, mixed, new.rates)
        )
        last_grad, last_new = grad, new

        stop = prev_utility is not None and abs(utility_value - prev_utility) <= eps_stop
        prev_utility = utility_value
        prev_q = q
        prev_controls = list(controls)
        if stop:
            converged = True
            break
        if not _duplicate(new.control, controls):
            controls.append(new.control)
            rate_rows.append(new.rates)
    if not converged:
        log.warning("policy optimization hit the outer-iteration cap (%d)", max_outer)

    policy = ControlPolicy(controls=prev_controls, probs=prev_q)
    if mode == "exhaustive":
        certificate = trace[-1].slack
        certificate_kind = "optimality_slack"
    else:
        if num_users <= ENUMERATION_GUARD:
            star = best_control_exhaustive(last_grad, corr_set, graph, nu, p_c, cache)
            certificate = float(last_grad @ (star.rates - last_new.rates))
            certificate_kind = "greedy_gap_bound"
        else:
            certificate = None
            certificate_kind = "unavailable"
    return PolicyResult(
        policy=policy,
        trace=trace,
        certificate=certificate,
        certificate_kind=certificate_kind,
        converged=converged,
        utility=prev_utility,
        rate_weights=last_grad,
    )


def optimality_certificate(policy, util, corr_set, graph, nu, p_c, mode, gain_cache=None):
    """Optimality gap bound for a finished policy, always >= -1e-8.

    Exhaustive mode: gradient @ (best control rates - policy mixed rates),
    zero exactly at the optimum. Greedy mode: the exhaustive-minus-greedy
    oracle gap at the policy's gradient; requires enumeration to be feasible.
    """
    cache = gain_cache or GainCache(corr_set, graph, nu)
    mixed = policy.average_rates(graph.num_users)
    _, grad = util.value_and_grad(mixed)
    if mode == "exhaustive":
        star = best_control_exhaustive(grad, corr_set, graph, nu, p_c, cache)
        return float(grad @ (star.rates - mixed))
    if graph.num_users > ENUMERATION_GUARD:
        raise ParameterError(
            "greedy certificate needs exhaustive enumeration, "
            f"unavailable for K={graph.num_users} > {ENUMERATION_GUARD}"
        )
    star = best_control_exhaustive(grad, corr_set, graph, nu, p_c, cache)
    hat = best_control_greedy(grad, corr_set, graph, nu, p_c, cache)
    return float(grad @ (star.rates - hat.rates))
