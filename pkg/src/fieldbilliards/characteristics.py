"""Generalized (specular-cycle) characteristics.

Public trajectory API: backward arc integration with boundary-event
location, backward exit times, specular reflection, and full cycle
construction with typed bounce records, bounce groups, and dense output.

Times decrease along a backward trajectory: a cycle launched at time t has
bounce times t > t^1 > t^2 > ...  All positions stay in the closed domain;
bounce points satisfy |xi| <= eps_bd.
"""

from __future__ import annotations

import bisect
import dataclasses

import numpy as np

from . import _engine
from .errors import (
    DegenerateGradient,
    GrazingStall,
    NotOnBoundary,
    StepFailure,
)
from .field import Field
from .geometry import Domain

Array = np.ndarray

DELTA_TYPE = 0.05          # bounce-type speed/grazing threshold
GROUP_SCALE_FRACTION = 0.1  # L_xi = 0.1 * domain diameter


@dataclasses.dataclass(frozen=True)
class PhaseState:
    """A phase point (t, x, v)."""

    t: float
    x: Array
    v: Array

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "v", np.asarray(self.v, float))


@dataclasses.dataclass(frozen=True)
class BoundaryHit:
    """A located boundary event (pre-reflection)."""

    s: float
    x: Array
    v: Array
    n: Array
    v_perp: float


@dataclasses.dataclass(frozen=True)
class Arc:
    """Dense output of one bounce-free segment, s strictly decreasing."""

    s: Array      # (n,)
    x: Array      # (n, 3)
    v: Array      # (n, 3)


@dataclasses.dataclass
class BounceRecord:
    """One specular bounce with classification and optional sensitivities."""

    ell: int
    t_ell: float
    x_ell: Array
    v_in: Array
    v_out: Array
    v_perp: float
    r_ell: float
    bounce_type: str                 # "I" | "II" | "III"
    n: Array
    w7: Array | None = None          # d t_ell / d (t, x, v), shape (7,)
    Mseg: Array | None = None        # 6x6 fixed-time block of incoming arc
    Upre: Array | None = None
    Upost: Array | None = None


@dataclasses.dataclass
class SpecularCycle:
    """A backward specular cycle with bounce records and dense arcs."""

    origin: PhaseState
    s_end: float
    bounces: list
    arcs: list
    groups: list                     # list of lists of bounce indices (0-based)
    truncated: bool
    stalled: bool
    final_state: PhaseState
    accum: Array | None = None       # path-integral values, if requested
    U: Array | None = None           # total 6x7 sensitivity at s_end
    Mseg_final: Array | None = None  # 6x6 segment block, last bounce -> s_end

    def ell_star(self, s: float) -> int:
        """Number of bounces encountered on (s, t] going backward."""
        times = [-b.t_ell for b in self.bounces]  # ascending
        return bisect.bisect_right(times, -s)

    @property
    def bounce_times(self) -> Array:
        return np.array([b.t_ell for b in self.bounces])


# ------------------------------------------------------------------ helpers


def classify_bounce(speed: float, r: float) -> str:
    """Type I iff |v| <= delta_type; II iff faster and r <= sqrt(delta_type);
    III otherwise."""
    if speed <= DELTA_TYPE:
        return "I"
    if r <= np.sqrt(DELTA_TYPE):
        return "II"
    return "III"


def reflect(domain: Domain, x: Array, v: Array) -> Array:
    """Specular reflection R_x v = v - 2 n (n.v) at a boundary point."""
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    if abs(float(domain.xi(x))) > domain.eps_bd:
        raise NotOnBoundary(f"|xi(x)| = {abs(float(domain.xi(x))):.3e}")
    g = domain.grad_xi(x)
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        raise DegenerateGradient("grad xi vanished at reflection point")
    n = g / gn
    return v - 2.0 * np.dot(n, v) * n


def _records_from_events(events, origin_speed) -> list:
    recs = []
    for ell, ev in enumerate(events, start=1):
        speed = float(np.linalg.norm(ev.v_out))
        r = ev.v_perp / max(speed, 1e-300)
        recs.append(BounceRecord(
            ell=ell, t_ell=ev.s, x_ell=ev.x, v_in=ev.v_in, v_out=ev.v_out,
            v_perp=ev.v_perp, r_ell=r,
            bounce_type=classify_bounce(speed, r), n=ev.n,
            w7=ev.w7, Mseg=ev.Mseg, Upre=ev.Upre, Upost=ev.Upost))
    return recs


def _arcs_from_rows(rows) -> list:
    if rows is None:
        return []
    arcs = []
    cur_idx, buf = 0, []
    for (ai, s, x, v) in rows:
        if ai != cur_idx:
            if buf:
                arcs.append(buf)
            buf = []
            cur_idx = ai
        buf.append((s, x, v))
    if buf:
        arcs.append(buf)
    out = []
    for buf in arcs:
        out.append(Arc(
            s=np.array([r[0] for r in buf]),
            x=np.array([r[1] for r in buf]),
            v=np.array([r[2] for r in buf])))
    return out


def make_groups(bounce_times, speed: float, L_xi: float) -> list:
    """Greedy index grouping: a group spans backward time < L_xi/|v|."""
    groups = []
    i = 0
    n = len(bounce_times)
    while i < n:
        j = i + 1
        while j < n and speed * abs(bounce_times[i] - bounce_times[j]) < L_xi:
            j += 1
        groups.append(list(range(i, j)))
        i = j
    return groups


def _cycle_from_result(domain, res, origin, s_end) -> SpecularCycle:
    speed = float(np.linalg.norm(origin.v))
    recs = _records_from_events(res.events, speed)
    L_xi = GROUP_SCALE_FRACTION * domain.diameter
    groups = make_groups([r.t_ell for r in recs], speed, L_xi)
    return SpecularCycle(
        origin=origin, s_end=float(s_end), bounces=recs,
        arcs=_arcs_from_rows(res.rows), groups=groups,
        truncated=res.truncated, stalled=res.stalled,
        final_state=PhaseState(res.s_final, res.x_final, res.v_final),
        accum=res.accum if res.accum.size else None,
        U=res.U, Mseg_final=res.Mseg_final)


# ----------------------------------------------------------------- main ops


def integrate_arc(
    domain: Domain, field: Field, state: PhaseState, s_target: float
) -> tuple[Arc, BoundaryHit | None]:
    """Backward arc from state to s_target or the first boundary event.

    Returns the dense arc (s decreasing) and the located event, if any,
    with |xi(x*)| <= eps_bd.
    """
    if s_target > state.t:
        raise ValueError("s_target must not exceed state.t")
    res = _engine.integrate_batch(
        domain, field, [state.t], state.x[None], state.v[None],
        [s_target], mode="first_hit", store=True)[0]
    if res.stalled:
        raise GrazingStall("grazing launch: |n.v| below the floor")
    arcs = _arcs_from_rows(res.rows)
    arc = arcs[0] if arcs else Arc(np.array([state.t]), state.x[None],
                                   state.v[None])
    hit = None
    if res.hit is not None:
        ev = res.hit
        hit = BoundaryHit(s=ev.s, x=ev.x, v=ev.v_in, n=ev.n,
                          v_perp=ev.v_perp)
    return arc, hit


def backward_exit_time(
    domain: Domain, field: Field, state: PhaseState, max_span: float = 1e3
) -> tuple[float, Array, Array]:
    """Backward exit time t_b and the exit phase point (x_b, v_b).

    By convention an on-boundary state moving inward (backward-outgoing)
    has t_b = 0.  Raises StepFailure if no boundary hit occurs within
    max_span time units.
    """
    arc, hit = integrate_arc(domain, field, state, state.t - max_span)
    if hit is None:
        raise StepFailure(f"no boundary hit within span {max_span}")
    return state.t - hit.s, hit.x, hit.v


def build_cycle(
    domain: Domain,
    field: Field,
    state: PhaseState,
    s_end: float,
    max_bounces: int = 1000,
    *,
    store: bool = True,
    sens: bool = False,
    integrands: tuple = (),
    raise_on_stall: bool = True,
) -> SpecularCycle:
    """Backward specular cycle from state down to s_end.

    Bounces are located, reflected, classified (types I/II/III) and
    grouped; dense arcs are stored when ``store``.  A grazing bounce below
    the floor raises GrazingStall carrying the partial cycle in its
    ``cycle`` attribute (or returns it flagged when raise_on_stall is
    false); exceeding max_bounces returns the partial cycle flagged
    ``truncated``.
    """
    if s_end >= state.t:
        raise ValueError("s_end must be strictly below state.t")
    res = _engine.integrate_batch(
        domain, field, [state.t], state.x[None], state.v[None], [s_end],
        mode="cycle", max_bounces=max_bounces, sens=sens, store=store,
        integrands=integrands)[0]
    cycle = _cycle_from_result(domain, res, state, s_end)
    if cycle.stalled and raise_on_stall:
        err = GrazingStall("cycle stalled at a grazing bounce")
        err.cycle = cycle
        raise err
    return cycle


def build_cycles(
    domain: Domain,
    field: Field,
    t0: Array,
    X0: Array,
    V0: Array,
    s_end: Array,
    max_bounces: int = 1000,
    *,
    store: bool = False,
    sens: bool = False,
    integrands: tuple = (),
) -> list[SpecularCycle]:
    """Batched build_cycle over many launches (flags instead of raises).

    Each launch's discrete trajectory is identical to what the scalar
    build_cycle would produce; stalled/truncated launches are returned
    flagged.
    """
    t0 = np.atleast_1d(np.asarray(t0, float))
    X0 = np.atleast_2d(np.asarray(X0, float))
    V0 = np.atleast_2d(np.asarray(V0, float))
    n_launch = max(t0.shape[0], X0.shape[0], V0.shape[0])
    t0 = np.broadcast_to(t0, (n_launch,))
    X0 = np.broadcast_to(X0, (n_launch, 3))
    V0 = np.broadcast_to(V0, (n_launch, 3))
    results = _engine.integrate_batch(
        domain, field, t0, X0, V0, s_end, mode="cycle",
        max_bounces=max_bounces, sens=sens, store=store,
        integrands=integrands)
    out = []
    for i, res in enumerate(results):
        origin = PhaseState(float(t0[i]), X0[i], V0[i])
        send_i = float(np.broadcast_to(np.asarray(s_end, float),
                                       t0.shape)[i])
        out.append(_cycle_from_result(domain, res, origin, send_i))
    return out
