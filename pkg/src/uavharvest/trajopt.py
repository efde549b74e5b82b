"""Assembly of the trajectory/blockage subproblem as a smooth concave program.

Variables per subproblem: free slot positions q[1..N-1] (q[0], q[N] are
pinned endpoints), relaxed LoS indicators c_bar (per GN/slot) and rho
(per GN/building/slot), big-M switches beta (per GN/building/slot/sample
point/face), and the epigraph variable eta for the min-rate objective.

Nonconvex pieces are replaced by surrogates that are exact at the
expansion point: squared face distances by their tangents, the sharp
indicator by a piecewise-linear surrogate tangent, the gain fraction by
its subtractive transform at fixed multipliers, and cuboid avoidance by
separating hyperplanes through the closest boundary points. Every
constraint family evaluates vectorized and carries its analytic
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .channel import CBAR_GRAD_CLAMP, ChannelParams
from .convex import SmoothProblem
from .geometry import closest_point_on_expanded, point_strictly_inside
from .scenario import Scenario

POS_SCALE = 100.0  # meters per solver position unit
HYPERPLANE_SLACK = 1e-6  # m^2; closed form of the strict avoidance inequality
LN2 = float(np.log(2.0))
_EPS_ROW = 1e-9  # strictness slack injected per constraint row at the start
_RELAX_CAP = 1e-3  # a start needing more relaxation than this is broken


class SubproblemError(Exception):
    """The subproblem could not be assembled from the previous iterate."""


# ---------------------------------------------------------------------------
# Indicator surrogate
# ---------------------------------------------------------------------------

def indicator_exact(x):
    """Sharp indicator: 1 where x >= 1, else 0 (x must be nonnegative)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("indicator argument must be nonnegative")
    out = (x >= 1.0).astype(float)
    return float(out) if out.ndim == 0 else out


def indicator_approx(x, a: float):
    """Convex surrogate max(a*x - a + 1, x/a); approaches the sharp
    indicator on [0, 1] as a grows."""
    if not a > 0:
        raise ValueError("sharpness a must be positive")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("indicator argument must be nonnegative")
    out = np.maximum(a * x - a + 1.0, x / a)
    return float(out) if out.ndim == 0 else out


def indicator_lb(x, a: float, x_r):
    """Tangent of the active surrogate branch at x_r: affine lower bound
    of indicator_approx, exact at x_r."""
    if not a > 0:
        raise ValueError("sharpness a must be positive")
    x = np.asarray(x, dtype=float)
    x_r = np.asarray(x_r, dtype=float)
    if np.any((x_r < 0) | (x_r > 1)):
        raise ValueError("expansion point must lie in [0, 1]")
    plus = x_r >= a / (a + 1.0)
    out = np.where(plus, a * x - a + 1.0, x / a)
    return float(out) if out.ndim == 0 else out


def _lb_slope_intercept(a: float, x_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    plus = x_r >= a / (a + 1.0)
    slope = np.where(plus, a, 1.0 / a)
    intercept = np.where(plus, 1.0 - a, 0.0)
    return slope, intercept


# ---------------------------------------------------------------------------
# Iterate state
# ---------------------------------------------------------------------------

@dataclass
class BlockageState:
    """Relaxed blockage variables of one iterate.

    c_bar: (K, N) channel LoS indicators in [0, 1].
    rho: (K, L, N) per-building LoS indicators.
    beta: (K, L, N, U+1, 3) big-M face switches per sample point.
    sharpness: current indicator sharpness a.
    """

    c_bar: np.ndarray
    rho: np.ndarray
    beta: np.ndarray
    sharpness: float

    def copy(self) -> "BlockageState":
        return BlockageState(
            self.c_bar.copy(), self.rho.copy(), self.beta.copy(), self.sharpness
        )


@dataclass
class QTAux:
    """Multipliers of the subtractive gain surrogate, fixed per subproblem."""

    lam: np.ndarray  # (K, N)
    kap: np.ndarray  # (K, N)


@dataclass(frozen=True)
class PlanMode:
    """Which machinery a planning scheme uses.

    blockage: optimize relaxed LoS indicators (else assume all-LoS).
    z_fixed: freeze the altitude at this value (None = free 3D).
    avoidance: "expanded" certified margins, "original" discrete-only
        raw-cuboid hyperplanes, or None for no avoidance rows.
    """

    blockage: bool = True
    z_fixed: float | None = None
    avoidance: str | None = "expanded"


def slot_distances(traj: np.ndarray, gns: np.ndarray) -> np.ndarray:
    """(K, N) distances from slot positions 1..N to each GN."""
    diff = np.asarray(traj, dtype=float)[None, 1:, :] - np.asarray(gns, dtype=float)[:, None, :]
    return np.linalg.norm(diff, axis=2)


def qt_aux_grid(traj: np.ndarray, gns: np.ndarray, c_bar: np.ndarray, cp: ChannelParams) -> QTAux:
    """Optimal surrogate multipliers for every (GN, slot) pair."""
    d = slot_distances(traj, gns)
    lam = np.sqrt(np.clip(c_bar, 0.0, 1.0)) / d**cp.alpha_los
    kap = np.sqrt(cp.mu * np.clip(1.0 - c_bar, 0.0, 1.0)) / d**cp.alpha_nlos
    return QTAux(lam=lam, kap=kap)


def sample_points(traj: np.ndarray, gns: np.ndarray, num_segments: int) -> np.ndarray:
    """(K, N, U+1, 3) sight-segment sample points from each GN to q[n]."""
    traj = np.asarray(traj, dtype=float)
    gns = np.asarray(gns, dtype=float)
    uf = np.arange(num_segments + 1, dtype=float) / num_segments
    # w + (q - w) * u/U, broadcast over (K, N, U+1, 3)
    return gns[:, None, None, :] + (
        traj[None, 1:, None, :] - gns[:, None, None, :]
    ) * uf[None, None, :, None]


def raw_face_ok(scn: Scenario, traj: np.ndarray) -> np.ndarray:
    """Boolean (K, L, N, U+1, 3): sample point clears the inflated face test.

    Face order is (x, y, z). The inflation margin is the per-pair sample
    spacing times the continuity factor, so a point clearing any face at
    every sample certifies the whole sight segment against the original
    building.
    """
    u_count = scn.solver.samples_per_segment
    pts = sample_points(traj, scn.gns, u_count)  # (K, N, U+1, 3)
    d = slot_distances(traj, scn.gns)  # (K, N)
    margin = d / (2.0 * np.sqrt(2.0) * u_count)  # (K, N)

    k, n, u1, _ = pts.shape
    n_bld = scn.num_buildings
    ok = np.zeros((k, n_bld, n, u1, 3), dtype=bool)
    for li, b in enumerate(scn.buildings):
        cx, cy, _ = b.center
        half = np.array([b.half_width, b.half_length])
        for ax, (coord, c) in enumerate(((pts[..., 0], cx), (pts[..., 1], cy))):
            ok[:, li, :, :, ax] = (coord - c) ** 2 >= (half[ax] + margin[:, :, None]) ** 2
        ok[:, li, :, :, 2] = pts[..., 2] >= b.height + margin[:, :, None]
    return ok


def seed_blockage(scn: Scenario, traj: np.ndarray, sharpness: float) -> BlockageState:
    """Exact-indicator blockage state of a trajectory.

    beta is 1 exactly where the raw inflated face test passes; rho is 1
    only when every sample point clears some face; c_bar is the
    per-channel minimum over buildings.
    """
    k, n = scn.num_gns, scn.n_slots
    u1 = scn.solver.samples_per_segment + 1
    if scn.num_buildings == 0:
        return BlockageState(
            c_bar=np.ones((k, n)),
            rho=np.ones((k, 0, n)),
            beta=np.ones((k, 0, n, u1, 3)),
            sharpness=sharpness,
        )
    ok = raw_face_ok(scn, traj)
    beta = ok.astype(float)
    rho = ok.any(axis=4).all(axis=3).astype(float)  # (K, L, N)
    c_bar = rho.min(axis=1)
    return BlockageState(c_bar=c_bar, rho=rho, beta=beta, sharpness=sharpness)


def restore_start(scn: Scenario, traj: np.ndarray, state: BlockageState) -> BlockageState:
    """Map the previous iterate into the feasible set of the new surrogate.

    Growing the indicator sharpness shrinks the feasible region, so rho
    and c_bar are pulled down until the tangent indicator rows hold again
    at the previous beta; c_bar is also clamped into the open unit
    interval so square-root gradients stay finite.
    """
    st = state.copy()
    eps = CBAR_GRAD_CLAMP
    if scn.num_buildings > 0:
        phi = indicator_approx(np.clip(st.beta, 0.0, 1.0), st.sharpness).sum(axis=4)
        phi_min = phi.min(axis=3)  # (K, L, N): binding sample point
        st.rho = np.clip(st.rho, 0.0, np.maximum(phi_min - _EPS_ROW, 0.0))
        st.rho = np.clip(st.rho, 0.0, 1.0)
        cap = st.rho.min(axis=1) if st.rho.size else np.ones_like(st.c_bar)
        st.c_bar = np.minimum(st.c_bar, cap)
    st.c_bar = np.clip(st.c_bar, eps, 1.0 - eps)
    return st


# ---------------------------------------------------------------------------
# Constraint blocks
# ---------------------------------------------------------------------------

class _Cache:
    """Shared per-point quantities, rebuilt once per solver evaluation."""

    def __init__(self, tp: "TrajectoryProblem", x: np.ndarray):
        self.x = x
        self.traj = tp.unpack_traj(x)
        diff = self.traj[None, 1:, :] - tp.scn.gns[:, None, :]
        self.d = np.linalg.norm(diff, axis=2)  # (K, N)
        self.unit = diff / self.d[:, :, None]
        if tp.layout.has_blockage:
            self.c_bar = x[tp.layout.sl_cbar].reshape(tp.kn_shape)
            if tp.scn.num_buildings:
                self.rho = x[tp.layout.sl_rho].reshape(tp.kln_shape)
                self.beta = x[tp.layout.sl_beta].reshape(tp.beta_shape)
        self.eta = x[tp.layout.idx_eta]


@dataclass
class _Layout:
    n_axes: int
    n_free: int
    sl_q: slice
    sl_cbar: slice
    sl_rho: slice
    sl_beta: slice
    idx_eta: int
    n_vars: int
    has_blockage: bool


class _Block:
    """Base: one vectorized constraint family g(x) <= 0."""

    name = "block"

    def __init__(self, tp: "TrajectoryProblem"):
        self.tp = tp
        self.relax = None  # set after assembly

    @property
    def num_rows(self) -> int:
        return self._num_rows

    def value(self, x):
        g = self.raw_value(self.tp.cache(x))
        return g - self.relax if self.relax is not None else g

    def grad_weighted(self, x, w):
        grad = np.zeros(self.tp.layout.n_vars)
        self.add_grad(self.tp.cache(x), np.asarray(w, dtype=float), grad)
        return grad


class _SpeedBlock(_Block):
    name = "slot-speed"

    def __init__(self, tp):
        super().__init__(tp)
        self._num_rows = tp.scn.n_slots

    def raw_value(self, c):
        step = np.diff(c.traj, axis=0)
        return (step**2).sum(axis=1) - self.tp.scn.step_max**2

    def add_grad(self, c, w, grad):
        step = np.diff(c.traj, axis=0)  # (N, 3)
        contrib = 2.0 * w[:, None] * step
        buf = np.zeros_like(c.traj)
        buf[1:] += contrib
        buf[:-1] -= contrib
        self.tp.scatter_q(buf, grad)


class _VSpeedBlock(_Block):
    name = "vertical-speed"

    def __init__(self, tp):
        super().__init__(tp)
        self._num_rows = tp.scn.n_slots

    def raw_value(self, c):
        dz = np.diff(c.traj[:, 2])
        return dz**2 - self.tp.scn.step_max_z**2

    def add_grad(self, c, w, grad):
        dz = np.diff(c.traj[:, 2])
        contrib = 2.0 * w * dz
        buf = np.zeros_like(c.traj)
        buf[1:, 2] += contrib
        buf[:-1, 2] -= contrib
        self.tp.scatter_q(buf, grad)


class _AltitudeBlock(_Block):
    name = "altitude-box"

    def __init__(self, tp):
        super().__init__(tp)
        self._num_rows = 2 * tp.layout.n_free

    def raw_value(self, c):
        z = c.traj[1:-1, 2]
        return np.concatenate([self.tp.scn.h_min - z, z - self.tp.scn.h_max])

    def add_grad(self, c, w, grad):
        n_free = self.tp.layout.n_free
        buf = np.zeros_like(c.traj)
        buf[1:-1, 2] = w[n_free:] - w[:n_free]
        self.tp.scatter_q(buf, grad)


class _CbarBlock(_Block):
    """Lower box on c_bar plus its coupling c_bar <= rho (or <= 1)."""

    name = "cbar-bounds"

    def __init__(self, tp):
        super().__init__(tp)
        self.kn = tp.kn_shape[0] * tp.kn_shape[1]
        self.n_upper = tp.scn.num_buildings if tp.scn.num_buildings else 1
        self._num_rows = self.kn * (1 + self.n_upper)

    def raw_value(self, c):
        lower = -c.c_bar.ravel()
        if self.tp.scn.num_buildings:
            upper = (c.c_bar[:, None, :] - c.rho).ravel()
        else:
            upper = (c.c_bar - 1.0).ravel()
        return np.concatenate([lower, upper])

    def add_grad(self, c, w, grad):
        k, n = self.tp.kn_shape
        w_lo = w[: self.kn].reshape(k, n)
        g_c = -w_lo
        if self.tp.scn.num_buildings:
            w_up = w[self.kn:].reshape(k, self.tp.scn.num_buildings, n)
            g_c = g_c + w_up.sum(axis=1)
            grad[self.tp.layout.sl_rho] += (-w_up).ravel()
        else:
            g_c = g_c + w[self.kn:].reshape(k, n)
        grad[self.tp.layout.sl_cbar] += g_c.ravel()


class _BoxBlock(_Block):
    """0 <= v <= 1 for one flat variable slice."""

    def __init__(self, tp, sl: slice, name: str):
        super().__init__(tp)
        self.sl = sl
        self.name = name
        self.size = sl.stop - sl.start
        self._num_rows = 2 * self.size

    def raw_value(self, c):
        v = c.x[self.sl]
        return np.concatenate([-v, v - 1.0])

    def add_grad(self, c, w, grad):
        grad[self.sl] += w[self.size:] - w[: self.size]


class _FaceBlock(_Block):
    """Inflated big-M face rows, x/y tangent-linearized, z kept convex.

    Row (k, l, n, u, axis):
        rhs(q) - M * (1 - beta) - lhs <= 0
    where rhs = (half + |q - w| / (2 sqrt(2) U))^2 for x/y (or
    height + |q - w| / (2 sqrt(2) U) for z) and lhs is the tangent of the
    squared offset at the expansion trajectory (z: the affine sample
    height itself).
    """

    name = "blockage-faces"

    def __init__(self, tp, traj0: np.ndarray):
        super().__init__(tp)
        scn = tp.scn
        u_count = scn.solver.samples_per_segment
        self.c2u = 2.0 * np.sqrt(2.0) * u_count
        self.uf = np.arange(u_count + 1, dtype=float) / u_count

        pts0 = sample_points(traj0, scn.gns, u_count)  # (K, N, U+1, 3)
        centers = np.array([[b.center[0], b.center[1]] for b in scn.buildings])
        self.half = np.array([[b.half_width, b.half_length] for b in scn.buildings])
        self.heights = np.array([b.height for b in scn.buildings])

        # Tangent data of the squared x/y offsets at the expansion point.
        off0 = pts0[:, None, :, :, :2] - centers[None, :, None, None, :]  # (K,L,N,U+1,2)
        self.a_lin = 2.0 * off0
        self.c_lin = off0**2
        self.q0_xy = traj0[1:, :2].copy()  # (N, 2)

        # Per-row big-M: the paper's constant acts as a multiplier on the
        # row's own scale so squared x/y rows and linear z rows stay
        # commensurate after unit normalization.
        mult = scn.solver.big_m_mult / 100.0
        span = self._arena_span(scn)
        marg_cap = span / self.c2u
        self.big_m = np.empty((scn.num_buildings, 3))
        self.big_m[:, :2] = mult * (self.half + marg_cap) ** 2
        self.big_m[:, 2] = mult * (self.heights + marg_cap)
        self._num_rows = int(np.prod(tp.beta_shape))

    @staticmethod
    def _arena_span(scn: Scenario) -> float:
        pts = [scn.gns[:, :2], scn.q_init[None, :2], scn.q_final[None, :2]]
        for b in scn.buildings:
            cx, cy, _ = b.center
            pts.append(np.array([[cx - b.half_width, cy - b.half_length],
                                 [cx + b.half_width, cy + b.half_length]]))
        all_xy = np.vstack(pts)
        span_xy = all_xy.max(axis=0) - all_xy.min(axis=0)
        return float(np.sqrt(span_xy[0] ** 2 + span_xy[1] ** 2 + scn.h_max**2))

    def raw_value(self, c):
        tp = self.tp
        margin = c.d / self.c2u  # (K, N)
        g = np.empty(tp.beta_shape)
        # x/y rows
        rhs_xy = (self.half[None, :, None, :] + margin[:, None, :, None]) ** 2  # (K,L,N,2)
        dq_xy = c.traj[1:, :2] - self.q0_xy  # (N, 2)
        lhs_xy = (
            self.a_lin * (self.uf[None, None, None, :, None] * dq_xy[None, None, :, None, :])
            + self.c_lin
        )
        g[..., :2] = rhs_xy[:, :, :, None, :] - lhs_xy
        # z rows
        z_u = tp.scn.gns[:, None, None, 2] + (
            c.traj[None, 1:, None, 2] - tp.scn.gns[:, None, None, 2]
        ) * self.uf[None, None, :]  # (K, N, U+1)
        rhs_z = self.heights[None, :, None] + margin[:, None, :]  # (K, L, N)
        g[..., 2] = rhs_z[:, :, :, None] - z_u[:, None, :, :]
        g -= self.big_m[None, :, None, None, :] * (1.0 - c.beta)
        return g.ravel()

    def add_grad(self, c, w, grad):
        tp = self.tp
        w = w.reshape(tp.beta_shape)  # (K, L, N, U+1, 3)
        # beta switches
        grad[tp.layout.sl_beta] += (w * self.big_m[None, :, None, None, :]).ravel()

        margin = c.d / self.c2u
        # distance (rhs) term: d(rhs)/dq = coef * unit
        coef = np.empty(w.shape[:3] + (3,))  # (K, L, N, 3)
        coef[..., :2] = 2.0 * (self.half[None, :, None, :] + margin[:, None, :, None]) / self.c2u
        coef[..., 2] = 1.0 / self.c2u
        w_axis = w.sum(axis=3)  # (K, L, N, 3)
        factor = (w_axis * coef).sum(axis=(1, 3))  # (K, N)
        buf = np.zeros_like(c.traj)
        buf[1:] += (factor[:, :, None] * c.unit).sum(axis=0)

        # tangent (lhs) terms: x/y slope -a_lin*uf, z slope -uf
        wa = (w[..., :2] * self.a_lin * self.uf[None, None, None, :, None]).sum(axis=(1, 3))
        buf[1:, :2] -= wa.sum(axis=0)
        wz = (w[..., 2] * self.uf[None, None, None, :]).sum(axis=(1, 3))
        buf[1:, 2] -= wz.sum(axis=0)
        tp.scatter_q(buf, grad)


class _IndicatorBlock(_Block):
    """rho <= sum of tangent indicator values over the three faces."""

    name = "indicator"

    def __init__(self, tp, beta0: np.ndarray, sharpness: float):
        super().__init__(tp)
        self.slope, self.intercept = _lb_slope_intercept(
            sharpness, np.clip(beta0, 0.0, 1.0)
        )
        self._num_rows = int(np.prod(tp.kln_shape) * tp.u1)

    def raw_value(self, c):
        phi = (self.slope * c.beta + self.intercept).sum(axis=4)  # (K, L, N, U+1)
        return (c.rho[:, :, :, None] - phi).ravel()

    def add_grad(self, c, w, grad):
        tp = self.tp
        w = w.reshape(tp.kln_shape + (tp.u1,))
        grad[tp.layout.sl_rho] += w.sum(axis=3).ravel()
        grad[tp.layout.sl_beta] += (-w[..., None] * self.slope).ravel()


class _AvoidBlock(_Block):
    """Separating-hyperplane rows keeping free slots out of the obstacles."""

    name = "avoidance"

    def __init__(self, tp, traj0: np.ndarray, boxes):
        super().__init__(tp)
        n_free = tp.layout.n_free
        self.normals = np.zeros((len(boxes), n_free, 3))
        self.offsets = np.zeros((len(boxes), n_free))
        for li, box in enumerate(boxes):
            for j in range(n_free):
                q0 = traj0[1 + j]
                chi = _closest_point_safe(box, q0)
                normal = q0 - chi
                if np.all(normal == 0.0):
                    raise SubproblemError(
                        f"iterate slot {1 + j} sits on the boundary of obstacle {li}; "
                        "separating plane is degenerate"
                    )
                self.normals[li, j] = normal
                self.offsets[li, j] = normal @ chi
        self._num_rows = len(boxes) * n_free

    def raw_value(self, c):
        q = c.traj[1:-1]  # (n_free, 3)
        margin = (self.normals * q[None, :, :]).sum(axis=2) - self.offsets
        return (HYPERPLANE_SLACK - margin).ravel()

    def add_grad(self, c, w, grad):
        w = w.reshape(self.normals.shape[:2])
        buf = np.zeros_like(c.traj)
        buf[1:-1] = -(w[:, :, None] * self.normals).sum(axis=0)
        self.tp.scatter_q(buf, grad)


class _RateBlock(_Block):
    """Epigraph rows eta <= surrogate average rate, one per GN."""

    name = "min-rate"

    def __init__(self, tp, sched: np.ndarray, qt: QTAux, c_fixed: float | None):
        super().__init__(tp)
        self.sched = np.asarray(sched, dtype=float)
        self.lam = qt.lam
        self.kap = qt.kap
        self.c_fixed = c_fixed
        self.active = self.sched > 1e-12  # rate terms with zero weight drop out
        self._num_rows = tp.scn.num_gns

    def _surrogate_gain(self, c):
        cp = self.tp.scn.channel
        if self.c_fixed is None:
            cb = c.c_bar
            if np.any(cb[self.active] < 0.0) or np.any(cb[self.active] > 1.0):
                return None, None, None
            sq_c = np.sqrt(np.clip(cb, 0.0, None))
            sq_n = np.sqrt(cp.mu * np.clip(1.0 - cb, 0.0, None))
        else:
            sq_c = np.full_like(c.d, np.sqrt(self.c_fixed))
            sq_n = np.full_like(c.d, np.sqrt(cp.mu * (1.0 - self.c_fixed)))
        d_al = c.d**cp.alpha_los
        d_an = c.d**cp.alpha_nlos
        gain = cp.beta0 * (
            2.0 * self.lam * sq_c
            - self.lam**2 * d_al
            + 2.0 * self.kap * sq_n
            - self.kap**2 * d_an
        )
        return gain, d_al, d_an

    def raw_value(self, c):
        cp = self.tp.scn.channel
        gain, _, _ = self._surrogate_gain(c)
        if gain is None:
            return np.full(self._num_rows, np.inf)
        snr = 1.0 + cp.snr_scale * gain
        if np.any(snr[self.active] <= 0.0):
            return np.full(self._num_rows, np.inf)
        log_terms = np.where(self.active, np.log2(np.where(snr > 0, snr, 1.0)), 0.0)
        rates = (self.sched * log_terms).sum(axis=1) / self.tp.scn.n_slots
        return c.eta - rates

    def add_grad(self, c, w, grad):
        tp = self.tp
        cp = tp.scn.channel
        gain, d_al, d_an = self._surrogate_gain(c)
        snr = 1.0 + cp.snr_scale * gain
        # d(rate)/d(gain) per (k, n), weighted by row weights w[k]
        base = np.where(
            self.active, self.sched * cp.snr_scale / (LN2 * snr) / tp.scn.n_slots, 0.0
        )
        wf = -w[:, None] * base  # rows are eta - rate: rate enters negatively

        # position term through the distance powers
        dgain_dd = cp.beta0 * (
            -self.lam**2 * cp.alpha_los * d_al / c.d
            - self.kap**2 * cp.alpha_nlos * d_an / c.d
        )
        buf = np.zeros_like(c.traj)
        buf[1:] = ((wf * dgain_dd)[:, :, None] * c.unit).sum(axis=0)
        tp.scatter_q(buf, grad)

        if self.c_fixed is None:
            cb = np.clip(c.c_bar, CBAR_GRAD_CLAMP, 1.0 - CBAR_GRAD_CLAMP)
            dgain_dc = cp.beta0 * (
                self.lam / np.sqrt(cb) - self.kap * np.sqrt(cp.mu) / np.sqrt(1.0 - cb)
            )
            grad[tp.layout.sl_cbar] += (wf * dgain_dc).ravel()
        grad[tp.layout.idx_eta] += w.sum()


class _TrustBlock(_Block):
    """Optional trust region |q - q0|_inf <= delta used by retry logic."""

    name = "trust-region"

    def __init__(self, tp, traj0: np.ndarray, delta: float):
        super().__init__(tp)
        self.q0 = traj0[1:-1].copy()
        self.delta = float(delta)
        self.size = self.q0.size
        self._num_rows = 2 * self.size

    def raw_value(self, c):
        dq = (c.traj[1:-1] - self.q0).ravel()
        return np.concatenate([dq - self.delta, -dq - self.delta])

    def add_grad(self, c, w, grad):
        buf = np.zeros_like(c.traj)
        buf[1:-1] = (w[: self.size] - w[self.size:]).reshape(self.q0.shape)
        self.tp.scatter_q(buf, grad)


def _closest_point_safe(box, q):
    """Closest boundary point; shallowly interior points are projected out."""
    if point_strictly_inside(box, q):
        lo, hi = box.bounds()
        depths = np.minimum(q - lo, hi - q)
        if depths.min() > 1e-4:
            raise SubproblemError("iterate is deep inside an obstacle")
        ax = int(np.argmin(depths))
        out = q.copy()
        out[ax] = lo[ax] - 1e-9 if q[ax] - lo[ax] <= hi[ax] - q[ax] else hi[ax] + 1e-9
        return np.clip(out, None, None), None  # unreachable marker
    return closest_point_on_expanded(box, q) if hasattr(box, "base") else _clamp_box(box, q)


def _clamp_box(box, q):
    lo, hi = box.bounds()
    return np.clip(q, lo, hi)


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

class TrajectoryProblem:
    """One trajectory/blockage subproblem instance.

    Expansion data (tangents, hyperplanes, surrogate multipliers) is
    frozen at construction from the previous iterate; each row family is
    relaxed by exactly the slack needed to make that iterate a strictly
    feasible barrier start (never more than _RELAX_CAP).
    """

    def __init__(
        self,
        scn: Scenario,
        sched: np.ndarray,
        traj0: np.ndarray,
        state0: BlockageState,
        qt: QTAux,
        mode: PlanMode,
        trust_delta: float | None = None,
    ):
        self.scn = scn
        self.mode = mode
        k, n = scn.num_gns, scn.n_slots
        n_bld = scn.num_buildings
        self.u1 = scn.solver.samples_per_segment + 1
        self.kn_shape = (k, n)
        self.kln_shape = (k, n_bld, n)
        self.beta_shape = (k, n_bld, n, self.u1, 3)

        use_blockage = mode.blockage
        n_axes = 2 if mode.z_fixed is not None else 3
        n_free = n - 1
        sizes = [n_free * n_axes]
        if use_blockage:
            sizes.append(k * n)
            if n_bld:
                sizes.extend([k * n_bld * n, int(np.prod(self.beta_shape))])
            else:
                sizes.extend([0, 0])
        else:
            sizes.extend([0, 0, 0])
        offs = np.cumsum([0] + sizes)
        self.layout = _Layout(
            n_axes=n_axes,
            n_free=n_free,
            sl_q=slice(0, offs[1]),
            sl_cbar=slice(offs[1], offs[2]),
            sl_rho=slice(offs[2], offs[3]),
            sl_beta=slice(offs[3], offs[4]),
            idx_eta=int(offs[4]),
            n_vars=int(offs[4]) + 1,
            has_blockage=use_blockage,
        )

        self._cache_x = None
        self._cache = None

        # Blocks whose expansion data comes from the previous iterate.
        self.blocks: list[_Block] = [_SpeedBlock(self)]
        if mode.z_fixed is None:
            self.blocks.append(_VSpeedBlock(self))
            self.blocks.append(_AltitudeBlock(self))
        if use_blockage:
            self.blocks.append(_CbarBlock(self))
            if n_bld:
                self.blocks.append(_BoxBlock(self, self.layout.sl_rho, "rho-box"))
                self.blocks.append(_BoxBlock(self, self.layout.sl_beta, "beta-box"))
                self.blocks.append(_FaceBlock(self, traj0))
                self.blocks.append(_IndicatorBlock(self, state0.beta, state0.sharpness))
        if mode.avoidance == "expanded" and n_bld:
            self.blocks.append(_AvoidBlock(self, traj0, list(scn.expanded_buildings())))
        elif mode.avoidance == "original" and n_bld:
            self.blocks.append(_AvoidBlock(self, traj0, list(scn.buildings)))
        self.rate_block = _RateBlock(
            self, sched, qt, c_fixed=None if use_blockage else 1.0
        )
        self.blocks.append(self.rate_block)
        if trust_delta is not None:
            self.blocks.append(_TrustBlock(self, traj0, trust_delta))

        # Starting point: previous iterate with eta backed off below the
        # worst surrogate rate.
        x0 = np.zeros(self.layout.n_vars)
        x0[self.layout.sl_q] = self._pack_q(traj0)
        if use_blockage:
            x0[self.layout.sl_cbar] = state0.c_bar.ravel()
            if n_bld:
                x0[self.layout.sl_rho] = state0.rho.ravel()
                x0[self.layout.sl_beta] = state0.beta.ravel()
        x0[self.layout.idx_eta] = 0.0
        cache = self.cache(x0)
        rate_rows = self.rate_block.raw_value(cache)
        if not np.all(np.isfinite(rate_rows)):
            raise SubproblemError("surrogate rate undefined at the previous iterate")
        self.start_rate = float(-rate_rows.max())  # min_k rate at eta = 0
        x0 = x0.copy()
        x0[self.layout.idx_eta] = self.start_rate - _EPS_ROW
        self.x0 = x0

        # Start-aware relaxation: each row gets exactly the slack that
        # makes the previous iterate strictly interior.
        self._invalidate_cache()
        cache = self.cache(x0)
        self.max_relax = 0.0
        for b in self.blocks:
            g0 = b.raw_value(cache)
            need = np.maximum(g0, 0.0)
            worst = float(need.max()) if need.size else 0.0
            if worst > _RELAX_CAP:
                raise SubproblemError(
                    f"previous iterate violates {b.name} rows by {worst:.3e}"
                )
            b.relax = need + _EPS_ROW * (1.0 + np.abs(g0))
            self.max_relax = max(self.max_relax, worst)

    # -- packing helpers ----------------------------------------------------

    def _pack_q(self, traj: np.ndarray) -> np.ndarray:
        free = traj[1:-1, : self.layout.n_axes] if self.layout.n_axes == 2 else traj[1:-1]
        return (free / POS_SCALE).ravel()

    def unpack_traj(self, x: np.ndarray) -> np.ndarray:
        scn = self.scn
        traj = np.empty((scn.n_slots + 1, 3))
        traj[0] = scn.q_init
        traj[-1] = scn.q_final
        free = x[self.layout.sl_q].reshape(self.layout.n_free, self.layout.n_axes)
        traj[1:-1, : self.layout.n_axes] = free * POS_SCALE
        if self.layout.n_axes == 2:
            traj[1:-1, 2] = self.mode.z_fixed
            traj[0, 2] = self.mode.z_fixed
            traj[-1, 2] = self.mode.z_fixed
        return traj

    def scatter_q(self, buf: np.ndarray, grad: np.ndarray) -> None:
        """Accumulate a (N+1, 3) meter-space gradient into the flat vector."""
        free = buf[1:-1, : self.layout.n_axes]
        grad[self.layout.sl_q] += (free * POS_SCALE).ravel()

    def unpack(self, x: np.ndarray):
        traj = self.unpack_traj(x)
        eta = float(x[self.layout.idx_eta])
        if not self.layout.has_blockage:
            return traj, None, eta
        k, n = self.kn_shape
        c_bar = x[self.layout.sl_cbar].reshape(k, n).copy()
        if self.scn.num_buildings:
            rho = x[self.layout.sl_rho].reshape(self.kln_shape).copy()
            beta = x[self.layout.sl_beta].reshape(self.beta_shape).copy()
        else:
            rho = np.ones((k, 0, n))
            beta = np.ones((k, 0, n, self.u1, 3))
        return traj, (np.clip(c_bar, 0.0, 1.0), np.clip(rho, 0.0, 1.0),
                      np.clip(beta, 0.0, 1.0)), eta

    # -- evaluation ----------------------------------------------------------

    def cache(self, x: np.ndarray) -> _Cache:
        if self._cache_x is not x:
            self._cache = _Cache(self, x)
            self._cache_x = x
        return self._cache

    def _invalidate_cache(self):
        self._cache_x = None
        self._cache = None

    def objective(self, x: np.ndarray):
        grad = np.zeros(self.layout.n_vars)
        grad[self.layout.idx_eta] = 1.0
        return float(x[self.layout.idx_eta]), grad

    def smooth_problem(self) -> SmoothProblem:
        return SmoothProblem(
            n_vars=self.layout.n_vars,
            objective=self.objective,
            blocks=self.blocks,
            x0=self.x0,
        )


def build_trajectory_problem(
    scn: Scenario,
    sched: np.ndarray,
    traj0: np.ndarray,
    state0: BlockageState,
    qt: QTAux,
    mode: PlanMode = PlanMode(),
    trust_delta: float | None = None,
) -> tuple[SmoothProblem, TrajectoryProblem]:
    """Assemble the subproblem around the previous iterate.

    state0 must already be mapped into the current surrogate's feasible
    set (see restore_start); qt holds the multipliers evaluated there.
    """
    tp = TrajectoryProblem(scn, sched, traj0, state0, qt, mode, trust_delta)
    return tp.smooth_problem(), tp
