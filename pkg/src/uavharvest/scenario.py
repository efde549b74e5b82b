"""Problem instances: validation, JSON serialization, bundled benchmark.

A Scenario is immutable once validated. All dB/dBm fields of the file
format are converted to linear SI units at load time; everything
downstream works in watts and meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelParams, db_to_linear, dbm_to_watts
from .geometry import INFLATION_FACTOR, Building, ExpandedBuilding, point_strictly_inside


class ScenarioError(ValueError):
    """Scenario file or instance violates the documented invariants."""


class InfeasibleError(Exception):
    """The planning problem admits no feasible plan for this scenario."""


@dataclass(frozen=True)
class SolverParams:
    """Algorithm constants carried with the scenario.

    samples_per_segment: number of equal sub-segments of each sight line
        checked for blockage (the sample grid has samples+1 points).
    big_m_mult: per-row big-M multiplier relative to the row's own scale.
    a0 / anneal_growth: initial sharpness of the indicator surrogate and
        its per-iteration growth factor (frozen once a >= a_freeze).
    conv_tol: outer-loop convergence threshold on the surrogate min-rate.
    max_outer_iters: outer-loop iteration cap.
    """

    samples_per_segment: int = 10
    big_m_mult: float = 300.0
    a0: float = 0.01
    anneal_growth: float = 1.6
    conv_tol: float = 1e-4
    max_outer_iters: int = 60
    seed: int = 0
    a_freeze: float = 1e3

    def __post_init__(self):
        if self.samples_per_segment < 1:
            raise ScenarioError("solver.U: need at least one sub-segment")
        if self.big_m_mult <= 0:
            raise ScenarioError("solver.M: big-M multiplier must be positive")
        if self.a0 <= 0:
            raise ScenarioError("solver.a0: initial sharpness must be positive")
        if self.anneal_growth <= 1.0:
            raise ScenarioError("solver.eps_growth: annealing growth must exceed 1")
        if self.conv_tol <= 0:
            raise ScenarioError("solver.eps_conv: convergence tolerance must be positive")
        if self.max_outer_iters < 1:
            raise ScenarioError("solver.Rmax: iteration cap must be at least 1")


@dataclass(frozen=True)
class Scenario:
    """Immutable planning instance; construct via make_scenario/load_scenario."""

    gns: np.ndarray  # (K, 3)
    buildings: tuple[Building, ...]
    q_init: np.ndarray  # (3,)
    q_final: np.ndarray  # (3,)
    horizon_s: float
    n_slots: int
    v_max: float
    v_z: float
    h_min: float
    h_max: float
    channel: ChannelParams
    solver: SolverParams = field(default_factory=SolverParams)
    warnings: tuple[str, ...] = ()

    @property
    def num_gns(self) -> int:
        return self.gns.shape[0]

    @property
    def num_buildings(self) -> int:
        return len(self.buildings)

    @property
    def slot_s(self) -> float:
        return self.horizon_s / self.n_slots

    @property
    def step_max(self) -> float:
        """Largest 3D displacement per slot, meters."""
        return self.slot_s * self.v_max

    @property
    def step_max_z(self) -> float:
        return self.slot_s * self.v_z

    @property
    def mobility_margin(self) -> float:
        """Expansion margin certifying continuity between consecutive slots."""
        return self.step_max * INFLATION_FACTOR

    def expanded_buildings(self) -> tuple[ExpandedBuilding, ...]:
        m = self.mobility_margin
        return tuple(ExpandedBuilding(b, m) for b in self.buildings)

    def with_solver(self, **kwargs) -> "Scenario":
        return replace(self, solver=replace(self.solver, **kwargs))


def _footprint_contains(b: Building, x: float, y: float, pad: float = 0.0) -> bool:
    cx, cy, _ = b.center
    return (abs(x - cx) < b.half_width + pad) and (abs(y - cy) < b.half_length + pad)


def make_scenario(
    gns,
    buildings,
    q_init,
    q_final,
    horizon_s,
    n_slots,
    v_max,
    v_z,
    h_min,
    h_max,
    channel: ChannelParams,
    solver: SolverParams | None = None,
) -> Scenario:
    """Validate and freeze a scenario; raises ScenarioError with the offending field."""
    gns = np.atleast_2d(np.asarray(gns, dtype=float))
    q_init = np.asarray(q_init, dtype=float)
    q_final = np.asarray(q_final, dtype=float)
    buildings = tuple(buildings)
    solver = solver or SolverParams()
    warnings: list[str] = []

    if gns.shape[0] < 1 or gns.shape[1] != 3:
        raise ScenarioError("gns: need a (K, 3) array with K >= 1")
    if q_init.shape != (3,) or q_final.shape != (3,):
        raise ScenarioError("uav.qI/uav.qF: endpoints must be 3-vectors")
    if not (isinstance(n_slots, (int, np.integer)) and n_slots >= 1):
        raise ScenarioError("uav.N: slot count must be a positive integer")
    if not horizon_s > 0:
        raise ScenarioError("uav.T: flight period must be positive")
    if not (v_max > v_z > 0):
        raise ScenarioError("uav.Vmax/uav.Vz: need Vmax > Vz > 0")
    if not h_min >= 1.0:
        raise ScenarioError("uav.Hmin: minimum altitude must be at least 1 m")
    if not h_max >= h_min:
        raise ScenarioError("uav.Hmax: maximum altitude below minimum altitude")

    delta = horizon_s / n_slots
    step = delta * v_max
    for i, b in enumerate(buildings):
        if step >= b.min_dimension():
            raise ScenarioError(
                f"buildings[{i}]: per-slot travel {step:.3g} m must stay below the "
                f"smallest building dimension {b.min_dimension():.3g} m"
            )
        for j in range(i):
            o = buildings[j]
            if (
                abs(b.center[0] - o.center[0]) < b.half_width + o.half_width
                and abs(b.center[1] - o.center[1]) < b.half_length + o.half_length
            ):
                raise ScenarioError(f"buildings[{i}] and buildings[{j}]: footprints overlap")

    margin = step * INFLATION_FACTOR
    expanded = [ExpandedBuilding(b, margin) for b in buildings]
    for name, q in (("uav.qI", q_init), ("uav.qF", q_final)):
        if not (h_min <= q[2] <= h_max):
            raise ScenarioError(f"{name}: altitude {q[2]} outside [{h_min}, {h_max}]")
        for i, e in enumerate(expanded):
            if point_strictly_inside(e, q):
                raise ScenarioError(f"{name}: inside the expanded buildings[{i}]")

    for k, w in enumerate(gns):
        if w[2] < 0:
            raise ScenarioError(f"gns[{k}]: antenna height must be nonnegative")
        if w[2] > h_min - 1.0:
            raise ScenarioError(
                f"gns[{k}]: antenna height {w[2]} must stay at least 1 m below Hmin"
            )
        for i, b in enumerate(buildings):
            if _footprint_contains(b, w[0], w[1]):
                raise ScenarioError(f"gns[{k}]: inside the footprint of buildings[{i}]")
            if _footprint_contains(b, w[0], w[1], pad=margin):
                warnings.append(
                    f"gns[{k}] lies within the expanded footprint of buildings[{i}]; "
                    "its channel will always be treated as blocked"
                )
        for name, q in (("uav.qI", q_init), ("uav.qF", q_final)):
            if np.linalg.norm(q - w) < 1.0:
                raise ScenarioError(f"{name}: closer than 1 m to gns[{k}]")

    gns.setflags(write=False)
    q_init.setflags(write=False)
    q_final.setflags(write=False)
    return Scenario(
        gns=gns,
        buildings=buildings,
        q_init=q_init,
        q_final=q_final,
        horizon_s=float(horizon_s),
        n_slots=int(n_slots),
        v_max=float(v_max),
        v_z=float(v_z),
        h_min=float(h_min),
        h_max=float(h_max),
        channel=channel,
        solver=solver,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# JSON file format
# ---------------------------------------------------------------------------

def _require(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise ScenarioError(f"{path}.{key}: missing required field")
    val = doc[key]
    if kind is float and isinstance(val, (int, float)) and not isinstance(val, bool):
        return float(val)
    if kind is int and isinstance(val, int) and not isinstance(val, bool):
        return val
    if isinstance(val, kind):
        return val
    raise ScenarioError(f"{path}.{key}: expected {kind.__name__}")


def scenario_from_dict(doc: dict) -> Scenario:
    gns_raw = _require(doc, "gns", list, "$")
    gns = []
    for k, item in enumerate(gns_raw):
        if not (isinstance(item, list) and len(item) == 3):
            raise ScenarioError(f"$.gns[{k}]: expected [x, y, z]")
        gns.append([float(v) for v in item])

    buildings = []
    for i, bd in enumerate(_require(doc, "buildings", list, "$")):
        path = f"$.buildings[{i}]"
        center = _require(bd, "center", list, path)
        if len(center) != 2:
            raise ScenarioError(f"{path}.center: expected [x, y]")
        try:
            buildings.append(
                Building(
                    center=(float(center[0]), float(center[1]), 0.0),
                    width=_require(bd, "width", float, path),
                    length=_require(bd, "length", float, path),
                    height=_require(bd, "height", float, path),
                )
            )
        except ValueError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc

    uav = _require(doc, "uav", dict, "$")
    ch = _require(doc, "channel", dict, "$")
    try:
        channel = ChannelParams(
            beta0=db_to_linear(_require(ch, "beta0_dB", float, "$.channel")),
            mu=db_to_linear(_require(ch, "mu_dB", float, "$.channel")),
            alpha_los=_require(ch, "alphaL", float, "$.channel"),
            alpha_nlos=_require(ch, "alphaN", float, "$.channel"),
            noise_w=dbm_to_watts(_require(ch, "sigma2_dBm", float, "$.channel")),
            tx_power_w=dbm_to_watts(_require(ch, "pk_dBm", float, "$.channel")),
        )
    except ValueError as exc:
        raise ScenarioError(f"$.channel: {exc}") from exc

    sv = doc.get("solver", {})
    if not isinstance(sv, dict):
        raise ScenarioError("$.solver: expected an object")
    solver = SolverParams(
        samples_per_segment=int(sv.get("U", 10)),
        big_m_mult=float(sv.get("M", 300.0)),
        a0=float(sv.get("a0", 0.01)),
        anneal_growth=float(sv.get("eps_growth", 1.6)),
        conv_tol=float(sv.get("eps_conv", 1e-4)),
        max_outer_iters=int(sv.get("Rmax", 60)),
        seed=int(sv.get("seed", 0)),
    )

    qi = _require(uav, "qI", list, "$.uav")
    qf = _require(uav, "qF", list, "$.uav")
    if len(qi) != 3 or len(qf) != 3:
        raise ScenarioError("$.uav.qI/qF: expected [x, y, z]")
    return make_scenario(
        gns=gns,
        buildings=buildings,
        q_init=[float(v) for v in qi],
        q_final=[float(v) for v in qf],
        horizon_s=_require(uav, "T", float, "$.uav"),
        n_slots=_require(uav, "N", int, "$.uav"),
        v_max=_require(uav, "Vmax", float, "$.uav"),
        v_z=_require(uav, "Vz", float, "$.uav"),
        h_min=_require(uav, "Hmin", float, "$.uav"),
        h_max=_require(uav, "Hmax", float, "$.uav"),
        channel=channel,
        solver=solver,
    )


def scenario_to_dict(scn: Scenario) -> dict:
    ch = scn.channel
    return {
        "gns": [list(map(float, w)) for w in scn.gns],
        "buildings": [
            {
                "center": [b.center[0], b.center[1]],
                "width": b.width,
                "length": b.length,
                "height": b.height,
            }
            for b in scn.buildings
        ],
        "uav": {
            "qI": list(map(float, scn.q_init)),
            "qF": list(map(float, scn.q_final)),
            "T": scn.horizon_s,
            "N": scn.n_slots,
            "Vmax": scn.v_max,
            "Vz": scn.v_z,
            "Hmin": scn.h_min,
            "Hmax": scn.h_max,
        },
        "channel": {
            "beta0_dB": 10.0 * np.log10(ch.beta0),
            "mu_dB": 10.0 * np.log10(ch.mu),
            "alphaL": ch.alpha_los,
            "alphaN": ch.alpha_nlos,
            "sigma2_dBm": 10.0 * np.log10(ch.noise_w) + 30.0,
            "pk_dBm": 10.0 * np.log10(ch.tx_power_w) + 30.0,
        },
        "solver": {
            "U": scn.solver.samples_per_segment,
            "M": scn.solver.big_m_mult,
            "a0": scn.solver.a0,
            "eps_growth": scn.solver.anneal_growth,
            "eps_conv": scn.solver.conv_tol,
            "Rmax": scn.solver.max_outer_iters,
            "seed": scn.solver.seed,
        },
    }


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top-level document must be an object")
    return scenario_from_dict(doc)


def save_scenario(scn: Scenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scn), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Bundled scenarios
# ---------------------------------------------------------------------------

def table1_channel() -> ChannelParams:
    """Default urban channel constants (0 dB at 1 m, -30 dB NLoS factor,
    exponents 2 / 2.7, -70 dBm noise, 30 dBm transmit power)."""
    return ChannelParams(
        beta0=db_to_linear(0.0),
        mu=db_to_linear(-30.0),
        alpha_los=2.0,
        alpha_nlos=2.7,
        noise_w=dbm_to_watts(-70.0),
        tx_power_w=dbm_to_watts(30.0),
    )


def benchmark_scenario(horizon_s: float = 25.0, n_slots: int = 50) -> Scenario:
    """Bundled 4-GN / 2-building benchmark.

    GN and building placements are this package's construction: GNs at
    the corners of a 100 m x 100 m area inset by 10 m, one 20x20x40 m
    building at (-25, 0) and one 20x40x40 m building at (25, 0). Start
    above the south-west GN, finish above the north-west GN.
    """
    gns = [
        [-40.0, -40.0, 0.0],
        [40.0, -40.0, 0.0],
        [40.0, 40.0, 0.0],
        [-40.0, 40.0, 0.0],
    ]
    buildings = [
        Building(center=(-25.0, 0.0, 0.0), width=20.0, length=20.0, height=40.0),
        Building(center=(25.0, 0.0, 0.0), width=20.0, length=40.0, height=40.0),
    ]
    return make_scenario(
        gns=gns,
        buildings=buildings,
        q_init=[-40.0, -40.0, 30.0],
        q_final=[-40.0, 40.0, 30.0],
        horizon_s=horizon_s,
        n_slots=n_slots,
        v_max=10.0,
        v_z=5.0,
        h_min=30.0,
        h_max=200.0,
        channel=table1_channel(),
        solver=SolverParams(),
    )


def random_scenario(
    seed: int,
    num_gns: int = 2,
    num_buildings: int = 1,
    n_slots: int = 10,
    horizon_s: float = 8.0,
) -> Scenario:
    """Small seeded random instance used by the randomized end-to-end suites."""
    rng = np.random.default_rng(seed)
    delta = horizon_s / n_slots
    v_max = 10.0
    step = delta * v_max

    for _ in range(200):
        buildings = []
        ok = True
        for _ in range(num_buildings):
            dims = rng.uniform(max(12.0, step + 2.0), 18.0, size=2)
            height = rng.uniform(max(14.0, step + 2.0), 26.0)
            c = rng.uniform(-25.0, 25.0, size=2)
            cand = Building(center=(c[0], c[1], 0.0), width=dims[0], length=dims[1], height=height)
            if any(
                abs(cand.center[0] - b.center[0]) < cand.half_width + b.half_width
                and abs(cand.center[1] - b.center[1]) < cand.half_length + b.half_length
                for b in buildings
            ):
                ok = False
                break
            buildings.append(cand)
        if not ok:
            continue

        margin = step * INFLATION_FACTOR
        def clear(x, y):
            return all(
                not _footprint_contains(b, x, y, pad=margin + 0.5) for b in buildings
            )

        gns = []
        for _ in range(num_gns):
            for _ in range(100):
                p = rng.uniform(-45.0, 45.0, size=2)
                if clear(p[0], p[1]):
                    gns.append([p[0], p[1], 0.0])
                    break
        if len(gns) < num_gns:
            continue

        h_min = 12.0
        endpoints = []
        for _ in range(2):
            for _ in range(100):
                p = rng.uniform(-40.0, 40.0, size=2)
                if clear(p[0], p[1]) and all(
                    np.hypot(p[0] - g[0], p[1] - g[1]) > 2.0 for g in gns
                ):
                    endpoints.append([p[0], p[1], h_min])
                    break
        if len(endpoints) < 2:
            continue
        if np.linalg.norm(np.subtract(endpoints[1], endpoints[0])) > 0.8 * horizon_s * v_max:
            continue

        try:
            return make_scenario(
                gns=gns,
                buildings=buildings,
                q_init=endpoints[0],
                q_final=endpoints[1],
                horizon_s=horizon_s,
                n_slots=n_slots,
                v_max=v_max,
                v_z=5.0,
                h_min=h_min,
                h_max=120.0,
                channel=table1_channel(),
                solver=SolverParams(
                    samples_per_segment=5,
                    a0=0.02,
                    anneal_growth=2.2,
                    conv_tol=1e-4,
                    max_outer_iters=22,
                    seed=seed,
                ),
            )
        except ScenarioError:
            continue
    raise RuntimeError(f"could not draw a valid random scenario for seed {seed}")
