"""Dual-slope LoS/NLoS channel model and its optimization surrogates.

All quantities are linear-scale SI internally: gains are unitless power
ratios, powers are watts, distances are meters. dB/dBm values exist only
in scenario files and are converted once at load time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import ChannelState

# Gradient evaluations near c_bar in {0, 1} clamp away from the boundary
# to keep sqrt derivatives finite; values themselves are evaluated exactly.
CBAR_GRAD_CLAMP = 1e-9


def db_to_linear(db: float) -> float:
    return float(10.0 ** (db / 10.0))


def dbm_to_watts(dbm: float) -> float:
    return float(10.0 ** ((dbm - 30.0) / 10.0))


@dataclass(frozen=True)
class ChannelParams:
    """Large-scale channel constants.

    beta0: power gain at 1 m reference distance in LoS (linear).
    mu: extra NLoS attenuation (linear, < 1).
    alpha_los / alpha_nlos: path-loss exponents, alpha_los < alpha_nlos.
    noise_w: receiver noise power, watts.
    tx_power_w: GN transmit power, watts.
    """

    beta0: float
    mu: float
    alpha_los: float
    alpha_nlos: float
    noise_w: float
    tx_power_w: float

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError("NLoS attenuation mu must lie in (0, 1)")
        if not 2.0 <= self.alpha_los < self.alpha_nlos:
            raise ValueError("path-loss exponents require 2 <= alpha_los < alpha_nlos")
        if not self.noise_w > 0:
            raise ValueError("noise power must be positive")
        if not self.tx_power_w > 0:
            raise ValueError("transmit power must be positive")
        if not self.beta0 > 0:
            raise ValueError("reference gain must be positive")

    @property
    def snr_scale(self) -> float:
        """tx_power / noise: multiplies gains into SNR."""
        return self.tx_power_w / self.noise_w


def gain(d: float, state: ChannelState, cp: ChannelParams) -> float:
    """Channel power gain at distance d for a known LoS/NLoS state."""
    if not d > 0:
        raise ValueError("distance must be positive")
    if state is ChannelState.LOS:
        return cp.beta0 / d**cp.alpha_los
    return cp.mu * cp.beta0 / d**cp.alpha_nlos


def lower_bound_gain(d, c_bar, cp: ChannelParams):
    """Convex combination c_bar * h_los + (1 - c_bar) * h_nlos.

    A guaranteed lower bound on the true gain whenever c_bar does not
    exceed the true LoS indicator. Accepts scalars or arrays.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    c_bar = np.asarray(c_bar, dtype=float)
    h_los = cp.beta0 / d**cp.alpha_los
    h_nlos = cp.mu * cp.beta0 / d**cp.alpha_nlos
    out = c_bar * h_los + (1.0 - c_bar) * h_nlos
    return float(out) if out.ndim == 0 else out


def qt_optimal_aux(q, w, c_bar, cp: ChannelParams) -> tuple[float, float]:
    """Multipliers that make the subtractive gain surrogate tight.

    lam = sqrt(c_bar) / d^alpha_los, kap = sqrt(mu (1 - c_bar)) / d^alpha_nlos.
    """
    d = float(np.linalg.norm(np.subtract(q, w)))
    if d == 0.0:
        raise ValueError("channel endpoints coincide")
    if not 0.0 <= c_bar <= 1.0:
        raise ValueError("c_bar must lie in [0, 1]")
    lam = np.sqrt(c_bar) / d**cp.alpha_los
    kap = np.sqrt(cp.mu * (1.0 - c_bar)) / d**cp.alpha_nlos
    return float(lam), float(kap)


def qt_gain(q, w, c_bar, lam: float, kap: float, cp: ChannelParams) -> float:
    """Subtractive surrogate of the lower-bound gain.

    beta0 * (2 lam sqrt(c) - lam^2 d^aL + 2 kap sqrt(mu(1-c)) - kap^2 d^aN);
    concave in (q, c_bar) for fixed multipliers, equal to
    lower_bound_gain at the optimal multipliers and never above it.
    """
    d = float(np.linalg.norm(np.subtract(q, w)))
    if d == 0.0:
        raise ValueError("channel endpoints coincide")
    if not 0.0 <= c_bar <= 1.0:
        raise ValueError("c_bar must lie in [0, 1]")
    if lam < 0 or kap < 0:
        raise ValueError("QT multipliers must be nonnegative")
    return float(
        cp.beta0
        * (
            2.0 * lam * np.sqrt(c_bar)
            - lam**2 * d**cp.alpha_los
            + 2.0 * kap * np.sqrt(cp.mu * (1.0 - c_bar))
            - kap**2 * d**cp.alpha_nlos
        )
    )


def spectral_efficiency(s: float, h: float, cp: ChannelParams) -> float:
    """Per-slot spectral efficiency s * log2(1 + p h / sigma^2), bps/Hz."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("scheduling weight must lie in [0, 1]")
    if h < 0:
        raise ValueError("gain must be nonnegative")
    return float(s * np.log2(1.0 + cp.snr_scale * h))


def per_slot_rates(traj: np.ndarray, gns: np.ndarray, los: np.ndarray, cp: ChannelParams) -> np.ndarray:
    """(K, N) unit-weight spectral efficiencies at slots 1..N with true states.

    traj is (N+1, 3); gns is (K, 3); los is a boolean (K, N) mask.
    """
    q = np.asarray(traj, dtype=float)[1:]  # rates accrue at slots 1..N
    gns = np.asarray(gns, dtype=float)
    d = np.linalg.norm(q[None, :, :] - gns[:, None, :], axis=2)  # (K, N)
    if np.any(d <= 0):
        raise ValueError("UAV position coincides with a GN")
    h_los = cp.beta0 / d**cp.alpha_los
    h_nlos = cp.mu * cp.beta0 / d**cp.alpha_nlos
    h = np.where(np.asarray(los, dtype=bool), h_los, h_nlos)
    return np.log2(1.0 + cp.snr_scale * h)


def average_rates(
    traj: np.ndarray,
    gns: np.ndarray,
    sched: np.ndarray,
    los: np.ndarray,
    cp: ChannelParams,
) -> tuple[np.ndarray, float]:
    """Time-averaged per-GN spectral efficiencies and their minimum.

    sched is the (K, N) scheduling matrix; los the oracle (K, N) state
    mask. Returns (rates (K,), min_rate).
    """
    sched = np.asarray(sched, dtype=float)
    rates_slot = per_slot_rates(traj, gns, los, cp)
    if sched.shape != rates_slot.shape:
        raise ValueError(
            f"schedule shape {sched.shape} does not match (K, N)={rates_slot.shape}"
        )
    n_slots = sched.shape[1]
    rates = (sched * rates_slot).sum(axis=1) / n_slots
    return rates, float(rates.min())
