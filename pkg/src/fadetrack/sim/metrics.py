"""RMSE aggregation, steady-state statistics and energy accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def rmse_from_squared(sq_err) -> np.ndarray:
    """Per-step RMSE from squared error norms of shape ``(runs, steps, nodes)``.

    ``sqrt(mean over runs and nodes)``; a 2-D input is taken as a single run.
    """
    sq = np.asarray(sq_err, dtype=float)
    if sq.ndim == 2:
        sq = sq[None]
    if sq.ndim != 3:
        raise ValueError(f"expected (runs, steps, nodes), got shape {sq.shape}")
    return np.sqrt(sq.mean(axis=(0, 2)))


def rmse_position(errors) -> np.ndarray:
    """Position RMSE per step from error vectors ``(runs, steps, nodes, 3)``."""
    e = np.asarray(errors, dtype=float)
    return rmse_from_squared(np.sum(e * e, axis=-1))


def rmse_velocity(errors) -> np.ndarray:
    """Velocity RMSE per step from error vectors ``(runs, steps, nodes, 3)``."""
    return rmse_position(errors)


def steady_state(series, window: int) -> float:
    """Mean of the last ``window`` entries."""
    s = np.asarray(series, dtype=float)
    return float(s[-window:].mean())


def per_run_steady(sq_err, window: int) -> np.ndarray:
    """Steady-state RMSE of each run separately, shape ``(runs,)``."""
    sq = np.asarray(sq_err, dtype=float)
    per_step = np.sqrt(sq.mean(axis=2))  # (runs, steps)
    return per_step[:, -window:].mean(axis=1)


def standard_error(samples) -> float:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        return float("nan")
    return float(x.std(ddof=1) / np.sqrt(x.size))


def change_rate(value, reference):
    """Relative change ``value / reference - 1`` (negative means a reduction)."""
    return value / reference - 1.0


@dataclass(frozen=True)
class EnergyReport:
    transmissions: int  # attempted directed transmissions, both rounds, all steps
    power_mw: float  # nominal peak power per transmission, as configured
    joules: float
    rate_j_per_s: float


def energy_accounting(attempted_per_step, power_mw, packet_bits: int, bit_rate_bps: float, duration_s: float) -> EnergyReport:
    """Sender-side energy of every attempted transmission, averaged over time.

    ``power_mw`` is a scalar nominal power in milliwatts; per-link powers
    should be summed into per-step joules by the caller instead.
    """
    count = int(np.sum(attempted_per_step))
    if power_mw < 0:
        raise ValueError("peak power must be non-negative")
    joules = count * (power_mw * 1e-3) * packet_bits / bit_rate_bps
    return EnergyReport(count, float(power_mw), float(joules), float(joules / duration_s))


def energy_change_rate(report: EnergyReport, reference: EnergyReport) -> float:
    """Change rate of the energy rate against ``reference``.

    Factored as ``(u / u_ref) * (n / n_ref) - 1`` on the configured milliwatt
    values: for a shared topology the count ratio is exactly 1 and the result
    is bit-identical to ``u/u_ref - 1`` (no unit conversion rounding).
    """
    if reference.transmissions == 0 or reference.power_mw == 0:
        return float("nan")
    return (report.power_mw / reference.power_mw) * (report.transmissions / reference.transmissions) - 1.0


@dataclass
class MetricsReport:
    variant: str
    rmse_p: np.ndarray  # (K + 1,), index 0 is the initial estimate
    rmse_v: np.ndarray
    steady_p: float
    steady_v: float
    steady_p_se: float
    steady_v_se: float
    per_run_steady_p: np.ndarray
    per_run_steady_v: np.ndarray
    energy: EnergyReport | None
    energy_rate_j_per_s: float
    runs_used: int
    runs_failed: int

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "steady_rmse_position_m": self.steady_p,
            "steady_rmse_position_se_m": self.steady_p_se,
            "steady_rmse_velocity_m_s": self.steady_v,
            "steady_rmse_velocity_se_m_s": self.steady_v_se,
            "energy_rate_j_per_s": self.energy_rate_j_per_s,
            "transmissions": None if self.energy is None else self.energy.transmissions,
            "runs_used": self.runs_used,
            "runs_failed": self.runs_failed,
        }


def build_report(variant: str, sq_pos, sq_vel, energy_j, attempted, power_mw, window: int, duration_s: float, channel, runs_failed: int = 0) -> MetricsReport:
    """Aggregate stacked per-run arrays (already in run-index order)."""
    sq_pos = np.asarray(sq_pos, dtype=float)
    sq_vel = np.asarray(sq_vel, dtype=float)
    m = sq_pos.shape[0]
    if m == 0:
        nan = float("nan")
        empty = np.empty(0)
        return MetricsReport(variant, empty, empty, nan, nan, nan, nan, empty, empty, None, nan, 0, runs_failed)
    rp = rmse_from_squared(sq_pos)
    rv = rmse_from_squared(sq_vel)
    prp = per_run_steady(sq_pos, window)
    prv = per_run_steady(sq_vel, window)
    energy = None
    if power_mw is not None:
        # every run shares the same count when topology is fixed; use run 0
        energy = energy_accounting(np.asarray(attempted)[0], power_mw, channel.packet_bits, channel.bit_rate_bps, duration_s)
    rate = float(np.mean(np.sum(energy_j, axis=1)) / duration_s)
    return MetricsReport(
        variant=variant,
        rmse_p=rp,
        rmse_v=rv,
        steady_p=steady_state(rp, window),
        steady_v=steady_state(rv, window),
        steady_p_se=standard_error(prp),
        steady_v_se=standard_error(prv),
        per_run_steady_p=prp,
        per_run_steady_v=prv,
        energy=energy,
        energy_rate_j_per_s=rate,
        runs_used=m,
        runs_failed=runs_failed,
    )
