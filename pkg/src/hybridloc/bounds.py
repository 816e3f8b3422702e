"""Cramer-Rao bounds on the position error.

Only the LOS distance measurements carry position information here; the
amplitude is position-independent in the measurement model and the
feature model is left out of the benchmark.
"""

from __future__ import annotations

import numpy as np

from .likelihood import LhfParams, sigma_d
from .tracker import transition_matrices


class GeometryError(ValueError):
    pass


def _bearing_information(p, anchor_positions, amplitudes, params: LhfParams) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    J = np.zeros((2, 2))
    for pa, u in zip(np.atleast_2d(anchor_positions), np.atleast_1d(amplitudes)):
        e = p - pa
        e = e / np.linalg.norm(e)
        J += np.outer(e, e) / sigma_d(u, params) ** 2
    return J


def sp_crlb(p, anchor_positions, amplitudes, params: LhfParams) -> float:
    """Single-position bound sqrt(trace(J_pos^-1)) from the visible anchors."""
    anchor_positions = np.atleast_2d(np.asarray(anchor_positions, dtype=float))
    if len(anchor_positions) < 2:
        raise GeometryError("need at least two visible anchors")
    J = _bearing_information(p, anchor_positions, amplitudes, params)
    if np.linalg.cond(J) > 1e12:
        raise GeometryError("anchor bearings are collinear")
    return float(np.sqrt(np.trace(np.linalg.inv(J))))


def measurement_information(p, anchor_positions, amplitudes, visible, params: LhfParams) -> np.ndarray:
    """4x4 information H^T R^-1 H contributed by the visible LOS distances."""
    info = np.zeros((4, 4))
    mask = np.asarray(visible, dtype=bool)
    if mask.any():
        info[:2, :2] = _bearing_information(p, np.asarray(anchor_positions)[mask],
                                            np.asarray(amplitudes)[mask], params)
    return info


def pcrlb(positions, anchor_positions, visibility, amplitudes, params: LhfParams,
          sigma_a: float = 2.0, dt: float = 0.1, prior_std=(1.0, 1.0, 0.5, 0.5),
          los_always: bool = False) -> np.ndarray:
    """Posterior bound per step via the information-filter recursion.

    ``visibility`` and ``amplitudes`` are (N, J) arrays of LOS availability
    and true LOS normalized amplitudes. ``los_always`` ignores blockage.
    The first step combines the prior information with the first
    measurement; later steps propagate through the dynamic model first.
    """
    positions = np.asarray(positions, dtype=float)
    visibility = np.ones_like(amplitudes, dtype=bool) if los_always else np.asarray(visibility, bool)
    A, B = transition_matrices(dt)
    Qw = sigma_a ** 2 * B @ B.T
    J = np.diag(1.0 / np.asarray(prior_std, dtype=float) ** 2)
    out = np.empty(len(positions))
    for n, p in enumerate(positions):
        if n > 0:
            try:
                P = np.linalg.inv(J)
                J = np.linalg.inv(A @ P @ A.T + Qw)
            except np.linalg.LinAlgError as exc:
                raise GeometryError(f"information matrix not invertible at step {n}") from exc
        J = J + measurement_information(p, anchor_positions, amplitudes[n], visibility[n], params)
        J = 0.5 * (J + J.T)
        if np.min(np.linalg.eigvalsh(J)) < -1e-9 * np.max(np.abs(J)):
            raise GeometryError(f"information matrix lost positive semi-definiteness at step {n}")
        P = np.linalg.inv(J)
        out[n] = np.sqrt(P[0, 0] + P[1, 1])
    return out
