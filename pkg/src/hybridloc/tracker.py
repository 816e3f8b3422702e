"""Particle-based sequential inference over the stacked state.

Each particle carries the agent state x = [px, py, vx, vy], one normalized
amplitude u per anchor and one LOS-probability index q per anchor. The
association variable of every anchor is summed out in closed form by
:func:`hybridloc.likelihood.log_anchor_evidence`, so the particle weights
target the same marginal posteriors as message passing on the per-step
tree-structured factor graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .likelihood import DetectionTable, LhfParams, log_anchor_evidence, log_feature_lr

FULL = "full"
PHYS_ONLY = "phys_only"
SPLIT = "split"
FEATURE_MODES = (FULL, PHYS_ONLY, SPLIT)

DEFAULT_Q_LEVELS = (0.001, 0.25, 0.5, 0.75, 0.999)


class TrackDivergedError(RuntimeError):
    pass


def neighbor_transition(n_levels: int, stay: float = 0.9) -> np.ndarray:
    """Row-stochastic matrix keeping ``stay`` and spreading the rest to neighbors."""
    if n_levels == 1:
        return np.ones((1, 1))
    T = np.zeros((n_levels, n_levels))
    for i in range(n_levels):
        nbrs = [k for k in (i - 1, i + 1) if 0 <= k < n_levels]
        T[i, i] = stay
        for k in nbrs:
            T[i, k] = (1.0 - stay) / len(nbrs)
    return T


def transition_matrices(dt: float):
    """Constant-velocity state matrix A and acceleration input matrix B."""
    A = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    B = np.array([[dt ** 2 / 2, 0], [0, dt ** 2 / 2], [dt, 0], [0, dt]], dtype=float)
    return A, B


@dataclass
class TrackerConfig:
    n_particles: int = 5000
    sigma_a: float = 2.0
    amp_walk_coeff: float = 0.05
    q_levels: tuple = DEFAULT_Q_LEVELS
    q_transition: np.ndarray | None = None
    ess_threshold: float = 0.5
    dt: float = 0.1
    feature_mode: str = FULL
    init_pos_std: float = 1.0
    init_vel_std: float = 0.5
    # "measurement": around the strongest first-step amplitude; "uniform": on
    # [gamma, u_init_max]; "fixed": exactly u_fixed
    init_amplitude: str = "measurement"
    u_init_max: float = 100.0
    u_init_rel_std: float = 0.1
    u_fixed: tuple | None = None
    amp_floor: float = 0.1
    amp_walk_ref: str = "global"  # or "particle"
    loss_threshold: float = 1.0

    def __post_init__(self):
        if self.q_transition is None:
            self.q_transition = neighbor_transition(len(self.q_levels))
        self.q_transition = np.asarray(self.q_transition, dtype=float)
        Q = len(self.q_levels)
        if self.q_transition.shape != (Q, Q):
            raise ValueError("q_transition must be Q x Q")
        if np.any(np.abs(self.q_transition.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("q_transition rows must sum to 1")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if self.n_particles < 1:
            raise ValueError("need at least one particle")


@dataclass
class ParticleSet:
    x: np.ndarray  # (I, 4)
    u: np.ndarray  # (I, J)
    q_idx: np.ndarray  # (I, J) int
    log_w: np.ndarray  # (I,)

    def __len__(self):
        return len(self.log_w)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w - logsumexp(self.log_w))

    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.sum(w * w))

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.x.copy(), self.u.copy(), self.q_idx.copy(), self.log_w.copy())


@dataclass
class Estimates:
    x: np.ndarray  # (4,)
    u: np.ndarray  # (J,)
    q: np.ndarray  # (J,)


def init_particles(config: TrackerConfig, mean_state, rng, n_anchors: int,
                   first_measurements=None, gamma: float = 2.0) -> ParticleSet:
    """Draw the prior particle cloud with uniform weights."""
    I = config.n_particles
    mean_state = np.asarray(mean_state, dtype=float)
    std = np.array([config.init_pos_std] * 2 + [config.init_vel_std] * 2)
    x = mean_state + std * rng.standard_normal((I, 4))
    u = np.empty((I, n_anchors))
    for j in range(n_anchors):
        if config.init_amplitude == "fixed":
            u[:, j] = config.u_fixed[j]
            continue
        z = None if first_measurements is None else np.asarray(first_measurements[j]).reshape(-1, 2)
        if config.init_amplitude == "measurement" and z is not None and len(z):
            center = z[:, 1].max()
            draw = center * (1.0 + config.u_init_rel_std * rng.standard_normal(I))
        else:
            draw = rng.uniform(gamma, config.u_init_max, I)
        u[:, j] = _reflect(draw, config.amp_floor)
    q_idx = rng.integers(0, len(config.q_levels), (I, n_anchors))
    return ParticleSet(x, u, q_idx, np.full(I, -np.log(I)))


def _reflect(u, floor):
    return np.where(u < floor, 2.0 * floor - u, u)


def predict_step(particles: ParticleSet, config: TrackerConfig, rng,
                 u_ref=None) -> ParticleSet:
    """Propagate every component of the stacked state one step.

    ``u_ref`` is the previous global amplitude estimate per anchor that sets
    the random-walk scale; with ``amp_walk_ref="particle"`` each particle's
    own amplitude is used instead.
    """
    I, J = particles.u.shape
    A, B = transition_matrices(config.dt)
    w = config.sigma_a * rng.standard_normal((I, 2))
    x = particles.x @ A.T + w @ B.T
    if config.amp_walk_ref == "particle" or u_ref is None:
        scale = config.amp_walk_coeff * particles.u
    else:
        scale = config.amp_walk_coeff * np.broadcast_to(np.asarray(u_ref, dtype=float), (I, J))
    u = _reflect(particles.u + scale * rng.standard_normal((I, J)), config.amp_floor)
    cum = np.cumsum(config.q_transition, axis=1)
    cum[:, -1] = 1.0
    draws = rng.random((I, J))
    q_idx = np.sum(draws[..., None] >= cum[particles.q_idx], axis=-1)
    q_idx = np.minimum(q_idx, len(config.q_levels) - 1)
    return ParticleSet(x, u, q_idx, particles.log_w.copy())


@dataclass
class UpdateInfo:
    log_w_phys: np.ndarray  # normalized log weights using physics-only evidence
    log_evidence: np.ndarray  # (I, J) evidence actually applied


def update_step(particles: ParticleSet, measurements, features, feature_maps, anchor_positions,
                params: LhfParams, config: TrackerConfig, det_table=None):
    """Weight particles by the association-marginalized likelihood of all anchors.

    ``measurements[j]`` is an (M, 2) array, ``features[j]`` a feature vector
    or None and ``feature_maps[j]`` the anchor's :class:`FeatureMap` or None.
    Returns ``(particles, UpdateInfo)`` with normalized log weights.
    """
    det_table = det_table or DetectionTable(params)
    I, J = particles.u.shape
    pos = particles.x[:, :2]
    q_levels = np.asarray(config.q_levels, dtype=float)
    total = np.zeros((I, J))
    phys = np.zeros((I, J))
    for j in range(J):
        dist = np.linalg.norm(pos - anchor_positions[j], axis=1)
        u = particles.u[:, j]
        q = q_levels[particles.q_idx[:, j]]
        log_feat = None
        use_feat = (config.feature_mode != PHYS_ONLY and features is not None
                    and features[j] is not None and len(features[j]) > 0
                    and feature_maps is not None and feature_maps[j] is not None)
        if use_feat:
            mu, var = feature_maps[j].predict(pos)
            log_feat = log_feature_lr(features[j], mu, var)
        total[:, j], phys[:, j] = log_anchor_evidence(measurements[j], log_feat, dist, u, q,
                                                      det_table(u), params)
    applied = phys if config.feature_mode == PHYS_ONLY else total
    log_w = particles.log_w + applied.sum(axis=1)
    log_w_phys = particles.log_w + phys.sum(axis=1)
    norm = logsumexp(log_w)
    if not np.isfinite(norm):
        raise TrackDivergedError("all particle weights vanished; the track has diverged")
    phys_norm = logsumexp(log_w_phys)
    log_w_phys = log_w_phys - phys_norm if np.isfinite(phys_norm) else log_w - norm
    out = ParticleSet(particles.x, particles.u, particles.q_idx, log_w - norm)
    return out, UpdateInfo(log_w_phys, applied)


def mmse_estimates(particles: ParticleSet, q_levels, weights_uq=None) -> Estimates:
    """Posterior means of x, u and q; ``weights_uq`` overrides weights for u and q."""
    w = particles.weights
    wu = w if weights_uq is None else weights_uq
    x = w @ particles.x
    u = wu @ particles.u
    q = wu @ np.asarray(q_levels, dtype=float)[particles.q_idx]
    return Estimates(x, u, q)


def position_covariance(particles: ParticleSet) -> np.ndarray:
    w = particles.weights
    p = particles.x[:, :2]
    d = p - w @ p
    return (w[:, None] * d).T @ d


def systematic_indices(weights, rng) -> np.ndarray:
    I = len(weights)
    positions = (rng.random() + np.arange(I)) / I
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def resample(particles: ParticleSet, ess_threshold: float, rng):
    """Systematic resampling when ESS drops below ``ess_threshold * I``.

    Returns ``(particles, resampled)``.
    """
    I = len(particles)
    if particles.ess() >= ess_threshold * I:
        return particles, False
    idx = systematic_indices(particles.weights, rng)
    out = ParticleSet(particles.x[idx], particles.u[idx], particles.q_idx[idx],
                      np.full(I, -np.log(I)))
    return out, True


@dataclass
class TrackResult:
    x: np.ndarray  # (N, 4) MMSE agent states
    u: np.ndarray  # (N, J)
    q: np.ndarray  # (N, J)
    ess: np.ndarray  # (N,) effective sample size after the update
    errors: np.ndarray | None = None  # (N,) position error magnitude
    lost: bool = False
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)


def track(streams, anchor_positions, feature_maps, params: LhfParams, config: TrackerConfig,
          rng, init_state, truth=None, record_spread: bool = False) -> TrackResult:
    """Run the filter over ``streams``, a sequence of ``(measurements, features)`` per step.

    ``truth`` (N, 2) true positions, when given, fills the error series and
    the track-lost flag (mean error over the final quarter above
    ``config.loss_threshold``).
    """
    anchor_positions = np.asarray(anchor_positions, dtype=float)
    J = len(anchor_positions)
    det_table = DetectionTable(params)
    N = len(streams)
    xs = np.empty((N, 4))
    us = np.empty((N, J))
    qs = np.empty((N, J))
    ess = np.empty(N)
    spread = np.empty(N)
    particles = None
    u_ref = None
    for n, (meas, feats) in enumerate(streams):
        if particles is None:
            particles = init_particles(config, init_state, rng, J, meas, params.gamma)
        else:
            particles = predict_step(particles, config, rng, u_ref)
        particles, info = update_step(particles, meas, feats, feature_maps, anchor_positions,
                                      params, config, det_table)
        w_uq = np.exp(info.log_w_phys) if config.feature_mode == SPLIT else None
        est = mmse_estimates(particles, config.q_levels, w_uq)
        xs[n], us[n], qs[n] = est.x, est.u, est.q
        u_ref = est.u
        ess[n] = particles.ess()
        if record_spread:
            spread[n] = np.trace(position_covariance(particles))
        particles, _ = resample(particles, config.ess_threshold, rng)
    result = TrackResult(xs, us, qs, ess)
    if truth is not None:
        truth = np.asarray(truth, dtype=float)
        result.errors = np.linalg.norm(xs[:, :2] - truth[:N], axis=1)
        tail = result.errors[-max(1, N // 4):]
        result.lost = bool(np.mean(tail) > config.loss_threshold)
    if record_spread:
        result.extras["spread"] = spread
    return result


def with_mode(config: TrackerConfig, mode: str) -> TrackerConfig:
    return replace(config, feature_mode=mode)
