"""Physics-based and data-driven likelihoods with probabilistic data association.

Two layers live here. The scalar functions (``sigma_d``, ``lhf_*``,
``component_lr``, ``pda_marginal`` ...) are the readable reference API.
:func:`log_anchor_evidence` is the vectorized log-domain twin used by the
particle filter; it evaluates the same association marginal for every
particle at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import chndtr, i0e, logsumexp
from scipy.stats import ncx2

from .signal import SPEED_OF_LIGHT, rms_bandwidth, rrc_pulse

DENSITY_FLOOR = 1e-300
LOG_2PI = np.log(2.0 * np.pi)


def _default_beta_bw() -> float:
    return rms_bandwidth(rrc_pulse())


@dataclass(frozen=True)
class LhfParams:
    """Measurement-model constants shared by all likelihood functions.

    ``constant_pd`` replaces the amplitude-dependent detection probability
    when set. ``eps_miss`` weights the missed-detection branch for anchors
    without any measurement.
    """

    gamma: float = 2.0
    d_max: float = 30.0
    ns: int = 81
    beta_bw: float = field(default_factory=_default_beta_bw)
    c: float = SPEED_OF_LIGHT
    q_levels: tuple = (0.001, 0.25, 0.5, 0.75, 0.999)
    constant_pd: float | None = None
    eps_miss: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0 or self.d_max <= 0:
            raise ValueError("gamma and d_max must be positive")
        if any(not 0.0 < q <= 1.0 for q in self.q_levels):
            raise ValueError("LOS probability levels must lie in (0, 1]")


@dataclass
class AnchorEvidence:
    """Association-marginalized likelihood of one anchor's measurements."""

    total: float
    assoc_terms: np.ndarray  # h(a) * g(a) for a = 0..M
    phys_total: float


def sigma_d(u, params: LhfParams):
    """Distance standard deviation from the Fisher information (meters)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0):
        raise ValueError("normalized amplitude must be positive")
    return params.c / (np.sqrt(8.0) * np.pi * params.beta_bw * u)


def sigma_u(u, params: LhfParams):
    """Scale of the amplitude measurement around ``u``."""
    u = np.asarray(u, dtype=float)
    return np.sqrt(0.5 + u ** 2 / (4.0 * params.ns))


def log_rician_pdf(z, u, s):
    """Log Rician density with non-centrality ``u`` and scale ``s``."""
    z = np.asarray(z, dtype=float)
    s2 = np.asarray(s, dtype=float) ** 2
    x = z * u / s2
    with np.errstate(divide="ignore"):
        return (np.log(z) - np.log(s2) - (z - u) ** 2 / (2.0 * s2) + np.log(i0e(x)))


def detection_prob(u, params: LhfParams):
    """Probability that a Rician amplitude with non-centrality ``u`` exceeds gamma.

    This is the first-order Marcum Q function Q1(u/s, gamma/s) with
    s = sigma_u(u), evaluated through the non-central chi-square tail.
    """
    if params.constant_pd is not None:
        return np.full(np.shape(u), params.constant_pd, dtype=float)[()]
    u = np.asarray(u, dtype=float)
    s2 = sigma_u(u, params) ** 2
    x, nc = params.gamma ** 2 / s2, u ** 2 / s2
    # the CDF complement is exact to ~1e-13 away from the far tail and much
    # cheaper than the stats front end
    pd = np.asarray(1.0 - chndtr(x, 2, nc))
    tail = pd < 1e-3
    if np.any(tail):
        pd[tail] = ncx2.sf(np.broadcast_to(x, pd.shape)[tail], 2, np.broadcast_to(nc, pd.shape)[tail])
    return pd[()]


class DetectionTable:
    """Tabulated log detection probability for fast per-particle lookup.

    Above ``u_max`` the detection probability is 1 to double precision for
    any sensible threshold.
    """

    def __init__(self, params: LhfParams, u_max: float = 60.0, step: float = 0.002):
        self.params = params
        self.grid = np.arange(0.0, u_max + step, step)
        if params.constant_pd is None:
            pd = detection_prob(self.grid, params)
        else:
            pd = np.full_like(self.grid, params.constant_pd)
        with np.errstate(divide="ignore"):
            self.log_pd = np.log(pd)
        self.tail = self.log_pd[-1]

    def __call__(self, u):
        return np.interp(u, self.grid, self.log_pd, right=self.tail)


def lhf_los_distance(z_d, p, anchor_position, u, params: LhfParams):
    """Gaussian density of a LOS distance measurement."""
    d = np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(anchor_position, dtype=float), axis=-1)
    s = sigma_d(u, params)
    return np.exp(-0.5 * ((z_d - d) / s) ** 2) / (np.sqrt(2.0 * np.pi) * s)


def lhf_los_amplitude(z_u, u, params: LhfParams, pd=None):
    """Rician density truncated at gamma and renormalized by the detection probability.

    ``pd`` may pass in an already computed ``detection_prob(u, params)``.
    """
    z_u = np.asarray(z_u, dtype=float)
    pd = detection_prob(u, params) if pd is None else pd
    dens = np.exp(log_rician_pdf(z_u, u, sigma_u(u, params))) / pd
    return np.where(z_u >= params.gamma, dens, 0.0)[()]


def lhf_nlos_distance(z_d, params: LhfParams):
    z_d = np.asarray(z_d, dtype=float)
    return np.where((z_d >= 0) & (z_d <= params.d_max), 1.0 / params.d_max, 0.0)[()]


def log_nlos_amplitude(z_u, params: LhfParams):
    """Log of the Rayleigh density (scale sqrt(1/2)) truncated at gamma."""
    z_u = np.asarray(z_u, dtype=float)
    return np.log(2.0 * z_u) - z_u ** 2 + params.gamma ** 2


def lhf_nlos_amplitude(z_u, params: LhfParams):
    z_u = np.asarray(z_u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        dens = np.exp(log_nlos_amplitude(z_u, params))
    return np.where(z_u >= params.gamma, dens, 0.0)[()]


def component_lr(z_d, z_u, p, anchor_position, u, params: LhfParams, pd=None):
    """Likelihood ratio of one component measurement being LOS versus clutter."""
    num_d = np.maximum(lhf_los_distance(z_d, p, anchor_position, u, params), DENSITY_FLOOR)
    num_u = np.maximum(lhf_los_amplitude(z_u, u, params, pd), DENSITY_FLOOR)
    den_d = np.maximum(lhf_nlos_distance(z_d, params), DENSITY_FLOOR)
    den_u = np.maximum(lhf_nlos_amplitude(z_u, params), DENSITY_FLOOR)
    return num_d * num_u / (den_d * den_u)


def log_feature_lr(z_f, mu, var):
    """Log of the product of Gaussian feature densities over the unit LOS density.

    ``mu`` and ``var`` have shape (..., F); ``z_f`` has shape (F,).
    """
    z_f = np.asarray(z_f, dtype=float)
    var = np.asarray(var, dtype=float)
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (z_f - mu) ** 2 / var, axis=-1)


def feature_lr(z_f, p, gp_models):
    """Feature likelihood ratio for the no-LOS association at position ``p``."""
    from .gpr import predict

    z_f = np.asarray(z_f, dtype=float)
    if gp_models is None or len(gp_models) != len(z_f):
        raise ValueError("need one GP model per feature")
    if len(z_f) == 0:
        return 1.0
    preds = [predict(m, p, include_noise=True) for m in gp_models]
    mu = np.array([float(m) for m, _ in preds])
    var = np.array([float(v) for _, v in preds])
    return float(np.exp(log_feature_lr(z_f, mu, var)))


def existence_prob(u, q, params: LhfParams):
    return detection_prob(u, params) * q


def association_prior(a: int, m_count: int, u, q, params: LhfParams):
    """Prior weight h of association ``a`` given ``m_count`` measurements."""
    if not 0 <= a <= m_count:
        raise ValueError(f"association {a} out of range for {m_count} measurements")
    pe = existence_prob(u, q, params)
    if a == 0:
        return 1.0 - pe
    return pe / m_count


def pda_marginal(measurements, z_f, p, anchor_position, u, q, gp_models, params: LhfParams,
                 feature_ratio: float | None = None) -> AnchorEvidence:
    """Sum over associations of h(a) * g(a) for one anchor.

    ``measurements`` is an (M, 2) array of ``(z_d, z_u)`` rows. The feature
    ratio is computed from ``gp_models`` unless passed in directly; an empty
    feature vector gives a ratio of 1.
    """
    z = np.asarray(measurements, dtype=float).reshape(-1, 2)
    m_count = len(z)
    if feature_ratio is None:
        feature_ratio = 1.0 if z_f is None or len(z_f) == 0 else feature_lr(z_f, p, gp_models)
    pd = float(detection_prob(u, params))
    pe = pd * q
    terms = np.empty(m_count + 1)
    terms[0] = (1.0 - pe) * feature_ratio
    phys0 = 1.0 - pe
    if m_count:
        lrs = component_lr(z[:, 0], z[:, 1], p, anchor_position, u, params, pd)
        terms[1:] = pe / m_count * lrs
        los_part = terms[1:].sum()
    else:
        los_part = pe * params.eps_miss
    return AnchorEvidence(float(terms[0] + los_part), terms, float(phys0 + los_part))


def log_anchor_evidence(z, log_feat, dist, u, q, log_pd, params: LhfParams):
    """Log association marginal for every particle of one anchor.

    z        (M, 2) measurements
    log_feat (I,) log feature ratio, or None for a ratio of 1
    dist     (I,) particle LOS distances
    u, q     (I,) particle amplitudes and LOS probabilities
    log_pd   (I,) log detection probabilities

    Returns ``(log_total, log_phys_total)``.
    """
    pe = np.exp(log_pd) * q
    with np.errstate(divide="ignore"):
        log_miss = np.log1p(-pe)
        log_pe = np.log(pe)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    m_count = len(z)
    if m_count:
        zd, zu = z[:, 0], z[:, 1]
        sd = sigma_d(u, params)[:, None]
        su = sigma_u(u, params)[:, None]
        log_ld = -0.5 * ((zd[None, :] - dist[:, None]) / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI
        log_lu = log_rician_pdf(zu[None, :], u[:, None], su) - log_pd[:, None]
        log_nl = -np.log(params.d_max) + log_nlos_amplitude(zu, params)
        log_lr = log_ld + log_lu - log_nl[None, :]
        log_los = log_pe - np.log(m_count) + logsumexp(log_lr, axis=1)
    elif params.eps_miss > 0:
        log_los = log_pe + np.log(params.eps_miss)
    else:
        log_los = np.full_like(pe, -np.inf)
    log_phys = np.logaddexp(log_miss, log_los)
    if log_feat is None:
        return log_phys, log_phys
    return np.logaddexp(log_miss + log_feat, log_los), log_phys
