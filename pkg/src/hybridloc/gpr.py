"""Gaussian process regression with a Matern-5/2 kernel on 2-D positions.

One :class:`GPModel` maps position to a single feature dimension. The
tracker evaluates many models for thousands of particles per step, so
:class:`FeatureMap` bundles the F models of one anchor and can optionally
serve predictions from a precomputed bilinear lookup table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

VAR_FLOOR = 1e-12
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class GPFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GPHyper:
    length_scale: float
    signal_var: float
    noise_var: float

    def __post_init__(self):
        if min(self.length_scale, self.signal_var, self.noise_var) <= 0:
            raise ValueError("GP hyperparameters must be strictly positive")


def matern52(r, hyper: GPHyper):
    """Matern-5/2 covariance at distance ``r``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    x = np.sqrt(5.0) * r / hyper.length_scale
    return hyper.signal_var * (1.0 + x + x * x / 3.0) * np.exp(-x)


@dataclass
class GPModel:
    train_positions: np.ndarray
    train_targets: np.ndarray
    hyper: GPHyper
    chol: np.ndarray
    alpha: np.ndarray
    prior_mean: float = 0.0
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return len(self.train_targets)


def build_model(positions, targets, hyper: GPHyper, prior_mean: float = 0.0) -> GPModel:
    """Factorize K + noise*I with jitter escalation and solve for the weights."""
    X = np.atleast_2d(np.asarray(positions, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(X) != len(y):
        raise ValueError("positions and targets differ in length")
    K = matern52(cdist(X, X), hyper)
    K[np.diag_indices_from(K)] += hyper.noise_var
    for jitter in _JITTERS:
        try:
            L = cholesky(K + jitter * np.eye(len(y)), lower=True, check_finite=False)
        except LinAlgError:
            continue
        alpha = cho_solve((L, True), y - prior_mean, check_finite=False)
        return GPModel(X, y, hyper, L, alpha, float(prior_mean), jitter)
    raise GPFitError("covariance matrix is not positive definite after jitter escalation")


def log_marginal_likelihood(model: GPModel) -> float:
    y = model.train_targets - model.prior_mean
    n = len(y)
    return float(-0.5 * y @ model.alpha - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * n * np.log(2.0 * np.pi))


def predict(model: GPModel, p, include_noise: bool = False):
    """Predictive mean and variance at one point or an (K, 2) array of points.

    The variance is that of the latent function unless ``include_noise``
    adds the observation noise, as needed for the likelihood of a new
    feature measurement.
    """
    P = np.asarray(p, dtype=float)
    single = P.ndim == 1
    P = np.atleast_2d(P)
    Ks = matern52(cdist(P, model.train_positions), model.hyper)
    mu = model.prior_mean + Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = np.maximum(model.hyper.signal_var - np.sum(v * v, axis=0), VAR_FLOOR)
    if include_noise:
        var = var + model.hyper.noise_var
    if single:
        return float(mu[0]), float(var[0])
    return mu, var


@dataclass(frozen=True)
class HyperSearch:
    """Log-spaced grid plus coordinate-descent refinement of the LML.

    Signal and noise variance candidates are relative to the target
    variance; length scales are in meters. For large training sets the grid
    stage runs on an evenly strided subset of at most ``max_search_points``
    points and only the refinement uses the full set.
    """

    length_scales: tuple = tuple(np.geomspace(0.25, 8.0, 8))
    signal_rel: tuple = tuple(np.geomspace(0.05, 20.0, 7))
    noise_rel: tuple = tuple(np.geomspace(1e-4, 1.0, 7))
    refine_steps: int = 20
    prior_mean: float = 0.0
    max_search_points: int = 500


def fit(positions, targets, search: HyperSearch | None = None) -> GPModel:
    """Select hyperparameters by maximizing the log marginal likelihood."""
    search = search or HyperSearch()
    X = np.atleast_2d(np.asarray(positions, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if len(X) < 2:
        raise ValueError("need at least two training points")
    scale = max(float(np.mean((y - search.prior_mean) ** 2)), 1e-12)

    def make_lml(idx):
        D = cdist(X[idx], X[idx])
        eye = np.eye(len(idx))
        r = y[idx] - search.prior_mean

        def lml(log_theta):
            ell, sf, sn = np.exp(log_theta)
            K = matern52(D, GPHyper(ell, sf, sn)) + sn * eye
            try:
                L = cholesky(K, lower=True, check_finite=False)
            except LinAlgError:
                return -np.inf
            a = cho_solve((L, True), r, check_finite=False)
            return -0.5 * r @ a - np.sum(np.log(np.diag(L)))
        return lml

    n = len(y)
    sub = (np.unique(np.linspace(0, n - 1, search.max_search_points).astype(int))
           if n > search.max_search_points else np.arange(n))
    lml = make_lml(sub)
    best, best_val = None, -np.inf
    for ell in search.length_scales:
        for sf in search.signal_rel:
            for sn in search.noise_rel:
                theta = np.log([ell, sf * scale, sn * scale])
                val = lml(theta)
                if val > best_val:
                    best, best_val = theta, val
    if best is None:
        raise GPFitError("no hyperparameter candidate gave a positive-definite system")
    if len(sub) < n:
        lml = make_lml(np.arange(n))
        best_val = lml(best)

    # refinement stays within the grid box widened by a factor 2 on each side;
    # unbounded, near-constant targets drive the length scale off to infinity
    lo = np.log([min(search.length_scales), min(search.signal_rel) * scale,
                 min(search.noise_rel) * scale]) - np.log(2.0)
    hi = np.log([max(search.length_scales), max(search.signal_rel) * scale,
                 max(search.noise_rel) * scale]) + np.log(2.0)
    step = np.full(3, np.log(2.0))
    for _ in range(search.refine_steps):
        improved = False
        for k in range(3):
            for sign in (1.0, -1.0):
                cand = best.copy()
                cand[k] = np.clip(cand[k] + sign * step[k], lo[k], hi[k])
                if cand[k] == best[k]:
                    continue
                val = lml(cand)
                if val > best_val + 1e-12:
                    best, best_val, improved = cand, val, True
                    break
        if not improved:
            step *= 0.5
            if np.all(step < 1e-3):
                break
    hyper = GPHyper(*map(float, np.exp(best)))
    return build_model(X, y, hyper, search.prior_mean)


def _checksum(model: GPModel) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(model.train_positions, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(model.train_targets, dtype="<f8").tobytes())
    h.update(np.array([model.hyper.length_scale, model.hyper.signal_var,
                       model.hyper.noise_var, model.prior_mean], dtype="<f8").tobytes())
    return h.hexdigest()


def model_to_dict(model: GPModel) -> dict:
    return {
        "hyper": {"length_scale": model.hyper.length_scale,
                  "signal_var": model.hyper.signal_var,
                  "noise_var": model.hyper.noise_var},
        "prior_mean": model.prior_mean,
        "train_positions": model.train_positions.tolist(),
        "train_targets": model.train_targets.tolist(),
        "alpha": model.alpha.tolist(),
        "checksum": _checksum(model),
    }


def model_from_dict(doc: dict) -> GPModel:
    """Rebuild a model, recomputing the factorization and verifying it."""
    model = build_model(doc["train_positions"], doc["train_targets"],
                        GPHyper(**doc["hyper"]), doc.get("prior_mean", 0.0))
    if _checksum(model) != doc["checksum"]:
        raise ValueError("GP model checksum mismatch")
    stored = np.asarray(doc["alpha"], dtype=float)
    if not np.allclose(stored, model.alpha, rtol=1e-8, atol=1e-10):
        raise ValueError("recomputed GP weights differ from the stored ones")
    return model


def save_models(models, path) -> None:
    """Persist a nested list ``models[j][i]`` as JSON."""
    with open(path, "w") as fh:
        json.dump([[model_to_dict(m) for m in row] for row in models], fh)


def load_models(path):
    with open(path) as fh:
        return [[model_from_dict(d) for d in row] for row in json.load(fh)]


@dataclass
class FeatureMap:
    """The F per-feature GP models of one anchor.

    With ``lookup_spacing`` set, means and noisy variances are tabulated on
    a regular grid over ``bounds`` and bilinearly interpolated; positions
    outside the table are clamped to its edge.
    """

    models: list
    bounds: tuple | None = None
    lookup_spacing: float | None = None
    _table: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lookup_spacing is not None:
            if self.bounds is None:
                raise ValueError("lookup table needs bounds")
            self._build_table()

    @property
    def n_features(self) -> int:
        return len(self.models)

    def _build_table(self):
        (x0, x1), (y0, y1) = self.bounds
        h = self.lookup_spacing
        xs = np.arange(x0, x1 + 0.5 * h, h)
        ys = np.arange(y0, y1 + 0.5 * h, h)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        mu = np.empty((len(pts), self.n_features))
        var = np.empty_like(mu)
        for i, m in enumerate(self.models):
            for lo in range(0, len(pts), 4096):
                mu[lo:lo + 4096, i], var[lo:lo + 4096, i] = predict(m, pts[lo:lo + 4096],
                                                                    include_noise=True)
        shape = (len(xs), len(ys), self.n_features)
        self._table = (xs, ys, mu.reshape(shape), var.reshape(shape))

    def predict(self, positions):
        """(mu, var) arrays of shape (K, F); variance includes observation noise."""
        P = np.atleast_2d(np.asarray(positions, dtype=float))
        if self._table is None:
            out = [predict(m, P, include_noise=True) for m in self.models]
            mu = np.column_stack([o[0] for o in out]) if out else np.zeros((len(P), 0))
            var = np.column_stack([o[1] for o in out]) if out else np.zeros((len(P), 0))
            return mu, var
        xs, ys, mu_t, var_t = self._table
        h = self.lookup_spacing
        fx = np.clip((P[:, 0] - xs[0]) / h, 0.0, len(xs) - 1.000001)
        fy = np.clip((P[:, 1] - ys[0]) / h, 0.0, len(ys) - 1.000001)
        ix, iy = fx.astype(int), fy.astype(int)
        tx, ty = (fx - ix)[:, None], (fy - iy)[:, None]

        def interp(t):
            return ((1 - tx) * (1 - ty) * t[ix, iy] + tx * (1 - ty) * t[ix + 1, iy]
                    + (1 - tx) * ty * t[ix, iy + 1] + tx * ty * t[ix + 1, iy + 1])

        return interp(mu_t), interp(var_t)
