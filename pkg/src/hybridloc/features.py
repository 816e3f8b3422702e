"""Low-dimensional features of signal magnitudes.

Two encoders share one interface: a small dense autoencoder trained with
Adam on the reconstruction MSE, and a deterministic PCA projection. Both
consume ``|r|`` and emit F raw latents, which a :class:`FeatureNormalizer`
maps into [0, 1] using the extremes seen on the pre-training set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal import BasebandSignal

HIDDEN = (32, 16)
INPUT_TRANSFORMS = ("none", "log1p")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Encoder:
    kind: str  # "ae" or "pca"
    input_dim: int
    latent_dim: int
    input_mean: np.ndarray
    input_scale: np.ndarray
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    loss_history: list = field(default_factory=list, repr=False)
    # fixed elementwise compression of |r| applied before everything else
    input_transform: str = "none"

    def forward(self, magnitudes) -> np.ndarray:
        X = np.atleast_2d(np.asarray(magnitudes, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValueError(f"expected {self.input_dim} samples, got {X.shape[1]}")
        h = (transform_input(X, self.input_transform) - self.input_mean) / self.input_scale
        if self.kind == "pca":
            return h @ self.weights[0]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if k < len(self.weights) - 1:
                h = np.tanh(h)
        return h


def transform_input(magnitudes, kind: str) -> np.ndarray:
    """``log1p`` compresses the dynamic range so that near-anchor LOS peaks do
    not dominate the weak multipath structure."""
    if kind == "none":
        return magnitudes
    if kind == "log1p":
        return np.log1p(magnitudes)
    raise ValueError(f"unknown input transform {kind!r}")


def encode(encoder: Encoder, signal) -> np.ndarray:
    """Raw latent of one signal (or a batch of magnitude rows)."""
    if isinstance(signal, BasebandSignal):
        return encoder.forward(np.abs(signal.samples))[0]
    x = np.asarray(signal)
    mags = np.abs(x) if np.iscomplexobj(x) else x
    out = encoder.forward(mags)
    return out[0] if mags.ndim == 1 else out


def pca_features(magnitudes, f: int, input_transform: str = "none") -> Encoder:
    """Projection onto the top-``f`` principal directions of the sample covariance.

    Each direction's largest-magnitude loading is made positive.
    """
    X = transform_input(np.asarray(magnitudes, dtype=float), input_transform)
    if len(X) < f:
        raise ValueError("need at least f samples")
    mean = X.mean(axis=0)
    C = np.cov(X - mean, rowvar=False, bias=True) if len(X) > 1 else np.zeros((X.shape[1],) * 2)
    evals, evecs = np.linalg.eigh(np.atleast_2d(C))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-12 * X.shape[1]
    if np.sum(evals > tol) < f:
        raise ValueError(f"data rank below requested latent dimension {f}")
    V = evecs[:, :f].copy()
    idx = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[idx, np.arange(f)])
    enc = Encoder("pca", X.shape[1], f, mean, np.ones(X.shape[1]), [V], [],
                  input_transform=input_transform)
    enc.explained_variance = evals[:f]
    return enc


def pca_reconstruct(encoder: Encoder, magnitudes) -> np.ndarray:
    """Reconstruction in the (possibly transformed) input space."""
    z = encoder.forward(magnitudes)
    return z @ encoder.weights[0].T + encoder.input_mean


def _glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, (n_in, n_out))


def pretrain_autoencoder(magnitudes, f: int = 4, epochs: int = 40, learning_rate: float = 2e-3,
                         seed: int = 0, batch_size: int = 64,
                         input_transform: str = "none") -> Encoder:
    """Train a dense autoencoder N_s -> 32 -> 16 -> f -> 16 -> 32 -> N_s.

    Hidden layers use tanh, latent and output layers are linear. Returns
    the encoder half; ``loss_history`` holds the full-dataset MSE before
    training and after each epoch.
    """
    X = transform_input(np.asarray(magnitudes, dtype=float), input_transform)
    if len(X) < 10 * f:
        raise ValueError("need at least 10*f training samples")
    rng = np.random.default_rng(seed)
    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), 1e-8)
    Xs = (X - mean) / scale
    dims = [X.shape[1], *HIDDEN, f, *HIDDEN[::-1], X.shape[1]]
    W = [_glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    b = [np.zeros(n) for n in dims[1:]]
    n_layers = len(W)
    enc_layers = len(HIDDEN) + 1
    linear = {enc_layers - 1, n_layers - 1}

    def forward(x):
        acts = [x]
        for k in range(n_layers):
            z = acts[-1] @ W[k] + b[k]
            acts.append(z if k in linear else np.tanh(z))
        return acts

    def full_loss():
        return float(np.mean((forward(Xs)[-1] - Xs) ** 2))

    m_w = [np.zeros_like(w) for w in W]
    v_w = [np.zeros_like(w) for w in W]
    m_b = [np.zeros_like(x) for x in b]
    v_b = [np.zeros_like(x) for x in b]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    history = [full_loss()]
    for _ in range(epochs):
        perm = rng.permutation(len(Xs))
        for lo in range(0, len(Xs), batch_size):
            xb = Xs[perm[lo:lo + batch_size]]
            acts = forward(xb)
            grad = 2.0 * (acts[-1] - xb) / xb.size
            t += 1
            for k in range(n_layers - 1, -1, -1):
                if k not in linear:
                    grad = grad * (1.0 - acts[k + 1] ** 2)
                gw = acts[k].T @ grad
                gb = grad.sum(axis=0)
                grad = grad @ W[k].T
                for p, g, m, v in ((W[k], gw, m_w[k], v_w[k]), (b[k], gb, m_b[k], v_b[k])):
                    m *= beta1
                    m += (1 - beta1) * g
                    v *= beta2
                    v += (1 - beta2) * g * g
                    mhat = m / (1 - beta1 ** t)
                    vhat = v / (1 - beta2 ** t)
                    p -= learning_rate * mhat / (np.sqrt(vhat) + eps)
        loss = full_loss()
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"autoencoder loss became {loss} after {len(history)} epochs")
        history.append(loss)
    return Encoder("ae", X.shape[1], f, mean, scale,
                   [w.copy() for w in W[:enc_layers]], [x.copy() for x in b[:enc_layers]],
                   history, input_transform)


@dataclass(frozen=True)
class FeatureNormalizer:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.hi <= self.lo):
            raise ValueError("every latent dimension needs a positive range")


def fit_normalizer(latents) -> FeatureNormalizer:
    L = np.atleast_2d(np.asarray(latents, dtype=float))
    lo, hi = L.min(axis=0), L.max(axis=0)
    if np.any(hi <= lo):
        raise ValueError("zero latent range in at least one dimension")
    return FeatureNormalizer(lo, hi)


def normalize(normalizer: FeatureNormalizer, raw) -> np.ndarray:
    """Affine map to [0, 1]; out-of-range inputs are clamped into [0, 1]."""
    z = (np.asarray(raw, dtype=float) - normalizer.lo) / (normalizer.hi - normalizer.lo)
    z = np.clip(z, -0.05, 1.05)
    return np.clip(z, 0.0, 1.0)


# Flat text persistence: a header of "key value" lines followed by
# "array <name> <rows> <cols>" blocks of row-major values at full precision.

def save_encoder(encoder: Encoder, normalizer: FeatureNormalizer | None, path) -> None:
    arrays = [("input_mean", encoder.input_mean), ("input_scale", encoder.input_scale)]
    arrays += [(f"W{k}", w) for k, w in enumerate(encoder.weights)]
    arrays += [(f"b{k}", x) for k, x in enumerate(encoder.biases)]
    if normalizer is not None:
        arrays += [("norm_lo", normalizer.lo), ("norm_hi", normalizer.hi)]
    with open(path, "w") as fh:
        fh.write("# hybridloc encoder v1\n")
        fh.write(f"kind {encoder.kind}\ninput_dim {encoder.input_dim}\n"
                 f"latent_dim {encoder.latent_dim}\ninput_transform {encoder.input_transform}\n")
        for name, arr in arrays:
            a = np.atleast_2d(np.asarray(arr, dtype=float))
            if np.ndim(arr) == 1:
                a = a.reshape(1, -1)
            fh.write(f"array {name} {a.shape[0]} {a.shape[1]}\n")
            for row in a:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_encoder(path):
    """Inverse of :func:`save_encoder`; returns ``(encoder, normalizer or None)``."""
    meta, arrays = {}, {}
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] == "array":
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            block = [list(map(float, lines[i + 1 + r].split())) for r in range(rows)]
            arrays[name] = np.array(block).reshape(rows, cols)
            i += 1 + rows
        else:
            meta[parts[0]] = parts[1]
            i += 1
    n_w = sum(1 for k in arrays if k.startswith("W"))
    n_b = sum(1 for k in arrays if k.startswith("b"))
    enc = Encoder(meta["kind"], int(meta["input_dim"]), int(meta["latent_dim"]),
                  arrays["input_mean"].ravel(), arrays["input_scale"].ravel(),
                  [arrays[f"W{k}"] for k in range(n_w)],
                  [arrays[f"b{k}"].ravel() for k in range(n_b)],
                  input_transform=meta.get("input_transform", "none"))
    norm = None
    if "norm_lo" in arrays:
        norm = FeatureNormalizer(arrays["norm_lo"].ravel(), arrays["norm_hi"].ravel())
    return enc, norm
