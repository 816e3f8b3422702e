"""Experiment orchestration: datasets, training, Monte-Carlo tracking, bounds.

Every random draw derives from ``SeedSequence([seed, stream, index])`` so
results do not depend on how realizations are spread over workers.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import bounds as bounds_mod
from .ceda import as_array, estimate_components
from .features import (encode, fit_normalizer, load_encoder, normalize, pca_features,
                       pretrain_autoencoder, save_encoder)
from .gpr import FeatureMap, HyperSearch, fit, load_models, save_models
from .likelihood import LhfParams
from .scenario import DEFAULT_SCENARIO_PATH, Scenario, load_scenario
from .signal import rms_bandwidth, rrc_pulse, synthesize
from .tracker import TrackDivergedError, TrackerConfig, track

log = logging.getLogger(__name__)

# seed streams
_PRETRAIN, _FULL, _SPARSE, _REALIZATION = 1, 2, 3, 4


@dataclass
class SignalConfig:
    roll_off: float = 0.6
    bw3db: float = 500e6
    ts: float = 1.25e-9
    ns: int = 81
    noise_std: float = 1.0
    half_len: int = 40
    d_max: float = 30.0


@dataclass
class CedaConfig:
    gamma: float = 2.0
    oversample: int = 8
    max_components: int = 15
    estimate_noise: bool = False


@dataclass
class FeatureConfig:
    enabled: bool = True
    kind: str = "pca"
    latent_dim: int = 4
    input_transform: str = "log1p"
    epochs: int = 40
    learning_rate: float = 2e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class GprConfig:
    dataset: str = "full"  # "full", "sparse" or a path to an .npz file
    lookup_spacing: float | None = 0.2
    lookup_margin: float = 1.5
    prior_mean: float = 0.0


@dataclass
class EvalConfig:
    n_realizations: int = 20
    seed: int = 0
    n_steps: int | None = None
    los_only: bool = False
    loss_threshold: float = 1.0


def _dc_from_dict(cls, doc):
    doc = doc or {}
    names = {f.name for f in fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class ExperimentConfig:
    scenario_path: str = str(DEFAULT_SCENARIO_PATH)
    signal: SignalConfig = field(default_factory=SignalConfig)
    ceda: CedaConfig = field(default_factory=CedaConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gpr: GprConfig = field(default_factory=GprConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    q_levels: tuple = (0.001, 0.25, 0.5, 0.75, 0.999)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        doc = dict(doc or {})
        path = doc.pop("scenario", str(DEFAULT_SCENARIO_PATH))
        if base_dir is not None and not os.path.isabs(path):
            path = str(Path(base_dir) / path)
        tr = dict(doc.pop("tracker", {}) or {})
        q_levels = tuple(doc.pop("q_levels", cls.q_levels))
        tr["q_levels"] = q_levels
        cfg = cls(
            scenario_path=path,
            signal=_dc_from_dict(SignalConfig, doc.pop("signal", None)),
            ceda=_dc_from_dict(CedaConfig, doc.pop("ceda", None)),
            features=_dc_from_dict(FeatureConfig, doc.pop("features", None)),
            gpr=_dc_from_dict(GprConfig, doc.pop("gpr", None)),
            tracker=_dc_from_dict(TrackerConfig, tr),
            evaluation=_dc_from_dict(EvalConfig, doc.pop("evaluation", None)),
            q_levels=q_levels,
        )
        if doc:
            raise ValueError(f"unknown config sections: {sorted(doc)}")
        if not Path(cfg.scenario_path).exists():
            raise FileNotFoundError(cfg.scenario_path)
        return cfg

    def to_dict(self) -> dict:
        tr = asdict(self.tracker)
        tr.pop("q_levels")
        tr["q_transition"] = np.asarray(self.tracker.q_transition).tolist()
        return {
            "scenario": self.scenario_path,
            "q_levels": list(self.q_levels),
            "signal": asdict(self.signal),
            "ceda": asdict(self.ceda),
            "features": asdict(self.features),
            "gpr": asdict(self.gpr),
            "tracker": tr,
            "evaluation": asdict(self.evaluation),
        }

    def scenario(self) -> Scenario:
        sc = load_scenario(self.scenario_path)
        return sc.without_obstacles() if self.evaluation.los_only else sc

    def pulse(self):
        s = self.signal
        return rrc_pulse(s.roll_off, s.bw3db, s.ts, s.half_len)

    def lhf_params(self) -> LhfParams:
        return LhfParams(gamma=self.ceda.gamma, d_max=self.signal.d_max, ns=self.signal.ns,
                         beta_bw=rms_bandwidth(self.pulse()), q_levels=tuple(self.q_levels))


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(yaml.safe_load(fh), base_dir=Path(path).parent)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


class Simulator:
    """Synthetic received signals for every anchor at a given agent position."""

    def __init__(self, scenario: Scenario, signal: SignalConfig):
        self.scenario = scenario
        self.cfg = signal
        self.pulse = rrc_pulse(signal.roll_off, signal.bw3db, signal.ts, signal.half_len)

    def components(self, p, anchor):
        # components beyond the distance range are not observable
        return [c for c in self.scenario.components(p, anchor) if c.distance <= self.cfg.d_max]

    def signals(self, p, rng):
        return [synthesize(self.components(p, a), self.cfg.ns, self.cfg.ts, self.cfg.noise_std,
                           rng, self.pulse) for a in self.scenario.anchors]

    def magnitudes(self, positions, anchor, rng) -> np.ndarray:
        out = np.empty((len(positions), self.cfg.ns))
        for k, p in enumerate(positions):
            s = synthesize(self.components(p, anchor), self.cfg.ns, self.cfg.ts,
                           self.cfg.noise_std, rng, self.pulse)
            out[k] = np.abs(s.samples)
        return out


@dataclass
class TrainedModels:
    encoders: list  # per anchor, or empty when features are disabled
    normalizers: list
    gp_models: list  # gp_models[j][i]

    def feature_maps(self, bounds=None, lookup_spacing=None):
        if not self.gp_models:
            return None
        return [FeatureMap(row, bounds, lookup_spacing) for row in self.gp_models]


class Frontend:
    """CEDA plus feature extraction for one time step."""

    def __init__(self, cfg: ExperimentConfig, models: TrainedModels | None):
        self.cfg = cfg
        self.pulse = cfg.pulse()
        self.models = models

    def process(self, signals):
        c = self.cfg.ceda
        meas, feats = [], []
        for j, s in enumerate(signals):
            m = estimate_components(s, self.pulse, c.gamma, c.max_components, c.oversample,
                                    self.cfg.signal.d_max, c.estimate_noise)
            meas.append(as_array(m))
            if self.models is not None and self.models.encoders:
                raw = encode(self.models.encoders[j], s)
                feats.append(normalize(self.models.normalizers[j], raw))
            else:
                feats.append(None)
        return meas, feats


def _rng(seed, stream, index=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


def away_from_anchors(positions, scenario: Scenario, min_dist: float = 1e-6) -> np.ndarray:
    """Drop grid points that coincide with an anchor, where no signal is defined."""
    anchors = np.array([a.p for a in scenario.anchors])
    d = np.linalg.norm(positions[:, None, :] - anchors[None], axis=2)
    return positions[np.all(d > min_dist, axis=1)]


def generate_datasets(cfg: ExperimentConfig, out_dir, seed: int = 0) -> dict:
    """Write the unlabeled pre-training set and the labeled full/sparse sets."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sc = cfg.scenario()
    sim = Simulator(sc, cfg.signal)
    pre = away_from_anchors(sc.pretrain_grid(), sc)
    full = away_from_anchors(sc.full_grid(), sc)
    arrays = {"pretrain_positions": pre, "full_positions": full}
    for j, a in enumerate(sc.anchors):
        arrays[f"pretrain_mag_{j}"] = sim.magnitudes(pre, a, _rng(seed, _PRETRAIN, j))
        arrays[f"full_mag_{j}"] = sim.magnitudes(full, a, _rng(seed, _FULL, j))
        sparse = away_from_anchors(sc.sparse_grid(a), sc)
        arrays[f"sparse_positions_{j}"] = sparse
        arrays[f"sparse_mag_{j}"] = sim.magnitudes(sparse, a, _rng(seed, _SPARSE, j))
    path = out_dir / "datasets.npz"
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise OSError(f"cannot write datasets to {path}: {exc}") from exc
    return arrays


def load_datasets(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def labeled_set(cfg: ExperimentConfig, data: dict, j: int):
    sel = cfg.gpr.dataset
    if sel == "full":
        return data["full_positions"], data[f"full_mag_{j}"]
    if sel == "sparse":
        return data[f"sparse_positions_{j}"], data[f"sparse_mag_{j}"]
    with np.load(sel) as custom:
        return custom[f"positions_{j}"], custom[f"mag_{j}"]


def train_models(cfg: ExperimentConfig, data: dict, out_dir=None) -> TrainedModels:
    """Fit per-anchor encoders and normalizers and the J*F GP models."""
    fc = cfg.features
    if not fc.enabled:
        return TrainedModels([], [], [])
    J = sum(1 for k in data if k.startswith("pretrain_mag_"))
    encoders, normalizers, gps = [], [], []
    search = HyperSearch(prior_mean=cfg.gpr.prior_mean)
    for j in range(J):
        mags = data[f"pretrain_mag_{j}"]
        if fc.kind == "pca":
            enc = pca_features(mags, fc.latent_dim, fc.input_transform)
        elif fc.kind == "ae":
            enc = pretrain_autoencoder(mags, fc.latent_dim, fc.epochs, fc.learning_rate,
                                       fc.seed + j, fc.batch_size, fc.input_transform)
        else:
            raise ValueError(f"unknown encoder kind {fc.kind!r}")
        norm = fit_normalizer(encode(enc, mags))
        pos, lab_mags = labeled_set(cfg, data, j)
        z = normalize(norm, encode(enc, lab_mags))
        gps.append([fit(pos, z[:, i], search) for i in range(fc.latent_dim)])
        encoders.append(enc)
        normalizers.append(norm)
        log.info("anchor %d: trained %s encoder and %d GP models on %d points",
                 j + 1, fc.kind, fc.latent_dim, len(pos))
    models = TrainedModels(encoders, normalizers, gps)
    if out_dir is not None:
        save_trained(models, out_dir)
    return models


def save_trained(models: TrainedModels, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for j, (enc, norm) in enumerate(zip(models.encoders, models.normalizers)):
        save_encoder(enc, norm, out_dir / f"encoder_{j + 1}.txt")
    save_models(models.gp_models, out_dir / "gp_models.json")


def load_trained(model_dir) -> TrainedModels:
    model_dir = Path(model_dir)
    gp_path = model_dir / "gp_models.json"
    if not gp_path.exists():
        return TrainedModels([], [], [])
    gps = load_models(gp_path)
    encoders, norms = [], []
    for j in range(len(gps)):
        enc, norm = load_encoder(model_dir / f"encoder_{j + 1}.txt")
        encoders.append(enc)
        norms.append(norm)
    return TrainedModels(encoders, norms, gps)


def lookup_bounds(cfg: ExperimentConfig, scenario: Scenario):
    m = cfg.gpr.lookup_margin
    (x0, x1), (y0, y1) = scenario.grid_bounds
    return ((x0 - m, x1 + m), (y0 - m, y1 + m))


@dataclass
class RealizationResult:
    realization: int
    seed: int
    errors: np.ndarray
    x: np.ndarray
    u: np.ndarray
    q: np.ndarray
    ess: np.ndarray
    lost: bool
    failed: bool = False
    message: str = ""


def truth_arrays(scenario: Scenario, n_steps=None):
    """Trajectory, LOS visibility and true LOS amplitudes, (N, ...) each."""
    traj = scenario.trajectory()
    N = len(traj) if n_steps is None else min(n_steps, len(traj))
    pos = traj.positions[:N]
    vis = scenario.visibility(pos)
    anchors = np.array([a.p for a in scenario.anchors])
    dist = np.linalg.norm(pos[:, None, :] - anchors[None], axis=2)
    amps = scenario.amp_model.amplitude(dist)
    return traj, pos, vis, amps


class RealizationRunner:
    """Holds read-only models and runs single realizations."""

    def __init__(self, cfg: ExperimentConfig, models: TrainedModels | None):
        self.cfg = cfg
        self.scenario = cfg.scenario()
        self.sim = Simulator(self.scenario, cfg.signal)
        use_features = models is not None and bool(models.gp_models)
        self.frontend = Frontend(cfg, models if use_features else None)
        self.feature_maps = (models.feature_maps(lookup_bounds(cfg, self.scenario),
                                                 cfg.gpr.lookup_spacing)
                             if use_features else None)
        self.params = cfg.lhf_params()
        self.anchor_positions = np.array([a.p for a in self.scenario.anchors])
        self.traj, self.truth, self.visibility, self.amplitudes = truth_arrays(
            self.scenario, cfg.evaluation.n_steps)

    def streams(self, rng):
        return [self.frontend.process(self.sim.signals(p, rng)) for p in self.truth]

    def run(self, realization: int, seed: int, tracker_cfg: TrackerConfig | None = None,
            streams=None) -> RealizationResult:
        tcfg = replace(tracker_cfg or self.cfg.tracker,
                       loss_threshold=self.cfg.evaluation.loss_threshold)
        sim_rng = _rng(seed, _REALIZATION, 2 * realization)
        trk_rng = _rng(seed, _REALIZATION, 2 * realization + 1)
        if streams is None:
            streams = self.streams(sim_rng)
        try:
            res = track(streams, self.anchor_positions, self.feature_maps, self.params, tcfg,
                        trk_rng, self.traj.states[0], truth=self.truth)
        except TrackDivergedError as exc:
            N = len(self.truth)
            nan = np.full(N, np.nan)
            J = len(self.anchor_positions)
            return RealizationResult(realization, seed, nan, np.full((N, 4), np.nan),
                                     np.full((N, J), np.nan), np.full((N, J), np.nan), nan,
                                     True, True, str(exc))
        return RealizationResult(realization, seed, res.errors, res.x, res.u, res.q, res.ess,
                                 res.lost)


_WORKER = {}


def _worker_init(cfg_dict, base_dir, model_dir):
    cfg = ExperimentConfig.from_dict(cfg_dict, base_dir)
    models = load_trained(model_dir) if model_dir else None
    _WORKER["runner"] = RealizationRunner(cfg, models)


def _worker_run(args):
    realization, seed = args
    return _WORKER["runner"].run(realization, seed)


def run_realizations(cfg: ExperimentConfig, models: TrainedModels | None = None, seed: int = 0,
                     jobs: int = 1, model_dir=None, realizations=None):
    """Run the configured Monte-Carlo realizations, serially or in a process pool."""
    idx = list(range(cfg.evaluation.n_realizations)) if realizations is None else list(realizations)
    if jobs <= 1:
        runner = RealizationRunner(cfg, models)
        return [runner.run(r, seed) for r in idx]
    if models is not None and model_dir is None:
        raise ValueError("parallel runs load models from model_dir")
    with ProcessPoolExecutor(jobs, initializer=_worker_init,
                             initargs=(cfg.to_dict(), None, model_dir)) as pool:
        return list(pool.map(_worker_run, [(r, seed) for r in idx]))


@dataclass
class Aggregate:
    """Sufficient statistics for RMSE(n); merging two aggregates is exact."""

    sq_sum: np.ndarray
    count: np.ndarray
    errors: list

    @classmethod
    def from_results(cls, results) -> "Aggregate":
        ok = [r for r in results if not r.failed]
        N = len(results[0].errors) if results else 0
        sq = np.zeros(N)
        cnt = np.zeros(N)
        errs = []
        for r in ok:
            sq += r.errors ** 2
            cnt += 1
            errs.append(r.errors)
        return cls(sq, cnt, errs)

    def merge(self, other: "Aggregate") -> "Aggregate":
        return Aggregate(self.sq_sum + other.sq_sum, self.count + other.count,
                         self.errors + other.errors)

    @property
    def rmse(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.sqrt(self.sq_sum / self.count)

    def cumulative_frequency(self):
        e = np.sort(np.concatenate(self.errors)) if self.errors else np.array([])
        return e, np.arange(1, len(e) + 1) / max(len(e), 1)


def compute_bounds(cfg: ExperimentConfig, scenario: Scenario | None = None):
    """SP-CRLB, P-CRLB and P-CRLB-LOS along the configured trajectory."""
    sc = scenario or cfg.scenario()
    _, pos, vis, amps = truth_arrays(sc, cfg.evaluation.n_steps)
    params = cfg.lhf_params()
    anchors = np.array([a.p for a in sc.anchors])
    t = cfg.tracker
    prior = (t.init_pos_std, t.init_pos_std, t.init_vel_std, t.init_vel_std)
    pc = bounds_mod.pcrlb(pos, anchors, vis, amps, params, t.sigma_a, t.dt, prior)
    pc_los = bounds_mod.pcrlb(pos, anchors, vis, amps, params, t.sigma_a, t.dt, prior,
                              los_always=True)
    sp = np.full(len(pos), np.nan)
    for n, p in enumerate(pos):
        try:
            sp[n] = bounds_mod.sp_crlb(p, anchors[vis[n]], amps[n][vis[n]], params)
        except bounds_mod.GeometryError as exc:
            log.debug("step %d: %s", n, exc)
    return {"sp_crlb": sp, "pcrlb": pc, "pcrlb_los": pc_los}


def _fmt(v) -> str:
    return repr(float(v))


def write_bounds_csv(path, b) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "sp_crlb", "pcrlb", "pcrlb_los"])
        for n in range(len(b["pcrlb"])):
            w.writerow([n, _fmt(b["sp_crlb"][n]), _fmt(b["pcrlb"][n]), _fmt(b["pcrlb_los"][n])])


def write_run_artifacts(out_dir, cfg: ExperimentConfig, results, seed: int) -> Aggregate:
    """Estimates, RMSE, cumulative error frequency, summary, bounds, config, seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    J = results[0].u.shape[1] if results else 0
    with open(out_dir / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["realization", "seed", "n", "x", "y", "vx", "vy"]
                   + [f"u_{j + 1}" for j in range(J)] + [f"q_{j + 1}" for j in range(J)]
                   + ["ess", "error"])
        for r in results:
            for n in range(len(r.errors)):
                w.writerow([r.realization, r.seed, n] + [_fmt(v) for v in r.x[n]]
                           + [_fmt(v) for v in r.u[n]] + [_fmt(v) for v in r.q[n]]
                           + [_fmt(r.ess[n]), _fmt(r.errors[n])])
    agg = Aggregate.from_results(results)
    with open(out_dir / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "rmse", "n_realizations", "seed"])
        for n, v in enumerate(agg.rmse):
            w.writerow([n, _fmt(v), int(agg.count[n]), seed])
    e, f = agg.cumulative_frequency()
    with open(out_dir / "error_cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error", "cumulative_frequency", "seed"])
        for a, b in zip(e, f):
            w.writerow([_fmt(a), _fmt(b), seed])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["realization", "seed", "lost", "failed", "mean_error", "message"])
        for r in results:
            w.writerow([r.realization, r.seed, int(r.lost), int(r.failed),
                        _fmt(np.mean(r.errors)), r.message])
    write_bounds_csv(out_dir / "bounds.csv", compute_bounds(cfg))
    save_config(cfg, out_dir / "config.yaml")
    with open(out_dir / "seeds.json", "w") as fh:
        json.dump({"seed": seed, "realizations": [r.realization for r in results],
                   "stream_scheme": "SeedSequence([seed, 4, 2*r]) signals, "
                                    "SeedSequence([seed, 4, 2*r+1]) tracker"}, fh, indent=1)
    return agg
