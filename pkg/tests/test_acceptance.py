"""Acceptance criteria, one test each, at the agreed tolerances.

Every test records a single ``[Cn] PASS|FAIL ...`` line before asserting;
``conftest.py`` prints the collected lines in the terminal summary. Criteria 5, 6 and 9 run full Monte-Carlo studies and take minutes.
"""

import csv
import time

import numpy as np
import pytest
import yaml
from scipy import stats
from scipy.integrate import quad

from hybridloc import cli
from hybridloc.ceda import estimate_components
from hybridloc.gpr import GPHyper, build_model, predict
from hybridloc.likelihood import (
    LhfParams, association_prior, lhf_los_amplitude, lhf_los_distance, lhf_nlos_amplitude,
    lhf_nlos_distance, pda_marginal, sigma_d,
)
from hybridloc.pipeline import (
    Aggregate, ExperimentConfig, RealizationRunner, compute_bounds, save_config,
)
from hybridloc.scenario import PropagationComponent
from hybridloc.signal import SPEED_OF_LIGHT, rms_bandwidth, rrc_pulse, synthesize
from hybridloc.tracker import FULL, PHYS_ONLY, TrackerConfig, track, with_mode


SCORECARD = {}


def report(n, ok, detail, t0):
    SCORECARD[n] = f"[C{n}] {'PASS' if ok else 'FAIL'} {detail} ({time.time() - t0:.1f} s)"
    assert ok, detail


# 1. likelihood normalization ----------------------------------------------

def test_c1_likelihood_normalization():
    t0 = time.time()
    worst = 0.0
    for gamma in (1.0, 2.0, 4.0):
        params = LhfParams(gamma=gamma)
        for u in (0.0, 2.0, 10.0, 80.0):
            # split the range at the Rician mode so quad sees the narrow peak
            pts = [max(gamma, u)]
            lo = quad(lambda z: lhf_los_amplitude(z, u, params), gamma, pts[0] + 1e-9)[0]
            hi = quad(lambda z: lhf_los_amplitude(z, u, params), pts[0] + 1e-9, np.inf,
                      epsabs=1e-12, epsrel=1e-12)[0]
            worst = max(worst, abs(lo + hi - 1.0))
        ray = quad(lambda z: lhf_nlos_amplitude(z, params), gamma, np.inf,
                   epsabs=1e-12, epsrel=1e-12)[0]
        worst = max(worst, abs(ray - 1.0))
        uniform = lhf_nlos_distance(0.5 * params.d_max, params) * params.d_max
        worst = max(worst, abs(uniform - 1.0))
    report(1, worst <= 1e-6 and time.time() - t0 < 1.0,
           f"max |integral - 1| = {worst:.2e}", t0)


# 2. PDA enumeration -------------------------------------------------------

def _oracle_pda(z, z_f, p, pa, u, q, gp, params):
    """Explicit sum of h(a) * g(a) over every association hypothesis a = 0..M.

    The per-component densities are the package's own (their normalization
    is criterion 1); the feature ratio is rebuilt from scipy's normal pdf.
    """
    preds = [predict(m, p, include_noise=True) for m in gp]
    flr = np.prod([stats.norm.pdf(zf, float(mu), np.sqrt(float(v)))
                   for zf, (mu, v) in zip(z_f, preds)])
    total = 0.0
    for a in range(len(z) + 1):
        h = association_prior(a, len(z), u, q, params)
        if a == 0:
            g = flr
        else:
            zd, zu = z[a - 1]
            g = (lhf_los_distance(zd, p, pa, u, params) * lhf_los_amplitude(zu, u, params)
                 / (lhf_nlos_distance(zd, params) * lhf_nlos_amplitude(zu, params)))
        total += h * g
    return total


def test_c2_pda_enumeration():
    t0 = time.time()
    params = LhfParams()
    rng = np.random.default_rng(2)
    hyper = GPHyper(1.0, 1.5, 0.2)
    train_p = rng.uniform(-5, 5, (8, 2))
    gps = [build_model(train_p, rng.normal(0, 1, 8), hyper) for _ in range(6)]
    worst = 0.0
    t_pkg = 0.0
    for _ in range(10_000):
        m = int(rng.integers(0, 11))
        f = int(rng.integers(0, 7))
        p = rng.uniform(-5, 5, 2)
        pa = rng.uniform(-8, 8, 2)
        d = np.hypot(*(p - pa))
        z = np.column_stack([np.clip(d + rng.normal(0, 0.05, m), 0, 30), rng.uniform(2, 25, m)])
        u, q = rng.uniform(0.5, 50), rng.uniform(0.001, 1)
        z_f = rng.normal(0, 1, f)
        t1 = time.time()
        got = pda_marginal(z, z_f, p, pa, u, q, gps[:f], params).total
        t_pkg += time.time() - t1
        want = _oracle_pda(z, z_f, p, pa, u, q, gps[:f], params)
        worst = max(worst, abs(got - want) / abs(want))
    report(2, worst <= 1e-12 and t_pkg < 5.0,
           f"10^4 instances, max rel err {worst:.1e}, pda time {t_pkg:.1f} s", t0)


# 3. Fisher variance and RMS bandwidth -------------------------------------

def test_c3_fisher_variance():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        beta, u = rng.uniform(1e7, 2e9), rng.uniform(0.1, 200)
        want = SPEED_OF_LIGHT / (2 * np.sqrt(2) * np.pi * beta * u)
        worst = max(worst, abs(sigma_d(u, LhfParams(beta_bw=beta)) / want - 1))
    samples = np.sinc(np.arange(-2000, 2001))  # flat spectrum over [-1/2, 1/2]
    bw_err = abs(rms_bandwidth(samples, 1.0, padding=32) * np.sqrt(12) - 1)
    report(3, worst < 1e-12 and bw_err <= 5e-3,
           f"sigma_d max rel err {worst:.1e}, flat-spectrum bandwidth err {bw_err:.2%}", t0)


# 4. Kalman equivalence ----------------------------------------------------

def _cv_matrices(dt, sigma_a):
    A = np.eye(4)
    A[0, 2] = A[1, 3] = dt
    B = np.array([[dt * dt / 2, 0], [0, dt * dt / 2], [dt, 0], [0, dt]])
    return A, sigma_a ** 2 * B @ B.T, B


def _ekf(zs, anchors, m0, P0, A, Q, r):
    m, P = m0.copy(), P0.copy()
    out = []
    for n, z in enumerate(zs):
        if n:
            m, P = A @ m, A @ P @ A.T + Q
        diff = m[:2] - anchors
        rng_ = np.linalg.norm(diff, axis=1)
        H = np.zeros((len(anchors), 4))
        H[:, :2] = diff / rng_[:, None]
        S = H @ P @ H.T + r * np.eye(len(anchors))
        K = P @ H.T @ np.linalg.inv(S)
        m = m + K @ (z - rng_)
        P = (np.eye(4) - K @ H) @ P
        out.append(m[:2].copy())
    return np.array(out)


def test_c4_kalman_equivalence():
    t0 = time.time()
    # far anchors make the range model linear to well below the noise level
    anchors = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    u = 4.0
    params = LhfParams(q_levels=(1.0,), constant_pd=1.0, d_max=3000.0)
    cfg = TrackerConfig(n_particles=2000, q_levels=(1.0,), amp_walk_coeff=0.0,
                        init_amplitude="fixed", u_fixed=(u, u), init_pos_std=0.1,
                        init_vel_std=0.1, feature_mode=PHYS_ONLY)
    sd = float(sigma_d(u, params))
    A, Q, B = _cv_matrices(cfg.dt, cfg.sigma_a)
    m0 = np.array([0.0, 0.0, 1.0, 0.5])
    P0 = np.diag([0.1 ** 2] * 2 + [0.1 ** 2] * 2)
    N = 100
    err_pf, err_kf = [], []
    for r in range(50):
        rng = np.random.default_rng([4, r])
        x = m0 + np.sqrt(np.diag(P0)) * rng.standard_normal(4)
        truth, zs = [], []
        for n in range(N):
            if n:
                x = A @ x + B @ (cfg.sigma_a * rng.standard_normal(2))
            truth.append(x[:2].copy())
            zs.append(np.linalg.norm(x[:2] - anchors, axis=1) + sd * rng.standard_normal(2))
        truth = np.array(truth)
        streams = [([np.array([[z[j], u]]) for j in range(2)], None) for z in zs]
        res = track(streams, anchors, None, params, cfg, np.random.default_rng([40, r]), m0,
                    truth=truth)
        err_pf.append(res.errors ** 2)
        err_kf.append(np.sum((_ekf(zs, anchors, m0, P0, A, Q, sd ** 2) - truth) ** 2, axis=1))
    rmse_pf = np.sqrt(np.mean(err_pf))
    rmse_kf = np.sqrt(np.mean(err_kf))
    rel = abs(rmse_pf / rmse_kf - 1)
    report(4, rel <= 0.05 and time.time() - t0 < 120,
           f"PF RMSE {rmse_pf * 100:.2f} cm vs Kalman {rmse_kf * 100:.2f} cm ({rel:.1%})", t0)


# 5. CRLB attainment in LOS --------------------------------------------------

@pytest.mark.slow
def test_c5_crlb_attainment():
    t0 = time.time()
    cfg = ExperimentConfig()
    cfg.evaluation.los_only = True
    cfg.evaluation.n_steps = 100
    cfg.evaluation.n_realizations = 100
    cfg.tracker.n_particles = 2000
    runner = RealizationRunner(cfg, None)
    results = [runner.run(r, 0) for r in range(100)]
    rmse = Aggregate.from_results(results).rmse
    bound = compute_bounds(cfg)["pcrlb_los"]
    steady = slice(50, 100)
    ratio = np.sqrt(np.mean(rmse[steady] ** 2) / np.mean(bound[steady] ** 2))
    failed = sum(r.failed for r in results)
    report(5, ratio <= 1.25 and failed == 0 and time.time() - t0 < 600,
           f"steady-state RMSE / P-CRLB-LOS = {ratio:.3f} "
           f"({np.sqrt(np.mean(rmse[steady] ** 2)) * 1000:.2f} mm, {failed} failed)", t0)


# 6. OLOS robustness ordering ------------------------------------------------

@pytest.mark.slow
def test_c6_olos_robustness(default_run):
    t0 = time.time()
    cfg = ExperimentConfig()
    # 10^4 particles: at 5000 the FULL tracker loses ~15% of tracks in the
    # fully obstructed segment, which is a particle-depletion effect
    cfg.tracker.n_particles = 10_000
    runner = RealizationRunner(cfg, default_run[3])
    olos = ~runner.visibility.any(axis=1)
    stats_ = {}
    for mode in (FULL, PHYS_ONLY):
        res = [runner.run(r, 0, with_mode(cfg.tracker, mode)) for r in range(50)]
        errs = np.array([r.errors for r in res])
        stats_[mode] = (np.mean([r.lost or r.failed for r in res]),
                        np.sqrt(np.nanmean(errs[:, olos] ** 2)))
    (lf, ef), (lp, ep) = stats_[FULL], stats_[PHYS_ONLY]
    ok = lf <= 0.05 and lp > lf and ep > ef and time.time() - t0 < 1200
    report(6, ok, f"lost FULL {lf:.0%} vs PHYS_ONLY {lp:.0%}; "
                  f"OLOS RMSE {ef:.2f} m vs {ep:.2f} m", t0)


# 7. GPR consistency ---------------------------------------------------------

def _dense_gp(X, y, Xs, hyper, mean):
    r = np.linalg.norm(X[:, None] - X[None], axis=2)
    rs = np.linalg.norm(Xs[:, None] - X[None], axis=2)

    def k(d):
        a = np.sqrt(5) * d / hyper.length_scale
        return hyper.signal_var * (1 + a + a * a / 3) * np.exp(-a)

    K = k(r) + hyper.noise_var * np.eye(len(X))
    Ks = k(rs)
    mu = mean + Ks @ np.linalg.solve(K, y - mean)
    var = hyper.signal_var - np.sum(Ks * np.linalg.solve(K, Ks.T).T, axis=1)
    return mu, var


def test_c7_gpr_consistency():
    t0 = time.time()
    rng = np.random.default_rng(7)
    worst = 0.0
    revert = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 31))
        X = rng.uniform(-5, 5, (n, 2))
        y = rng.normal(0, 1, n)
        hyper = GPHyper(rng.uniform(0.2, 2), rng.uniform(0.3, 3), rng.uniform(1e-3, 0.5))
        mean = rng.normal()
        model = build_model(X, y, hyper, mean)
        Xs = rng.uniform(-6, 6, (20, 2))
        mu, var = predict(model, Xs)
        mu_o, var_o = _dense_gp(X, y, Xs, hyper, mean)
        scale = max(1.0, np.max(np.abs(mu_o)))
        worst = max(worst, np.max(np.abs(mu - mu_o)) / scale,
                    np.max(np.abs(var - var_o)) / hyper.signal_var)
        far = X.mean(axis=0) + np.array([10 * hyper.length_scale + 15, 0.0])
        v_far = float(predict(model, far)[1])
        revert = max(revert, abs(v_far / hyper.signal_var - 1))
    report(7, worst <= 1e-10 and revert <= 0.05 and time.time() - t0 < 10,
           f"max deviation from dense solve {worst:.1e}, far-field variance gap {revert:.1e}", t0)


# 8. CEDA calibration --------------------------------------------------------

def test_c8_ceda_calibration():
    t0 = time.time()
    pulse = rrc_pulse()
    rng = np.random.default_rng(8)
    d = 6.0
    u = 10 ** (38 / 20) / d
    errs = []
    for _ in range(500):
        dt = d + rng.uniform(-0.1, 0.1)  # off-grid delays
        s = synthesize([PropagationComponent(dt, u)], 81, pulse.ts, 1.0, rng, pulse)
        near = [m.z_d - dt for m in estimate_components(s, pulse) if abs(m.z_d - dt) < 0.15]
        if near:
            errs.append(min(near, key=abs))
    rate = len(errs) / 500
    ratio = np.std(errs) / float(sigma_d(u, LhfParams()))
    report(8, rate >= 0.99 and ratio <= 1.5 and time.time() - t0 < 60,
           f"u = {u:.1f}: detection {rate:.1%}, error std / sigma_d = {ratio:.2f}", t0)


# 9. LOS-probability behavior -------------------------------------------------

Q_SCENARIO = {
    "walls": [
        {"name": "W1", "start": [-10.5, -10.5], "end": [10.5, -10.5], "reflective": True},
        {"name": "W2", "start": [10.5, -10.5], "end": [10.5, 10.5], "reflective": True},
        {"name": "W3", "start": [10.5, 10.5], "end": [-10.5, 10.5], "reflective": True},
        {"name": "W4", "start": [-10.5, 10.5], "end": [-10.5, -10.5], "reflective": True},
        {"name": "W5", "start": [-1.0, -4.0], "end": [1.0, -4.0], "reflective": False},
    ],
    "anchors": [{"id": 1, "position": [-6.0, 6.0]}, {"id": 2, "position": [6.0, 6.0]},
                {"id": 3, "position": [0.0, -8.0]}],
    "trajectory": {"waypoints": [[-6.0, 0.0], [6.0, 0.0]], "n_steps": 120, "dt": 0.1},
    "grid": {"bounds": [[-10, 10], [-10, 10]], "pretrain_spacing": 0.5, "full_spacing": 1.0},
}


@pytest.mark.slow
def test_c9_los_probability(tmp_path):
    t0 = time.time()
    (tmp_path / "scenario.yaml").write_text(yaml.safe_dump(Q_SCENARIO))
    cfg = ExperimentConfig.from_dict({"scenario": "scenario.yaml",
                                      "tracker": {"n_particles": 2000}}, tmp_path)
    runner = RealizationRunner(cfg, None)
    vis = runner.visibility[:, 2]
    assert not vis.all() and runner.visibility[:, :2].all()
    b0 = int(np.argmin(vis))
    b1 = b0 + int(np.argmax(vis[b0:]))
    good = 0
    for r in range(50):
        q = runner.run(r, 9).q[:, 2]
        good += bool(np.any(q[b0:b0 + 11] < 0.5) and np.any(q[b1:b1 + 11] > 0.5))
    report(9, good >= 45 and time.time() - t0 < 300,
           f"blocked steps {b0}-{b1 - 1}: {good}/50 runs drop and recover", t0)


# 10. reproducibility ---------------------------------------------------------

def test_c10_parallel_reproducibility(default_run, tmp_path):
    t0 = time.time()
    cfg = ExperimentConfig()
    cfg.tracker.n_particles = 1000
    cfg.evaluation.n_realizations = 4
    cfg.evaluation.n_steps = 60
    save_config(cfg, tmp_path / "exp.yaml")
    outs = []
    for jobs in (1, 4):
        out = tmp_path / f"jobs{jobs}"
        code = cli.main(["track", "--config", str(tmp_path / "exp.yaml"), "--out", str(out),
                         "--seed", "10", "--jobs", str(jobs), "--models", str(default_run[2])])
        assert code == 0
        outs.append((out / "estimates.csv").read_bytes())
    rows = list(csv.DictReader(outs[0].decode().splitlines()))
    same = outs[0] == outs[1]
    report(10, same and len(rows) == 4 * 60,
           f"estimates.csv identical for --jobs 1 and 4: {same}", t0)
