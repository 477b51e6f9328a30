"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. The summary lines
appear at the end of the pytest output. Criteria 7, 8 and 10 share one set of
trained models (3 seeds x {AE-AE, AE}); expect roughly five minutes on one core.
"""
import time

import numpy as np
import pytest

from ctaimpute import diffcore as dc
from ctaimpute.controlpath import (ChannelSpline, TimeSeriesSample, natural_cubic_coeffs,
                                   path_from_values)
from ctaimpute.cta import INFER, TRAIN, Batch, Chain, ModelConfig, chain_forward, impute_samples
from ctaimpute.data import TEST, TRAIN as TRAIN_SPLIT, VAL, SyntheticConfig, make_synthetic
from ctaimpute.data import prepare_dataset
from ctaimpute.evaluation import mean_imputer, run_benchmark, score_imputations, spline_imputer
from ctaimpute.ncde import EULER, RK4, euler_solve, initial_state
from ctaimpute.training import MaskSet, TrainConfig, compute_loss, train

from helpers import numeric_grad, rel_err
from test_controlpath import dense_natural_spline
from test_ncde import _fields

RESULTS: dict = {}

SEEDS = (0, 1, 2)
FIXTURE_RATE = 0.7
FIXTURE_STEP = 0.0101   # about one Euler step per observation interval
FIXTURE_TRAIN = dict(max_iter=300, lr=3e-3, val_every=50, batch_size=16)
TIME_BUDGET = 300.0


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def _sample(rng, C, T, hide=0.3, span=5.0):
    gaps = rng.uniform(0.5, 1.5, T)
    times = span * np.cumsum(gaps) / gaps.sum()
    truth = np.sin(times[None, :] * (1 + np.arange(C))[:, None]) + 0.1 * rng.normal(size=(C, T))
    ev = rng.random((C, T)) < hide
    ev[:, 0] = False
    return TimeSeriesSample(times, truth, ev)


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_gradient_oracle():
    t0 = time.perf_counter()
    cfg = ModelConfig(2, latent=2, decoder=2, hidden=4, n_hidden=1, head_hidden=4, step=0.125)
    chain = Chain.init("VAE-AE", cfg, 0)
    truth = np.array([[0.2, -0.5, 0.9], [1.0, 0.3, -0.4]])
    sample = TimeSeriesSample([0.0, 1.0, 2.0], truth, [[False, False, False], [False, True, False]])
    intent = np.zeros((1, 3, 2), bool)
    intent[0, 1, 0] = True
    batch = Batch.from_samples([sample], extra_hidden=intent)
    masks = MaskSet(sample.visible_mask.T[None], intent, sample.eval_mask.T[None])
    target = truth.T[None]
    params = chain.params()

    def loss():
        return compute_loss(chain_forward(batch, chain, TRAIN, seed=5), target, masks).total

    with dc.Tape() as tape:
        grads = dc.backward(loss(), tape, params)
    # 3 observations on [0, 1] with step 1/8: 8 Euler steps per layer
    worst, worst_name = 0.0, ""
    for name, p in params.items():
        fd = numeric_grad(lambda: float(loss().value), p.value, h=1e-6)
        err = rel_err(grads[name], fd)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 10
    record(1, ok, f"max rel err {worst:.2e} ({worst_name}), {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 10


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_solver_order():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    fields = _fields(True, rng)
    times = np.linspace(0, 1, 5)
    path = path_from_values(times, np.array([np.sin(3 * times), np.cos(2 * times)]))
    x0 = path.value(0.0)[None, :]
    noise = rng.normal(size=(1, 3))

    def final(step, method=EULER):
        o = euler_solve(initial_state(x0, fields), path, fields, noise, step, times, method)[-1]
        return np.concatenate([o.mu.value.ravel(), o.sigma.value.ravel(), o.d.value.ravel(),
                               o.xi.value.ravel()])

    ref = final(1 / 4096, RK4)
    errs = [np.linalg.norm(final(s) - ref) for s in (1 / 16, 1 / 32, 1 / 64, 1 / 128)]
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    elapsed = time.perf_counter() - t0
    ok = all(1.8 <= r <= 2.2 for r in ratios) and elapsed < 5
    record(2, ok, f"error ratios {', '.join(f'{r:.3f}' for r in ratios)}, {elapsed:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_spline_suite():
    rng = np.random.default_rng(0)
    interp = c1 = c2 = natural = 0.0
    for _ in range(50):
        n = rng.integers(3, 15)
        x = np.concatenate([[0.0], np.cumsum(rng.uniform(0.05, 1.0, n - 1))])
        y = rng.uniform(-5, 5, n)
        s = ChannelSpline(x, y)
        interp = max(interp, np.abs(s.value(x) - y).max())
        a, b, c, d = natural_cubic_coeffs(x, y).T
        h = np.diff(x)
        c1 = max(c1, np.abs(b[:-1] + 2 * c[:-1] * h[:-1] + 3 * d[:-1] * h[:-1] ** 2 - b[1:]).max())
        for i in range(1, n - 1):
            left = 2 * c[i - 1] + 6 * d[i - 1] * h[i - 1]
            c2 = max(c2, abs(left - s.second_derivative(x[i])))
        natural = max(natural, abs(s.second_derivative(x[0])),
                      abs(2 * c[-1] + 6 * d[-1] * h[-1]))
    three = abs(ChannelSpline([0, 1, 2], [0, 1, 0]).value(1.5)
                - dense_natural_spline([0, 1, 2], [0, 1, 0], 1.5))
    ok = interp < 1e-9 and c1 < 1e-9 and c2 < 1e-6 and natural < 1e-6 and three < 1e-9
    record(3, ok, f"interp {interp:.1e}, C1 {c1:.1e}, C2 {c2:.1e}, natural {natural:.1e}, "
                  f"3-knot {three:.1e}")
    assert ok


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_vae_mechanics():
    rng = np.random.default_rng(1)
    cfg = ModelConfig(3, latent=3, decoder=3, hidden=6, head_hidden=5, step=0.05)
    samples = [_sample(rng, 3, 15) for _ in range(4)]
    batch = Batch.from_samples(samples)
    min_xi = np.inf
    for seed in range(8):
        chain = Chain.init("VAE-VAE", cfg, seed)
        res = chain_forward(batch, chain, TRAIN, seed=seed)
        min_xi = min(min_xi, min(k.value.min() for k in res.klds))

    zero = Chain.init("VAE", cfg, 0)
    for p in zero.params().values():
        p.value[...] = 0.0
    zero_xi = chain_forward(batch, zero, TRAIN, seed=0).klds[0].value

    chain = Chain.init("VAE-AE", cfg, 3)
    a = chain_forward(batch, chain, INFER, seed=1).xtilde.value
    b = chain_forward(batch, chain, INFER, seed=2).xtilde.value
    same = np.array_equal(a, b)
    ok = min_xi >= 0 and np.all(zero_xi == 0) and same
    record(4, ok, f"min xi(T) {min_xi:.3e}, pinned xi(T) max {np.abs(zero_xi).max():.1e}, "
                  f"inference seed-independent {same}")
    assert ok


# -- 5 ---------------------------------------------------------------------

def test_criterion_5_fusion_algebra():
    rng = np.random.default_rng(2)
    cfg = ModelConfig(3, latent=3, decoder=3, hidden=6, head_hidden=5, step=0.05)
    batch = Batch.from_samples([_sample(rng, 3, 15) for _ in range(3)])
    worst, a_lo, a_hi = 0.0, 1.0, 0.0
    for spec in ("AE-AE", "VAE-AE", "AE-VAE-AE"):
        for mode in (TRAIN, INFER):
            res = chain_forward(batch, Chain.init(spec, cfg, 4), mode, seed=0)
            lhs = res.xtilde.value - res.xhat_prime.value
            rhs = res.alpha.value * (res.xhat.value - res.xhat_prime.value)
            worst = max(worst, np.abs(lhs - rhs).max())
            a_lo, a_hi = min(a_lo, res.alpha.value.min()), max(a_hi, res.alpha.value.max())
    chain = Chain.init("VAE-AE", cfg, 5)
    chain.layers[1].fc2.weight.value[...] = 0.0
    chain.layers[1].fc2.bias.value[...] = 0.0
    res = chain_forward(batch, chain, TRAIN, seed=1)
    identity = np.array_equal(res.xhat_prime.value, res.xcheck.value)
    ok = worst < 1e-12 and 0 < a_lo and a_hi < 1 and identity
    record(5, ok, f"fusion residual {worst:.1e}, alpha in [{a_lo:.3f}, {a_hi:.3f}], "
                  f"zero-head identity {identity}")
    assert ok


# -- 6 ---------------------------------------------------------------------

def test_criterion_6_masking_isolation():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(3, latent=3, decoder=3, hidden=6, head_hidden=5, step=0.05)
    chain = Chain.init("VAE-AE", cfg, 0)
    samples = []
    for _ in range(3):
        s = _sample(rng, 3, 15, hide=0.3)
        truth = s.truth.copy()
        gaps = (rng.random(truth.shape) < 0.15) & ~s.eval_mask
        gaps[:, 0] = False
        truth[gaps] = np.nan
        samples.append(TimeSeriesSample(s.times, truth, s.eval_mask))
    visible = np.stack([s.visible_mask.T for s in samples])
    intent = visible & (rng.random(visible.shape) < 0.2)
    masks = MaskSet(visible, intent, np.stack([s.eval_mask.T for s in samples]))
    target = np.stack([s.truth.T for s in samples])

    def run(sample_list, loss_target):
        batch = Batch.from_samples(sample_list, extra_hidden=intent)
        res = chain_forward(batch, chain, TRAIN, seed=9)
        return res.xtilde.value, compute_loss(res, loss_target, masks).as_row()

    base_out, base_loss = run(samples, target)
    changed = 0
    for k in range(5):
        # new values at eval-masked cells reach the samples; the loss target
        # additionally gets finite values where the source had none
        moved = [TimeSeriesSample(s.times, np.where(s.eval_mask,
                                                    rng.normal(scale=10.0 ** k, size=s.truth.shape),
                                                    s.truth), s.eval_mask) for s in samples]
        filled = np.where(visible, target, rng.normal(scale=10.0 ** k, size=target.shape))
        out, loss = run(moved, filled)
        changed += int(not np.array_equal(out, base_out)) + int(loss != base_loss)
    ok = changed == 0
    record(6, ok, f"{changed} of 10 checks changed the forward pass or loss")
    assert ok


# -- shared trained fixture for 7, 8, 10 ---------------------------------------

def _fixture_dataset(seed):
    ds = make_synthetic(SyntheticConfig(seed=seed))
    return prepare_dataset(ds, FIXTURE_RATE, seed)


def _train_fixture(spec, seed, **overrides):
    ds = _fixture_dataset(seed)
    chain = Chain.init(spec, ModelConfig(ds.n_channels, step=FIXTURE_STEP), seed)
    t0 = time.perf_counter()
    res = train(ds.split(TRAIN_SPLIT), ds.split(VAL), chain,
                TrainConfig(seed=seed, **{**FIXTURE_TRAIN, **overrides}))
    elapsed = time.perf_counter() - t0
    test = ds.split(TEST)
    scores = {
        "cta": score_imputations(test, impute_samples(test, chain), ds.means, ds.stds),
        "spline": score_imputations(test, spline_imputer(test), ds.means, ds.stds),
        "mean": score_imputations(test, mean_imputer(np.zeros(ds.n_channels))(test),
                                  ds.means, ds.stds),
    }
    return {"ds": ds, "chain": chain, "history": res.history, "time": elapsed,
            "scores": scores}


@pytest.fixture(scope="module")
def trained():
    return {(spec, s): _train_fixture(spec, s) for spec in ("AE-AE", "AE") for s in SEEDS}


def test_criterion_7_cta_beats_baselines(trained):
    wins, parts, over = 0, [], 0
    for s in SEEDS:
        r = trained["AE-AE", s]
        cta, spline, mean = (r["scores"][k][0] for k in ("cta", "spline", "mean"))
        win = cta < spline and cta < mean
        wins += win
        over += r["time"] > TIME_BUDGET
        parts.append(f"seed {s}: {cta:.4f} vs spline {spline:.4f} / mean {mean:.4f} "
                     f"({r['time']:.0f}s)")
    ok = wins == len(SEEDS) and over == 0
    record(7, ok, f"wins {wins}/{len(SEEDS)}; " + "; ".join(parts))
    assert over == 0
    assert wins == len(SEEDS)


def test_criterion_8_dual_layer_not_worse(trained):
    dual = float(np.mean([trained["AE-AE", s]["scores"]["cta"][0] for s in SEEDS]))
    single = float(np.mean([trained["AE", s]["scores"]["cta"][0] for s in SEEDS]))
    ok = dual <= single
    record(8, ok, f"mean test MAE AE-AE {dual:.4f} vs AE {single:.4f}")
    assert ok


def test_criterion_9_determinism():
    short = dict(max_iter=12, val_every=4)
    a = _train_fixture("VAE-AE", 0, **short)
    b = _train_fixture("VAE-AE", 0, **short)
    same_hist = len(a["history"]) == 12 and all(
        np.array_equal(list(x.values()), list(y.values()), equal_nan=True)
        for x, y in zip(a["history"], b["history"]))
    same_report = a["scores"] == b["scores"]
    same_params = all(np.array_equal(v, b["chain"].state_dict()[k])
                      for k, v in a["chain"].state_dict().items())
    ok = same_hist and same_report and same_params
    record(9, ok, f"history identical {same_hist}, report identical {same_report}, "
                  f"parameters identical {same_params}")
    assert ok


def test_criterion_10_rate_sweep(trained):
    rates = [0.3, 0.5, 0.7]
    monotone, text = 0, ""
    parts = []
    for s in SEEDS:
        r = trained["AE-AE", s]
        ds, chain = r["ds"], r["chain"]
        methods = {"CTA AE-AE": lambda samples, c=chain: impute_samples(samples, c),
                   "spline": spline_imputer, "mean": mean_imputer(np.zeros(ds.n_channels))}
        report = run_benchmark(ds, methods, rates, trials=5, seed=100 + s)
        maes = [report.row("spline", q).mae_mean for q in rates]
        monotone += all(x <= y for x, y in zip(maes, maes[1:]))
        parts.append(f"seed {s}: " + "/".join(f"{m:.4f}" for m in maes))
        if s == SEEDS[0]:
            text = report.to_text()
    shaped = all(f"{int(q * 100)}%" in text for q in rates) and "MAE" in text and "RMSE" in text
    ok = monotone == len(SEEDS) and shaped
    record(10, ok, f"spline MAE monotone {monotone}/{len(SEEDS)} (" + "; ".join(parts) + ")")
    print("\n" + text)
    assert shaped
    assert monotone == len(SEEDS)
