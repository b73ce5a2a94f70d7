"""End-to-end acceptance checks; each prints one PASS/FAIL line (see conftest)."""
import csv
import json
import os
import time

import numpy as np
import pytest
from conftest import record
from scipy.stats import norm
from test_dida import TOL, check_layer, numeric_grad, ready_model, rel_err, synthetic

from cran_harq import pipeline
from cran_harq.apxstats import run_suite
from cran_harq.config import ExperimentConfig
from cran_harq.dataset import build_code, link_bler
from cran_harq.dida import (BatchNorm, Dropout, FakeQuantize, Linear, ReLU, Softmax, TrainConfig, loss,
                            train)
from cran_harq.harqeval import (ChainErrors, always_nack_point, expected_transmissions,
                                paired_auc_difference, protocol_mc, stop_probabilities, total_error)
from cran_harq.ldpc import MinSumDecoder, RvSchedule, puncture
from cran_harq.linklevel import ChannelRealization, apply_channel, compute_llrs, draw_channel, mrc_equalize, \
    qam_modulate
from cran_harq.predictors import COMBINED

ACCEPT_SNR = -4.0
BLER_GRID = [-6.0, -4.0, -2.0, 0.0]


def verdict(n, name, ok, detail):
    record(f"{'PASS' if ok else 'FAIL'}  criterion {n} ({name}): {detail}")
    return ok


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_c1_formula_vs_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(20):
        chain = ChainErrors(tuple(rng.uniform(0.05, 0.95, 3)))
        a, b = rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)
        mc = protocol_mc(chain, a, b, 1_000_000, seed=i)
        e_t, e_tot = expected_transmissions(chain, a, b), total_error(chain, a)
        worst = max(worst, abs(mc.e_t - e_t) / mc.se_e_t, abs(mc.eps_tot - e_tot) / mc.se_eps_tot)
    runtime = time.perf_counter() - t0
    dev = 0.0
    for _ in range(10_000):
        chain = ChainErrors(tuple(rng.uniform(0, 1, 3)))
        dev = max(dev, abs(stop_probabilities(chain, rng.uniform(0, 1, 2), rng.uniform(0, 1, 2)).sum() - 1))
    ok = worst <= 3.0 and runtime < 120 and dev <= 1e-12
    assert verdict(1, "formula vs Monte-Carlo oracle", ok,
                   f"worst |z| {worst:.2f} (<= 3) over 20 points at 1e6 trials in {runtime:.1f} s; "
                   f"max |sum(stop) - 1| {dev:.1e} on 1e4 points")


def test_c2_endpoints():
    chain = ChainErrors((0.6, 0.5, 0.4))
    nack = always_nack_point(chain)
    perfect = expected_transmissions(ChainErrors((0.0, 0.0, 0.0)), [0.0, 0.0], [0.0, 0.0])
    tot = total_error(chain, [0.0, 0.0])
    ok = nack.e_t == 4.0 and perfect == 2.0 and tot == 0.6 * 0.5 * 0.4
    assert verdict(2, "endpoint exactness", ok,
                   f"always-NACK E[T]={nack.e_t}, perfect E[T]={perfect}, alpha=0 eps_tot={tot!r}")


def test_c3_appendix_suite():
    rep = run_suite(seed=0)
    for line in rep.lines():
        print(line)
    ok = rep.passed and rep.runtime_s < 300
    n_pass = sum(c.passed for c in rep.checks)
    assert verdict(3, "appendix suite", ok, f"{n_pass}/{len(rep.checks)} checks pass in {rep.runtime_s:.1f} s")


def _layer_errors():
    rng = np.random.default_rng(10)
    errs = {"Linear": check_layer(Linear(5, 4, rng), rng.normal(size=(10, 5)))}
    bn = BatchNorm(4)
    bn.gamma, bn.beta = rng.normal(size=4), rng.normal(size=4)
    bn.forward(rng.normal(size=(20, 4)), True)
    bn.frozen = True
    errs["BatchNorm (frozen)"] = check_layer(bn, rng.normal(size=(10, 4)))
    x = rng.normal(size=(10, 6))
    x[np.abs(x) < 1e-3] += 0.1
    errs["ReLU"] = check_layer(ReLU(), x)
    errs["Dropout (off)"] = check_layer(Dropout(0.3, rng), rng.normal(size=(10, 6)), train=False)
    errs["Softmax"] = check_layer(Softmax(), rng.normal(size=(10, 2)))
    fq = FakeQuantize(4)
    fq.lo, fq.hi, fq.enabled = 0.0, 1.0, False
    errs["FakeQuantize (off)"] = check_layer(fq, rng.random((10, 1)), train=False)

    m, _ = ready_model()
    m.set_frozen_bn(True)
    m.set_quantize(False)
    b = synthetic(10, 8, 1)

    def f():
        out = m.forward(b.y1, b.y2, train=True)
        return loss(out["yhat"], b.yj, out["d_ue"], b.d, 0.3)

    out = m.forward(b.y1, b.y2, train=True)
    m.zero_grad()
    m.backward(out, b.yj, b.d, 0.3)
    errs["full model"] = max(rel_err(getattr(layer, "d" + p).copy(), numeric_grad(f, getattr(layer, p)))
                             for layer in m.param_layers() for p in layer.params)
    return errs


def test_c4_dida_soundness():
    errs = _layer_errors()
    worst = max(errs.values())
    y = np.random.default_rng(0).normal(size=(5, 3))
    d = np.array([1, 0, 1, 1, 0])
    zero = loss(y, y, d.astype(float), d, 0.7)
    fit, big = synthetic(4000, 8, 2, noise=0.05), synthetic(20_000, 8, 3, noise=0.05)
    card = {}
    for bits in (2, 4, 8):
        m, _ = train(fit, TrainConfig(epochs=20, batch=256, lam=0.5, dropout=0.0), seed=bits, fb_bits=bits)
        card[bits] = max(len(np.unique(m.rrh_feedback(1, big.y1))), len(np.unique(m.rrh_feedback(2, big.y2))))
    data = synthetic(400)
    cfg = TrainConfig(epochs=3, batch=64)
    (ma, ca), (mb, cb) = train(data, cfg, seed=4), train(data, cfg, seed=4)
    repro = ca == cb and all(np.array_equal(v, mb.state()[k]) for k, v in ma.state().items())
    ok = worst <= TOL and zero == 0.0 and all(c <= 2 ** b for b, c in card.items()) and repro
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict(4, "DIDA numerical soundness", ok,
                   f"max rel grad error {worst:.1e} (<= {TOL:g}) [{detail}]; loss at perfect point {zero}; "
                   f"feedback levels {card} (<= 2^b); bit-reproducible {repro}")


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("desk"))
    cfg = ExperimentConfig({"snr_grid": [ACCEPT_SNR], "output_dir": root})
    t0 = time.perf_counter()
    pipeline.generate(cfg, root)
    pipeline.train(cfg, root)
    pipeline.evaluate(cfg, root)
    pipeline.report(cfg, root)
    return cfg, root, time.perf_counter() - t0


def _fb_paired(cfg, root):
    """Paired bootstrap z of the Pareto-AUC change from 4 to 8 feedback bits, per scheme and point."""
    out = {}
    for pt in (1, 2):
        ds = pipeline.load_split(cfg, root, ACCEPT_SNR, pt, "test")
        for scheme in cfg["schemes"]:
            s4 = pipeline.scheme_scores(pipeline.load_model(root, scheme, ACCEPT_SNR, pt, 4), ds, scheme)
            s8 = pipeline.scheme_scores(pipeline.load_model(root, scheme, ACCEPT_SNR, pt, 8), ds, scheme)
            delta, se = paired_auc_difference(s4, s8, ds.labels, n_boot=200, seed=pt)
            out[(scheme, pt)] = (delta, se)
    return out


def test_c5_desk_experiment(desk_run):
    cfg, root, runtime = desk_run
    with open(pipeline.chain_path(root, ACCEPT_SNR)) as fh:
        bler2 = json.load(fh)["splits"]["test"]["bler"][0]
    aucs = read_csv(os.path.join(root, "results", "auc.csv"))
    min_auc = min(float(r["auc"]) for r in aucs)
    ops = read_csv(os.path.join(root, "results", "operating_points.csv"))
    comb = [r for r in ops if r["scheme"] == COMBINED and float(r["eps_target_factor"]) == 3.0]
    comb_ok = bool(comb) and all(r["feasible"] == "True" and float(r["eps_tot"]) <= float(r["eps_target"]) + 1e-12
                                 and float(r["E_T"]) < 3.8 for r in comb)
    comb_et = max(float(r["E_T"]) for r in comb) if comb else float("nan")
    paired = _fb_paired(cfg, root)
    # one-sided test per (scheme, point), Bonferroni over the family at 5%
    z_crit = norm.ppf(1 - 0.05 / len(paired))
    zs = {k: (d / se if se > 0 else (0.0 if d >= 0 else -np.inf)) for k, (d, se) in paired.items()}
    fb_ok = min(zs.values()) >= -z_crit
    ok = 0.3 <= bler2 <= 0.7 and min_auc > 0.6 and comb_ok and fb_ok and runtime < 1800
    worst = min(zs, key=zs.get)
    assert verdict(5, "desk-scale experiment", ok,
                   f"SNR {ACCEPT_SNR} dB BLER(2 RVs) {bler2:.3f}; min test AUC {min_auc:.3f} (> 0.6); "
                   f"combined E[T] {comb_et:.3f} (< 3.8) feasible {comb_ok}; fb 4->8 worst z {zs[worst]:.2f} "
                   f"({worst[0]} p{worst[1]}, limit -{z_crit:.2f}); runtime {runtime / 60:.1f} min (< 30)")


def _noiseless_roundtrip(cfg, n_frames=20, seed=0):
    H, enc = build_code(cfg)
    params = cfg.sim_params(ACCEPT_SNR)
    t = params.t_max
    sched = RvSchedule.round_robin(H.n_bits, t)
    dec = MinSumDecoder(H, cfg["decoder"]["scale"])
    rng = np.random.default_rng(seed)
    exact = 0
    for _ in range(n_frames):
        msg = rng.integers(0, 2, enc.k, dtype=np.uint8)
        cw = enc.encode(msg)
        ch = ChannelRealization(draw_channel(params, rng))
        llr = np.zeros(H.n_bits)
        for rv in range(t):
            for obs in apply_channel(qam_modulate(cw[rv::t]), ch, rng, rv=rv, noiseless=True):
                r, snr = mrc_equalize(obs, ch, noise_var=1.0)
                llr[rv::t] += compute_llrs(r, snr).flat
        res = [dec.decode(puncture(llr, sched, k), cfg["decoder"]["max_iter"], codeword=cw) for k in range(2, t + 1)]
        exact += all(r.success[0] and np.array_equal(enc.extract(r.hard_bits[0]), msg) for r in res)
    return exact, n_frames


def test_c6_link_sanity():
    cfg = ExperimentConfig()
    exact, n = _noiseless_roundtrip(cfg)
    blers = {s: link_bler(cfg, s, 10_000, seed=11)[0] for s in BLER_GRID}
    # one-sided two-proportion z test for an increase between neighbouring SNRs, every RV count
    worst = -np.inf
    for lo, hi in zip(BLER_GRID, BLER_GRID[1:]):
        p1, p2 = blers[lo], blers[hi]
        pool = (p1 + p2) / 2
        se = np.sqrt(np.maximum(pool * (1 - pool) * 2 / 10_000, 1e-300))
        worst = max(worst, float(np.max((p2 - p1) / se)))
    mono = worst <= norm.ppf(0.95)
    ok = exact == n and mono
    table = "; ".join(f"{s:g} dB: " + "/".join(f"{b:.3f}" for b in blers[s]) for s in BLER_GRID)
    assert verdict(6, "link-level sanity", ok,
                   f"noiseless round trip {exact}/{n} exact; BLER 2/3/4 RVs at 1e4 frames [{table}]; "
                   f"largest increase z {worst:.2f} (<= {norm.ppf(0.95):.3f})")


def test_c7_trend_informative(tmp_path):
    root = str(tmp_path)
    cfg = ExperimentConfig({"snr_grid": BLER_GRID, "sizes": {"train": 4000, "val": 2000, "test": 4000},
                            "schemes": ["TH-SNR", "LR-SC"], "fb_bits": [4], "eps_target_factors": [1.5],
                            "output_dir": root})
    pipeline.generate(cfg, root)
    pipeline.train(cfg, root)
    pipeline.evaluate(cfg, root)
    ops = read_csv(os.path.join(root, "results", "operating_points.csv"))
    trends = {}
    for scheme in cfg["schemes"]:
        rows = sorted((float(r["snr_db"]), float(r["E_T"])) for r in ops
                      if r["scheme"] == scheme and r["feasible"] == "True")
        trends[scheme] = rows
    decreasing = all(all(b[1] <= a[1] for a, b in zip(rows, rows[1:])) for rows in trends.values())
    detail = "; ".join(f"{s}: " + ", ".join(f"{snr:g} dB {et:.2f}" for snr, et in rows) for s, rows in trends.items())
    record(f"INFO  criterion 7 (E[T] trend, non-gating): {'decreasing' if decreasing else 'not monotone'} "
           f"with SNR [{detail}]")
    assert all(len(rows) == len(BLER_GRID) for rows in trends.values())
