"""Numerical checks of the statistics behind LLR-based decodability prediction.

Given per-bit error probabilities ``v_i``, the number of bit errors ``U`` is
Poisson-binomial. For small ``v_i`` it is close to Poisson with rate
``sum(v)``, whose likelihood ratio is monotone in the mean ``T = mean(v)``, so
thresholding ``T`` is the uniformly most powerful test of ``U <= t``.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import poisson

from .ldpc import Codebook, hamming74, hard_decision_decode_batch
from .linklevel import bit_error_prob


class ApxError(ValueError):
    pass


@dataclass
class BitErrorProfile:
    v: np.ndarray

    def __post_init__(self):
        self.v = np.atleast_1d(np.asarray(self.v, dtype=np.float64))
        if np.any(~np.isfinite(self.v)) or np.any(self.v < 0) or np.any(self.v > 0.5):
            raise ApxError("bit-error probabilities must lie in [0, 0.5]")

    @property
    def n(self) -> int:
        return len(self.v)

    @property
    def T(self) -> float:
        return float(self.v.mean())

    @classmethod
    def from_llr(cls, llr) -> "BitErrorProfile":
        return cls(bit_error_prob(llr))


def _v(v):
    v = np.atleast_1d(np.asarray(v.v if isinstance(v, BitErrorProfile) else v, dtype=np.float64))
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ApxError("probabilities must lie in [0, 1]")
    return v


def poisson_binomial_pmf(v) -> np.ndarray:
    """Exact pmf of the number of successes, by iterative convolution."""
    pmf = np.ones(1)
    for p in _v(v):
        nxt = np.zeros(len(pmf) + 1)
        nxt[:-1] += pmf * (1 - p)
        nxt[1:] += pmf * p
        pmf = nxt
    return pmf


def subset_enumeration_pmf(v) -> np.ndarray:
    """Reference pmf by summing over all 2^n outcome patterns (small n only)."""
    v = _v(v)
    n = len(v)
    if n > 16:
        raise ApxError("enumeration limited to n <= 16")
    pmf = np.zeros(n + 1)
    for pat in itertools.product((0, 1), repeat=n):
        pat = np.array(pat, dtype=bool)
        pmf[pat.sum()] += np.prod(np.where(pat, v, 1 - v))
    return pmf


def poisson_approx_pmf(v, u):
    """Poisson pmf with rate ``mu = sum(v)`` at ``u``."""
    return poisson.pmf(u, _v(v).sum())


def approx_error_bound(v) -> float:
    """Upper bound ``2 * sum(v^2)`` on the L1 distance between the exact and Poisson pmfs."""
    return float(2.0 * np.sum(_v(v) ** 2))


def l1_distance(v) -> float:
    """Sum over all u >= 0 of |exact - Poisson|, including the Poisson mass above n."""
    v = _v(v)
    exact = poisson_binomial_pmf(v)
    u = np.arange(len(exact))
    approx = poisson.pmf(u, v.sum())
    return float(np.abs(exact - approx).sum() + poisson.sf(len(v), v.sum()))


# ---------------------------------------------------------------------------
# monotone likelihood ratio


def poisson_ratios(T, n, k_max):
    """``P(k+1)/P(k)`` under the Poisson model with rate ``n*T``, for k = 0..k_max-1."""
    k = np.arange(k_max)
    return n * T / (k + 1)


def mlr_check(profiles, k_max: int = 10) -> dict:
    """Verify that Poisson pmf ratios increase with ``T`` across profiles sharing ``n``."""
    profiles = [p if isinstance(p, BitErrorProfile) else BitErrorProfile(p) for p in profiles]
    ns = {p.n for p in profiles}
    if len(ns) != 1:
        raise ApxError("profiles must share n")
    n = ns.pop()
    order = np.argsort([p.T for p in profiles])
    Ts = np.array([profiles[i].T for i in order])
    ratios = np.array([[poisson.pmf(k + 1, n * T) / poisson.pmf(k, n * T) for k in range(k_max)]
                       for T in Ts])
    strict = np.diff(Ts) > 0
    monotone = bool(np.all(np.diff(ratios, axis=0)[strict] > 0))
    return {"n": n, "T": Ts, "ratios": ratios, "monotone": monotone}


# ---------------------------------------------------------------------------
# UMP test


@dataclass
class UmpTest:
    level: float
    C: float
    gamma: float
    n_calibration: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ApxError("level must lie in (0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ApxError("gamma must lie in [0, 1]")

    def reject_prob(self, T) -> np.ndarray:
        """``E[Phi]`` per sample: 1 above C, gamma at C, 0 below."""
        T = np.asarray(T, dtype=np.float64)
        return np.where(T > self.C, 1.0, np.where(T == self.C, self.gamma, 0.0))

    def decide(self, T, rng) -> np.ndarray:
        """Randomized decisions: True = reject decodability."""
        return rng.random(np.shape(T)) < self.reject_prob(T)

    def achieved_level(self, T) -> float:
        return float(self.reject_prob(T).mean())


def ump_test_calibrate(null_T, level: float, min_samples: int = 10_000) -> UmpTest:
    """``C`` = smallest sample value with P(T > C) <= level; gamma fills the atom at C."""
    T = np.sort(np.asarray(null_T, dtype=np.float64))
    if len(T) < min_samples:
        raise ApxError(f"need at least {min_samples} null samples, got {len(T)}")
    if not np.all(np.isfinite(T)):
        raise ApxError("null sample contains non-finite values")
    n = len(T)
    vals, counts = np.unique(T, return_counts=True)
    above = n - np.cumsum(counts)  # samples strictly greater than each value
    i = int(np.argmax(above / n <= level))
    C = float(vals[i])
    p_gt, p_eq = above[i] / n, counts[i] / n
    gamma = float(np.clip((level - p_gt) / p_eq, 0.0, 1.0))
    return UmpTest(level, C, gamma, n)


def simulate_null_T(n_bits: int, t: int, n_samples: int, rng, snr_db=(2.0, 8.0),
                    chunk: int = 20_000) -> np.ndarray:
    """Samples of ``T = mean(v)`` conditioned on exactly ``t`` bit errors.

    Each sample draws a frame SNR uniformly in dB and per-bit BPSK/AWGN LLRs,
    flips every bit with its posterior error probability and keeps the frame
    only if exactly ``t`` bits flipped.
    """
    out = []
    got = 0
    while got < n_samples:
        es = 10 ** (rng.uniform(*snr_db, size=(chunk, 1)) / 10)
        y = 1.0 + rng.standard_normal((chunk, n_bits)) / np.sqrt(2 * es)
        v = bit_error_prob(4 * es * y)
        U = (rng.random((chunk, n_bits)) < v).sum(axis=1)
        keep = v[U == t].mean(axis=1)
        out.append(keep)
        got += len(keep)
    return np.concatenate(out)[:n_samples]


# ---------------------------------------------------------------------------
# sufficiency against a hard-decision decoding oracle


def decodable(codebook: Codebook, errors, msg=None) -> np.ndarray:
    """Bounded-distance decoding succeeds (returns the sent message) for each error pattern."""
    errors = np.atleast_2d(np.asarray(errors, dtype=np.uint8))
    msg = np.zeros(codebook.k, dtype=np.uint8) if msg is None else np.asarray(msg, dtype=np.uint8)
    cw = codebook.encode(msg)
    got, ok = hard_decision_decode_batch(cw ^ errors, codebook)
    return ok & np.all(got == msg, axis=1)


def sufficiency_check(codebook: Codebook, v, n_trials: int, rng) -> dict:
    """Parallel-BSC simulation: decodability vs ``U <= t`` and invariance under permuting ``v``."""
    v = _v(v)
    if len(v) != codebook.n:
        raise ApxError("profile length must equal the code length")
    msgs = rng.integers(0, 2, size=(n_trials, codebook.k), dtype=np.uint8)
    res = {}
    perm = rng.permutation(codebook.n)
    for name, p in (("original", v), ("permuted", v[perm])):
        e = (rng.random((n_trials, codebook.n)) < p).astype(np.uint8)
        cw = codebook.encode(msgs)
        got, ok = hard_decision_decode_batch(cw ^ e, codebook)
        dec = ok & np.all(got == msgs, axis=1)
        U = e.sum(axis=1)
        res[name] = {"rate": float(dec.mean()), "matches_U": bool(np.all(dec == (U <= codebook.t)))}
    p1, p2 = res["original"]["rate"], res["permuted"]["rate"]
    se = np.sqrt((p1 * (1 - p1) + p2 * (1 - p2)) / n_trials)
    res["z"] = float(abs(p1 - p2) / se) if se > 0 else 0.0
    res["consistent"] = bool(res["z"] <= 3.0 and res["original"]["matches_U"] and res["permuted"]["matches_U"])
    return res


# ---------------------------------------------------------------------------
# suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    limit: float
    detail: str = ""


@dataclass
class SuiteReport:
    checks: list = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}: measured {c.measured:.4g} "
               f"(limit {c.limit:.4g}) {c.detail}".rstrip() for c in self.checks]
        out.append(f"{'PASS' if self.passed else 'FAIL'}  suite finished in {self.runtime_s:.1f} s")
        return out


def run_suite(seed: int = 0, bound_scale: float = 1.0, n_null: int = 20_000,
              n_holdout: int = 100_000, level: float = 0.1) -> SuiteReport:
    """Run every check at fixed seeds. ``bound_scale`` multiplies the L1 bound (negative control)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rep = SuiteReport()

    # exact pmf against subset enumeration
    worst = 0.0
    for n in range(1, 13):
        v = rng.uniform(0, 1, n)
        worst = max(worst, float(np.max(np.abs(poisson_binomial_pmf(v) - subset_enumeration_pmf(v)))))
    rep.checks.append(CheckResult("poisson-binomial pmf vs enumeration (n<=12)", worst <= 1e-12, worst,
                                  1e-12, "max abs difference"))

    # Poisson approximation error bound
    margins = []
    for _ in range(100):
        v = rng.uniform(0, 0.05, 200)
        margins.append(bound_scale * approx_error_bound(v) - l1_distance(v))
    m = float(min(margins))
    rep.checks.append(CheckResult("L1(exact, Poisson) <= 2*sum(v^2) on 100 profiles", m >= 0, m, 0.0,
                                  "smallest bound minus distance"))

    # monotone likelihood ratio
    profiles = [rng.uniform(0, s, 64) for s in np.linspace(0.005, 0.1, 12)]
    mlr = mlr_check(profiles)
    rep.checks.append(CheckResult("Poisson likelihood ratio monotone in T", mlr["monotone"],
                                  float(mlr["monotone"]), 1.0, f"{len(profiles)} profiles, n=64"))

    # UMP calibration at U = t
    cal = simulate_null_T(64, 2, n_null, rng)
    test = ump_test_calibrate(cal, level)
    held = simulate_null_T(64, 2, n_holdout, rng)
    dev = abs(test.achieved_level(held) - level)
    rep.checks.append(CheckResult(f"UMP test level on {n_holdout} held-out null samples", dev <= 0.01, dev,
                                  0.01, f"C={test.C:.5f}, gamma={test.gamma:.3f}"))

    # decodability of the (7,4) Hamming code equals U <= 1 over all error patterns
    _, cb = hamming74()
    pats = np.array(list(itertools.product((0, 1), repeat=7)), dtype=np.uint8)
    ok = decodable(cb, pats) == (pats.sum(axis=1) <= cb.t)
    rep.checks.append(CheckResult("(7,4) Hamming: decodable iff U <= 1, all 128 patterns", bool(ok.all()),
                                  float(ok.mean()), 1.0, "fraction agreeing"))

    # permutation invariance of the decodability probability
    res = sufficiency_check(cb, rng.uniform(0, 0.3, 7), 20_000, rng)
    rep.checks.append(CheckResult("decodability invariant under permuting v", res["consistent"], res["z"],
                                  3.0, "|z| of paired rate difference"))

    rep.runtime_s = time.perf_counter() - t0
    return rep
