"""HARQ system evaluation: ROC curves, expected transmissions, residual error,
spectral efficiency, bias optimization and a protocol Monte-Carlo oracle.

Conventions: a prediction point ``t`` (1-based) sits after ``t`` received RVs
and gates RV ``t+2``. ``alpha_t`` is the probability of predicting ACK for a
packet that is not decodable with ``t+1`` RVs, ``beta_t`` the probability of
predicting NACK for a decodable one.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .predictors import ACK, bias_cutoff


class EvalError(ValueError):
    pass


class InfeasibleTarget(EvalError):
    pass


def _probs(x, name):
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
        raise EvalError(f"{name} must lie in [0, 1]")
    return x


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    """Pareto-filtered (bias, alpha, beta) triples sorted by alpha, with anchors."""

    bias: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.alpha = _probs(self.alpha, "alpha")
        self.beta = _probs(self.beta, "beta")
        if np.any(np.diff(self.alpha) <= 0) or np.any(np.diff(self.beta) > 0):
            raise EvalError("curve must have strictly increasing alpha and non-increasing beta")

    def beta_at(self, a):
        return np.interp(a, self.alpha, self.beta)

    def bias_at(self, a):
        return np.interp(a, self.alpha, self.bias)

    def auc(self) -> float:
        """Standard ROC-AUC: area under TPR = 1 - beta against FPR = alpha."""
        return float(np.trapezoid(1.0 - self.beta, self.alpha))

    @classmethod
    def from_points(cls, alpha, beta, bias=None) -> "RocCurve":
        """Pareto-filter arbitrary (alpha, beta) pairs and add the (0,1), (1,0) anchors."""
        alpha = np.asarray(alpha, dtype=np.float64)
        beta = np.asarray(beta, dtype=np.float64)
        bias = np.zeros_like(alpha) if bias is None else np.asarray(bias, dtype=np.float64)
        a = np.concatenate([[0.0, 1.0], alpha])
        b = np.concatenate([[1.0, 0.0], beta])
        s = np.concatenate([[0.5, -0.5], bias])
        order = np.lexsort((b, a))
        keep = []
        best = np.inf
        for i in order:
            if b[i] < best:
                keep.append(i)
                best = b[i]
        if a[keep[-1]] < 1.0:
            keep.append(1)  # extend a beta = 0 segment out to the (1, 0) anchor
        keep = np.array(keep)
        return cls(s[keep], a[keep], b[keep])


def roc_points(scores, labels, cutoffs):
    """(alpha, beta) of ``ACK iff score >= cutoff`` for each cutoff."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    ack = np.sort(scores[labels == ACK])
    nack = np.sort(scores[labels != ACK])
    cutoffs = np.asarray(cutoffs, dtype=np.float64)
    alpha = 1.0 - np.searchsorted(nack, cutoffs, side="left") / len(nack)
    beta = np.searchsorted(ack, cutoffs, side="left") / len(ack)
    return alpha, beta


def roc_extract(scores, labels, n_points: int = 1000) -> RocCurve:
    """ROC from score cutoffs at up to ``n_points`` score quantiles.

    Scores are ``P(ACK)``; a cutoff ``c`` corresponds to bias ``c - 0.5``.
    """
    scores = np.clip(np.asarray(scores, dtype=np.float64), 1e-15, 1 - 1e-15)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise EvalError("ROC needs both classes")
    uniq = np.unique(scores)
    if len(uniq) <= n_points:
        cut = uniq
    else:
        cut = np.unique(np.quantile(scores, np.linspace(0.0, 1.0, n_points)))
    alpha, beta = roc_points(scores, labels, cut)
    return RocCurve.from_points(alpha, beta, cut - 0.5)


def roc_auc(scores, labels) -> float:
    """Rank-based ROC-AUC with ACK as the positive class (ties count one half)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == ACK
    n1, n0 = pos.sum(), (~pos).sum()
    if n1 == 0 or n0 == 0:
        raise EvalError("AUC needs both classes")
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def paired_auc_difference(scores_a, scores_b, labels, n_boot: int = 200, seed=0,
                          n_points: int = 1000) -> tuple[float, float]:
    """Pareto-curve AUC of ``scores_b`` minus that of ``scores_a`` on the same rows.

    Returns ``(delta, se)`` with the standard error from a paired bootstrap
    (rows resampled jointly for both score vectors).
    """
    scores_a, scores_b = np.asarray(scores_a), np.asarray(scores_b)
    labels = np.asarray(labels)
    if not (len(scores_a) == len(scores_b) == len(labels)):
        raise EvalError("paired scores must cover the same rows")

    def diff(idx):
        return roc_extract(scores_b[idx], labels[idx], n_points).auc() - \
            roc_extract(scores_a[idx], labels[idx], n_points).auc()

    rng = np.random.default_rng(seed)
    delta = diff(np.arange(len(labels)))
    boots = [diff(rng.integers(0, len(labels), len(labels))) for _ in range(n_boot)]
    return float(delta), float(np.std(boots, ddof=1))


# ---------------------------------------------------------------------------
# closed forms


@dataclass(frozen=True)
class ChainErrors:
    """``eps[i-1]`` = P(BBU fails with i+1 RVs | failed with i RVs), i = 1..t_max-1."""

    eps: tuple

    def __post_init__(self):
        _probs(self.eps, "chain errors")
        if len(self.eps) < 1:
            raise EvalError("empty chain")

    @property
    def t_max(self) -> int:
        return len(self.eps) + 1

    @property
    def product(self) -> float:
        return float(np.prod(self.eps))

    @classmethod
    def from_decodes(cls, dec) -> "ChainErrors":
        """Estimate from per-frame decodability flags ``dec[:, j]`` with ``j+2`` RVs."""
        dec = np.asarray(dec, dtype=bool)
        eps = []
        prev = np.ones(len(dec), dtype=bool)
        for j in range(dec.shape[1]):
            fail = ~dec[:, j]
            n = prev.sum()
            eps.append(float((fail & prev).sum() / n) if n else 0.0)
            prev = prev & fail
        return cls(tuple(eps))


def _check_inputs(chain: ChainErrors, alphas, betas=None, t_max=None):
    t_max = chain.t_max if t_max is None else t_max
    if t_max != chain.t_max:
        raise EvalError(f"chain has {len(chain.eps)} entries, expected {t_max - 1}")
    alphas = _probs(np.broadcast_to(alphas, (t_max - 2,)), "alpha")
    eps = np.asarray(chain.eps, dtype=np.float64)
    if betas is None:
        return eps, alphas
    return eps, alphas, _probs(np.broadcast_to(betas, (t_max - 2,)), "beta")


def stop_probabilities(chain: ChainErrors, alphas, betas, t_max: int | None = None,
                       printed_form: bool = False) -> np.ndarray:
    """P(stop after t RVs) for t = 2..t_max.

    The stop factor at a prediction point is ``eps*alpha + (1-eps)*(1-beta)``.
    ``printed_form=True`` uses ``eps*(1-alpha)`` in place of ``eps*alpha`` for
    t >= 3, which does not normalize; kept for comparison only.
    """
    eps, a, b = _check_inputs(chain, alphas, betas, t_max)
    t_max = chain.t_max
    q = eps[:-1] * (1 - a) + (1 - eps[:-1]) * b
    stop = (1 - eps[:-1]) * (1 - b)
    out = np.empty(t_max - 1)
    reach = 1.0
    for j in range(t_max - 2):
        f = stop[j] + eps[j] * ((1 - a[j]) if printed_form and j > 0 else a[j])
        out[j] = reach * f
        reach *= q[j]
    out[-1] = reach
    return out


def expected_transmissions(chain: ChainErrors, alphas, betas, t_max: int | None = None,
                           printed_form: bool = False) -> float:
    p = stop_probabilities(chain, alphas, betas, t_max, printed_form)
    return float(np.dot(np.arange(2, len(p) + 2), p))


def total_error(chain: ChainErrors, alphas, t_max: int | None = None) -> float:
    eps, a = _check_inputs(chain, alphas, None, t_max)
    tot = 0.0
    reach = 1.0
    for t in range(len(a)):
        tot += reach * eps[t] * a[t]
        reach *= eps[t] * (1 - a[t])
    return float(tot + reach * eps[-1])


def spectral_efficiency(eps_tot: float, e_t: float, n_packet: float, n_per_rv: float) -> float:
    if not e_t > 0:
        raise EvalError("expected transmissions must be positive")
    return (1.0 - eps_tot) * n_packet / (n_per_rv * e_t)


def rv_usage_reduction(chain: ChainErrors, alphas, betas, t_max: int | None = None) -> np.ndarray:
    """Percentage change of sending each gated RV (RV#3, RV#4, ...) given the previous one was sent."""
    eps, a, b = _check_inputs(chain, alphas, betas, t_max)
    q = eps[:-1] * (1 - a) + (1 - eps[:-1]) * b
    return (q - 1.0) * 100.0


# ---------------------------------------------------------------------------
# protocol Monte-Carlo


@dataclass
class McSummary:
    n_trials: int
    e_t: float
    eps_tot: float
    se_e_t: float
    se_eps_tot: float
    stop_counts: np.ndarray  # trials stopping after 2..t_max RVs
    rv_usage: np.ndarray  # P(gated RV sent | previous RV sent)

    @property
    def rv_reduction(self) -> np.ndarray:
        return (self.rv_usage - 1.0) * 100.0


def _summarize(T, err, t_max):
    n = len(T)
    counts = np.bincount(T - 2, minlength=t_max - 1)
    sent = np.array([(T >= t).sum() for t in range(2, t_max + 1)], dtype=np.float64)
    usage = np.divide(sent[1:], sent[:-1], out=np.zeros(t_max - 2), where=sent[:-1] > 0)
    return McSummary(n, float(T.mean()), float(err.mean()),
                     float(T.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
                     float(np.sqrt(err.mean() * (1 - err.mean()) / n)),
                     counts, usage)


def protocol_mc(chain: ChainErrors, alphas, betas, n_trials: int, seed=0,
                mode: str = "renewal") -> McSummary:
    """Discrete-event simulation of the gated protocol over a synthetic chain.

    RV#1 and RV#2 are always sent. At prediction point ``t`` the predictor sees
    whether ``t+1`` RVs suffice and answers ACK (stop) or NACK (send one more).

    ``mode="renewal"``: the state seen at each point is drawn afresh with
    probability ``eps_t``; the packet counts as delivered if any state along the
    way was decodable. ``mode="nested"``: decodability is monotone in the
    number of RVs, as on a physical link.
    """
    if n_trials < 1:
        raise EvalError("n_trials must be >= 1")
    if mode not in ("renewal", "nested"):
        raise EvalError(f"unknown mode {mode!r}")
    eps, a, b = _check_inputs(chain, alphas, betas)
    t_max = chain.t_max
    rng = np.random.default_rng(seed)
    T = np.full(n_trials, t_max, dtype=np.int64)
    err = np.zeros(n_trials, dtype=bool)
    active = np.ones(n_trials, dtype=bool)
    ok = np.zeros(n_trials, dtype=bool)  # decodable by some view so far
    for t in range(t_max - 2):
        u_state, u_pred = rng.random(n_trials), rng.random(n_trials)
        fail = u_state < eps[t]
        if mode == "nested":
            fail = fail & ~ok
        ack = np.where(fail, u_pred < a[t], u_pred >= b[t])
        ok = ok | ~fail
        stop = active & ack
        T[stop] = t + 2
        err[stop] = ~ok[stop]
        active &= ~stop
    last = rng.random(n_trials) < eps[-1]
    err[active] = (last & ~ok)[active]
    return _summarize(T, err, t_max)


def protocol_replay(dec, ack_pred) -> McSummary:
    """Replay the protocol on link-level outcomes.

    ``dec[:, j]``: frame decodable with ``j+2`` RVs; ``ack_pred[:, t]``: the
    predictor's decision (True = ACK) at prediction point ``t+1``.
    """
    dec = np.asarray(dec, dtype=bool)
    ack_pred = np.asarray(ack_pred, dtype=bool)
    n, k = dec.shape
    if ack_pred.shape != (n, k - 1):
        raise EvalError("prediction array must have one column fewer than decode flags")
    t_max = k + 1
    T = np.full(n, t_max, dtype=np.int64)
    err = ~dec[:, -1]
    active = np.ones(n, dtype=bool)
    for t in range(k - 1):
        stop = active & ack_pred[:, t]
        T[stop] = t + 2
        err[stop] = ~dec[stop, t]
        active &= ~stop
    return _summarize(T, err, t_max)


# ---------------------------------------------------------------------------
# bias optimization


@dataclass
class HarqOperatingPoint:
    biases: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    e_t: float
    eps_tot: float
    eta: float
    eps_target: float
    rv_reduction: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def as_row(self) -> dict:
        row = {"E_T": self.e_t, "eps_tot": self.eps_tot, "eta": self.eta, "eps_target": self.eps_target}
        for i, (s, a, b) in enumerate(zip(self.biases, self.alphas, self.betas), 1):
            row.update({f"s{i}": float(s), f"alpha{i}": float(a), f"beta{i}": float(b)})
        for i, r in enumerate(self.rv_reduction, 3):
            row[f"RV{i}_reduction"] = float(r)
        return row


def _max_alpha(chain, alphas, i, target):
    """Largest alpha_i in [0, 1] keeping total_error <= target (it is affine in alpha_i)."""
    a = np.array(alphas, dtype=np.float64)
    a[i] = 0.0
    e0 = total_error(chain, a)
    a[i] = 1.0
    e1 = total_error(chain, a)
    if e1 <= target:
        return 1.0
    if e0 > target:
        return -1.0
    return float(np.clip((target - e0) / (e1 - e0), 0.0, 1.0))


def _et_batch(eps, A, B):
    """Vectorized E[T] for rows of (alpha, beta) vectors."""
    q = eps[:-1] * (1 - A) + (1 - eps[:-1]) * B
    return 2.0 + np.cumprod(q, axis=1).sum(axis=1)


def _coordinate_descent(curves, chain, alphas, target, max_sweeps=50):
    a = np.array(alphas, dtype=np.float64)
    eps = np.asarray(chain.eps, dtype=np.float64)
    betas = np.array([c.beta_at(v) for c, v in zip(curves, a)])
    best = float(_et_batch(eps, a[None], betas[None])[0])
    for _ in range(max_sweeps):
        improved = False
        for i, c in enumerate(curves):
            hi = _max_alpha(chain, a, i, target)
            if hi < 0:
                continue
            # E[T] is piecewise linear in alpha_i: the optimum is at a vertex or an end
            cand = np.concatenate([[0.0, hi], c.alpha[c.alpha <= hi]])
            trial = np.tile(a, (len(cand), 1))
            trial[:, i] = cand
            tb = np.tile(betas, (len(cand), 1))
            tb[:, i] = c.beta_at(cand)
            vals = _et_batch(eps, trial, tb)
            j = int(np.argmin(vals))
            if vals[j] < best - 1e-13:
                best, a, betas = float(vals[j]), trial[j], tb[j]
                improved = True
        if not improved:
            break
    return a, best


def optimize_biases(curves, chain: ChainErrors, eps_target: float, restarts: int = 20,
                    seed=0, n_packet: float = 1.0, n_per_rv: float = 1.0,
                    n_grid: int = 50) -> HarqOperatingPoint:
    """Minimize E[T] subject to ``total_error <= eps_target`` over the interpolated curves.

    Exact coordinate minimization (E[T] is piecewise linear in each alpha and
    the error affine), started from a grid over the first coordinate and from
    seeded random points.
    """
    curves = list(curves)
    k = chain.t_max - 2
    if len(curves) != k:
        raise EvalError(f"need {k} curves, got {len(curves)}")
    zero = np.zeros(k)
    if total_error(chain, zero) > eps_target + 1e-15:
        raise InfeasibleTarget(
            f"target {eps_target:.3g} below the always-NACK error {total_error(chain, zero):.3g}")
    rng = np.random.default_rng(seed)
    starts = [zero]
    hi0 = _max_alpha(chain, zero, 0, eps_target)
    for v in np.linspace(0.0, max(hi0, 0.0), n_grid):
        s = zero.copy()
        s[0] = v
        starts.append(s)
    for _ in range(restarts):
        s = rng.random(k)
        while total_error(chain, s) > eps_target:
            s *= 0.5
        starts.append(s)
    best_a, best_v = None, np.inf
    for s in starts:
        a, v = _coordinate_descent(curves, chain, s, eps_target)
        if v < best_v - 1e-13:
            best_a, best_v = a, v
    betas = np.array([c.beta_at(v) for c, v in zip(curves, best_a)])
    biases = np.array([c.bias_at(v) for c, v in zip(curves, best_a)])
    et = expected_transmissions(chain, best_a, betas)
    err = total_error(chain, best_a)
    return HarqOperatingPoint(biases, best_a, betas, et, err,
                              spectral_efficiency(err, et, n_packet, n_per_rv), eps_target,
                              rv_usage_reduction(chain, best_a, betas))


def always_nack_point(chain: ChainErrors, eps_target: float = float("nan"), n_packet: float = 1.0,
                      n_per_rv: float = 1.0) -> HarqOperatingPoint:
    """Reference predictor that always sends every RV."""
    k = chain.t_max - 2
    a, b = np.zeros(k), np.ones(k)
    et = expected_transmissions(chain, a, b)
    err = total_error(chain, a)
    return HarqOperatingPoint(bias_cutoff(np.full(k, 0.5)) - 0.5, a, b, et, err,
                              spectral_efficiency(err, et, n_packet, n_per_rv), eps_target,
                              rv_usage_reduction(chain, a, b))


# ---------------------------------------------------------------------------
# table emission


def write_table(rows, path) -> None:
    """Write dict rows as CSV (``.csv``) or a JSON list (anything else)."""
    rows = list(rows)
    if str(path).endswith(".csv"):
        cols = []
        for r in rows:
            cols += [c for c in r if c not in cols]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    else:
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1, default=float)


def roc_rows(curve: RocCurve, **tags) -> list[dict]:
    """Plot-ready rows; ``*_plot`` columns replace exact zeros by NaN for log axes."""
    rows = []
    for s, a, b in zip(curve.bias, curve.alpha, curve.beta):
        rows.append({**tags, "bias": float(s), "alpha": float(a), "beta": float(b),
                     "alpha_plot": float(a) if a > 0 else float("nan"),
                     "beta_plot": float(b) if b > 0 else float("nan")})
    return rows


def point_dict(p: HarqOperatingPoint) -> dict:
    d = asdict(p)
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}
