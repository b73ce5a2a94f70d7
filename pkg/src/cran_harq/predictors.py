"""Classical distributed predictors and the feedback path to the UE.

Each RRH maps its local features to a scalar (a logistic-regression decoding
probability, or the mean bit-error probability for TH-LLR), quantizes it to
``b`` bits, and the UE combines the two feedbacks with another logistic
regression. Class 1 is ACK throughout; scores are ``P(ACK)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACK, NACK = 1, 0
FORMAT_VERSION = 1

SCHEMES = ("TH-SNR", "TH-LLR", "LR-LLR", "LR-SC", "DIDA")
COMBINED = "TH-SNR+DIDA"

# per-RRH feature groups each scheme consumes (see dataset column naming)
SCHEME_FEATURES = {
    "TH-SNR": ("snr",),
    "TH-LLR": ("thllr",),
    "LR-LLR": ("sc",),
    "LR-SC": ("thllr", "it"),
    "DIDA": ("thllr", "it", "sc"),
}


class PredictorError(ValueError):
    pass


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogisticModel:
    intercept: float
    weights: np.ndarray
    l2_strength: float = 1.0
    class_weights: tuple[float, float] = (1.0, 1.0)  # (ack, nack)
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    grad_norm: float = 0.0

    def __post_init__(self):
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        d = len(self.weights)
        self.mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.intercept)):
            raise PredictorError("non-finite logistic-regression parameters")

    @property
    def dim(self) -> int:
        return len(self.weights)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :] if self.dim > 1 or X.size == 1 else X[:, None]
        if X.shape[-1] != self.dim:
            raise PredictorError(f"feature dimension {X.shape[-1]} != model dimension {self.dim}")
        return self.intercept + ((X - self.mean) / self.scale) @ self.weights

    def to_dict(self) -> dict:
        return {"intercept": self.intercept, "weights": self.weights.tolist(),
                "l2_strength": self.l2_strength, "class_weights": list(self.class_weights),
                "mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "grad_norm": self.grad_norm}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(d["intercept"], np.array(d["weights"]), d["l2_strength"],
                   tuple(d["class_weights"]), np.array(d["mean"]), np.array(d["scale"]),
                   d.get("grad_norm", 0.0))


def lr_train(X, y, l2_strength: float = 1.0, balanced: bool = True, standardize: bool = True,
             tol: float = 1e-6, max_iter: int = 100) -> LogisticModel:
    """Weighted, L2-regularized logistic regression fitted by damped Newton steps.

    Minimizes ``sum_i c_i * logloss_i + l2_strength/2 * |w|^2`` (intercept not
    penalized) until the gradient norm drops below ``tol``. Balanced class
    weights are ``c = N / (2 N_class)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y).astype(np.float64)
    if len(X) != len(y):
        raise PredictorError("feature/label length mismatch")
    if not np.all(np.isfinite(X)):
        raise PredictorError("non-finite features")
    n_ack = int(np.sum(y == ACK))
    n_nack = len(y) - n_ack
    if n_ack == 0 or n_nack == 0:
        raise PredictorError("training data contains a single class")
    if balanced:
        cw = (len(y) / (2.0 * n_ack), len(y) / (2.0 * n_nack))
    else:
        cw = (1.0, 1.0)
    c = np.where(y == ACK, cw[0], cw[1])

    mean = X.mean(axis=0) if standardize else np.zeros(X.shape[1])
    scale = X.std(axis=0) if standardize else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    Z = np.hstack([np.ones((len(X), 1)), (X - mean) / scale])
    d = Z.shape[1]
    pen = np.full(d, l2_strength)
    pen[0] = 0.0

    def objective(theta):
        z = Z @ theta
        return np.sum(c * (np.logaddexp(0.0, z) - y * z)) + 0.5 * np.sum(pen * theta ** 2)

    theta = np.zeros(d)
    f = objective(theta)
    gnorm = np.inf
    for _ in range(max_iter):
        p = sigmoid(Z @ theta)
        g = Z.T @ (c * (p - y)) + pen * theta
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            break
        Hs = (Z * (c * p * (1 - p))[:, None]).T @ Z + np.diag(pen) + 1e-12 * np.eye(d)
        step = np.linalg.solve(Hs, g)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * g @ step or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
    else:
        p = sigmoid(Z @ theta)
        gnorm = float(np.linalg.norm(Z.T @ (c * (p - y)) + pen * theta))
    return LogisticModel(float(theta[0]), theta[1:], l2_strength, cw, mean, scale, gnorm)


def lr_predict(model: LogisticModel, X) -> np.ndarray:
    """``P(ACK | x)``: sigmoid of the affine score."""
    return sigmoid(model.decision_function(X))


# ---------------------------------------------------------------------------
# quantization and decisions


@dataclass
class Quantizer:
    bits: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.bits < 1:
            raise PredictorError("quantizer needs at least one bit")
        if not self.hi > self.lo:
            raise PredictorError("degenerate quantizer calibration (min >= max)")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @classmethod
    def calibrate(cls, x, bits: int) -> "Quantizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(bits, float(x.min()), float(x.max()))


def quantize(q: Quantizer, x):
    """Min-max normalize, clamp and round to the nearest of ``2^b`` equidistant levels.

    Returns ``(level, dequantized)``; the dequantized value is ``level / (2^b - 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.clip((x - q.lo) / (q.hi - q.lo), 0.0, 1.0)
    top = q.levels - 1
    level = np.floor(u * top + 0.5).astype(np.int64)
    return level, level / top


@dataclass
class ThresholdRule:
    """Reject decodability (NACK) iff the statistic exceeds ``C``; ``gamma`` randomizes at ``T == C``."""

    C: float
    gamma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise PredictorError("gamma must lie in [0, 1]")


def threshold_decide(rule: ThresholdRule, T, rng=None):
    T = np.asarray(T, dtype=np.float64)
    nack = T > rule.C
    if rule.gamma > 0:
        if rng is None:
            raise PredictorError("randomized rule needs an rng")
        tie = T == rule.C
        nack = nack | (tie & (rng.random(T.shape) < rule.gamma))
    return np.where(nack, NACK, ACK)


def calibrate_threshold(T, y) -> ThresholdRule:
    """Empirical ``C`` maximizing balanced accuracy of ``NACK iff T > C``."""
    T = np.asarray(T, dtype=np.float64)
    y = np.asarray(y)
    cand = np.unique(T)
    order = np.argsort(T)
    Ts, ys = T[order], y[order]
    n_ack = max(int(np.sum(ys == ACK)), 1)
    n_nack = max(len(ys) - n_ack, 1)
    # predictions ACK for T <= C: counts via cumulative sums at each candidate
    idx = np.searchsorted(Ts, cand, side="right")
    ack_le = np.concatenate([[0], np.cumsum(ys == ACK)])[idx]
    nack_le = np.concatenate([[0], np.cumsum(ys != ACK)])[idx]
    bal = 0.5 * (ack_le / n_ack + (n_nack - nack_le) / n_nack)
    return ThresholdRule(float(cand[int(np.argmax(bal))]))


def bias_cutoff(s) -> np.ndarray:
    """Score cutoff for bias ``s``: ``0.5 + s`` clamped to [0, 1]."""
    return np.clip(0.5 + np.asarray(s, dtype=np.float64), 0.0, 1.0)


def decide(score, s=0.0):
    """ACK iff ``score >= cutoff(s)``; ``s >= 0.5`` therefore always yields NACK."""
    score = np.asarray(score, dtype=np.float64)
    cut = bias_cutoff(s)
    ack = (score >= cut) & (cut < 1.0)
    return np.where(ack, ACK, NACK)


def ue_combine(combiner: LogisticModel | None, fb1, fb2, s: float = 0.0):
    """UE combination of two dequantized feedbacks: returns (decision, score)."""
    if combiner is None:
        raise PredictorError("UE combiner is not trained")
    X = np.column_stack([np.atleast_1d(fb1), np.atleast_1d(fb2)])
    score = lr_predict(combiner, X)
    return decide(score, s), score


# ---------------------------------------------------------------------------
# distributed predictors


@dataclass
class LabeledPairs:
    """Per-RRH feature matrices with BBU labels, as consumed by :func:`build_scheme`."""

    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None
    joint: np.ndarray | None = None

    def __post_init__(self):
        self.x1 = np.atleast_2d(np.asarray(self.x1, dtype=np.float64).T).T
        self.x2 = np.atleast_2d(np.asarray(self.x2, dtype=np.float64).T).T
        self.y = np.asarray(self.y).astype(np.int64)
        if not (len(self.x1) == len(self.x2) == len(self.y)):
            raise PredictorError("split arrays have inconsistent lengths")
        if self.ids is None:
            self.ids = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)


@dataclass
class LocalMap:
    """RRH-side map from features to the scalar that gets quantized."""

    kind: str  # "lr", "lr_db" (logistic regression on SNR in dB) or "stat"
    model: LogisticModel | None = None
    rule: ThresholdRule | None = None

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if self.kind == "stat":
            return X[:, 0]
        if self.kind == "lr_db":
            X = 10 * np.log10(np.maximum(X, 1e-300))
        return lr_predict(self.model, X)

    def to_dict(self) -> dict:
        return {"kind": self.kind,
                "model": None if self.model is None else self.model.to_dict(),
                "rule": None if self.rule is None else {"C": self.rule.C, "gamma": self.rule.gamma}}

    @classmethod
    def from_dict(cls, d: dict) -> "LocalMap":
        return cls(d["kind"],
                   None if d["model"] is None else LogisticModel.from_dict(d["model"]),
                   None if d["rule"] is None else ThresholdRule(d["rule"]["C"], d["rule"]["gamma"]))


@dataclass
class DistributedPredictor:
    scheme: str
    point: int
    fb_bits: int
    local: tuple[LocalMap, LocalMap]
    quantizers: tuple[Quantizer, Quantizer]
    combiner: LogisticModel
    bias: float = 0.0
    train_ids: np.ndarray | None = field(default=None, repr=False)
    val_ids: np.ndarray | None = field(default=None, repr=False)

    def feedback(self, i: int, X) -> np.ndarray:
        """Dequantized feedback of RRH ``i`` (0 or 1), computed from its own features only."""
        return quantize(self.quantizers[i], self.local[i](X))[1]

    def score(self, x1, x2) -> np.ndarray:
        return ue_combine(self.combiner, self.feedback(0, x1), self.feedback(1, x2))[1]

    def decide(self, x1, x2, s: float | None = None):
        return decide(self.score(x1, x2), self.bias if s is None else s)

    def to_dict(self) -> dict:
        return {"format": "cran_harq.distributed_predictor", "version": FORMAT_VERSION,
                "scheme": self.scheme, "point": self.point, "fb_bits": self.fb_bits,
                "local": [m.to_dict() for m in self.local],
                "quantizers": [{"bits": q.bits, "lo": q.lo, "hi": q.hi} for q in self.quantizers],
                "combiner": self.combiner.to_dict(), "bias": self.bias}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributedPredictor":
        if d.get("format") != "cran_harq.distributed_predictor":
            raise PredictorError("not a distributed-predictor record")
        if d.get("version") != FORMAT_VERSION:
            raise PredictorError(f"unsupported model version {d.get('version')}")
        return cls(d["scheme"], d["point"], d["fb_bits"],
                   tuple(LocalMap.from_dict(m) for m in d["local"]),
                   tuple(Quantizer(**q) for q in d["quantizers"]),
                   LogisticModel.from_dict(d["combiner"]), d["bias"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "DistributedPredictor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_split(data: LabeledPairs, name: str):
    ys = set(np.unique(data.y).tolist())
    if ys != {ACK, NACK}:
        raise PredictorError(f"{name} split lacks class diversity (classes present: {sorted(ys)})")


def build_scheme(scheme: str, train: LabeledPairs, val: LabeledPairs, fb_bits: int = 4,
                 point: int = 1, l2_strength: float = 1.0) -> DistributedPredictor:
    """Fit local maps on ``train``; quantizers and the UE combiner on ``val``."""
    if scheme not in ("TH-SNR", "TH-LLR", "LR-LLR", "LR-SC"):
        raise PredictorError(f"scheme {scheme!r} is not a classical scheme")
    if np.intersect1d(train.ids, val.ids).size:
        raise PredictorError("training and validation splits overlap")
    _check_split(train, "training")
    _check_split(val, "validation")

    locals_ = []
    for X in (train.x1, train.x2):
        if scheme == "TH-SNR":
            m = lr_train(10 * np.log10(np.maximum(X, 1e-300)), train.y, l2_strength)
            locals_.append(LocalMap("lr_db", m))
        elif scheme == "TH-LLR":
            locals_.append(LocalMap("stat", rule=calibrate_threshold(X[:, 0], train.y)))
        else:
            locals_.append(LocalMap("lr", lr_train(X, train.y, l2_strength)))

    quants = []
    for lm, X in zip(locals_, (val.x1, val.x2)):
        t = lm(X)
        if not t.max() > t.min():
            raise PredictorError("local feedback is constant on the validation split")
        quants.append(Quantizer.calibrate(t, fb_bits))
    f1 = quantize(quants[0], locals_[0](val.x1))[1]
    f2 = quantize(quants[1], locals_[1](val.x2))[1]
    combiner = lr_train(np.column_stack([f1, f2]), val.y, l2_strength)
    return DistributedPredictor(scheme, point, fb_bits, tuple(locals_), tuple(quants), combiner,
                                train_ids=train.ids.copy(), val_ids=val.ids.copy())
