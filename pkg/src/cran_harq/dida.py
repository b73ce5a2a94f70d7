"""Dual-input denoising autoencoder (DIDA) with quantized feedback.

Two encoders compress the per-RRH features to 3-dimensional latents, a shared
decoder reconstructs the joint (BBU) features from both latents, each RRH
classifier turns its latent into a decodability probability that is
fake-quantized to ``b`` bits, and a UE classifier combines the two feedbacks.

Everything is float64 numpy with hand-written backward passes and Adam.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .predictors import ACK

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CLAMP = 1e-12

TABLE3_GRID = {
    "epochs": (100, 200, 300, 400),
    "batch": (8192, 16392, 32784, 65568),
    "lam": (0.05, 0.1, 0.2, 0.3),
    "dropout": (0.05, 0.1, 0.15, 0.2),
}


class DidaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layers


class Layer:
    params: tuple = ()

    def grads(self):
        return [getattr(self, "d" + p) for p in self.params]


class Linear(Layer):
    params = ("W", "b")

    def __init__(self, n_in, n_out, rng):
        lim = 1.0 / np.sqrt(n_in)
        self.W = rng.uniform(-lim, lim, size=(n_in, n_out))
        self.b = rng.uniform(-lim, lim, size=n_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x, train):
        self.x = x
        return x @ self.W + self.b

    def backward(self, g):
        self.dW += self.x.T @ g
        self.db += g.sum(axis=0)
        return g @ self.W.T


class BatchNorm(Layer):
    params = ("gamma", "beta")

    def __init__(self, n, momentum=0.1, eps=1e-5):
        self.gamma, self.beta = np.ones(n), np.zeros(n)
        self.dgamma, self.dbeta = np.zeros(n), np.zeros(n)
        self.running_mean, self.running_var = np.zeros(n), np.ones(n)
        self.momentum, self.eps = momentum, eps
        self.frozen = False
        self.initialized = False

    def forward(self, x, train):
        if train and not self.frozen:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            n = len(x)
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * unbiased
            self.initialized = True
            self.batch_stats = True
        else:
            if not train and not self.initialized:
                raise DidaError("batch-norm running statistics are uninitialized")
            mu, var = self.running_mean, self.running_var
            self.batch_stats = False
        self.inv = 1.0 / np.sqrt(var + self.eps)
        self.xhat = (x - mu) * self.inv
        return self.gamma * self.xhat + self.beta

    def backward(self, g):
        self.dgamma += (g * self.xhat).sum(axis=0)
        self.dbeta += g.sum(axis=0)
        gx = g * self.gamma
        if not self.batch_stats:
            return gx * self.inv
        n = len(g)
        return self.inv / n * (n * gx - gx.sum(axis=0) - self.xhat * (gx * self.xhat).sum(axis=0))


class ReLU(Layer):
    def forward(self, x, train):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return g * self.mask


class Dropout(Layer):
    def __init__(self, p, rng):
        if not 0.0 <= p < 1.0:
            raise DidaError("dropout probability must lie in [0, 1)")
        self.p, self.rng = p, rng

    def forward(self, x, train):
        if not train or self.p == 0:
            self.mask = None
            return x
        self.mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self.mask

    def backward(self, g):
        return g if self.mask is None else g * self.mask


class Softmax(Layer):
    def forward(self, x, train):
        e = np.exp(x - x.max(axis=1, keepdims=True))
        self.s = e / e.sum(axis=1, keepdims=True)
        return self.s

    def backward(self, g):
        return self.s * (g - (g * self.s).sum(axis=1, keepdims=True))


class FakeQuantize(Layer):
    """Min/max observer plus uniform ``2^b``-level quantizer with a straight-through gradient."""

    def __init__(self, bits):
        if bits < 1:
            raise DidaError("quantizer needs at least one bit")
        self.bits = bits
        self.lo, self.hi = np.inf, -np.inf
        self.enabled = True

    def observe(self, x):
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))

    def quantize(self, x):
        if not self.hi > self.lo:
            return np.full_like(x, 0.5 * (self.lo + self.hi)) if np.isfinite(self.lo) else x
        top = 2 ** self.bits - 1
        u = np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        return self.lo + np.floor(u * top + 0.5) / top * (self.hi - self.lo)

    def forward(self, x, train):
        if train:
            self.observe(x)
        if not self.enabled:
            self.mask = None
            return x
        self.mask = (x >= self.lo) & (x <= self.hi)
        return self.quantize(x)

    def backward(self, g):
        return g if self.mask is None else g * self.mask


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, train):
        for l in self.layers:
            x = l.forward(x, train)
        return x

    def backward(self, g):
        for l in reversed(self.layers):
            g = l.backward(g)
        return g

    def param_layers(self):
        return [l for l in self.layers if l.params]


def fc(n_in, n_out, dropout, rng):
    """FC block: Linear, BatchNorm, ReLU, Dropout."""
    return [Linear(n_in, n_out, rng), BatchNorm(n_out), ReLU(), Dropout(dropout, rng)]


# ---------------------------------------------------------------------------
# model


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 8192
    lam: float = 0.1
    dropout: float = 0.1
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


class DidaModel:
    """The full DIDA network. ``d`` is the per-RRH (and joint) feature dimension."""

    PARTS = ("enc1", "enc2", "dec", "clf1", "clf2", "ue")

    def __init__(self, d, fb_bits=4, dropout=0.1, seed=0):
        self.d, self.fb_bits, self.dropout = d, fb_bits, dropout
        rng = np.random.default_rng(seed)
        self.rng = rng
        enc = lambda: Sequential(fc(d, 25, dropout, rng) + fc(25, 10, dropout, rng)  # noqa: E731
                                 + fc(10, 3, dropout, rng))
        clf = lambda n: Sequential(fc(n, 10, dropout, rng) + fc(10, 5, dropout, rng)  # noqa: E731
                                   + [Linear(5, 2, rng), Softmax()])
        self.enc1, self.enc2 = enc(), enc()
        self.dec = Sequential(fc(6, 10, dropout, rng) + fc(10, 25, dropout, rng) + [Linear(25, d, rng)])
        self.clf1, self.clf2 = clf(3), clf(3)
        self.ue = clf(2)
        self.fq = (FakeQuantize(fb_bits), FakeQuantize(fb_bits))
        # input standardization, fitted on training data; the reconstruction
        # target stays in raw feature units so neither loss term swamps the other
        self.in_mean, self.in_scale = np.zeros(d), np.ones(d)

    # -- bookkeeping
    def layers(self):
        for name in self.PARTS:
            yield from getattr(self, name).layers

    def param_layers(self):
        return [l for l in self.layers() if l.params]

    def zero_grad(self):
        for l in self.param_layers():
            for p in l.params:
                getattr(l, "d" + p)[...] = 0.0

    def set_frozen_bn(self, frozen=True):
        for l in self.layers():
            if isinstance(l, BatchNorm):
                l.frozen = frozen

    def set_dropout(self, p):
        for l in self.layers():
            if isinstance(l, Dropout):
                l.p = p

    def set_quantize(self, enabled=True):
        for q in self.fq:
            q.enabled = enabled

    def fit_scaling(self, y1, y2):
        x = np.vstack([y1, y2])
        self.in_mean, self.in_scale = x.mean(axis=0), x.std(axis=0)
        self.in_scale[self.in_scale == 0] = 1.0

    def _check(self, y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != self.d:
            raise DidaError(f"expected features of dimension {self.d}, got shape {y.shape}")
        return y

    # -- forward / backward
    def forward(self, y1, y2, train=False) -> dict:
        """Returns the joint reconstruction, ACK probabilities, latents and feedbacks."""
        x1 = (self._check(y1) - self.in_mean) / self.in_scale
        x2 = (self._check(y2) - self.in_mean) / self.in_scale
        z1 = self.enc1.forward(x1, train)
        z2 = self.enc2.forward(x2, train)
        yhat = self.dec.forward(np.hstack([z1, z2]), train)
        p1 = self.clf1.forward(z1, train)
        p2 = self.clf2.forward(z2, train)
        f1 = self.fq[0].forward(p1[:, 1:], train)
        f2 = self.fq[1].forward(p2[:, 1:], train)
        pue = self.ue.forward(np.hstack([f1, f2]), train)
        return {"yhat": yhat, "d_rrh1": p1[:, 1], "d_rrh2": p2[:, 1], "d_ue": pue[:, 1],
                "p_ue": pue, "z1": z1, "z2": z2, "fb1": f1[:, 0], "fb2": f2[:, 0]}

    def target(self, yj):
        return self._check(yj)

    def backward(self, out, t, d, lam):
        """Accumulate parameter gradients of :func:`loss` for the cached forward pass."""
        n = len(t)
        g_yhat = 2.0 * (out["yhat"] - t) / n
        q = out["p_ue"][:, 1]
        gq = -lam / n * (d * (q > CLAMP) / np.maximum(q, CLAMP)
                         - (1 - d) * (1 - q > CLAMP) / np.maximum(1 - q, CLAMP))
        g_pue = np.column_stack([np.zeros(n), gq])  # the CE term reads the ACK column only
        g_f = self.ue.backward(g_pue)
        gz = self.dec.backward(g_yhat)
        for i, (clf, enc, fq) in enumerate(((self.clf1, self.enc1, self.fq[0]),
                                            (self.clf2, self.enc2, self.fq[1]))):
            gp = fq.backward(g_f[:, i:i + 1])
            g_clf = np.column_stack([np.zeros(n), gp[:, 0]])
            enc.backward(gz[:, 3 * i:3 * i + 3] + clf.backward(g_clf))

    # -- inference helpers
    def rrh_feedback(self, i, y):
        """Dequantized feedback of RRH ``i`` (1 or 2) computed from that RRH's features alone."""
        enc, clf, fq = ((self.enc1, self.clf1, self.fq[0]), (self.enc2, self.clf2, self.fq[1]))[i - 1]
        x = (self._check(y) - self.in_mean) / self.in_scale
        p = clf.forward(enc.forward(x, False), False)
        return fq.forward(p[:, 1:], False)[:, 0]

    def ue_score(self, fb1, fb2):
        return self.ue.forward(np.column_stack([fb1, fb2]), False)[:, 1]

    def score(self, y1, y2):
        """UE ``P(ACK)`` for RRH feature matrices ``y1``, ``y2``."""
        return self.ue_score(self.rrh_feedback(1, y1), self.rrh_feedback(2, y2))

    # -- checkpoints
    def state(self) -> dict:
        st = {"in_mean": self.in_mean, "in_scale": self.in_scale}
        for name in self.PARTS:
            for j, l in enumerate(getattr(self, name).layers):
                for p in l.params:
                    st[f"{name}.{j}.{p}"] = getattr(l, p)
                if isinstance(l, BatchNorm):
                    st[f"{name}.{j}.running_mean"] = l.running_mean
                    st[f"{name}.{j}.running_var"] = l.running_var
        for i, q in enumerate(self.fq, 1):
            st[f"fq{i}.range"] = np.array([q.lo, q.hi])
        return st

    def save(self, path, extra=None):
        meta = {"version": CHECKPOINT_VERSION, "d": self.d, "fb_bits": self.fb_bits,
                "dropout": self.dropout, "extra": extra or {}}
        arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in self.state().items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "DidaModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise DidaError(f"unsupported checkpoint version {meta.get('version')}")
            m = cls(meta["d"], meta["fb_bits"], meta["dropout"])
            for k in ("in_mean", "in_scale"):
                setattr(m, k, z[k].astype(np.float64))
            for name in cls.PARTS:
                for j, l in enumerate(getattr(m, name).layers):
                    for p in l.params:
                        setattr(l, p, z[f"{name}.{j}.{p}"].astype(np.float64))
                    if isinstance(l, BatchNorm):
                        l.running_mean = z[f"{name}.{j}.running_mean"].astype(np.float64)
                        l.running_var = z[f"{name}.{j}.running_var"].astype(np.float64)
                        l.initialized = True
            for i, q in enumerate(m.fq, 1):
                q.lo, q.hi = (float(v) for v in z[f"fq{i}.range"])
            m.meta = meta
        return m


def loss(yhat, y, d_hat, d, lam) -> float:
    """Mean squared reconstruction error plus ``lam`` times binary cross-entropy.

    ``d`` is 1 for ACK; ``d_hat`` is the predicted ACK probability. Log
    arguments are clamped at 1e-12.
    """
    yhat, y = np.asarray(yhat, dtype=np.float64), np.asarray(y, dtype=np.float64)
    d_hat, d = np.asarray(d_hat, dtype=np.float64), np.asarray(d, dtype=np.float64)
    mse = np.mean(np.sum((y - yhat) ** 2, axis=1))
    ce = -np.mean(d * np.log(np.maximum(d_hat, CLAMP)) + (1 - d) * np.log(np.maximum(1 - d_hat, CLAMP)))
    return float(mse + lam * ce)


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, layers, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.layers, self.lr, self.b1, self.b2, self.eps = layers, lr, betas[0], betas[1], eps
        self.m = [[np.zeros_like(getattr(l, p)) for p in l.params] for l in layers]
        self.v = [[np.zeros_like(getattr(l, p)) for p in l.params] for l in layers]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for l, ms, vs in zip(self.layers, self.m, self.v):
            for p, m, v in zip(l.params, ms, vs):
                g = getattr(l, "d" + p)
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                getattr(l, p)[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class DidaData:
    """Per-RRH features ``y1``, ``y2``, joint BBU features ``yj`` and labels ``d`` (1 = ACK)."""

    y1: np.ndarray
    y2: np.ndarray
    yj: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.y1, self.y2, self.yj = (np.asarray(a, dtype=np.float64) for a in (self.y1, self.y2, self.yj))
        self.d = np.asarray(self.d).astype(np.float64)
        if not (len(self.y1) == len(self.y2) == len(self.yj) == len(self.d)):
            raise DidaError("inconsistent split lengths")

    def __len__(self):
        return len(self.d)


def backward_and_step(model: DidaModel, opt: Adam, y1, y2, yj, d, lam) -> float:
    """One training step; returns the batch loss before the update."""
    out = model.forward(y1, y2, train=True)
    t = model.target(yj)  # the decoder always reconstructs the joint features
    val = loss(out["yhat"], t, out["d_ue"], d, lam)
    if not np.isfinite(val):
        raise DidaError(f"non-finite loss {val} at step {opt.t}")
    model.zero_grad()
    model.backward(out, t, d, lam)
    opt.step()
    return val


def oversample(d, rng) -> np.ndarray:
    """Row indices with the minority class resampled (with replacement) to a 1:1 ratio."""
    d = np.asarray(d)
    pos, neg = np.flatnonzero(d == ACK), np.flatnonzero(d != ACK)
    if len(pos) == 0 or len(neg) == 0:
        raise DidaError("training data contains a single class")
    small, big = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = rng.choice(small, size=len(big), replace=True)
    return np.concatenate([big, extra])


def train(data: DidaData, config: TrainConfig, seed=0, fb_bits=4, val: DidaData | None = None):
    """Train a DIDA model. Returns (model, curve) with per-epoch loss and validation AUC."""
    from .harqeval import roc_auc

    model = DidaModel(data.y1.shape[1], fb_bits, config.dropout, seed)
    model.fit_scaling(data.y1, data.y2)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(model.param_layers(), config.lr, config.betas, config.eps)
    curve = []
    for ep in range(config.epochs):
        idx = oversample(data.d, rng)
        rng.shuffle(idx)
        losses = []
        for s in range(0, len(idx), config.batch):
            b = idx[s:s + config.batch]
            if len(b) < 2:
                continue
            losses.append(backward_and_step(model, opt, data.y1[b], data.y2[b], data.yj[b],
                                            data.d[b], config.lam))
        row = {"epoch": ep + 1, "train_loss": float(np.mean(losses))}
        if val is not None and (ep + 1 == config.epochs or (ep + 1) % 10 == 0):
            row["val_auc"] = roc_auc(model.score(val.y1, val.y2), val.d)
        curve.append(row)
    return model, curve


def grid_search(data: DidaData, val: DidaData, grid: dict | None = None, seed=0, fb_bits=4,
                test: DidaData | None = None):
    """Exhaustive search over the Cartesian grid, selecting by validation AUC.

    Returns (best config, best model, table) where the table has one row per cell.
    """
    from .harqeval import roc_auc

    grid = grid or TABLE3_GRID
    keys = ("epochs", "batch", "lam", "dropout")
    best, table = None, []
    for cell in itertools.product(*(grid[k] for k in keys)):
        cfg = TrainConfig(**dict(zip(keys, cell)))
        model, curve = train(data, cfg, seed, fb_bits, val)
        row = {**{k: v for k, v in asdict(cfg).items() if k in keys},
               "val_auc": roc_auc(model.score(val.y1, val.y2), val.d)}
        if test is not None:
            row["test_auc"] = roc_auc(model.score(test.y1, test.y2), test.d)
        log.info("dida cell %s -> val AUC %.4f", cell, row["val_auc"])
        table.append(row)
        if best is None or row["val_auc"] > best[0]:
            best = (row["val_auc"], cfg, model)
    return best[1], best[2], table
