"""Predictor input features: average SNR, subcarrier-averaged and iteration-averaged
bit-error probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ldpc import DecodeResult
from .linklevel import LlrFrame, bit_error_prob

KINDS = ("snr", "llr_subcarrier", "subcode_evolution")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureVector:
    kind: str
    values: np.ndarray
    rrh_id: int | None = None  # None marks joint (BBU) features
    flagged: np.ndarray | None = None  # entries that carry no received bits

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FeatureError(f"unknown feature kind {self.kind!r}")
        self.values = np.atleast_1d(np.asarray(self.values, dtype=np.float64))
        if self.kind == "snr":
            if self.values.shape != (1,) or self.values[0] < 0:
                raise FeatureError("snr feature must be a single non-negative value")
        elif np.any((self.values < 0) | (self.values > 0.5)):
            raise FeatureError("LLR-derived features must lie in [0, 0.5]")

    @property
    def joint(self) -> bool:
        return self.rrh_id is None


def avg_snr_feature(eff_snr, received_rvs: int | None = None) -> float:
    """Mean effective SNR over subcarriers and the first ``received_rvs`` RVs.

    ``eff_snr`` is ``(subcarrier,)`` or ``(subcarrier, rv)``.
    """
    a = np.asarray(eff_snr, dtype=np.float64)
    if a.ndim == 2 and received_rvs is not None:
        a = a[:, :received_rvs]
    if a.size == 0:
        raise FeatureError("empty SNR input")
    if np.any(a < 0):
        raise FeatureError("negative SNR")
    return float(np.mean(a))


def subcarrier_llr_feature(frame: LlrFrame, n_sc: int) -> FeatureVector:
    """Mean bit-error probability of all bits mapped to each subcarrier.

    Erased bits (LLR 0) contribute 0.5. A subcarrier without any bits gets 0.5
    and is flagged.
    """
    v = bit_error_prob(frame.llr)  # (symbol, bit)
    sc = np.asarray(frame.subcarrier_of)
    if sc.min() < 0 or sc.max() >= n_sc:
        raise FeatureError("subcarrier index out of range")
    per_sym = v.sum(axis=1)
    sums = np.bincount(sc, weights=per_sym, minlength=n_sc)
    counts = np.bincount(sc, minlength=n_sc) * v.shape[1]
    out = np.full(n_sc, 0.5)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    return FeatureVector("llr_subcarrier", out, flagged=~has)


def subcarrier_llr_batch(llr, bit_subcarrier, n_sc: int) -> np.ndarray:
    """Batched :func:`subcarrier_llr_feature` on ``(..., n_bits)`` LLRs in codeword order."""
    v = bit_error_prob(llr)
    onehot = np.zeros((len(bit_subcarrier), n_sc))
    onehot[np.arange(len(bit_subcarrier)), bit_subcarrier] = 1.0
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        raise FeatureError("a subcarrier carries no bits")
    return (v @ onehot) / counts


def subcode_evolution_feature(result: DecodeResult, n_it: int = 10) -> np.ndarray:
    """Per-iteration mean bit-error probability ``v_k``, k = 1..n_it.

    Returns shape ``(n_it,)`` for a single frame or ``(B, n_it)`` for a batch.
    """
    snaps = result.snapshots
    if snaps is None or snaps.shape[1] < n_it + 1:
        raise FeatureError(f"decode result lacks snapshots for {n_it} iterations")
    out = bit_error_prob(snaps[:, 1:n_it + 1, :]).mean(axis=2)
    return out[0] if len(out) == 1 else out


def mean_bit_error(llr, mask=None) -> np.ndarray:
    """Average bit-error probability over the (optionally masked) bits: the TH-LLR statistic."""
    v = bit_error_prob(llr)
    if mask is None:
        return v.mean(axis=-1)
    return v[..., mask].mean(axis=-1)
