"""Block-fading SIMO link for two RRHs: QPSK mapping, channel, MRC and LLRs.

Noise variance is normalized to one; the average SNR per receive antenna is
carried by the channel gains, ``E|h|^2 = 10**(snr_db/10)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT2 = np.sqrt(2.0)


class LinkError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    n: int = 256  # channel uses of a full transmission (all RVs)
    p: int = 64  # channel uses available at the first prediction point
    n_rx_per_rrh: int = 2
    n_sc: int = 16
    mod_bits: int = 2
    t_max: int = 4
    fb_bits: int = 4
    snr_db: float = 0.0
    k_factor_db: float = 10.0
    rho: float = 0.0  # AR(1) correlation of the scattered component across RVs
    shadow_db: float = 6.0  # std (dB) of per-frame, per-RRH log-normal shadowing
    n_rrh: int = 2

    def __post_init__(self):
        if not self.p < self.n:
            raise LinkError("p must be smaller than n")
        if self.t_max < 2:
            raise LinkError("t_max must be >= 2")
        if self.fb_bits < 1:
            raise LinkError("fb_bits must be >= 1")
        if self.n % self.t_max:
            raise LinkError("n must be divisible by t_max")
        if self.rv_symbols % self.n_sc:
            raise LinkError("n_sc must divide the per-RV symbol count")
        if not 0.0 <= self.rho <= 1.0:
            raise LinkError("rho must lie in [0, 1]")
        if self.mod_bits != 2:
            raise LinkError("only QPSK (mod_bits=2) is supported")

    @property
    def rv_symbols(self) -> int:
        return self.n // self.t_max

    @property
    def n_coded_bits(self) -> int:
        return self.n * self.mod_bits


@dataclass
class ChannelRealization:
    h: np.ndarray  # complex (rrh, antenna, subcarrier, rv)
    noise_var: float = 1.0

    def __post_init__(self):
        if self.h.ndim != 4:
            raise LinkError("h must be indexed (rrh, antenna, subcarrier, rv)")
        if not np.all(np.isfinite(self.h)):
            raise LinkError("non-finite channel gains")
        if self.noise_var < 0:
            raise LinkError("noise variance must be non-negative")

    @property
    def n_sc(self) -> int:
        return self.h.shape[2]


@dataclass
class RvObservation:
    y: np.ndarray  # complex (antenna, symbol)
    rrh_id: int
    rv_index: int


@dataclass
class LlrFrame:
    llr: np.ndarray  # (symbol, bit) or flattened bits
    subcarrier_of: np.ndarray  # symbol -> subcarrier

    def __post_init__(self):
        self.llr = np.asarray(self.llr, dtype=np.float64)
        if self.llr.ndim == 1:
            self.llr = self.llr.reshape(len(self.subcarrier_of), -1)
        if self.llr.shape[0] != len(self.subcarrier_of):
            raise LinkError("LLR frame length does not match the subcarrier map")
        if not np.all(np.isfinite(self.llr)):
            raise LinkError("non-finite LLRs")

    @property
    def flat(self) -> np.ndarray:
        return self.llr.reshape(-1)


# ---------------------------------------------------------------------------


def qam_modulate(bits, M: int = 2) -> np.ndarray:
    """Gray QPSK: bit0 sets the real sign, bit1 the imaginary sign (0 -> +, 1 -> -)."""
    if M != 2:
        raise LinkError(f"unsupported modulation order M={M}")
    bits = np.asarray(bits)
    if bits.shape[-1] % M:
        raise LinkError("bit count must be divisible by M")
    b = bits.reshape(bits.shape[:-1] + (-1, 2)).astype(np.float64)
    return ((1 - 2 * b[..., 0]) + 1j * (1 - 2 * b[..., 1])) / SQRT2


def subcarrier_map(n_symbols: int, n_sc: int) -> np.ndarray:
    return np.arange(n_symbols) % n_sc


def draw_channel(params: SimParams, rng: np.random.Generator, batch: int | None = None
                 ) -> np.ndarray:
    """Rician block-fading gains, shape ``([batch,] rrh, antenna, subcarrier, rv)``.

    The LOS phase is fixed per (rrh, antenna) across subcarriers and RVs; the
    scattered part is i.i.d. across subcarriers and AR(1) with coefficient
    ``rho`` across RVs.
    """
    lead = () if batch is None else (batch,)
    shape = lead + (params.n_rrh, params.n_rx_per_rrh, params.n_sc)
    K = 10 ** (params.k_factor_db / 10)
    phase = rng.uniform(0, 2 * np.pi, size=shape[:-1] + (1,))
    los = np.sqrt(K / (K + 1)) * np.exp(1j * phase)
    amp = np.sqrt(10 ** (params.snr_db / 10))
    if params.shadow_db > 0:
        sh = rng.normal(0.0, params.shadow_db, size=lead + (params.n_rrh, 1, 1, 1))
        amp = amp * 10 ** (sh / 20)

    def cn(s):
        return (rng.standard_normal(s) + 1j * rng.standard_normal(s)) / SQRT2

    scat = np.empty(shape + (params.t_max,), dtype=complex)
    scat[..., 0] = cn(shape)
    innov = np.sqrt(1 - params.rho ** 2)
    for rv in range(1, params.t_max):
        scat[..., rv] = params.rho * scat[..., rv - 1] + innov * cn(shape)
    return amp * (los[..., None] + np.sqrt(1 / (K + 1)) * scat)


def apply_channel(x, ch: ChannelRealization, rng: np.random.Generator, rv: int = 0,
                  noiseless: bool = False) -> tuple[RvObservation, ...]:
    """Pass one RV worth of symbols through every RRH: ``y = h x + z`` per antenna."""
    x = np.asarray(x, dtype=complex)
    n_rrh, n_ant, n_sc, n_rv = ch.h.shape
    if x.ndim != 1 or len(x) % n_sc:
        raise LinkError("symbol count must be a multiple of the number of subcarriers")
    if not 0 <= rv < n_rv:
        raise LinkError("rv index out of range")
    sc = subcarrier_map(len(x), n_sc)
    out = []
    for r in range(n_rrh):
        g = ch.h[r, :, sc, rv].T  # (antenna, symbol)
        y = g * x[None, :]
        if not noiseless:
            z = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
            y = y + np.sqrt(ch.noise_var / 2) * z
        out.append(RvObservation(y, r, rv))
    return tuple(out)


def mrc_equalize(obs: RvObservation, ch: ChannelRealization, noise_var: float | None = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """MRC over the antennas of one RRH.

    Returns the equalized symbols ``sum(h* y) / sum(|h|^2)`` and the effective
    SNR ``sum(|h|^2) / noise_var`` per subcarrier. A subcarrier with an all-zero
    channel yields symbol 0 and SNR 0.
    """
    nv = ch.noise_var if noise_var is None else noise_var
    g_sc = ch.h[obs.rrh_id, :, :, obs.rv_index]  # (antenna, subcarrier)
    if obs.y.shape[0] != g_sc.shape[0]:
        raise LinkError("antenna count mismatch between observation and channel")
    sc = subcarrier_map(obs.y.shape[1], g_sc.shape[1])
    g = g_sc[:, sc]
    gain = np.sum(np.abs(g) ** 2, axis=0)
    num = np.sum(np.conj(g) * obs.y, axis=0)
    r = np.divide(num, gain, out=np.zeros_like(num), where=gain > 0)
    snr_sc = np.sum(np.abs(g_sc) ** 2, axis=0) / nv if nv > 0 else np.full(g_sc.shape[1], np.inf)
    return r, snr_sc


def compute_llrs(r, eff_snr, M: int = 2, subcarrier_of=None) -> LlrFrame:
    """Exact QPSK LLRs ``log P(b=1|r)/P(b=0|r)`` after MRC.

    ``eff_snr`` is either per symbol or per subcarrier (then ``subcarrier_of``
    maps symbols to subcarriers; defaults to the interleaved map).
    """
    if M != 2:
        raise LinkError(f"unsupported modulation order M={M}")
    r = np.asarray(r, dtype=complex)
    eff_snr = np.asarray(eff_snr, dtype=np.float64)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(eff_snr))):
        raise LinkError("non-finite equalizer output")
    if subcarrier_of is None:
        subcarrier_of = subcarrier_map(len(r), len(eff_snr)) if eff_snr.size != r.size else \
            np.arange(len(r))
    snr = eff_snr[subcarrier_of] if eff_snr.size != r.size else eff_snr
    llr = np.stack([-2 * SQRT2 * snr * r.real, -2 * SQRT2 * snr * r.imag], axis=-1)
    return LlrFrame(llr, np.asarray(subcarrier_of))


def bit_error_prob(llr):
    """``1 / (1 + exp(|llr|))``, computed without overflow."""
    a = np.abs(np.asarray(llr, dtype=np.float64))
    e = np.exp(-a)
    return e / (1.0 + e)


def joint_llr_combine(frames) -> LlrFrame:
    """BBU combining of per-RRH LLRs of the same bits: elementwise sum."""
    frames = list(frames)
    if not frames:
        raise LinkError("no frames to combine")
    ref = frames[0]
    for f in frames[1:]:
        if f.llr.shape != ref.llr.shape or not np.array_equal(f.subcarrier_of, ref.subcarrier_of):
            raise LinkError("LLR frames have mismatched indexing")
    return LlrFrame(np.sum([f.llr for f in frames], axis=0), ref.subcarrier_of.copy())


# ---------------------------------------------------------------------------
# vectorized frame simulation used by the dataset generator


@dataclass
class FrameBatch:
    llr: np.ndarray  # (B, rrh, n_coded_bits) channel LLRs, codeword bit order
    eff_snr: np.ndarray  # (B, rrh, subcarrier, rv)
    bit_subcarrier: np.ndarray  # (n_coded_bits,) subcarrier of each coded bit


def rv_bit_layout(n_coded_bits: int, t_max: int, n_sc: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symbol/subcarrier placement of coded bits for round-robin RVs.

    Bit ``i`` belongs to RV ``i % t_max``; inside an RV consecutive bits pair
    into QPSK symbols and symbol ``s`` sits on subcarrier ``s % n_sc``.
    Returns (rv symbol index, subcarrier, rv) per coded bit.
    """
    rv_of = np.arange(n_coded_bits) % t_max
    slot = np.arange(n_coded_bits) // t_max  # index of the bit inside its RV
    sym = slot // 2
    return sym, sym % n_sc, rv_of


def simulate_frames(codewords, params: SimParams, rng: np.random.Generator) -> FrameBatch:
    """Transmit a batch of codewords over both RRHs and return per-RRH channel LLRs."""
    cw = np.atleast_2d(codewords)
    B, nb = cw.shape
    if nb != params.n_coded_bits:
        raise LinkError(f"codeword length {nb} != {params.n_coded_bits}")
    t = params.t_max
    # (B, rv, bits-in-rv) ordering, then QPSK per RV
    per_rv = cw.reshape(B, -1, t).transpose(0, 2, 1)
    x = qam_modulate(per_rv)  # (B, rv, symbols)
    h = draw_channel(params, rng, batch=B)  # (B, rrh, ant, sc, rv)
    sc = subcarrier_map(params.rv_symbols, params.n_sc)
    g = h[:, :, :, sc, :]  # (B, rrh, ant, sym, rv)
    g = g.transpose(0, 1, 2, 4, 3)  # (B, rrh, ant, rv, sym)
    shape = g.shape
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / SQRT2
    y = g * x[:, None, None, :, :] + z
    gain = np.sum(np.abs(g) ** 2, axis=2)  # (B, rrh, rv, sym)
    num = np.sum(np.conj(g) * y, axis=2)
    r = np.divide(num, gain, out=np.zeros_like(num), where=gain > 0)
    snr = gain  # noise variance is 1
    l0 = -2 * SQRT2 * snr * r.real
    l1 = -2 * SQRT2 * snr * r.imag
    llr_rv = np.stack([l0, l1], axis=-1).reshape(B, params.n_rrh, t, -1)  # bits in RV
    llr = llr_rv.transpose(0, 1, 3, 2).reshape(B, params.n_rrh, nb)
    eff = np.sum(np.abs(h) ** 2, axis=2)  # (B, rrh, sc, rv)
    _, bit_sc, _ = rv_bit_layout(nb, t, params.n_sc)
    return FrameBatch(llr, eff, bit_sc)
