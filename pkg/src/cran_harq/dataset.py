"""Dataset generation and persistence.

Every simulated frame contributes one row to the prediction point 1 file and
one row to the point 2 file. Point ``t`` sees the first ``t`` RVs of each RRH;
its label is whether the BBU decodes with ``t+1`` RVs. Files are CSV with a
JSON header line holding schema version, config hash and the column list.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache

import numpy as np

from .config import SPLITS, ExperimentConfig, n_workers
from .features import mean_bit_error, subcarrier_llr_batch
from .ldpc import Encoder, MinSumDecoder, RvSchedule, make_regular_ldpc, puncture, read_alist
from .linklevel import bit_error_prob, simulate_frames
from .predictors import SCHEME_FEATURES, LabeledPairs

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
POINTS = (1, 2)


class DatasetError(ValueError):
    pass


def feature_columns(tag, n_sc: int, n_it: int, with_snr=True) -> list[str]:
    cols = [f"snr_{tag}"] if with_snr else []
    cols += [f"thllr_{tag}"]
    cols += [f"sc_{tag}_{s}" for s in range(n_sc)]
    cols += [f"it_{tag}_{k}" for k in range(1, n_it + 1)]
    return cols


def columns(n_sc: int, n_it: int) -> list[str]:
    return (["frame", "seed", "label", "dec2", "dec3", "dec4"]
            + feature_columns("r1", n_sc, n_it) + feature_columns("r2", n_sc, n_it)
            + feature_columns("j", n_sc, n_it, with_snr=False))


def group_columns(group: str, tag: str, n_sc: int, n_it: int) -> list[str]:
    if group == "snr":
        return [f"snr_{tag}"]
    if group == "thllr":
        return [f"thllr_{tag}"]
    if group == "sc":
        return [f"sc_{tag}_{s}" for s in range(n_sc)]
    if group == "it":
        return [f"it_{tag}_{k}" for k in range(1, n_it + 1)]
    raise DatasetError(f"unknown feature group {group!r}")


# ---------------------------------------------------------------------------
# code construction (cached per process)


@lru_cache(maxsize=4)
def _build_code(code_key: str):
    spec = json.loads(code_key)
    if spec["alist"]:
        H = read_alist(spec["alist"])
    else:
        H = make_regular_ldpc(spec["n_bits"], spec["row_weight"], spec["col_weight"], spec["seed"])
    return H, Encoder(H)


def build_code(cfg: ExperimentConfig):
    return _build_code(json.dumps(cfg["code"], sort_keys=True))


# ---------------------------------------------------------------------------
# frame simulation


def batch_seed(cfg: ExperimentConfig, snr_db: float, split: str, batch: int) -> np.random.SeedSequence:
    """Seed for one batch; independent of the number of workers."""
    return np.random.SeedSequence([int(cfg["seed"]), int(round(snr_db * 1000)) + 10 ** 6,
                                   SPLITS.index(split), batch])


def simulate_batch(cfg: ExperimentConfig, snr_db: float, split: str, batch: int, n_frames: int):
    """Simulate ``n_frames`` frames; returns {point: 2-D row array} in :func:`columns` order."""
    H, enc = build_code(cfg)
    params = cfg.sim_params(snr_db)
    dcfg = cfg["decoder"]
    n_it = dcfg["n_snapshots"]
    ss = batch_seed(cfg, snr_db, split, batch)
    rng = np.random.default_rng(ss)
    msg = rng.integers(0, 2, size=(n_frames, enc.k), dtype=np.uint8)
    cw = enc.encode(msg)
    fb = simulate_frames(cw, params, rng)
    sched = RvSchedule.round_robin(H.n_bits, params.t_max)
    dec = MinSumDecoder(H, dcfg["scale"])
    joint = fb.llr.sum(axis=1)

    # BBU decodes with 2, 3, 4 RVs; the 2-RV run also yields point 2 joint snapshots
    labels = {}
    joint_snaps = {}
    for t in range(2, params.t_max + 1):
        r = dec.decode(puncture(joint, sched, t), dcfg["max_iter"], n_it if t == 2 else 0, codeword=cw)
        labels[t] = r.success
        if t == 2:
            joint_snaps[2] = r.snapshots
    r = dec.decode(puncture(joint, sched, 1), n_it, n_it)
    joint_snaps[1] = r.snapshots

    first = batch * cfg["batch_frames"]
    frame_ids = np.arange(first, first + n_frames)
    seed_col = np.full(n_frames, ss.generate_state(1)[0], dtype=np.float64)
    out = {}
    for point in POINTS:
        mask = sched.received_mask(point)
        blocks = [frame_ids[:, None], seed_col[:, None], labels[point + 1][:, None]]
        blocks += [labels[t][:, None] for t in range(2, params.t_max + 1)]
        for i in range(params.n_rrh):
            llr = puncture(fb.llr[:, i], sched, point)
            snaps = dec.decode(llr, n_it, n_it).snapshots
            blocks.append(fb.eff_snr[:, i, :, :point].mean(axis=(1, 2))[:, None])
            blocks += _llr_features(llr, snaps, mask, fb.bit_subcarrier, params.n_sc)
        llr = puncture(joint, sched, point)
        blocks += _llr_features(llr, joint_snaps[point], mask, fb.bit_subcarrier, params.n_sc)
        out[point] = np.hstack([np.asarray(b, dtype=np.float64) for b in blocks])
    return out


def link_bler(cfg: ExperimentConfig, snr_db: float, n_frames: int, seed=0, chunk: int = 2000):
    """BBU block error rate with 2..t_max RVs, without feature extraction.

    Returns ``(bler, n_frames)``; used to calibrate the SNR grid.
    """
    H, enc = build_code(cfg)
    params = cfg.sim_params(snr_db)
    dcfg = cfg["decoder"]
    sched = RvSchedule.round_robin(H.n_bits, params.t_max)
    dec = MinSumDecoder(H, dcfg["scale"])
    rng = np.random.default_rng([seed, int(round(snr_db * 1000)) + 10 ** 6])
    fails = np.zeros(params.t_max - 1)
    for start in range(0, n_frames, chunk):
        n = min(chunk, n_frames - start)
        cw = enc.encode(rng.integers(0, 2, size=(n, enc.k), dtype=np.uint8))
        joint = simulate_frames(cw, params, rng).llr.sum(axis=1)
        for j, t in enumerate(range(2, params.t_max + 1)):
            fails[j] += np.sum(~dec.decode(puncture(joint, sched, t), dcfg["max_iter"], 0, codeword=cw).success)
    return fails / n_frames, n_frames


def _llr_features(llr, snaps, mask, bit_sc, n_sc):
    th = mean_bit_error(llr, mask)[:, None]
    sc = subcarrier_llr_batch(llr, bit_sc, n_sc)
    it = bit_error_prob(snaps[:, 1:]).mean(axis=2)
    return [th, sc, it]


def _run_batch(args):
    raw, snr_db, split, batch, n = args
    return simulate_batch(ExperimentConfig(raw), snr_db, split, batch, n)


def generate_split(cfg: ExperimentConfig, snr_db: float, split: str) -> dict:
    """All rows of one split at one SNR, as {point: array}."""
    total = int(cfg["sizes"][split])
    bf = int(cfg["batch_frames"])
    jobs = [(cfg.raw, snr_db, split, b, min(bf, total - b * bf)) for b in range((total + bf - 1) // bf)]
    workers = n_workers()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_run_batch, jobs))
    else:
        parts = [_run_batch(j) for j in jobs]
    return {p: np.vstack([x[p] for x in parts]) for p in POINTS}


# ---------------------------------------------------------------------------
# files


def dataset_path(root, snr_db: float, point: int, split: str) -> str:
    return os.path.join(root, "datasets", f"snr{snr_db:+.1f}_p{point}_{split}.csv")


def write_dataset(path, rows: np.ndarray, cols: list[str], header: dict) -> None:
    if rows.shape[1] != len(cols):
        raise DatasetError("row width does not match the column list")
    head = {"schema_version": SCHEMA_VERSION, "columns": cols, "n_rows": int(len(rows)), **header}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


class Dataset:
    """One loaded dataset file: a header dict and a float matrix with named columns."""

    def __init__(self, header: dict, data: np.ndarray):
        self.header, self.data = header, data
        self.index = {c: i for i, c in enumerate(header["columns"])}

    def __len__(self):
        return len(self.data)

    def col(self, name):
        return self.data[:, self.index[name]]

    def cols(self, names):
        return self.data[:, [self.index[n] for n in names]]

    @property
    def labels(self):
        return self.col("label").astype(np.int64)

    @property
    def decodes(self):
        return self.cols(["dec2", "dec3", "dec4"]).astype(bool)

    def rrh_features(self, groups, rrh: int):
        n_sc, n_it = self.header["n_sc"], self.header["n_it"]
        names = [c for g in groups for c in group_columns(g, f"r{rrh}", n_sc, n_it)]
        return self.cols(names)

    def joint_features(self, groups):
        n_sc, n_it = self.header["n_sc"], self.header["n_it"]
        names = [c for g in groups for c in group_columns(g, "j", n_sc, n_it)]
        return self.cols(names)

    def pairs(self, scheme: str, with_joint=False) -> LabeledPairs:
        groups = SCHEME_FEATURES[scheme]
        return LabeledPairs(self.rrh_features(groups, 1), self.rrh_features(groups, 2), self.labels,
                            ids=self.col("frame").astype(np.int64) + SPLITS.index(self.header["split"]) * 10 ** 9,
                            joint=self.joint_features(groups) if with_joint else None)


def read_dataset(path, expected_hash: str | None = None) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        cols = next(csv.reader([fh.readline()]))
        if cols != header["columns"]:
            raise DatasetError(f"{path}: column line disagrees with header")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema version {header.get('schema_version')}")
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise DatasetError(f"{path}: config hash {header.get('config_hash')} != {expected_hash}")
    if data.shape != (header["n_rows"], len(cols)):
        raise DatasetError(f"{path}: expected {header['n_rows']} rows of {len(cols)} columns")
    return Dataset(header, data)
