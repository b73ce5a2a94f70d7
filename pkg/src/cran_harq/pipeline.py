"""Experiment stages: generate datasets, train predictors, evaluate, report."""
from __future__ import annotations

import json
import logging
import os

import numpy as np

from . import dida
from .config import SPLITS, ExperimentConfig
from .dataset import POINTS, build_code, columns, dataset_path, generate_split, read_dataset, write_dataset
from .harqeval import (ChainErrors, InfeasibleTarget, always_nack_point, optimize_biases,
                       roc_auc, roc_extract, roc_rows, write_table)
from .predictors import COMBINED, DistributedPredictor, build_scheme

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


def _guard(path, force):
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _snrs(cfg, snrs):
    return [float(s) for s in (snrs if snrs else cfg["snr_grid"])]


def _tag(snr):
    return f"snr{snr:+.1f}"


# ---------------------------------------------------------------------------
# generate


def chain_path(root, snr):
    return os.path.join(root, "datasets", f"chain_{_tag(snr)}.json")


def generate(cfg: ExperimentConfig, root, snrs=None, force=False) -> list[str]:
    written = []
    h = cfg.dataset_hash()
    n_sc, n_it = cfg["sim"]["n_sc"], cfg["decoder"]["n_snapshots"]
    cols = columns(n_sc, n_it)
    for snr in _snrs(cfg, snrs):
        paths = [dataset_path(root, snr, p, s) for p in POINTS for s in SPLITS]
        for p in paths + [chain_path(root, snr)]:
            _guard(p, force)
        chain = {}
        for split in SPLITS:
            log.info("generating snr %.1f dB, split %s", snr, split)
            rows = generate_split(cfg, snr, split)
            for p in POINTS:
                header = {"config_hash": h, "snr_db": snr, "point": p, "split": split,
                          "n_sc": n_sc, "n_it": n_it, "seed": int(cfg["seed"]),
                          "feature_kinds": {"snr": 1, "thllr": 1, "sc": n_sc, "it": n_it}}
                path = dataset_path(root, snr, p, split)
                write_dataset(path, rows[p], cols, header)
                written.append(path)
            dec = rows[1][:, 3:6].astype(bool)
            chain[split] = {"eps": list(ChainErrors.from_decodes(dec).eps),
                            "bler": (1 - dec.mean(axis=0)).tolist(), "n": int(len(dec))}
        with open(chain_path(root, snr), "w") as fh:
            json.dump({"snr_db": snr, "config_hash": h, "splits": chain}, fh, indent=1)
        written.append(chain_path(root, snr))
        log.info("snr %.1f dB chain errors (test) %s", snr, chain["test"]["eps"])
    return written


def load_chain(root, snr, split="test") -> ChainErrors:
    with open(chain_path(root, snr)) as fh:
        return ChainErrors(tuple(json.load(fh)["splits"][split]["eps"]))


def load_split(cfg, root, snr, point, split):
    path = dataset_path(root, snr, point, split)
    if not os.path.exists(path):
        raise StageError(f"missing dataset {path}; run generate first")
    return read_dataset(path, cfg.dataset_hash())


# ---------------------------------------------------------------------------
# train


def model_path(root, scheme, snr, point, fb):
    ext = "npz" if scheme == "DIDA" else "json"
    return os.path.join(root, "models", f"{scheme}_{_tag(snr)}_p{point}_b{fb}.{ext}")


def dida_data(ds, with_joint=True) -> dida.DidaData:
    p = ds.pairs("DIDA", with_joint=with_joint)
    return dida.DidaData(p.x1, p.x2, p.joint if with_joint else np.zeros_like(p.x1), p.y)


def train(cfg: ExperimentConfig, root, snrs=None, schemes=None, force=False) -> list[str]:
    schemes = list(schemes or cfg["schemes"])
    written = []
    l2 = cfg["lr"]["l2_strength"]
    for snr in _snrs(cfg, snrs):
        for point in POINTS:
            tr = load_split(cfg, root, snr, point, "train")
            va = load_split(cfg, root, snr, point, "val")
            for fb in cfg["fb_bits"]:
                for scheme in schemes:
                    path = model_path(root, scheme, snr, point, fb)
                    _guard(path, force)
                    os.makedirs(os.path.dirname(path), exist_ok=True)
                    if scheme == "DIDA":
                        written += _train_dida(cfg, root, snr, point, fb, tr, va, path)
                        continue
                    m = build_scheme(scheme, tr.pairs(scheme), va.pairs(scheme), int(fb), point, l2)
                    m.save(path)
                    written.append(path)
                    log.info("trained %s snr %.1f p%d b%d", scheme, snr, point, fb)
    return written


def _train_dida(cfg, root, snr, point, fb, tr, va, path):
    te_path = dataset_path(root, snr, point, "test")
    te = dida_data(read_dataset(te_path, cfg.dataset_hash()), False) if os.path.exists(te_path) else None
    grid = {k: list(v) for k, v in cfg["dida"].items()}
    seed = int(cfg["seed"])
    best, model, table = dida.grid_search(dida_data(tr), dida_data(va), grid, seed, int(fb), te)
    model.save(path, extra={"config": {k: getattr(best, k) for k in grid}, "snr_db": snr,
                            "point": point, "config_hash": cfg.hash(), "seed": seed})
    tab = path[:-4] + "_grid.csv"
    write_table([{**r, "snr_db": snr, "point": point, "fb_bits": fb, "config_hash": cfg.hash(),
                  "seed": seed} for r in table], tab)
    log.info("trained DIDA snr %.1f p%d b%d: %s", snr, point, fb, best)
    return [path, tab]


# ---------------------------------------------------------------------------
# evaluate


def load_model(root, scheme, snr, point, fb):
    path = model_path(root, scheme, snr, point, fb)
    if not os.path.exists(path):
        raise StageError(f"missing model {path}; run train first")
    if scheme == "DIDA":
        return dida.DidaModel.load(path)
    return DistributedPredictor.load(path)


def scheme_scores(model, ds, scheme):
    groups_scheme = "DIDA" if scheme == "DIDA" else scheme
    p = ds.pairs(groups_scheme)
    return model.score(p.x1, p.x2)


def evaluate(cfg: ExperimentConfig, root, snrs=None, schemes=None, force=False) -> list[str]:
    schemes = list(schemes or cfg["schemes"])
    h, seed = cfg.hash(), int(cfg["seed"])
    sim = cfg["sim"]
    n_packet = build_code(cfg)[1].k  # information bits per packet
    n_per_rv = sim["n"] // sim["t_max"]
    out_dir = os.path.join(root, "results")
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{k}.csv") for k in ("operating_points", "auc", "roc")}
    for p in paths.values():
        _guard(p, force)
    op_rows, auc_rows, roc_all = [], [], []
    for snr in _snrs(cfg, snrs):
        chain = load_chain(root, snr, "test")
        test = {pt: load_split(cfg, root, snr, pt, "test") for pt in POINTS}
        tags = {"snr_db": snr, "config_hash": h, "seed": seed}
        for fb in cfg["fb_bits"]:
            curves = {}
            for scheme in schemes:
                for pt in POINTS:
                    model = load_model(root, scheme, snr, pt, fb)
                    ds = test[pt]
                    s = scheme_scores(model, ds, scheme)
                    curve = roc_extract(s, ds.labels, cfg["eval"]["roc_points"])
                    curves[(scheme, pt)] = curve
                    auc_rows.append({"scheme": scheme, "point": pt, "fb_bits": fb,
                                     "auc": roc_auc(s, ds.labels), "pareto_auc": curve.auc(),
                                     "ack_rate": float(ds.labels.mean()), **tags})
                    roc_all += roc_rows(curve, scheme=scheme, point=pt, fb_bits=fb, **tags)
            plans = {s: (curves[(s, 1)], curves[(s, 2)]) for s in schemes}
            if "TH-SNR" in schemes and "DIDA" in schemes:
                plans[COMBINED] = (curves[("TH-SNR", 1)], curves[("DIDA", 2)])
            for factor in cfg["eps_target_factors"]:
                target = factor * chain.product
                ref = always_nack_point(chain, target, n_packet, n_per_rv)
                op_rows.append(_op_row("always-NACK", ref, fb, factor, chain, tags))
                for name, cv in plans.items():
                    try:
                        op = optimize_biases(cv, chain, target, cfg["eval"]["restarts"], seed,
                                             n_packet, n_per_rv)
                        op_rows.append(_op_row(name, op, fb, factor, chain, tags))
                    except InfeasibleTarget as exc:
                        op_rows.append({"scheme": name, "fb_bits": fb, "eps_target": target,
                                        "eps_target_factor": factor, "feasible": False,
                                        "note": str(exc), **tags})
    write_table(op_rows, paths["operating_points"])
    write_table(auc_rows, paths["auc"])
    write_table(roc_all, paths["roc"])
    return list(paths.values())


def _op_row(name, op, fb, factor, chain, tags):
    row = {"scheme": name, "fb_bits": fb, "eps_target_factor": factor, "feasible": True}
    row.update(op.as_row())
    row.update({f"eps{i}": e for i, e in enumerate(chain.eps, 1)})
    row.update(tags)
    return row


# ---------------------------------------------------------------------------
# report


def report(cfg: ExperimentConfig, root, force=False) -> str:
    """Markdown digest of the evaluation tables."""
    import csv

    res = os.path.join(root, "results")
    path = os.path.join(res, "report.md")
    _guard(path, force)

    def rows(name):
        p = os.path.join(res, f"{name}.csv")
        if not os.path.exists(p):
            raise StageError(f"missing {p}; run evaluate first")
        with open(p) as fh:
            return list(csv.DictReader(fh))

    ops, aucs = rows("operating_points"), rows("auc")
    f = lambda x, n=4: "" if x in (None, "") else f"{float(x):.{n}f}"  # noqa: E731
    lines = [f"# HARQ prediction report (config {cfg.hash()})", "",
             "## Test ROC-AUC", "", "| snr_db | fb_bits | scheme | point | AUC | ACK rate |",
             "|---|---|---|---|---|---|"]
    for r in aucs:
        lines.append(f"| {r['snr_db']} | {r['fb_bits']} | {r['scheme']} | {r['point']} | "
                     f"{f(r['auc'])} | {f(r['ack_rate'], 3)} |")
    lines += ["", "## Operating points", "",
              "| snr_db | fb_bits | eps_target | scheme | E[T] | eps_tot | eta | RV3 red. % | RV4 red. % |",
              "|---|---|---|---|---|---|---|---|---|"]
    for r in ops:
        if r.get("feasible") == "False":
            lines.append(f"| {r['snr_db']} | {r['fb_bits']} | {float(r['eps_target']):.3g} | "
                         f"{r['scheme']} | infeasible | | | | |")
            continue
        lines.append(f"| {r['snr_db']} | {r['fb_bits']} | {float(r['eps_target']):.3g} | {r['scheme']} | "
                     f"{f(r['E_T'], 3)} | {float(r['eps_tot']):.3g} | {f(r['eta'], 3)} | "
                     f"{f(r['RV3_reduction'], 1)} | {f(r['RV4_reduction'], 1)} |")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
