"""Experiment configuration: YAML file with defaults, validation and a stable hash."""
from __future__ import annotations

import copy
import hashlib
import json
import os

import yaml

from .linklevel import SimParams
from .predictors import COMBINED, SCHEMES

DEFAULTS = {
    "sim": {"n": 256, "p": 64, "n_rx_per_rrh": 2, "n_sc": 16, "mod_bits": 2, "t_max": 4,
            "k_factor_db": 10.0, "rho": 0.0, "shadow_db": 6.0},
    "code": {"alist": None, "n_bits": 512, "row_weight": 4, "col_weight": 3, "seed": 7},
    "decoder": {"scale": 0.75, "max_iter": 50, "n_snapshots": 10},
    "snr_grid": [-6.0, -4.0, -2.0, 0.0],
    "sizes": {"train": 50000, "val": 10000, "test": 20000},
    "schemes": list(SCHEMES),
    "fb_bits": [4, 8],
    "eps_target_factors": [1.5, 3.0],
    "lr": {"l2_strength": 1.0},
    "dida": {"epochs": [40], "batch": [1024], "lam": [0.1, 0.2], "dropout": [0.1]},
    "eval": {"roc_points": 1000, "restarts": 20},
    "seed": 1,
    "batch_frames": 2000,
    "output_dir": "runs/default",
}

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and k != "code":
            if not isinstance(v, dict):
                raise ConfigError(f"{path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        elif k == "code":
            bad = set(v) - set(base[k])
            if bad:
                raise ConfigError(f"unknown code keys {sorted(bad)}")
            out[k].update(v)
        else:
            out[k] = v
    return out


class ExperimentConfig:
    """Validated configuration. ``raw`` holds the merged nested mapping."""

    def __init__(self, raw: dict | None = None):
        self.raw = _merge(DEFAULTS, raw)
        self._validate()

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        if path is None:
            return cls()
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls(data)

    def _validate(self):
        r = self.raw
        self.sim_params(r["snr_grid"][0] if r["snr_grid"] else 0.0)  # raises on bad sim params
        bad = [s for s in r["schemes"] if s not in SCHEMES]
        if bad:
            raise ConfigError(f"unsupported schemes {bad}; choose from {SCHEMES}")
        if not r["snr_grid"]:
            raise ConfigError("empty SNR grid")
        for k in SPLITS:
            if int(r["sizes"][k]) < 100:
                raise ConfigError(f"split {k!r} needs at least 100 rows")
        if any(int(b) < 1 for b in r["fb_bits"]):
            raise ConfigError("fb_bits entries must be >= 1")
        if any(f <= 0 for f in r["eps_target_factors"]):
            raise ConfigError("eps_target_factors must be positive")
        if r["code"]["alist"] is None and r["code"]["n_bits"] != r["sim"]["n"] * r["sim"]["mod_bits"]:
            raise ConfigError("code length must equal n * mod_bits")

    def __getitem__(self, key):
        return self.raw[key]

    def sim_params(self, snr_db: float, fb_bits: int | None = None) -> SimParams:
        s = self.raw["sim"]
        return SimParams(snr_db=float(snr_db), fb_bits=int(fb_bits or self.raw["fb_bits"][0]), **s)

    @property
    def combined_enabled(self) -> bool:
        return "TH-SNR" in self.raw["schemes"] and "DIDA" in self.raw["schemes"]

    def schemes_with_combined(self) -> list[str]:
        return list(self.raw["schemes"]) + ([COMBINED] if self.combined_enabled else [])

    def hash(self) -> str:
        """Hash of everything that shapes the data and models (not the output location)."""
        r = {k: v for k, v in self.raw.items() if k != "output_dir"}
        blob = json.dumps(r, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        """Hash of the keys that determine generated datasets."""
        keys = ("sim", "code", "decoder", "sizes", "seed", "batch_frames")
        blob = json.dumps({k: self.raw[k] for k in keys}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=True)


def n_workers() -> int:
    """Worker count from ``HARQ_WORKERS`` (default 1)."""
    v = os.environ.get("HARQ_WORKERS", "1")
    try:
        n = int(v)
    except ValueError as exc:
        raise ConfigError(f"HARQ_WORKERS must be an integer, got {v!r}") from exc
    return max(n, 1)
