"""Experiment suites: config validation, cell execution, persistence.

A suite is the cross product ``arch x cut x privacy x seed``. Every cell
writes its own directory; the suite merges them in a fixed order at the
end, so reruns are byte-identical regardless of worker count. No
timestamps or host details are written anywhere.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import __version__
from . import tensor as T
from .attack import AttackConfig, run_attack
from .data import Dataset, DatasetSpec, make_dataset, partition_dataset, synthetic_1d, synthetic_letters
from .model import cut, memory_demand
from .netsim import (ARCHS, TIMING_COLUMNS, ComputeModel, EpochPlan, LinkModel, run_epoch, timing_rows,
                     write_timing_csv)
from .privacy import PrivacyConfig
from .profiles import LayerProfile, build_model
from .protocols import METRIC_COLUMNS, Network, TrainConfig, train
from .tensor import Tensor

CELL_METRIC_COLUMNS = ("cell", "cut_index", "privacy") + METRIC_COLUMNS
ATTACK_COLUMNS = ("cell", "arch", "cut_index", "seed", "privacy", "mode", "dc_frequency", "loss_multiplier",
                  "noise_multiplier", "tau", "reconstruction_mse", "n_correct", "n_reconstructed", "victim_acc")
MEMORY_COLUMNS = ("cut_index", "client_weight_bytes", "client_activation_bytes", "server_weight_bytes",
                  "server_activation_bytes", "full_bytes")
SUMMARY_COLUMNS = ("arch", "cut_index", "fb", "fl_fb", "ratio_to_fl")


def config_schema() -> dict:
    return json.loads((resources.files("splitbench") / "data" / "config.schema.json").read_text())


DEFAULTS: dict[str, Any] = {
    "name": "suite",
    "model": "digits_mlp",
    "train": {"archs": ["FSL"], "num_clients": 2, "cut_indices": [1], "epochs": 1, "batch_size": 16,
              "learning_rate": 0.1, "avg_every": 1, "averaging": True, "psl_per_batch_update": False},
    "privacy": [{"mode": "none"}],
    "attack": {"enabled": False, "autoencoder_epochs": 20, "classifier_epochs": 20, "batch_size": 16,
               "learning_rate": 0.3, "attacker_samples": 600},
    "network": {"bandwidth": 1.25e8, "latency": 0.0, "client_seconds_per_flop": 1e-9,
                "server_seconds_per_flop": 1e-10},
    "dataset": {"kind": "synthetic_digits", "num_classes": 10, "samples_per_client": 200, "test_per_client": 100,
                "partition": "iid", "mix_fraction": 0.10, "evaluation": "own"},
    "seeds": [0],
    "workers": 1,
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(blob, config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        raw = _merge(DEFAULTS, blob)
        if isinstance(raw["privacy"], dict):
            raw["privacy"] = [raw["privacy"]]
        raw["train"]["archs"] = [a.upper() for a in raw["train"]["archs"]]
        cfg = cls(raw)
        cfg.dataset_spec()  # surfaces semantic errors (e.g. mix_fraction) early
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def dataset_spec(self) -> DatasetSpec:
        d = self.raw["dataset"]
        keys = ("kind", "num_classes", "samples_per_client", "test_per_client", "partition", "mix_fraction",
                "train_images", "train_labels", "test_images", "test_labels")
        return DatasetSpec(**{k: d[k] for k in keys if k in d})

    def privacy_configs(self) -> list[PrivacyConfig]:
        return [PrivacyConfig(**p) for p in self.raw["privacy"]]

    def attack_config(self, seed: int) -> AttackConfig:
        a = self.raw["attack"]
        return AttackConfig(a["autoencoder_epochs"], a["classifier_epochs"], a["batch_size"], a["learning_rate"],
                            seed)

    def link(self) -> LinkModel:
        n = self.raw["network"]
        return LinkModel(n["bandwidth"], n["latency"])

    def computes(self) -> tuple[ComputeModel, ComputeModel]:
        n = self.raw["network"]
        return ComputeModel(n["client_seconds_per_flop"]), ComputeModel(n["server_seconds_per_flop"])

    def train_config(self, arch: str, d: int, seed: int) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(arch, t["num_clients"], d, t["epochs"], t["batch_size"], t["learning_rate"],
                           t["avg_every"], t["averaging"], seed, t["psl_per_batch_update"])

    def cells(self) -> list[tuple[str, int, int, int]]:
        t = self.raw["train"]
        return [(a, d, p, s) for a in t["archs"] for d in t["cut_indices"]
                for p in range(len(self.raw["privacy"])) for s in self.raw["seeds"]]


def cell_id(arch: str, d: int, p: int, seed: int) -> str:
    return f"{arch}-d{d}-p{p}-s{seed}"


# -- one cell ---------------------------------------------------------------------
def _attacker_data(cfg: ExperimentConfig, seed: int) -> Dataset:
    n = cfg.raw["attack"]["attacker_samples"]
    kind = cfg.raw["dataset"]["kind"]
    if kind == "synthetic_1d":
        # a disjoint draw of the same generator family stands in for a look-alike corpus
        return synthetic_1d(n, 100_003 + seed, cfg.raw["dataset"]["num_classes"])
    return synthetic_letters(n, 100_003 + seed)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def run_cell(raw: dict, cell: tuple[str, int, int, int], out_dir: str) -> dict:
    """Train one (arch, cut, privacy, seed) cell and write its files. Returns a manifest entry."""
    cfg = ExperimentConfig(raw)
    arch, d, p, seed = cell
    cid = cell_id(*cell)
    cdir = Path(out_dir) / "cells" / cid
    cdir.mkdir(parents=True, exist_ok=True)
    entry = {"cell": cid, "arch": arch, "cut_index": d, "privacy": p, "seed": seed}
    try:
        spec = cfg.dataset_spec()
        n_clients = raw["train"]["num_clients"]
        train_set, test_set = make_dataset(spec, n_clients, seed)
        clients = partition_dataset(train_set, test_set, n_clients, spec, seed)
        if raw["dataset"]["evaluation"] == "union":
            for c in clients:
                c.test = test_set
        model = build_model(raw["model"], spec.num_classes)
        privacy = cfg.privacy_configs()[p]
        applied = arch not in ("FL", "FRC")
        cc, sc = cfg.computes()
        net = Network(cfg.link(), cc, sc)
        result = train(cfg.train_config(arch, d, seed), model, clients, net, privacy if applied else None)
        _write_csv(cdir / "metrics.csv", METRIC_COLUMNS, result.metrics)
        net.write_jsonl(cdir / "trace.jsonl")
        entry.update(status="ok", privacy_applied=applied,
                     files=sorted(f.name for f in cdir.iterdir()))
        if raw["attack"]["enabled"] and arch not in ("FL", "FRC"):
            victim = clients[0]
            with T.no_grad():
                h = result.pairs[0].client(Tensor(victim.test.x)).data
            report = run_attack(model, d, h, victim.test, _attacker_data(cfg, seed), cfg.attack_config(seed),
                                seed, classifier_data=victim.train)
            report.save(cdir / "attack.json")
            acc = result.final_metrics()[0]["test_acc"]
            row = {"cell": cid, "arch": arch, "cut_index": d, "seed": seed, "privacy": p, "mode": privacy.mode,
                   "dc_frequency": privacy.dc_frequency, "loss_multiplier": privacy.loss_multiplier,
                   "noise_multiplier": privacy.noise_multiplier, "tau": report.tau,
                   "reconstruction_mse": report.reconstruction_mse, "n_correct": report.n_correct,
                   "n_reconstructed": report.n_reconstructed, "victim_acc": acc}
            _write_csv(cdir / "attack.csv", ATTACK_COLUMNS, [row])
            entry["files"] = sorted(f.name for f in cdir.iterdir())
    except Exception as exc:  # recorded per cell; the suite carries on
        entry.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                     traceback=traceback.format_exc(limit=3))
    return entry


# -- suite ----------------------------------------------------------------------------
def _timing(cfg: ExperimentConfig, profile: LayerProfile) -> tuple[list[dict], list[dict]]:
    t = cfg.raw["train"]
    spc = cfg.raw["dataset"]["samples_per_client"]
    batches = math.ceil(spc / t["batch_size"])
    cc, sc = cfg.computes()
    rows, summary = [], []
    fl_fb: dict[int, float] = {}
    per_arch: dict[tuple[str, int], float] = {}
    for arch in t["archs"]:
        for d in t["cut_indices"]:
            plan = EpochPlan.build(arch, profile, d, num_clients=t["num_clients"], batches_per_client=batches,
                                   batch_size=t["batch_size"], link=cfg.link(), client_compute=cc,
                                   server_compute=sc, sync_weights=t["averaging"],
                                   psl_per_batch_update=t["psl_per_batch_update"])
            timing = run_epoch(plan)  # every epoch costs the same on the virtual clock
            rows.extend(timing_rows(arch, d, [(e, timing) for e in range(t["epochs"])]))
            per_arch[(arch, d)] = timing.breakdown.fb
            if arch == "FL":
                fl_fb[d] = timing.breakdown.fb
    for (arch, d), fb in per_arch.items():
        ref = fl_fb.get(d)
        summary.append({"arch": arch, "cut_index": d, "fb": fb, "fl_fb": "" if ref is None else ref,
                        "ratio_to_fl": "" if not ref else fb / ref})
    return rows, summary


def _memory(cfg: ExperimentConfig, model) -> list[dict]:
    b = cfg.raw["train"]["batch_size"]
    full = memory_demand(model, b)
    rows = []
    for d in cfg.raw["train"]["cut_indices"]:
        part = cut(model, d)
        c, s = memory_demand(part.client, b), memory_demand(part.server, b)
        rows.append({"cut_index": d, "client_weight_bytes": c.weight_bytes,
                     "client_activation_bytes": c.activation_bytes, "server_weight_bytes": s.weight_bytes,
                     "server_activation_bytes": s.activation_bytes, "full_bytes": full.total})
    return rows


def _concat_csv(paths: list[Path], dest: Path, columns, extra: dict[Path, dict] | None = None) -> None:
    rows = []
    for p in paths:
        if not p.exists():
            continue
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({**(extra or {}).get(p, {}), **r})
    _write_csv(dest, columns, rows)


def run_suite(config: ExperimentConfig | dict, out_dir: str | Path, workers: int | None = None) -> dict:
    """Run every cell, merge outputs, and write ``manifest.json``. Returns the manifest."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    workers = cfg.raw["workers"] if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(run_cell, [cfg.raw] * len(cells), cells, [str(out)] * len(cells)))
    else:
        entries = [run_cell(cfg.raw, c, str(out)) for c in cells]

    model = build_model(cfg.raw["model"], cfg.raw["dataset"]["num_classes"])
    timing, summary = _timing(cfg, LayerProfile.from_model(model))
    write_timing_csv(timing, out / "timing.csv")
    _write_csv(out / "timing_summary.csv", SUMMARY_COLUMNS, summary)
    _write_csv(out / "memory.csv", MEMORY_COLUMNS, _memory(cfg, model))

    cdirs = [out / "cells" / e["cell"] for e in entries]
    _concat_csv([c / "metrics.csv" for c in cdirs], out / "metrics.csv", CELL_METRIC_COLUMNS,
                {c / "metrics.csv": {"cell": e["cell"], "cut_index": e["cut_index"], "privacy": e["privacy"]}
                 for c, e in zip(cdirs, entries)})
    if cfg.raw["attack"]["enabled"]:
        _concat_csv([c / "attack.csv" for c in cdirs], out / "attack.csv", ATTACK_COLUMNS)

    manifest = {"name": cfg.raw["name"], "config": cfg.raw, "config_hash": cfg.hash, "seeds": cfg.raw["seeds"],
                "version": __version__, "cells": entries,
                "failed": sum(e["status"] != "ok" for e in entries)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def load_manifest(path: str | Path) -> dict:
    p = Path(path)
    return json.loads((p / "manifest.json" if p.is_dir() else p).read_text())


def rerun_from_manifest(manifest_path: str | Path, out_dir: str | Path, workers: int | None = None) -> dict:
    return run_suite(ExperimentConfig.from_dict(load_manifest(manifest_path)["config"]), out_dir, workers)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


__all__ = ["ARCHS", "ATTACK_COLUMNS", "CELL_METRIC_COLUMNS", "ConfigError", "ExperimentConfig", "TIMING_COLUMNS",
           "config_schema", "load_manifest", "read_csv", "rerun_from_manifest", "run_cell", "run_suite"]
