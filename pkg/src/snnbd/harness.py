"""Config-driven experiments: poison, train, evaluate, defend, report.

Configs are INI files read with :mod:`configparser`. Every section and key is
optional; defaults give the desk-scale setup (synthetic 10-class data, 32x32
inputs, width-32 N-MNIST style network, T = 16). Example::

    [data]
    source = synthetic
    train_per_class = 100
    test_per_class = 20

    [poison]
    epsilon = 0.1
    target = 0
    polarity = 3
    location = full
    size = 100
    start = start
    duration = 3
    gap = 1

    [experiment]
    repeats = 3
    seed = 0
"""

from __future__ import annotations

import configparser
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from snnbd import __version__
from snnbd.defense import DefenseConfig, run_defenses
from snnbd.errors import ConfigError, SnnbdError
from snnbd.events import SampleSet, load_aer_directory, synth_dataset
from snnbd.poison import (LOCATIONS, START_PRESETS, PoisonConfig, TriggerSpec, apply_trigger, build_asr_set,
                          poison_dataset, select_poison_frames, start_for_preset)
from snnbd.snn import ModelConfig, TrainConfig, build_model, evaluate, evaluate_asr, train
from snnbd.stealth import stealth_report

log = logging.getLogger(__name__)

DATA_DIR_ENV = "SNNBD_DATA_DIR"
SWEEP_AXES = {
    "size": ("poison", "size"),
    "duration": ("poison", "duration"),
    "gap": ("poison", "gap"),
    "start": ("poison", "start"),
    "polarity": ("poison", "polarity"),
    "epsilon": ("poison", "epsilon"),
    "tau": ("defense", "tau"),
}
SWEEP_ALIASES = {"s": "size", "d": "duration", "g": "gap", "i": "start", "p": "polarity", "eps": "epsilon"}


@dataclass
class DataSection:
    source: str = "synthetic"  # "synthetic" or "aer"
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 20
    pool_per_class: int = 5
    defense_per_class: int = 100
    T: int = 16
    size: int = 32
    data_seed: int = 0
    train_dir: str = ""
    test_dir: str = ""
    sensor_width: int = 34
    sensor_height: int = 34
    downscale: int = 1


@dataclass
class PoisonSection:
    epsilon: float = 0.1
    target: int = 0
    polarity: int = 3
    location: str = "full"
    size: float = 100.0
    start: str = "start"  # preset name or frame index
    duration: int = 3
    gap: int = 1
    magnitude: float = 1.0


@dataclass
class ModelSection:
    arch: str = "nmnist"
    width: int = 32
    hidden: int = 0  # 0 = scale with width
    lam: float = 0.5
    u_th: float = 1.0
    u0: float = 0.0
    alpha: float = 2.0


@dataclass
class TrainSection:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 16


@dataclass
class DefenseSection:
    enabled: bool = False
    tau: float = 0.8
    ft_epoch_fraction: float = 0.1
    ft_epochs: int = 0  # 0 = use the fraction rule


@dataclass
class ExperimentSection:
    name: str = "experiment"
    repeats: int = 3
    seed: int = 0
    stealth: bool = False


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    poison: PoisonSection = field(default_factory=PoisonSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        new = copy.deepcopy(self)
        setattr(new, section, dataclasses.replace(getattr(new, section), **changes))
        return new

    # derived objects

    def start_index(self) -> int:
        p = self.poison
        if str(p.start) in START_PRESETS:
            return start_for_preset(str(p.start), p.duration, p.gap, self.data.T)
        return int(p.start)

    def trigger(self) -> TriggerSpec:
        p = self.poison
        return TriggerSpec(polarity=p.polarity, location=p.location, size=p.size, start=self.start_index(),
                           duration=p.duration, gap=p.gap, magnitude=p.magnitude)

    def poison_config(self) -> PoisonConfig | None:
        if self.poison.epsilon == 0:
            return None
        return PoisonConfig(self.poison.epsilon, self.poison.target, self.trigger())

    def model_config(self) -> ModelConfig:
        from snnbd.snn import LifParams

        m = self.model
        return ModelConfig(arch=m.arch, num_classes=self.data.num_classes, input_size=self.data.size,
                           width=m.width, hidden=m.hidden or None, T=self.data.T,
                           lif=LifParams(m.lam, m.u_th, m.u0, m.alpha))

    def train_config(self, seed: int) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, learning_rate=t.learning_rate, batch_size=t.batch_size, seed=seed)

    def defense_config(self) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(tau=d.tau, ft_epoch_fraction=d.ft_epoch_fraction, ft_epochs=d.ft_epochs or None)

    def validate(self) -> "ExperimentConfig":
        errors = {}
        d, p = self.data, self.poison
        if self.experiment.repeats < 1:
            errors["experiment.repeats"] = "must be >= 1"
        if not 0 <= p.epsilon < 1:
            errors["poison.epsilon"] = f"must be in [0, 1), got {p.epsilon}"
        if not 0 <= p.target < d.num_classes:
            errors["poison.target"] = f"must be a class index below {d.num_classes}"
        if p.polarity not in (0, 1, 2, 3):
            errors["poison.polarity"] = "must be 0, 1, 2 or 3"
        if p.location not in LOCATIONS:
            errors["poison.location"] = f"must be one of {', '.join(LOCATIONS)}"
        if not 0 < p.size <= 100:
            errors["poison.size"] = "must be in (0, 100]"
        if p.duration < 1 or p.gap < 0:
            errors["poison.duration"] = "duration must be >= 1 and gap >= 0"
        else:
            try:
                select_poison_frames(self.start_index(), p.duration, p.gap, d.T)
            except (SnnbdError, ValueError) as exc:
                errors["poison.start"] = str(exc)
        if d.source not in ("synthetic", "aer"):
            errors["data.source"] = "must be 'synthetic' or 'aer'"
        if d.source == "aer" and not (d.train_dir and d.test_dir):
            errors["data.train_dir"] = "aer source needs train_dir and test_dir"
        if self.train.epochs < 1:
            errors["train.epochs"] = "must be >= 1"
        if not 0 <= self.defense.tau < 1:
            errors["defense.tau"] = "must be in [0, 1)"
        try:
            self.model_config()
        except (SnnbdError, ValueError) as exc:
            errors["model"] = str(exc)
        if errors:
            raise ConfigError("invalid experiment config", errors)
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(section: str, key: str, raw: str, template):
    target = type(template)
    try:
        if target is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if target is str:
            return raw.strip().strip('"').strip("'")
        return target(raw)
    except ValueError:
        raise ConfigError("invalid value", {f"{section}.{key}": f"cannot parse {raw!r} as {target.__name__}"})


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a config from ``{section: {key: str-or-value}}``; unknown keys are errors."""
    cfg = ExperimentConfig()
    errors = {}
    for section, values in mapping.items():
        if section not in _SECTIONS:
            errors[section] = "unknown section"
            continue
        current = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(current)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                errors[f"{section}.{key}"] = "unknown key"
                continue
            template = getattr(current, key)
            changes[key] = _coerce(section, key, raw, template) if isinstance(raw, str) else type(template)(raw)
        setattr(cfg, section, dataclasses.replace(current, **changes))
    if errors:
        raise ConfigError("unrecognised config entries", errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case (T)
    with open(path) as fh:
        parser.read_file(fh)
    return config_from_mapping({s: dict(parser[s]) for s in parser.sections()}).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        p = Path(os.environ[DATA_DIR_ENV]) / p
    return p


@dataclass
class ExperimentData:
    train: SampleSet
    test: SampleSet
    pool: SampleSet | None
    defense: SampleSet | None


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    if d.source == "aer":
        kw = dict(T=d.T, width=d.sensor_width, height=d.sensor_height, factor=d.downscale)
        if d.downscale != 1 or d.sensor_width != d.size * d.downscale:
            side = d.size * d.downscale
            kw["crop"] = ((d.sensor_height - side) // 2, (d.sensor_width - side) // 2, side, side)
        train_set = load_aer_directory(_resolve(d.train_dir), **kw)
        test_set = load_aer_directory(_resolve(d.test_dir), **kw)
        # held-out halves of the test split serve as replacement pool and defender data
        half = len(test_set) // 2
        order = np.random.default_rng(d.data_seed).permutation(len(test_set))
        return ExperimentData(train_set, test_set.subset(np.sort(order[:half])), None,
                              test_set.subset(np.sort(order[half:])))
    common = dict(num_classes=d.num_classes, T=d.T, H=d.size, W=d.size)
    base = d.data_seed * 4
    return ExperimentData(
        train=synth_dataset(samples_per_class=d.train_per_class, seed=base, **common),
        test=synth_dataset(samples_per_class=d.test_per_class, seed=base + 1, **common),
        pool=synth_dataset(samples_per_class=d.pool_per_class, seed=base + 2, **common) if d.pool_per_class else None,
        defense=synth_dataset(samples_per_class=d.defense_per_class, seed=base + 3, **common),
    )


def mean_std(values) -> tuple[float, float]:
    """Mean and N - 1 standard deviation (0 for a single run)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def format_mean_std(values, scale: float = 1.0) -> str:
    m, s = mean_std(np.asarray(values, dtype=np.float64) * scale)
    return f"{m:.2f} ± {s:.2f}"


def run_once(cfg: ExperimentConfig, data: ExperimentData, seed: int) -> dict:
    """One seeded poison/train/evaluate(/defend) pass."""
    torch.set_num_threads(1)
    pcfg = cfg.poison_config()
    # the ASR set only needs target and trigger; the control run (epsilon 0) still gets one
    asr_cfg = pcfg or PoisonConfig(0.1, cfg.poison.target, cfg.trigger())
    if pcfg is None:
        train_set, poison_idx = data.train, np.zeros(0, dtype=np.int64)
    else:
        train_set, poison_idx = poison_dataset(data.train, pcfg, seed)
    model = build_model(cfg.model_config(), seed=seed)
    tcfg = cfg.train_config(seed)
    result = train(model, train_set, tcfg)
    asr_set = build_asr_set(data.test, asr_cfg, data.pool)
    run = {
        "seed": seed,
        "clean_acc": evaluate(model, data.test),
        "asr": evaluate_asr(model, asr_set, cfg.poison.target),
        "poisoned": len(poison_idx),
        "poison_index": poison_idx.tolist(),
        "train_log": result.log,
    }
    if cfg.defense.enabled:
        run["defense"] = run_defenses(model, data.defense, data.test, asr_set, cfg.poison.target,
                                      cfg.train.epochs, tcfg, cfg.defense_config())
    run["model"] = model
    log.info("run seed=%d clean_acc=%.4f asr=%.4f", seed, run["clean_acc"], run["asr"])
    return run


def run_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None, keep_models: bool = False) -> dict:
    """Repeat the seeded pipeline ``repeats`` times and aggregate."""
    cfg.validate()
    data = data or load_data(cfg)
    seeds = [cfg.experiment.seed + k for k in range(cfg.experiment.repeats)]
    runs = [run_once(cfg, data, s) for s in seeds]
    models = [r.pop("model") for r in runs]
    clean = [r["clean_acc"] for r in runs]
    asr = [r["asr"] for r in runs]
    report = {
        "name": cfg.experiment.name,
        "clean_acc": dict(zip(("mean", "std"), mean_std(clean))),
        "asr": dict(zip(("mean", "std"), mean_std(asr))),
        "runs": runs,
        "trigger": cfg.trigger().to_dict(),
        "poisoned_frames": cfg.trigger().frames(cfg.data.T),
        "provenance": {"config_hash": cfg.config_hash(), "seeds": seeds, "version": __version__,
                       "config": cfg.to_dict()},
    }
    if cfg.defense.enabled:
        keys = ("pruned_ca", "pruned_asr", "ft_ca", "ft_asr", "fp_ca", "fp_asr")
        report["defense"] = {k: dict(zip(("mean", "std"), mean_std([r["defense"][k] for r in runs])))
                             for k in keys}
        report["defense"]["ft_epochs"] = runs[0]["defense"]["ft_epochs"]
    if cfg.experiment.stealth:
        poisoned = apply_trigger(data.test.frames, cfg.trigger())
        report["stealth"] = json.loads(stealth_report(data.test.frames, poisoned).to_json())
    if keep_models:
        report["models"] = models
    return report


def sweep(cfg: ExperimentConfig, axis: str, values, data: ExperimentData | None = None) -> list[dict]:
    """One report per value of ``axis``; all share the base seed and dataset."""
    axis = SWEEP_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ConfigError("bad sweep", {"axis": f"{axis!r} is not one of {', '.join(SWEEP_AXES)}"})
    values = list(values)
    if not values:
        raise ConfigError("bad sweep", {"values": "empty value list"})
    section, key = SWEEP_AXES[axis]
    template = getattr(getattr(cfg, section), key)
    variants = []
    for v in values:
        raw = str(v)
        value = _coerce(section, key, raw, template)
        if axis == "tau":
            variant = cfg.replace(section, **{key: value}).replace("defense", enabled=True)
        else:
            variant = cfg.replace(section, **{key: value})
        variants.append((v, variant.validate()))
    data = data or load_data(cfg)
    reports = []
    for v, variant in variants:
        r = run_experiment(variant, data)
        r["sweep"] = {"axis": axis, "value": v}
        reports.append(r)
    return reports


REPORT_COLUMNS = ["name", "axis", "value", "repeats", "attack", "size", "poisoned_frames",
                  "clean_acc", "asr", "clean_acc_runs", "asr_runs", "config_hash"]


def _attack_name(trigger: dict) -> str:
    if trigger["location"] == "full" or trigger["size"] == 100:
        return "Flash" if trigger["gap"] == 0 else "Str. Flash"
    return "Framed" if trigger["gap"] == 0 else "Strobing"


def report_row(r: dict) -> dict:
    runs = r["runs"]
    sweep_info = r.get("sweep", {})
    return {
        "name": r["name"],
        "axis": sweep_info.get("axis", ""),
        "value": sweep_info.get("value", ""),
        "repeats": len(runs),
        "attack": _attack_name(r["trigger"]),
        "size": r["trigger"]["size"],
        "poisoned_frames": len(r["poisoned_frames"]),
        "clean_acc": format_mean_std([x["clean_acc"] for x in runs], 100),
        "asr": format_mean_std([x["asr"] for x in runs], 100),
        "clean_acc_runs": " ".join(f"{100 * x['clean_acc']:.2f}" for x in runs),
        "asr_runs": " ".join(f"{100 * x['asr']:.2f}" for x in runs),
        "config_hash": r["provenance"]["config_hash"],
    }


def _jsonable(r: dict) -> dict:
    return {k: v for k, v in r.items() if k != "models"}


def write_reports(reports: list[dict], out_dir, formats=("csv", "json")) -> list[Path]:
    """Write ``report.csv`` and/or ``report.json``; returns the paths written."""
    if not reports:
        raise ValueError("need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = out_dir / "report.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            for r in reports:
                w.writerow(report_row(r))
        written.append(path)
    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w") as fh:
            json.dump([_jsonable(r) for r in reports], fh, indent=2, sort_keys=True,
                      default=lambda o: None if isinstance(o, float) and math.isnan(o) else str(o))
            fh.write("\n")
        written.append(path)
    return written
