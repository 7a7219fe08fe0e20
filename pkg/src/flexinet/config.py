"""Run configuration: a single JSON document wiring every module.

Unknown keys are rejected, ``--set a.b.c=value`` flags override single
fields (values parse as JSON with a plain-string fallback), and every
command echoes its fully resolved config into the output directory.
FLEXINET_SEED in the environment overrides train.seed.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .augment import AdirConfig, FmsConfig, load_dir_bank, synthetic_dir_bank
from .data import SyntheticCorpusSpec
from .distill import KdConfig
from .features import MelConfig
from .model import ArchConfig, arch_from_dict
from .train import AugmentPolicy, QatSchedule, TrainConfig


class ConfigError(ValueError):
    """User/config mistakes: reported cleanly, exit code 1."""


DEFAULT_CONFIG = {
    "arch": {"preset": "sm-a"},
    "features": {
        "n_mels": 256, "n_fft": 2048, "hop": 500, "sample_rate": 32000,
        "fmin": 0.0, "fmax": 16000.0, "log_floor": 1e-5, "n_frames": 64,
    },
    "augment": {
        "fms": {"enable": True, "prob": 0.4, "mix_alpha": 0.3},
        "adir": {"enable": True, "prob": 0.6, "energy_threshold": 323.0,
                 "dir_bank": None},
        "roll_max_shift": 6,
        "mask_max_width": 32,
    },
    "distill": {
        "mode": "none",  # none | uniform | fitted
        "logits": None,
        "fusion_params": None,
        "lambda_kd": 0.5,
        "temperature": 2.0,
        "schedule": None,  # [start, end] linear over training
    },
    "quant": {"enable": False, "start_fraction": 0.75, "freeze_fraction": 0.90},
    "train": {"epochs": 250, "batch_size": 256, "lr": 0.01, "momentum": 0.9,
              "weight_decay": 0.0, "seed": 0},
    "data": {"corpus": None, "synthetic": None},
}

# sections whose value sets are open-ended (validated by their builders)
_FREEFORM_PATHS = {("arch",), ("data", "synthetic"), ("distill", "schedule")}


def _check_unknown(user, template, path=()):
    if path in _FREEFORM_PATHS:
        return
    if isinstance(user, dict):
        if not isinstance(template, dict):
            raise ConfigError(f"config key {'.'.join(path)}: unexpected object")
        for key, val in user.items():
            if key not in template:
                where = ".".join(path + (key,)) if path else key
                raise ConfigError(f"unknown config key {where!r}")
            _check_unknown(val, template[key], path + (key,))


def _deep_merge(base, override, path=()):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if (isinstance(val, dict) and isinstance(out.get(key), dict)
                and path + (key,) not in _FREEFORM_PATHS):
            out[key] = _deep_merge(out[key], val, path + (key,))
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Load, validate, and resolve a run config.

    ``overrides`` are "dotted.key=value" strings applied after the file.
    """
    user = {}
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
    _check_unknown(user, DEFAULT_CONFIG)
    cfg = _deep_merge(DEFAULT_CONFIG, user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            if part not in node or not isinstance(node[part], dict):
                if tuple(parts[: i + 1]) in _FREEFORM_PATHS:
                    node[part] = node.get(part) if isinstance(node.get(part), dict) else {}
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        leaf_path = tuple(parts)
        if (parts[-1] not in node
                and not any(leaf_path[: len(p)] == p for p in _FREEFORM_PATHS)):
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value

    env_seed = os.environ.get("FLEXINET_SEED")
    if env_seed is not None:
        try:
            cfg["train"]["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"FLEXINET_SEED must be an integer, got {env_seed!r}")
    return cfg


def echo_config(cfg: dict, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# builders


def build_mel_config(cfg: dict) -> MelConfig:
    f = cfg["features"]
    return MelConfig(n_mels=f["n_mels"], n_fft=f["n_fft"], hop=f["hop"],
                     sample_rate=f["sample_rate"], fmin=f["fmin"], fmax=f["fmax"],
                     log_floor=f["log_floor"], n_frames=f["n_frames"])


def build_arch(cfg: dict) -> ArchConfig:
    try:
        return arch_from_dict(cfg["arch"])
    except KeyError as e:
        raise ConfigError(f"arch: unknown preset {cfg['arch'].get('preset')!r}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"arch: {e}") from e


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                       momentum=t["momentum"], weight_decay=t["weight_decay"],
                       seed=t["seed"])


def build_augment_policy(cfg: dict, sample_rate=32000) -> AugmentPolicy:
    a = cfg["augment"]
    fms = None
    if a["fms"]["enable"]:
        fms = FmsConfig(prob=a["fms"]["prob"], mix_alpha=a["fms"]["mix_alpha"])
    adir_cfg = None
    if a["adir"]["enable"] and a["adir"]["prob"] > 0:
        bank_path = a["adir"]["dir_bank"]
        if bank_path is None:
            bank = synthetic_dir_bank(8, sample_rate=sample_rate)
        else:
            paths = sorted(Path(bank_path).glob("*.wav"))
            if not paths:
                raise ConfigError(f"augment.adir.dir_bank: no WAV files in {bank_path}")
            bank = load_dir_bank(paths, sample_rate=sample_rate)
        adir_cfg = AdirConfig(prob=a["adir"]["prob"],
                              energy_threshold=a["adir"]["energy_threshold"],
                              dir_bank=bank)
    return AugmentPolicy(fms=fms, adir=adir_cfg,
                         roll_max_shift=a["roll_max_shift"],
                         mask_max_width=a["mask_max_width"])


def build_kd_config(cfg: dict) -> KdConfig:
    d = cfg["distill"]
    schedule = tuple(d["schedule"]) if d["schedule"] else None
    try:
        return KdConfig(lambda_kd=d["lambda_kd"], temperature=d["temperature"],
                        schedule=schedule)
    except ValueError as e:
        raise ConfigError(f"distill: {e}") from e


def build_qat_schedule(cfg: dict) -> QatSchedule:
    q = cfg["quant"]
    return QatSchedule(enabled=q["enable"], start_fraction=q["start_fraction"],
                       freeze_fraction=q["freeze_fraction"])


def build_synthetic_spec(cfg: dict) -> SyntheticCorpusSpec:
    s = cfg["data"]["synthetic"] or {}
    known = {"train_clips_per_cell", "test_clips_per_cell", "seed"}
    unknown = set(s) - known
    if unknown:
        raise ConfigError(f"data.synthetic: unknown keys {sorted(unknown)}")
    return SyntheticCorpusSpec(
        train_clips_per_cell=s.get("train_clips_per_cell", 4),
        test_clips_per_cell=s.get("test_clips_per_cell", 2),
        seed=s.get("seed", 7),
    )
