"""Run configuration: one YAML file of nested key/value sections plus overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data_io import SyntheticSpec
from .features_mel import MelConfig, n_frames_for
from .model import ModelConfig
from .pipeline import DspConfig
from .signal_dsp import SignalError
from .training import PwlConfig, SaptConfig, TrainConfig

THREADS_ENV = "PCG_HINF_THREADS"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class DataConfig:
    dir: str | None = None
    synthetic: SyntheticSpec | None = None
    test_ratio: float = 0.2
    val_per_class: int = 250
    cache: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    threads: int = field(default_factory=default_threads)
    data: DataConfig = field(default_factory=DataConfig)
    dsp: DspConfig = field(default_factory=DspConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pwl: PwlConfig = field(default_factory=PwlConfig)
    sapt: SaptConfig = field(default_factory=SaptConfig)

    def to_dict(self) -> dict:
        d = _plain(dataclasses.asdict(self))
        return d


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


SECTIONS = {"dsp": DspConfig, "mel": MelConfig, "model": ModelConfig, "train": TrainConfig,
            "pwl": PwlConfig, "sapt": SaptConfig}
TUPLE_FIELDS = {"duration_s", "heart_rate_bpm", "records_per_patient", "conv_blocks"}


def _build(cls, values, where, problems):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        problems.append(f"{where}: expected a mapping, got {type(values).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in known:
            problems.append(f"{where}.{key}: unknown key")
            continue
        if key in TUPLE_FIELDS and isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return cls()


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    raw = dict(raw or {})
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {}) if isinstance(node.get(k), dict) or k not in node else node[k]
            if not isinstance(node, dict):
                raise ConfigError([f"override {item!r}: {k} is not a section"])
        node[keys[-1]] = yaml.safe_load(value)
    return raw


def load_config(path=None, overrides=None, check_paths: bool = True) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"])
        except yaml.YAMLError as exc:
            raise ConfigError([f"config {path} is not valid YAML: {exc}"])
    return config_from_dict(apply_overrides(raw, overrides), check_paths)


def config_from_dict(raw: dict, check_paths: bool = True) -> RunConfig:
    """Validate everything and report every problem at once."""
    problems = []
    top = {"seed", "out", "threads", "data"} | set(SECTIONS)
    for key in raw:
        if key not in top:
            problems.append(f"{key}: unknown section")
    sections = {name: _build(cls, raw.get(name), name, problems) for name, cls in SECTIONS.items()}

    data_raw = dict(raw.get("data") or {})
    synth_raw = data_raw.pop("synthetic", None)
    data = _build(DataConfig, data_raw, "data", problems)
    if synth_raw is not None:
        data.synthetic = _build(SyntheticSpec, synth_raw if synth_raw is not True else {}, "data.synthetic", problems)

    cfg = RunConfig(seed=raw.get("seed", 0), out=raw.get("out", "runs/latest"),
                    threads=raw.get("threads", default_threads()), data=data, **sections)

    if not isinstance(cfg.seed, int):
        problems.append(f"seed must be an integer, got {cfg.seed!r}")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        problems.append(f"threads must be a positive integer, got {cfg.threads!r}")
    if (data.dir is None) == (data.synthetic is None):
        problems.append("data: set exactly one of data.dir or data.synthetic")
    if check_paths and data.dir is not None and not Path(data.dir).is_dir():
        problems.append(f"data.dir: directory {data.dir} does not exist")
    if data.synthetic is not None:
        problems += data.synthetic.problems()
    if not 0 < data.test_ratio < 1:
        problems.append("data.test_ratio must lie in (0, 1)")
    if data.val_per_class < 1:
        problems.append("data.val_per_class must be >= 1")
    for name in ("dsp", "train", "pwl", "sapt"):
        problems += getattr(cfg, name).problems()
    try:
        cfg.mel.validate(2000)
    except SignalError as exc:
        problems.append(f"mel: {exc}")

    # the model input shape follows from the clip length and the STFT settings
    clip_len = int(round(cfg.dsp.clip_seconds * 2000))
    if clip_len >= cfg.mel.n_fft and cfg.mel.hop > 0:
        cfg.model.n_mels = cfg.mel.n_mels
        cfg.model.n_frames = n_frames_for(clip_len, cfg.mel)
    else:
        problems.append(f"dsp.clip_seconds gives {clip_len} samples, fewer than mel.n_fft")
    problems += cfg.model.problems()
    if problems:
        raise ConfigError(problems)
    return cfg


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
