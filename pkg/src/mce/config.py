"""INI-style experiment configuration.

Sections are ``[synth_data]``, ``[model]``, ``[lce]``, ``[rce]`` and
``[trainer]``. Values are ``key = value``; booleans are ``true``/``false`` and
lists are comma-separated. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigurationError
from .model import ModelConfig
from .synth_data import SynthConfig
from .trainer import TrainConfig

# key -> (owning dataclass, field name)
SECTIONS = {
    "synth_data": {
        "modality_count": ("synth", "modality_count"),
        "class_count": ("synth", "class_count"),
        "feature_dim": ("synth", "feature_dim"),
        "samples": ("synth", "samples"),
        "test_samples": ("run", "test_samples"),
        "snr": ("synth", "snr"),
        "missing_rates": ("synth", "missing_rates"),
        "seed": ("synth", "seed"),
    },
    "model": {
        "feature_dim": ("model", "feature_dim"),
        "hidden_dim": ("model", "hidden_dim"),
        "heads": ("model", "heads"),
        "ffn_dim": ("model", "ffn_dim"),
        "pos_std": ("model", "pos_std"),
    },
    "lce": {
        "use_A": ("train", "use_A"),
        "use_B": ("train", "use_B"),
        "mc_K": ("train", "mc_K"),
        "exact_threshold": ("train", "exact_threshold"),
        "soft_accuracy": ("train", "soft_accuracy"),
    },
    "rce": {
        "lambdas": ("train", "lambdas"),
        "epsilon": ("train", "epsilon"),
        "recon_norm": ("train", "recon_norm"),
        "subset_cap": ("train", "subset_cap"),
    },
    "trainer": {
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "learning_rate": ("train", "learning_rate"),
        "optimizer": ("train", "optimizer"),
        "seed": ("train", "seed"),
        "pretrain_epochs": ("train", "pretrain_epochs"),
        "pretrain_lr": ("train", "pretrain_lr"),
        "probe_steps": ("train", "probe_steps"),
        "probe_lr": ("train", "probe_lr"),
        "probe_every": ("train", "probe_every"),
        "eval_every": ("train", "eval_every"),
        "ablation_seeds": ("run", "ablation_seeds"),
    },
}


@dataclass
class RunSettings:
    test_samples: int = 500
    ablation_seeds: tuple[int, ...] = (0,)


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def model_config(self) -> ModelConfig:
        """Model sizes with the data-dependent dimensions filled from the synth config."""
        return replace(self.model, modality_count=self.synth.modality_count,
                       input_dim=self.synth.feature_dim, class_count=self.synth.class_count)

    def validate(self):
        self.synth.validate()
        self.model_config().validate()
        self.train.validate()
        if self.run.test_samples < 1:
            raise ConfigurationError("test_samples must be >= 1", field="synth_data.test_samples")

    def as_dict(self) -> dict:
        return {"synth_data": asdict(self.synth), "model": asdict(self.model_config()),
                "trainer": asdict(self.train), "run": asdict(self.run)}

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))


def _convert(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = type(current[0]) if current else float
            return tuple(elem(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} ({exc})", field=key) from None


def _target(cfg: ExperimentConfig, owner: str):
    return {"synth": cfg.synth, "model": cfg.model, "train": cfg.train, "run": cfg.run}[owner]


def _set(cfg: ExperimentConfig, section: str, key: str, raw: str):
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown section [{section}]", field=section)
    if key not in SECTIONS[section]:
        raise ConfigurationError(f"unknown key {section}.{key}", field=f"{section}.{key}")
    owner, name = SECTIONS[section][key]
    obj = _target(cfg, owner)
    setattr(obj, name, _convert(raw, getattr(obj, name), f"{section}.{key}"))


def parse_config(text: str = "", overrides=()) -> ExperimentConfig:
    """Build a config from INI text plus ``section.key=value`` (or unique ``key=value``) overrides."""
    cfg = ExperimentConfig()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            _set(cfg, section, key, raw)
    for ov in overrides:
        key, sep, raw = ov.partition("=")
        if not sep:
            raise ConfigurationError(f"override {ov!r} is not key=value", field=ov)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
        else:
            owners = [s for s, keys in SECTIONS.items() if key in keys]
            if len(owners) != 1:
                raise ConfigurationError(f"override key {key!r} is unknown or ambiguous; use section.key",
                                         field=key)
            section = owners[0]
        _set(cfg, section, key, raw)
    cfg.validate()
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    text = ""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_config(text, overrides)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` back to INI text; ``parse_config(dump_config(c))`` reproduces it."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key, (owner, name) in keys.items():
            v = getattr(_target(cfg, owner), name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            else:
                s = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{key} = {s}")
        lines.append("")
    return "\n".join(lines)

