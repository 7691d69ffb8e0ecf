"""Run configuration: one flat key=value document with sections.

Every field has a default; ``parse_config(serialize_config(cfg))``
round-trips losslessly.  CLI flags override file values which override
defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError
from .fedsim import FLConfig
from .model import GamConfig, VARIANTS
from .synth import SynthSpec
from .train import TrainConfig

DEFAULT_CATALOG = ["glucose_level", "finger_stick", "meal", "bolus",
                   "sleep", "exercise"]
DEFAULT_POLICIES = {
    "glucose_level": "point",
    "finger_stick": "point",
    "meal": "point",
    "bolus": "interval",
    "sleep": "interval",
    "exercise": "interval",
    "work": "interval",
    "basal": "stepwise",
}


@dataclass
class DataConfig:
    catalog: list[str] = field(default_factory=lambda: list(DEFAULT_CATALOG))
    policies: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_POLICIES))
    target_attribute: str = "glucose_level"
    train_ratio: float = 0.8
    strict_attributes: bool = False

    def policy_for(self, attribute: str) -> str:
        return self.policies.get(attribute, "point")


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "gam"
    data: DataConfig = field(default_factory=DataConfig)
    model: GamConfig = field(default_factory=GamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    federated: FLConfig = field(default_factory=FLConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> None:
        """Normalize derived fields, then check every section.

        The base seed is the single source of randomness: it is pushed
        into the train/federated/synth sections here.  The model's
        attribute count and target row always follow the data catalog.
        """
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant: {self.variant}")
        if self.data.target_attribute not in self.data.catalog:
            raise ConfigError(
                f"target attribute {self.data.target_attribute!r} not in catalog")
        if "temp_basal" in self.data.catalog:
            raise ConfigError(
                "temp_basal is folded into basal during ingest and cannot be "
                "a model attribute; list basal instead")
        if not 0.0 < self.data.train_ratio < 1.0:
            raise ConfigError("train_ratio must be in (0, 1)")
        for attr, pol in self.data.policies.items():
            if pol not in ("point", "interval", "stepwise"):
                raise ConfigError(f"unknown policy {pol!r} for {attr!r}")
        self.train.seed = self.seed
        self.federated.seed = self.seed
        self.synth.seed = self.seed
        self.model.n_attributes = len(self.data.catalog)
        self.model.target_index = self.data.catalog.index(self.data.target_attribute)
        self.model.validate()
        self.train.validate()
        self.federated.validate()
        self.synth.validate()

    def fingerprint_payload(self) -> dict:
        payload = asdict(self)
        return payload


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    return str(value)


def _parse_value(text: str, template) -> object:
    if isinstance(template, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, list):
        return [part.strip() for part in text.split(",") if part.strip()]
    if isinstance(template, dict):
        out = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if ":" not in part:
                raise ConfigError(f"expected key:value pairs, got {part!r}")
            k, v = part.split(":", 1)
            out[k.strip()] = v.strip()
        return out
    return text


_SECTIONS = ("run", "data", "model", "train", "federated", "synth")


def _section_obj(cfg: RunConfig, section: str):
    return {"data": cfg.data, "model": cfg.model, "train": cfg.train,
            "federated": cfg.federated, "synth": cfg.synth}[section]


def serialize_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "variant": cfg.variant}
    for section in _SECTIONS[1:]:
        obj = _section_obj(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name))
                           for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            for key, raw in parser["run"].items():
                if key == "seed":
                    cfg.seed = int(raw)
                elif key == "variant":
                    cfg.variant = raw.strip()
                else:
                    raise ConfigError(f"unknown key [run] {key}")
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        obj = _section_obj(cfg, section)
        known = {f.name for f in fields(obj)}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                setattr(obj, key, _parse_value(raw, getattr(obj, key)))
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return cfg


def load_config(path: Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)
