"""
Experiment configuration.

Configs are INI-style text files: [section] headers and `key = value` lines, `#`
comments. Parsing fails closed: duplicate keys, unknown sections or keys, and values
that do not validate all raise ConfigError, with the offending line when it can be
located.

Example:
    [experiment]
    name = smoke
    seed = 7

    [scan]
    doses = 10, 12.5, 20
    sigma = 10
"""

import configparser
import hashlib
import json
import logging
import re
from pathlib import Path
from typing import List, Literal, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator

from sinomap.errors import ConfigError
from sinomap.geometry import Geometry, PhantomSpec, head_phantom_spec
from sinomap.map_model import PriorConfig
from sinomap.net import NetSpec
from sinomap.noise_sim import ScanConfig, i0_for_dose
from sinomap.trainer import TrainConfig

logger = logging.getLogger(__name__)

MODES = ("supervised", "unsupervised", "semi")


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ExperimentSection(_Section):
    name: str = Field(..., min_length=1)
    seed: int = 0
    out_dir: str = "out"


class PhantomSection(_Section):
    size: int = Field(128, ge=8)
    scale: float = Field(0.03, gt=0)
    randomize: bool = True
    jitter: float = Field(0.03, ge=0, le=0.05)
    n_random: int = Field(3, ge=0)


class GeometrySection(_Section):
    n_angles: int = Field(180, ge=2)
    n_detectors: Optional[int] = Field(None, ge=1)
    detector_spacing: float = Field(1.0, gt=0)


class ScanSection(_Section):
    i0_high: float = Field(2e5, gt=0)
    reference_mas: float = Field(200.0, gt=0)
    doses: List[float] = Field(default_factory=lambda: [10.0, 12.5, 20.0], min_length=1)
    sigma: float = Field(10.0, ge=0)
    reference: Literal["high_dose", "noiseless"] = "high_dose"

    @field_validator("doses", mode="before")
    @classmethod
    def split_doses(cls, value):
        return _split_list(value)

    @field_validator("doses")
    @classmethod
    def check_doses(cls, doses):
        if any(d <= 0 for d in doses):
            raise ValueError("dose levels must be > 0")
        if len(set(doses)) != len(doses):
            raise ValueError("dose levels must be distinct")
        return doses


class DataSection(_Section):
    n_unlabeled: int = Field(50, ge=0)
    n_pairs: int = Field(20, ge=0)
    n_test: int = Field(5, ge=1)


class PriorSection(_Section):
    k: float = Field(0.3, gt=0)
    eps: float = Field(1e-3, gt=0)


class NetSection(_Section):
    n_layers: int = Field(5, ge=1)
    channels: int = Field(32, ge=1)
    residual: bool = True
    activation: Literal["relu", "linear"] = "relu"


class TrainSection(_Section):
    modes: List[Literal["supervised", "unsupervised", "semi"]] = Field(default_factory=lambda: list(MODES), min_length=1)
    lam: Optional[float] = Field(None, ge=0, alias="lambda")
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(4, ge=1)
    g_update_period: int = Field(1, ge=1)
    early_stop_tol: float = Field(1e-5, ge=0)
    patience: int = Field(5, ge=1)
    checkpoint_every: int = Field(10, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    @field_validator("modes", mode="before")
    @classmethod
    def split_modes(cls, value):
        return _split_list(value)


class TrackingSection(_Section):
    enabled: bool = False
    experiment_name: str = "sinomap"


class TuneSection(_Section):
    k_grid: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 0.1, 0.3, 1.0, 3.0, 10.0], min_length=1)
    epochs: int = Field(10, ge=1)

    @field_validator("k_grid", mode="before")
    @classmethod
    def split_grid(cls, value):
        return _split_list(value)

    @field_validator("k_grid")
    @classmethod
    def check_grid(cls, grid):
        if any(k <= 0 for k in grid):
            raise ValueError("prior weights must be > 0")
        return grid


class ExperimentConfig(_Section):
    experiment: ExperimentSection
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    geometry: GeometrySection = Field(default_factory=GeometrySection)
    scan: ScanSection = Field(default_factory=ScanSection)
    data: DataSection = Field(default_factory=DataSection)
    prior: PriorSection = Field(default_factory=PriorSection)
    net: NetSection = Field(default_factory=NetSection)
    train: TrainSection = Field(default_factory=TrainSection)
    tracking: TrackingSection = Field(default_factory=TrackingSection)
    tune: TuneSection = Field(default_factory=TuneSection)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def n_phantoms(self) -> int:
        return self.data.n_unlabeled + self.data.n_pairs + self.data.n_test

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        return self.model_copy(update={"experiment": self.experiment.model_copy(update={"seed": seed})})

    def with_out_dir(self, out_dir: Optional[str]) -> "ExperimentConfig":
        if out_dir is None:
            return self
        return self.model_copy(update={"experiment": self.experiment.model_copy(update={"out_dir": str(out_dir)})})

    def phantom_spec(self) -> PhantomSpec:
        p = self.phantom
        return head_phantom_spec(size=p.size, scale=p.scale, randomize=p.randomize,
                                 jitter=p.jitter, n_random=p.n_random)

    def make_geometry(self) -> Geometry:
        g = self.geometry
        return Geometry(image_size=self.phantom.size, n_angles=g.n_angles,
                        n_detectors=g.n_detectors, detector_spacing=g.detector_spacing)

    def scan_for(self, dose: float) -> ScanConfig:
        return ScanConfig(i0=i0_for_dose(dose, self.scan.i0_high, self.scan.reference_mas), sigma=self.scan.sigma)

    def high_dose_scan(self) -> ScanConfig:
        return ScanConfig(i0=self.scan.i0_high, sigma=self.scan.sigma)

    def prior_config(self, k: Optional[float] = None) -> PriorConfig:
        return PriorConfig(k=self.prior.k if k is None else k, eps=self.prior.eps)

    def net_spec(self) -> NetSpec:
        return NetSpec(**self.net.model_dump())

    def train_config(self, mode: str, scan: Optional[ScanConfig], seed: int, **overrides) -> TrainConfig:
        t = self.train
        fields = dict(
            mode=mode, lam=t.lam, epochs=t.epochs, batch_size=t.batch_size, g_update_period=t.g_update_period,
            seed=seed, early_stop_tol=t.early_stop_tol, patience=t.patience, learning_rate=t.learning_rate,
            beta1=t.beta1, beta2=t.beta2, adam_eps=t.adam_eps, scan=scan, prior=self.prior_config(),
            net=self.net_spec(),
        )
        fields.update(overrides)
        return TrainConfig(**fields)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form; the output directory does not count."""
        payload = self.model_dump(mode="json", by_alias=True, exclude={"experiment": {"out_dir"}})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _locate(text: str, section: Optional[str], key: Optional[str]) -> Optional[int]:
    """Line number of `key` inside [section] (or of the header when key is None)."""
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        header = re.match(r"^\[([^\]]+)\]$", line)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*[=:]", line):
            return lineno
    return None


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(strict=True, interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key '{exc.option}' in [{exc.section}]", line=exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", line=exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", line=line) from None

    raw = {name: dict(parser.items(name)) for name in parser.sections()}
    try:
        return ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(part) for part in err["loc"]]
        section = loc[0] if loc else None
        key = loc[1] if len(loc) > 1 else None
        line = _locate(text, section, key) if section in raw else None
        where = ".".join(loc[:2]) if loc else "config"
        raise ConfigError(f"{where}: {err['msg']}", line=line) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text(encoding="utf-8"))
    logger.info("Loaded config %s (experiment %s, hash %s)", path, cfg.experiment.name, cfg.config_hash()[:12])
    return cfg
