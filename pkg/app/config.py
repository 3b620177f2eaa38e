"""Experiment configuration: pydantic models, loading, hashing, overrides.

Configurations are JSON (canonical) or YAML files validated into
:class:`ExperimentConfig`.  Validation failures surface as
:class:`ConfigError` carrying the dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from app.fields import MAX_ATTENTION_CHANNELS, MIN_ATTENTION_CHANNELS
from app.flops import ModelDims
from app.policies import PolicyConfig
from app.scenario import BlobParams
from app.trace import Verbosity

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path("experiment.json")
"""Repository-level default experiment configuration."""

FieldKind = Literal["toy-attention", "rectified-oracle", "linear-field"]


class ConfigError(ValueError):
    """Raised when a configuration fails to parse or validate.

    ``path`` is the dotted location of the failing field (``"<root>"`` when
    the document itself is unreadable).
    """

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class ScenarioSpec(BlobParams):
    """Scenario settings; ``static`` pins the blob in place."""

    kind: Literal["moving-blob", "static"] = "moving-blob"

    def blob_params(self) -> BlobParams:
        params = BlobParams(**self.model_dump(exclude={"kind"}))
        if self.kind == "static":
            params = params.model_copy(update={"velocity": (0.0, 0.0)})
        return params


class FieldSpec(BaseModel):
    """Velocity backend settings.

    ``weight_seed`` seeds the frozen toy-attention weights independently of
    the scenario seed.  ``stale_kv`` keeps last-computed keys/values for
    skipped tokens on sparse steps.
    """

    kind: FieldKind = "toy-attention"
    weight_seed: int = 0
    gain: float = 0.5
    temporal_decay: float = Field(default=4.0, ge=0.0)
    spatial_decay: float = Field(default=1.0, ge=0.0)
    hidden_width: int = Field(default=16, ge=1)
    max_frequency: float = Field(default=4.0, gt=0.0)
    embed_scale: float = 0.5
    linear_scale: float = 0.5
    linear_offset: float = 0.0
    stale_kv: bool = True


class ScheduleSpec(BaseModel):
    total_steps: int = Field(default=50, ge=1)
    window: int = Field(default=1, ge=1)
    kind: Literal["linear", "shifted"] = "linear"
    shift: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def _window_fits(self) -> ScheduleSpec:
        if self.window > self.total_steps:
            raise ValueError(
                f"window {self.window} exceeds total_steps {self.total_steps}"
            )
        return self


class ExperimentConfig(BaseModel):
    """Pydantic model for a complete experiment."""

    name: str = "motioncache"
    scenario: ScenarioSpec = ScenarioSpec()
    field: FieldSpec = FieldSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    model_dims: ModelDims = ModelDims()
    policies: list[PolicyConfig] = Field(
        default_factory=lambda: [PolicyConfig(kind="vanilla")], min_length=1
    )
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    verbosity: Verbosity = "decisions"
    output_dir: str = "out"

    @model_validator(mode="after")
    def _consistent(self) -> ExperimentConfig:
        labels = [policy.label for policy in self.policies]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ValueError(f"duplicate policy names {duplicates}")
        channels = self.scenario.channels
        if self.field.kind == "toy-attention" and not (
            MIN_ATTENTION_CHANNELS <= channels <= MAX_ATTENTION_CHANNELS
        ):
            raise ValueError(
                f"toy-attention needs scenario.channels in "
                f"[{MIN_ATTENTION_CHANNELS}, {MAX_ATTENTION_CHANNELS}], "
                f"got {channels}"
            )
        return self

    def policy(self, name: str) -> PolicyConfig:
        for policy in self.policies:
            if policy.label == name:
                return policy
        raise ConfigError("policies", f"no policy named {name!r}")


def _field_path(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(data: Any) -> ExperimentConfig:
    """Validate a decoded document into an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        Naming the first failing field path.

    """
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(_field_path(tuple(first["loc"])), first["msg"]) from exc


def load_config(path: Path | str = DEFAULT_CONFIG_PATH) -> ExperimentConfig:
    """Load and validate an experiment configuration file.

    ``.yaml``/``.yml`` files are read with ``yaml.safe_load``; anything else
    is parsed as JSON.

    Raises
    ------
    ConfigError
        If the document cannot be decoded or fails validation.
    OSError
        If the file cannot be read.

    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("<root>", f"cannot decode {path}: {exc}") from exc
    config = parse_config(data)
    logger.info(
        "[load_config] path=%s policies=%d seeds=%s",
        path,
        len(config.policies),
        config.seeds,
    )
    return config


def canonical_json(data: Any) -> str:
    """Sorted-key, compact JSON used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _digest(data: Any) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the configuration without its output directory."""
    return _digest(config.model_dump(mode="json", exclude={"output_dir"}))


def scenario_hash(config: ExperimentConfig, seed: int) -> str:
    """SHA-256 of everything that fixes a seed's inputs, policies excluded."""
    payload = config.model_dump(
        mode="json", include={"scenario", "field", "schedule", "model_dims"}
    )
    payload["seed"] = seed
    return _digest(payload)


def apply_overrides(
    config: ExperimentConfig,
    *,
    seed: int | None = None,
    output_dir: str | Path | None = None,
    policy: str | None = None,
    verbosity: str | None = None,
) -> ExperimentConfig:
    """Return a re-validated copy with command-line overrides applied.

    Raises
    ------
    ConfigError
        If *policy* names no configured policy or an override is invalid.

    """
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seeds"] = [seed]
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    if verbosity is not None:
        data["verbosity"] = verbosity
    if policy is not None:
        data["policies"] = [config.policy(policy).model_dump(mode="json")]
    return parse_config(data)
