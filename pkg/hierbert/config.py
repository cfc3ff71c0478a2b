"""
Конфигурация эксперимента
Один TOML-файл, переопределения `--set dotted.key=value` и каноническая
сериализация, SHA-256 которой служит хешем конфигурации.
"""

import hashlib
import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, Field, ValidationError, model_validator

from hierbert.datapipe import DataConfig
from hierbert.encoder import EncoderConfig
from hierbert.exceptions import ConfigurationError
from hierbert.heads import ConcatMode, HeadPlacement, LossWeights
from hierbert.probe import ProbeConfig
from hierbert.train import FreezePolicy, TrainConfig

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    BERT_BASELINE = "bert_baseline"
    LOWER_NSP = "lower_nsp"
    LOWER_MASK = "lower_mask"
    LOWER_NSP_FREEZE = "lower_nsp_freeze"
    WITHOUT_NSP = "without_nsp"
    BIGRAM_SHIFT = "bigram_shift"


class PlacementConfig(BaseModel):
    """Unset layers default to the top layer, or to the middle for a lowered head"""

    mlm_layer: Optional[int] = Field(None, ge=1)
    nsp_layer: Optional[int] = Field(None, ge=1)


class PathsConfig(BaseModel):
    corpus: Optional[str] = None
    qa_train: Optional[str] = None
    qa_eval: Optional[str] = None
    nli_train: Optional[str] = None
    nli_eval: Optional[str] = None
    output_dir: str = "runs"


class SweepConfig(BaseModel):
    """Оси матрицы экспериментов; пустой `nsp_layers` означает все промежуточные слои"""

    variant: Variant = Variant.LOWER_NSP
    nsp_layers: List[int] = []
    pt_concats: List[ConcatMode] = [ConcatMode.NONE]
    ft_concats: List[ConcatMode] = [ConcatMode.NONE]
    tasks: List[Literal["qa", "nli", "probe"]] = ["qa"]


class ExperimentConfig(BaseModel):
    variant: Variant = Variant.BERT_BASELINE
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    placement: PlacementConfig = Field(default_factory=PlacementConfig)
    pt_concat: ConcatMode = ConcatMode.NONE
    ft_concat: ConcatMode = ConcatMode.NONE
    nsp_concat_source: Literal["logits", "probabilities"] = "logits"
    tie_mlm_decoder: bool = False
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    data: DataConfig = Field(default_factory=DataConfig)
    pretrain: TrainConfig = Field(default_factory=lambda: TrainConfig(phase="pretrain"))
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(phase="finetune"))
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    freeze: FreezePolicy = Field(default_factory=FreezePolicy)
    seeds: List[int] = [0]
    paths: PathsConfig = Field(default_factory=PathsConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="before")
    @classmethod
    def section_phases(cls, data: Any) -> Any:
        if isinstance(data, dict):
            for phase in ("pretrain", "finetune"):
                section = data.get(phase)
                if isinstance(section, dict):
                    data[phase] = {"phase": phase, **section}
        return data

    @model_validator(mode="after")
    def variant_consistency(self):
        top = self.encoder.num_layers
        placement = self.head_placement()
        mlm, nsp = placement.mlm_layer, placement.nsp_layer
        problems = []
        for name, value in (("mlm_layer", mlm), ("nsp_layer", nsp)):
            if not 1 <= value <= top:
                problems.append(f"placement.{name}={value} outside 1..{top}")

        v = self.variant
        if v in (Variant.BERT_BASELINE, Variant.BIGRAM_SHIFT) and (mlm, nsp) != (top, top):
            problems.append(f"{v.value} needs both heads at the top layer {top}, got mlm={mlm} nsp={nsp}")
        if v in (Variant.LOWER_NSP, Variant.LOWER_NSP_FREEZE) and not nsp < mlm == top:
            problems.append(f"{v.value} needs nsp_layer < mlm_layer = {top}, got mlm={mlm} nsp={nsp}")
        if v is Variant.LOWER_MASK and not mlm < nsp == top:
            problems.append(f"lower_mask needs mlm_layer < nsp_layer = {top}, got mlm={mlm} nsp={nsp}")
        if v is Variant.WITHOUT_NSP:
            if mlm != top:
                problems.append(f"without_nsp needs mlm_layer = {top}, got {mlm}")
            for field in ("pt_concat", "ft_concat"):
                if getattr(self, field) is ConcatMode.NSP_OUTPUT:
                    problems.append(f"{field}=nsp_output needs the NSP head, which without_nsp removes")
        if self.freeze.enabled and v is Variant.WITHOUT_NSP:
            problems.append("freeze.enabled needs the NSP head, which without_nsp removes")

        longest = max(self.data.short_len, self.data.long_len, self.data.qa_max_len, self.data.nli_max_len)
        if self.encoder.max_position < longest:
            problems.append(f"encoder.max_position={self.encoder.max_position} below the longest sequence {longest}")
        if self.encoder.vocab_size < self.data.max_vocab:
            problems.append(f"encoder.vocab_size={self.encoder.vocab_size} below data.max_vocab={self.data.max_vocab}")
        if self.pretrain.phase != "pretrain" or self.finetune.phase != "finetune":
            problems.append("pretrain/finetune sections must keep their phase")
        if not self.seeds:
            problems.append("seeds must not be empty")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def head_placement(self) -> HeadPlacement:
        top = self.encoder.num_layers
        middle = max(1, top // 2)
        v = self.variant
        mlm = self.placement.mlm_layer or (middle if v is Variant.LOWER_MASK else top)
        nsp = self.placement.nsp_layer or (middle if v in (Variant.LOWER_NSP, Variant.LOWER_NSP_FREEZE) else top)
        return HeadPlacement(
            mlm_layer=mlm,
            nsp_layer=nsp,
            nsp_enabled=v is not Variant.WITHOUT_NSP,
            bigram_shift_enabled=v is Variant.BIGRAM_SHIFT,
        )

    def freeze_policy(self) -> FreezePolicy:
        if self.variant is Variant.LOWER_NSP_FREEZE:
            return self.freeze.model_copy(update={"enabled": True})
        return self.freeze

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


# ============ Loading ============

def parse_override_value(raw: str) -> Any:
    """TOML scalar/array syntax, falling back to the raw string"""
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"Override {item!r} is not of the form key=value", error_code="BAD_OVERRIDE")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"Override {key!r} descends into a non-table value",
                                         error_code="BAD_OVERRIDE")
        node[parts[-1]] = parse_override_value(raw.strip())
    return data


def render_validation_error(error: ValidationError) -> str:
    lines = []
    for err in error.errors():
        location = ".".join(str(p) for p in err["loc"]) or "<config>"
        lines.append(f"  {location}: {err['msg']}")
    return "Invalid configuration:\n" + "\n".join(lines)


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(render_validation_error(e), error_code="VALIDATION_ERROR",
                                 details={"errors": e.errors(include_url=False, include_context=False)})


def load_config(path: Optional[Path], overrides: Sequence[str] = ()) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}", error_code="CONFIG_NOT_FOUND")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"Cannot parse {path}: {e}", error_code="CONFIG_PARSE_ERROR")
    config = build_config(apply_overrides(data, overrides))
    logger.info(f"Config loaded: variant={config.variant.value} hash={config.config_hash[:12]}")
    return config
