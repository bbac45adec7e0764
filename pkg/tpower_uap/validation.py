"""Modèles de validation avec pydantic (configurations d'attaque et du CLI)."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, field_serializer, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from .errors import ConfigError

_INF_ALIASES = {"inf", "+inf", "infinity", "+infinity", "∞"}


def _parse_exponent(v: Any) -> Any:
    if isinstance(v, str) and v.strip().lower() in _INF_ALIASES:
        return math.inf
    return v


def _dump_exponent(v: float) -> float | str:
    return "inf" if math.isinf(v) else v


class AttackConfig(BaseModel):
    """Hyperparamètres de l'attaque TPower (et des variantes en puissance)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_steps: int = Field(default=50, gt=0, description="Nombre d'itérations de puissance")
    init_truncation: float = Field(default=1.0, gt=0.0, le=1.0, description="Fraction initiale de blocs actifs")
    top_k: int = Field(default=1, gt=0, description="Cardinalité cible (en blocs)")
    patch_size: int = Field(default=1, gt=0, description="Côté d'un patch")
    reduction_steps: int = Field(default=5, gt=0, description="Période de réduction de la cardinalité")
    q: float = Field(default=1.0, ge=1.0, description="Exposant de l'objectif (fini)")
    p: float = Field(default=math.inf, ge=1.0, description="Exposant de la contrainte (inf par défaut)")
    layer: str = Field(default="0", description="Point de coupe attaqué (nom ou indice)")
    seed: int = Field(default=0, ge=0, lt=2**64, description="Graine de l'initialisation")
    magnitude: float = Field(default=1.0, gt=0.0, le=1.0, description="Magnitude ξ appliquée à l'évaluation")

    @field_validator("q", "p", mode="before")
    @classmethod
    def parse_infinity(cls, v: Any) -> Any:
        """Accepte "inf"/"infinity" en JSON/YAML."""
        return _parse_exponent(v)

    @field_validator("q")
    @classmethod
    def q_must_be_finite(cls, v: float) -> float:
        if math.isinf(v) or math.isnan(v):
            raise ValueError("q doit être fini")
        return v

    @model_validator(mode="after")
    def check_schedule(self) -> AttackConfig:
        if self.reduction_steps > self.n_steps:
            raise ValueError("reduction_steps doit être ≤ n_steps")
        return self

    @field_serializer("q", "p")
    def serialize_exponent(self, v: float) -> float | str:
        return _dump_exponent(v)

    def config_hash(self) -> str:
        """Empreinte stable de la configuration (16 caractères hexadécimaux)."""
        return config_hash(self)

    def updated(self, **changes: Any) -> AttackConfig:
        """Copie revalidée avec quelques champs modifiés."""
        try:
            return AttackConfig.model_validate({**self.model_dump(), **changes})
        except PydanticValidationError as e:
            raise ConfigError(f"AttackConfig invalide: {e.errors()[0]['msg']}", {"changes": changes}) from e


def config_hash(config: BaseModel) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class LayerSpec(BaseModel):
    """Description d'une couche pour `build_model`."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["dense", "conv2d", "relu", "maxpool", "avgpool", "flatten"]
    units: int | None = Field(default=None, gt=0, description="Sorties d'une couche dense")
    filters: int | None = Field(default=None, gt=0, description="Canaux de sortie d'une convolution")
    kernel_size: int = Field(default=3, gt=0)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    window: int = Field(default=2, ge=1, description="Fenêtre de pooling")

    @model_validator(mode="after")
    def check_required(self) -> LayerSpec:
        if self.kind == "dense" and self.units is None:
            raise ValueError("dense: 'units' est requis")
        if self.kind == "conv2d" and self.filters is None:
            raise ValueError("conv2d: 'filters' est requis")
        return self


# Configurations du CLI ----------------------------------------------------


class _CommandConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    output_dir: Path | None = Field(default=None, description="Dossier de sortie (sinon --out ou TPOWER_OUTPUT_DIR)")


class GenDataConfig(_CommandConfig):
    command: Literal["gen-data"]
    num_classes: int = Field(default=10, ge=2)
    image_size: int = Field(default=32, gt=0)
    channels: int = Field(default=3, gt=0)
    samples_per_class: int = Field(gt=0)
    seed: int = Field(default=0, ge=0)
    noise: float = Field(default=0.05, ge=0.0)
    train_size: int = Field(default=256, ge=0)
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)


class TrainConfig(_CommandConfig):
    command: Literal["train"]
    dataset_dir: Path
    model_path: Path | None = None
    architecture: list[LayerSpec] | Literal["small_convnet"] = "small_convnet"
    epochs: int = Field(default=20, gt=0)
    lr: float = Field(default=0.05, ge=0.0)
    batch_size: int = Field(default=32, gt=0)
    seed: int = Field(default=0, ge=0)
    train_split: str = "train"
    val_split: str = "val"


class AttackRunConfig(_CommandConfig):
    command: Literal["attack"]
    model_path: Path
    dataset_dir: Path
    mode: Literal["tpower", "sv", "sgd_layer_max", "sgd"] = "tpower"
    attack: AttackConfig = Field(default_factory=AttackConfig)
    damage_budget: float | None = Field(
        default=None, gt=0.0, le=1.0, description="Fraction de pixels endommagés; fixe top_k"
    )
    fit_split: str = "train"
    fit_size: int = Field(default=256, gt=0)
    eval_split: str = "val"
    sgd_steps: int = Field(default=100, gt=0)
    sgd_lr: float = Field(default=0.1, ge=0.0)
    sgd_batch_size: int = Field(default=32, gt=0)


class EvalConfig(_CommandConfig):
    command: Literal["eval"]
    model_path: Path
    dataset_dir: Path
    perturbation_path: Path
    split: str = "test"
    magnitude: float = Field(default=1.0, gt=0.0, le=1.0)


class TransferEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    model_path: Path
    perturbation_path: Path
    dataset_dir: Path | None = None


class TransferConfig(_CommandConfig):
    command: Literal["transfer"]
    entries: list[TransferEntry] = Field(min_length=2)
    dataset_dir: Path
    split: str = "test"
    magnitude: float = Field(default=1.0, gt=0.0, le=1.0)


class GridSearchConfig(_CommandConfig):
    command: Literal["gridsearch"]
    model_path: Path
    dataset_dir: Path
    layers: list[str] = Field(min_length=1)
    qs: list[float] = Field(min_length=1)
    patch_sizes: list[int] = Field(min_length=1)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    damage_budget: float = Field(default=0.05, gt=0.0, le=1.0)
    fit_split: str = "train"
    fit_size: int = Field(default=256, gt=0)
    val_split: str = "val"
    test_split: str = "test"
    max_workers: int | None = Field(default=None, ge=1)

    @field_validator("qs")
    @classmethod
    def finite_qs(cls, v: list[float]) -> list[float]:
        if any(math.isinf(q) or q < 1.0 for q in v):
            raise ValueError("chaque q doit être fini et ≥ 1")
        return v

    @field_validator("patch_sizes")
    @classmethod
    def positive_patches(cls, v: list[int]) -> list[int]:
        if any(ps <= 0 for ps in v):
            raise ValueError("patch_sizes doit contenir des entiers positifs")
        return v


class DefendConfig(_CommandConfig):
    command: Literal["defend"]
    model_path: Path
    dataset_dir: Path
    perturbation_path: Path
    windows: list[int] = Field(min_length=1)
    split: str = "test"
    magnitude: float = Field(default=1.0, gt=0.0, le=1.0)


class ExportPpmConfig(_CommandConfig):
    command: Literal["export-ppm"]
    input_path: Path
    output_path: Path
    scale: Literal["signed", "unit"] = "signed"
    sample_index: int | None = Field(default=None, ge=0, description="Échantillon à extraire d'un tenseur de rang 4")


ExperimentConfig = Annotated[
    Union[
        GenDataConfig,
        TrainConfig,
        AttackRunConfig,
        EvalConfig,
        TransferConfig,
        GridSearchConfig,
        DefendConfig,
        ExportPpmConfig,
    ],
    Field(discriminator="command"),
]

_EXPERIMENT_ADAPTER: TypeAdapter = TypeAdapter(ExperimentConfig)


def parse_experiment_config(data: Any):
    """Valide un document de configuration; lève ConfigError en nommant les clés fautives."""
    try:
        return _EXPERIMENT_ADAPTER.validate_python(data)
    except PydanticValidationError as e:
        problems = []
        for err in e.errors():
            location = ".".join(str(part) for part in err["loc"])
            problems.append(f"{location}: {err['msg']}")
        raise ConfigError("Configuration invalide: " + "; ".join(problems), {"errors": problems}) from e


def load_experiment_config(config_file: Path):
    """
    Charge et valide une configuration JSON (ou YAML).

    Args:
        config_file: Chemin vers le fichier de config

    Returns:
        Configuration validée (un des modèles *Config selon `command`)
    """
    config_file = Path(config_file)
    if not config_file.is_file():
        raise ConfigError(f"Fichier de configuration introuvable: {config_file}")
    text = config_file.read_text(encoding="utf-8")
    if config_file.suffix in (".yaml", ".yml"):
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"YAML illisible: {e}") from e
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"JSON illisible: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("La configuration doit être un objet (clé/valeur)")
    return parse_experiment_config(data)
