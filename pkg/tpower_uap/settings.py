"""Réglages d'exécution lus depuis l'environnement (préfixe TPOWER_).

Les chemins relatifs sont ancrés au *project root* et pas au CWD, pour que le
CLI se comporte pareil quel que soit le dossier de lancement.
"""

from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

PROJECT_ROOT = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """Configuration de l'environnement d'exécution."""

    model_config = SettingsConfigDict(
        env_prefix="TPOWER_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Path | None = None
    LOG_JSON: bool = False

    # Sorties
    OUTPUT_DIR: Path = PROJECT_ROOT / "out"

    # Parallélisme des points de grille (threads, fusion en ordre fixe)
    MAX_WORKERS: int = Field(default=1, ge=1)

    # Taille des paquets d'évaluation (mémoire des passes forward)
    EVAL_BATCH_SIZE: int = Field(default=256, ge=1)

    # Garde-fou pour la matérialisation explicite des jacobiennes
    MATERIALIZE_MAX_DIM: int = Field(default=4096, ge=1)


def get_settings() -> Settings:
    """Relit l'environnement (utile dans les tests qui patchent les variables)."""
    return Settings()
