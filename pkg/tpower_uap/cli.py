#!/usr/bin/env python3
"""
CLI tpower-uap: une commande par étape d'expérience

Usage:
    tpower-uap gen-data --config configs/gen_data.json --out out/data
    tpower-uap attack --config configs/attack.json --out out/attack
    tpower-uap eval --config configs/eval.json --debug-dump

Codes de sortie: 0 succès, 1 erreur du domaine ou d'E/S, 2 configuration invalide.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import AppError, ConfigError
from .logger import setup_logging
from .orchestrator import ExperimentOrchestrator
from .settings import get_settings
from .validation import load_experiment_config

COMMANDS = ("gen-data", "train", "attack", "eval", "transfer", "gridsearch", "defend", "export-ppm")

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_CONFIG_ERROR = 2

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpower-uap",
        description="Attaques universelles parcimonieuses (TPower), baselines et évaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  tpower-uap gen-data --config configs/gen_data.json --out out/data
  tpower-uap train --config configs/train.json
  tpower-uap gridsearch --config configs/grid.json --out out/grid
        """,
    )
    parser.add_argument("command", choices=COMMANDS, help="Commande à exécuter")
    parser.add_argument("--config", "-c", required=True, help="Fichier de configuration JSON (ou YAML)")
    parser.add_argument("--out", "-o", default=None, help="Dossier de sortie (prioritaire sur la configuration)")
    parser.add_argument(
        "--debug-dump",
        action="store_true",
        help="Écrire aussi les artefacts de débogage (prédictions par échantillon)",
    )
    return parser


def _print_error(kind: str, error: AppError) -> None:
    print(f"❌ {kind}: {error.message}", file=sys.stderr)
    if error.details:
        print(json.dumps(error.details, ensure_ascii=False, default=str, indent=2), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(
        log_file=settings.LOG_FILE,
        console_level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format_json=settings.LOG_JSON,
    )

    # Validation complète avant toute écriture
    try:
        config = load_experiment_config(Path(args.config))
        if config.command != args.command:
            raise ConfigError(
                f"La configuration décrit la commande {config.command!r}, pas {args.command!r}",
                {"command": config.command},
            )
    except ConfigError as e:
        _print_error("Configuration invalide", e)
        return EXIT_CONFIG_ERROR

    orchestrator = ExperimentOrchestrator(settings=settings, debug_dump=args.debug_dump)
    try:
        report = orchestrator.run(config, Path(args.out) if args.out else None)
    except ConfigError as e:
        _print_error("Configuration invalide", e)
        return EXIT_CONFIG_ERROR
    except AppError as e:
        logger.debug("Échec de %s", args.command, exc_info=True)
        _print_error("Erreur", e)
        return EXIT_DOMAIN_ERROR
    except OSError as e:
        print(f"❌ Erreur d'E/S: {e}", file=sys.stderr)
        return EXIT_DOMAIN_ERROR

    print(json.dumps(report, ensure_ascii=False, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
