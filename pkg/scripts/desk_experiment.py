#!/usr/bin/env python3
"""
Expérience de bureau de bout en bout, via l'orchestrateur.

Étapes: deux datasets synthétiques (victimes / attaque), deux modèles de même
architecture (graines 1 et 2), attaque TPower à 5 % de pixels, SV dense à 10/255,
baseline aléatoire, défense médiane et transfert A -> B.

Usage:
    python scripts/desk_experiment.py --work-dir out/desk
    python scripts/desk_experiment.py --work-dir out/desk --quick
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from tpower_uap.attack import load_perturbation
from tpower_uap.datasets import load_dataset
from tpower_uap.diffnet import load_model
from tpower_uap.evaluate import random_baseline
from tpower_uap.logger import setup_logging
from tpower_uap.orchestrator import ExperimentOrchestrator
from tpower_uap.validation import parse_experiment_config

DENSE_MAGNITUDE = 10 / 255


def desk_configs(work: Path, quick: bool = False, layer: str = "conv2d_3") -> dict[str, dict[str, Any]]:
    """Configurations de chaque étape (documents JSON équivalents à ceux du CLI)."""
    per_class = 60 if quick else 200
    epochs = 8 if quick else 20
    attack = {
        "n_steps": 20 if quick else 50,
        "reduction_steps": 5,
        "q": 1.0,
        "p": "inf",
        "patch_size": 1,
        "layer": layer,
        "seed": 0,
        "magnitude": 1.0,
    }
    victims, attack_data = work / "data_victim", work / "data_attack"
    return {
        "gen_victim": {
            "command": "gen-data",
            "num_classes": 10,
            "image_size": 32,
            "channels": 3,
            "samples_per_class": per_class,
            "seed": 0,
            "train_size": int(per_class * 10 * 0.8),
            "val_fraction": 0.0,
            "output_dir": str(victims),
        },
        "gen_attack": {
            "command": "gen-data",
            "num_classes": 10,
            "image_size": 32,
            "channels": 3,
            "samples_per_class": per_class,
            "seed": 100,
            "train_size": 256,
            "val_fraction": 0.1,
            "output_dir": str(attack_data),
        },
        "train_a": {
            "command": "train",
            "dataset_dir": str(victims),
            "model_path": str(work / "model_a.tpnn"),
            "epochs": epochs,
            "seed": 1,
            "val_split": "test",
            "output_dir": str(work / "train_a"),
        },
        "train_b": {
            "command": "train",
            "dataset_dir": str(victims),
            "model_path": str(work / "model_b.tpnn"),
            "epochs": epochs,
            "seed": 2,
            "val_split": "test",
            "output_dir": str(work / "train_b"),
        },
        "attack_tpower": {
            "command": "attack",
            "model_path": str(work / "model_a.tpnn"),
            "dataset_dir": str(attack_data),
            "mode": "tpower",
            "attack": attack,
            "damage_budget": 0.05,
            "fit_size": 256,
            "output_dir": str(work / "attack_tpower"),
        },
        "attack_tpower_b": {
            "command": "attack",
            "model_path": str(work / "model_b.tpnn"),
            "dataset_dir": str(attack_data),
            "mode": "tpower",
            "attack": attack,
            "damage_budget": 0.05,
            "fit_size": 256,
            "output_dir": str(work / "attack_tpower_b"),
        },
        "attack_sv": {
            "command": "attack",
            "model_path": str(work / "model_a.tpnn"),
            "dataset_dir": str(attack_data),
            "mode": "sv",
            "attack": {**attack, "magnitude": DENSE_MAGNITUDE},
            "fit_size": 256,
            "output_dir": str(work / "attack_sv"),
        },
        "eval_tpower": {
            "command": "eval",
            "model_path": str(work / "model_a.tpnn"),
            "dataset_dir": str(attack_data),
            "perturbation_path": str(work / "attack_tpower" / "perturbation.tpuap"),
            "split": "test",
            "magnitude": 1.0,
            "output_dir": str(work / "eval_tpower"),
        },
        "eval_sv": {
            "command": "eval",
            "model_path": str(work / "model_a.tpnn"),
            "dataset_dir": str(attack_data),
            "perturbation_path": str(work / "attack_sv" / "perturbation.tpuap"),
            "split": "test",
            "magnitude": DENSE_MAGNITUDE,
            "output_dir": str(work / "eval_sv"),
        },
        "defend": {
            "command": "defend",
            "model_path": str(work / "model_a.tpnn"),
            "dataset_dir": str(attack_data),
            "perturbation_path": str(work / "attack_tpower" / "perturbation.tpuap"),
            "windows": [3, 5],
            "split": "test",
            "output_dir": str(work / "defend"),
        },
        "transfer": {
            "command": "transfer",
            "dataset_dir": str(attack_data),
            "entries": [
                {
                    "name": "A",
                    "model_path": str(work / "model_a.tpnn"),
                    "perturbation_path": str(work / "attack_tpower" / "perturbation.tpuap"),
                },
                {
                    "name": "B",
                    "model_path": str(work / "model_b.tpnn"),
                    "perturbation_path": str(work / "attack_tpower_b" / "perturbation.tpuap"),
                },
            ],
            "split": "test",
            "output_dir": str(work / "transfer"),
        },
    }


def run_desk_experiment(work: Path, quick: bool = False, n_random: int = 20) -> dict[str, Any]:
    """Exécute toutes les étapes et retourne le résumé des critères."""
    work.mkdir(parents=True, exist_ok=True)
    orchestrator = ExperimentOrchestrator(status_callback=lambda m: print(f"  {m}", file=sys.stderr))
    configs = desk_configs(work, quick)
    reports: dict[str, Any] = {}
    for name, raw in configs.items():
        (work / "configs").mkdir(exist_ok=True)
        (work / "configs" / f"{name}.json").write_text(json.dumps(raw, indent=2), encoding="utf-8")
        print(f"▶ {name}", file=sys.stderr)
        reports[name] = orchestrator.run(parse_experiment_config(raw))

    attack_set, _ = load_dataset(work / "data_attack")
    test_set = attack_set.split("test")
    model_a = load_model(work / "model_a.tpnn")
    pert = load_perturbation(work / "attack_tpower" / "perturbation.tpuap")
    baseline = random_baseline(
        model_a,
        test_set,
        model_a.input_shape,
        pert.config.patch_size,
        pert.config.top_k,
        pert.config.p,
        1.0,
        n_draws=n_random,
        seed=1000,
    )
    threshold = baseline["mean"] + 2 * baseline["std"]
    tpower_fr = reports["eval_tpower"]["fooling_rate"]
    defend = reports["defend"]
    window3 = next(row for row in defend["windows"] if row["window"] == 3)
    pixel_slack = 1.0 / (model_a.input_shape[0] * model_a.input_shape[1])

    summary = {
        "test_accuracy_a": reports["train_a"]["test_accuracy"],
        "tpower_test_fr": tpower_fr,
        "sv_test_fr_at_10_255": reports["eval_sv"]["fooling_rate"],
        "random_baseline": {"mean": baseline["mean"], "std": baseline["std"]},
        "damaged_pixel_fraction": reports["eval_tpower"]["damaged_pixel_fraction"],
        "defend_window3_fr": window3["fooling_rate"],
        "transfer_a_to_b": reports["transfer"]["matrix"]["A"]["B"],
        "checks": {
            "accuracy_at_least_85": (reports["train_a"]["test_accuracy"] or 0.0) >= 0.85,
            "beats_random_baseline": tpower_fr > threshold,
            "beats_dense_sv": tpower_fr > reports["eval_sv"]["fooling_rate"],
            "damage_within_budget": reports["eval_tpower"]["damaged_pixel_fraction"] <= 0.05 + pixel_slack,
            "median_filter_reduces_fr": window3["fooling_rate"] < defend["unfiltered"]["fooling_rate"],
            "transfer_beats_random": reports["transfer"]["matrix"]["A"]["B"] > threshold,
        },
    }
    (work / "desk_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return summary


def main() -> int:
    parser = argparse.ArgumentParser(description="Expérience de bureau TPower de bout en bout")
    parser.add_argument("--work-dir", "-w", default="out/desk", help="Dossier de travail (défaut: out/desk)")
    parser.add_argument("--quick", action="store_true", help="Version réduite (moins d'échantillons et d'époques)")
    args = parser.parse_args()

    setup_logging()
    summary = run_desk_experiment(Path(args.work_dir), quick=args.quick)
    print(json.dumps(summary, indent=2, sort_keys=True))
    failed = [name for name, ok in summary["checks"].items() if not ok]
    if failed:
        print(f"⚠️  Critères non atteints: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("✅ Tous les critères sont atteints", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
