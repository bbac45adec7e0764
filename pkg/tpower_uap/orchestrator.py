"""Orchestrateur unique des commandes d'expérience."""

from __future__ import annotations

import csv
import json
import logging
import time
from collections.abc import Callable
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .attack import (
    PERTURBATION_MAGIC,
    load_perturbation,
    save_perturbation,
    sgd_layer_max_attack,
    sgd_uap_attack,
    sv_attack,
    top_k_for_budget,
    tpower_attack,
)
from .datasets import LabeledDataset, generate_synthetic, load_dataset, save_dataset
from .diffnet import (
    Model,
    accuracy,
    build_model,
    load_model,
    model_id,
    predict_batch,
    save_model,
    small_convnet_spec,
    train_sgd,
)
from .errors import EmptyDataError, FormatError, StorageError
from .evaluate import (
    adapt_perturbation,
    apply_perturbation,
    evaluate_perturbation,
    grid_search,
    median_defense,
    transfer_matrix,
)
from .export import export_pnm
from .models import Perturbation, TrainingSummary
from .settings import Settings, get_settings
from .tensorfile import is_tensor_file, read_tensor
from .validation import (
    AttackRunConfig,
    DefendConfig,
    EvalConfig,
    ExportPpmConfig,
    GenDataConfig,
    GridSearchConfig,
    TrainConfig,
    TransferConfig,
)

StatusCallback = Callable[[str], None]

GRID_CSV_HEADER = ["layer", "q", "patch_size", "top_k", "val_fr"]


class ExperimentOrchestrator:
    """Exécute une commande validée et écrit ses artefacts.

    Chaque méthode publique retourne le rapport (dict) également écrit en JSON.
    Seul `metadata.generated_at` varie d'une exécution à l'autre.
    """

    def __init__(
        self,
        settings: Optional[Settings] = None,
        status_callback: Optional[StatusCallback] = None,
        debug_dump: bool = False,
    ) -> None:
        self.settings = settings or get_settings()
        self.status_callback = status_callback
        self.debug_dump = debug_dump
        self.logger = logging.getLogger(__name__)

    # Public API -------------------------------------------------

    def run(self, config: Any, out_dir: Optional[Path] = None) -> dict[str, Any]:
        handlers = {
            "gen-data": self.gen_data,
            "train": self.train,
            "attack": self.attack,
            "eval": self.evaluate,
            "transfer": self.transfer,
            "gridsearch": self.gridsearch,
            "defend": self.defend,
            "export-ppm": self.export_ppm,
        }
        start = time.time()
        self._log(f"Commande {config.command}...")
        report = handlers[config.command](config, out_dir)
        self._log(f"Commande {config.command} terminée en {time.time() - start:.1f}s")
        return report

    def gen_data(self, config: GenDataConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        self._log(f"Génération de {config.num_classes}×{config.samples_per_class} échantillons...")
        dataset = generate_synthetic(
            num_classes=config.num_classes,
            image_size=config.image_size,
            channels=config.channels,
            samples_per_class=config.samples_per_class,
            seed=config.seed,
            noise=config.noise,
            train_size=config.train_size,
            val_fraction=config.val_fraction,
        )
        manifest = save_dataset(dataset, out, num_classes=config.num_classes)
        self._log(f"Dataset écrit -> {out}")
        return self._report(
            "gen-data",
            {
                "dataset_dir": str(out),
                "manifest": str(manifest),
                "n_samples": len(dataset),
                "num_classes": config.num_classes,
                "shape": list(dataset.sample_shape),
                "splits": {tag: len(dataset.split(tag)) for tag in ("train", "val", "test")},
            },
        )

    def train(self, config: TrainConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        dataset, num_classes = load_dataset(config.dataset_dir)
        train_set = self._split(dataset, config.train_split)
        if config.architecture == "small_convnet":
            specs = small_convnet_spec(num_classes)
        else:
            specs = list(config.architecture)
        model = build_model(specs, dataset.sample_shape, num_classes, seed=config.seed)
        self._log(f"Entraînement: {len(train_set)} échantillons, {config.epochs} époques...")
        trained = train_sgd(model, train_set, config.epochs, config.lr, config.batch_size, config.seed)

        model_path = Path(config.model_path) if config.model_path else out / "model.tpnn"
        save_model(trained, model_path)
        val_acc = self._optional_accuracy(trained, dataset, config.val_split)
        summary = TrainingSummary(
            model_id=model_id(trained),
            train_accuracy=trained.metadata["train_accuracy"],
            val_accuracy=val_acc,
            train_loss=trained.metadata["train_loss"],
            initial_train_loss=trained.metadata["initial_train_loss"],
            epochs=config.epochs,
            n_train=len(train_set),
        )
        payload = {**asdict(summary), "model_path": str(model_path)}
        payload["test_accuracy"] = self._optional_accuracy(trained, dataset, "test")
        self._log(f"Modèle écrit -> {model_path} (précision train {summary.train_accuracy:.3f})")
        return self._write_report(out / "train_report.json", "train", payload)

    def attack(self, config: AttackRunConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        model = load_model(config.model_path)
        dataset, _ = load_dataset(config.dataset_dir)
        fit = self._split(dataset, config.fit_split).head(config.fit_size)
        attack_cfg = config.attack
        if config.damage_budget is not None:
            attack_cfg = attack_cfg.updated(
                top_k=top_k_for_budget(model.input_shape, attack_cfg.patch_size, config.damage_budget)
            )
        self._log(f"Attaque {config.mode} sur {len(fit)} échantillons (couche {attack_cfg.layer})...")
        pert = self._run_attack(config, model, fit, attack_cfg)

        pert_path = out / "perturbation.tpuap"
        save_perturbation(pert, pert_path)
        eval_set = self._split(dataset, config.eval_split)
        report = evaluate_perturbation(
            model,
            eval_set,
            pert,
            pert.config.magnitude,
            split=config.eval_split,
            batch_size=self.settings.EVAL_BATCH_SIZE,
            strict_asr=False,
        )
        payload = {
            "mode": config.mode,
            "method": pert.method,
            "perturbation_path": str(pert_path),
            "source_model_id": pert.source_model_id,
            "attack_config": pert.config.model_dump(mode="json"),
            "n_fit": len(fit),
            "n_active_blocks": pert.n_active_blocks,
            "objective_trace": pert.objective_trace,
            "report": report.to_dict(),
        }
        self._log(f"Perturbation écrite -> {pert_path} (FR {config.eval_split} {report.fooling_rate:.3f})")
        return self._write_report(out / "attack_report.json", "attack", payload)

    def evaluate(self, config: EvalConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        model = load_model(config.model_path)
        dataset, _ = load_dataset(config.dataset_dir)
        data = self._split(dataset, config.split)
        pert = adapt_perturbation(load_perturbation(config.perturbation_path), model.input_shape)
        report = evaluate_perturbation(
            model, data, pert, config.magnitude, split=config.split, batch_size=self.settings.EVAL_BATCH_SIZE
        )
        if self.debug_dump:
            self._dump_predictions(out / "predictions.csv", model, data, pert, config.magnitude)
        return self._write_report(out / "eval_report.json", "eval", report.to_dict())

    def transfer(self, config: TransferConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        shared, _ = load_dataset(config.dataset_dir)
        models: dict[str, Model] = {}
        perts: dict[str, Perturbation] = {}
        datasets: dict[str, LabeledDataset] = {}
        for entry in config.entries:
            models[entry.name] = load_model(entry.model_path)
            perts[entry.name] = load_perturbation(entry.perturbation_path)
            source = load_dataset(entry.dataset_dir)[0] if entry.dataset_dir else shared
            datasets[entry.name] = self._split(source, config.split)
        self._log(f"Matrice de transfert sur {len(models)} modèles...")
        matrix = transfer_matrix(perts, models, datasets, config.magnitude, self.settings.EVAL_BATCH_SIZE)
        payload = {
            "matrix": matrix,
            "model_ids": {name: model_id(m) for name, m in models.items()},
            "split": config.split,
            "magnitude": config.magnitude,
        }
        return self._write_report(out / "transfer_report.json", "transfer", payload)

    def gridsearch(self, config: GridSearchConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        model = load_model(config.model_path)
        dataset, _ = load_dataset(config.dataset_dir)
        fit = self._split(dataset, config.fit_split).head(config.fit_size)
        val_set = self._split(dataset, config.val_split)
        result = grid_search(
            model,
            fit.samples,
            val_set,
            config.layers,
            config.qs,
            config.patch_sizes,
            config.attack,
            damage_budget=config.damage_budget,
            max_workers=config.max_workers or self.settings.MAX_WORKERS,
            batch_size=self.settings.EVAL_BATCH_SIZE,
        )

        rows = []
        for index, point in enumerate(result.points):
            row = point.row()
            if point.perturbation is not None:
                point_path = out / "points" / f"point_{index:03d}.tpuap"
                save_perturbation(point.perturbation, point_path)
                row["perturbation_path"] = str(point_path)
            rows.append(row)
        self._write_grid_csv(out / "grid.csv", rows)

        best = result.best_point
        best_path = out / "best_perturbation.tpuap"
        save_perturbation(best.perturbation, best_path)
        # FR de test calculé une seule fois, sur le gagnant
        test_report = evaluate_perturbation(
            model,
            self._split(dataset, config.test_split),
            best.perturbation,
            result.best_config.magnitude,
            split=config.test_split,
            batch_size=self.settings.EVAL_BATCH_SIZE,
            strict_asr=False,
        )
        payload = {
            "points": rows,
            "best": {
                **best.row(),
                "config": result.best_config.model_dump(mode="json"),
                "perturbation_path": str(best_path),
                "test_fr": test_report.fooling_rate,
                "test_report": test_report.to_dict(),
            },
        }
        self._log(
            f"Gagnant: {best.layer}, q={best.q}, patch={best.patch_size} (FR test {test_report.fooling_rate:.3f})"
        )
        return self._write_report(out / "grid_report.json", "gridsearch", payload)

    def defend(self, config: DefendConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        out = self._resolve_out(config, out_dir)
        model = load_model(config.model_path)
        dataset, _ = load_dataset(config.dataset_dir)
        data = self._split(dataset, config.split)
        pert = adapt_perturbation(load_perturbation(config.perturbation_path), model.input_shape)
        self._log(f"Filtrage médian, fenêtres {config.windows}...")
        result = median_defense(model, data, pert, config.magnitude, config.windows, self.settings.EVAL_BATCH_SIZE)
        if not result["clean_accuracy_non_increasing"]:
            self._log("⚠️ Précision propre non monotone en la taille de fenêtre (rapport seulement).")
        payload = {**result, "split": config.split, "magnitude": config.magnitude}
        return self._write_report(out / "defend_report.json", "defend", payload)

    def export_ppm(self, config: ExportPpmConfig, out_dir: Optional[Path] = None) -> dict[str, Any]:
        tensor = self._load_exportable(Path(config.input_path))
        if tensor.ndim == 4:
            if config.sample_index is None:
                raise FormatError("Tenseur de rang 4: préciser sample_index")
            tensor = tensor[config.sample_index]
        path = export_pnm(tensor, Path(config.output_path), config.scale)
        self._log(f"Image exportée -> {path}")
        return self._report(
            "export-ppm", {"output_path": str(path), "shape": list(tensor.shape), "scale": config.scale}
        )

    # Steps --------------------------------------------------------

    def _run_attack(self, config: AttackRunConfig, model: Model, fit: LabeledDataset, cfg) -> Perturbation:
        if config.mode == "tpower":
            return tpower_attack(model, fit.samples, cfg)
        if config.mode == "sv":
            return sv_attack(
                model,
                fit.samples,
                cfg.layer,
                cfg.q,
                cfg.p,
                cfg.n_steps,
                cfg.seed,
                patch_size=cfg.patch_size,
                reduction_steps=cfg.reduction_steps,
                magnitude=cfg.magnitude,
            )
        if config.mode == "sgd_layer_max":
            return sgd_layer_max_attack(
                model, fit.samples, cfg.layer, cfg.q, cfg.p, cfg.magnitude, config.sgd_steps, config.sgd_lr, cfg.seed
            )
        return sgd_uap_attack(
            model,
            fit.samples,
            fit.labels,
            cfg.p,
            cfg.magnitude,
            config.sgd_steps,
            config.sgd_lr,
            config.sgd_batch_size,
            cfg.seed,
        )

    def _dump_predictions(self, path: Path, model: Model, data: LabeledDataset, pert: Perturbation, xi: float) -> None:
        clean = predict_batch(model, data.samples, self.settings.EVAL_BATCH_SIZE)
        attacked = predict_batch(model, apply_perturbation(data.samples, pert, xi), self.settings.EVAL_BATCH_SIZE)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["index", "label", "clean", "attacked"])
            for i, (label, c, a) in enumerate(zip(data.labels, clean, attacked)):
                writer.writerow([i, int(label), int(c), int(a)])
        self._log(f"Prédictions écrites -> {path}")

    def _write_grid_csv(self, path: Path, rows: list[dict[str, Any]]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(GRID_CSV_HEADER)
            for row in rows:
                writer.writerow(["" if row[key] is None else row[key] for key in GRID_CSV_HEADER])

    # Helpers -------------------------------------------------------

    def _resolve_out(self, config: Any, out_dir: Optional[Path]) -> Path:
        out = Path(out_dir) if out_dir else Path(config.output_dir) if config.output_dir else self.settings.OUTPUT_DIR
        out.mkdir(parents=True, exist_ok=True)
        return out

    def _split(self, dataset: LabeledDataset, tag: str) -> LabeledDataset:
        subset = dataset.split(tag)
        if len(subset) == 0:
            raise EmptyDataError(f"Split {tag!r} vide", {"split": tag})
        return subset

    def _optional_accuracy(self, model: Model, dataset: LabeledDataset, tag: str) -> Optional[float]:
        subset = dataset.split(tag)
        if len(subset) == 0:
            return None
        return accuracy(model, subset.samples, subset.labels, self.settings.EVAL_BATCH_SIZE)

    def _load_exportable(self, path: Path) -> np.ndarray:
        if not path.is_file():
            raise StorageError(f"Fichier introuvable: {path}")
        if is_tensor_file(path):
            return read_tensor(path)
        with open(path, "rb") as f:
            if f.read(len(PERTURBATION_MAGIC)) == PERTURBATION_MAGIC:
                return load_perturbation(path).eps
        raise FormatError(f"Ni TensorFile ni perturbation: {path}")

    def _report(self, command: str, payload: dict[str, Any]) -> dict[str, Any]:
        return {
            **payload,
            "metadata": {
                "command": command,
                "generated_at": datetime.now(timezone.utc).isoformat(),
                "version": __version__,
            },
        }

    def _write_report(self, path: Path, command: str, payload: dict[str, Any]) -> dict[str, Any]:
        report = self._report(command, payload)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8")
        self._log(f"Rapport écrit -> {path}")
        return report

    def _log(self, message: str) -> None:
        self.logger.info(message)
        if self.status_callback:
            self.status_callback(message)
