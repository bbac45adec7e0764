"""Tests pour la validation des configurations et le CLI."""

import json
import math
from pathlib import Path

import pytest
from pydantic import ValidationError

from tpower_uap.cli import EXIT_CONFIG_ERROR, EXIT_DOMAIN_ERROR, EXIT_OK, main
from tpower_uap.errors import ConfigError
from tpower_uap.settings import get_settings
from tpower_uap.validation import (
    AttackConfig,
    AttackRunConfig,
    GenDataConfig,
    GridSearchConfig,
    LayerSpec,
    TrainConfig,
    load_experiment_config,
    parse_experiment_config,
)


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def cli_env(tmp_path, monkeypatch, restore_root_logger):
    """CLI isolé: pas de .env parasite, logs console réduits."""
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("TPOWER_LOG_LEVEL", "WARNING")
    monkeypatch.delenv("TPOWER_LOG_FILE", raising=False)
    return tmp_path


class TestAttackConfig:
    """Tests pour AttackConfig."""

    def test_defaults(self):
        """Valeurs par défaut de l'attaque."""
        cfg = AttackConfig()
        assert cfg.n_steps == 50
        assert cfg.top_k == 1
        assert cfg.q == 1.0
        assert math.isinf(cfg.p)
        assert cfg.layer == "0"

    @pytest.mark.parametrize("value", ["inf", "Infinity", "∞"])
    def test_inf_strings(self, value):
        """p accepte "inf" et ses variantes."""
        assert math.isinf(AttackConfig(p=value).p)

    def test_inf_serialized_as_string(self):
        """p = ∞ est sérialisé en "inf" (JSON valide)."""
        dumped = AttackConfig().model_dump(mode="json")
        assert dumped["p"] == "inf"
        assert json.loads(json.dumps(dumped))["p"] == "inf"

    def test_q_must_be_finite(self):
        """q = ∞ refusé."""
        with pytest.raises(ValidationError):
            AttackConfig(q="inf")

    @pytest.mark.parametrize(
        "changes",
        [
            {"reduction_steps": 60},
            {"q": 0.5},
            {"magnitude": 0.0},
            {"magnitude": 1.5},
            {"init_truncation": 0.0},
            {"top_k": 0},
            {"unknown": 1},
        ],
    )
    def test_invalid_values(self, changes):
        """Valeurs hors domaine et clés inconnues refusées."""
        with pytest.raises(ValidationError):
            AttackConfig(**changes)

    def test_updated_revalidates(self):
        """updated() revalide et lève ConfigError."""
        cfg = AttackConfig(n_steps=10, reduction_steps=5)
        assert cfg.updated(top_k=7).top_k == 7
        assert math.isinf(cfg.updated(top_k=7).p)
        with pytest.raises(ConfigError):
            cfg.updated(reduction_steps=11)

    def test_frozen(self):
        """La configuration est immuable."""
        with pytest.raises(ValidationError):
            AttackConfig().top_k = 3

    def test_config_hash(self):
        """Empreinte stable de 16 caractères, sensible aux valeurs."""
        a = AttackConfig(top_k=3).config_hash()
        assert len(a) == 16
        assert a == AttackConfig(top_k=3).config_hash()
        assert a != AttackConfig(top_k=4).config_hash()


class TestCommandConfigs:
    """Tests pour les configurations des commandes."""

    def test_discriminated_by_command(self):
        """Le champ command choisit le modèle."""
        cfg = parse_experiment_config({"command": "gen-data", "samples_per_class": 3})
        assert isinstance(cfg, GenDataConfig)
        cfg = parse_experiment_config(
            {"command": "attack", "model_path": "m.tpnn", "dataset_dir": "d", "attack": {"p": "inf", "top_k": 4}}
        )
        assert isinstance(cfg, AttackRunConfig)
        assert cfg.attack.top_k == 4

    def test_unknown_keys_named(self):
        """Les clés inconnues sont nommées dans l'erreur."""
        with pytest.raises(ConfigError) as exc_info:
            parse_experiment_config({"command": "gen-data", "samples_per_class": 3, "colour": "red"})
        assert "colour" in exc_info.value.message
        assert exc_info.value.details["errors"]

    def test_unknown_command(self):
        """Commande inconnue."""
        with pytest.raises(ConfigError):
            parse_experiment_config({"command": "deploy"})

    def test_transfer_needs_two_models(self):
        """Une matrice de transfert demande au moins deux modèles."""
        entry = {"name": "a", "model_path": "a.tpnn", "perturbation_path": "a.tpuap"}
        with pytest.raises(ConfigError):
            parse_experiment_config({"command": "transfer", "dataset_dir": "d", "entries": [entry]})

    def test_grid_rejects_infinite_q(self):
        """Grille: q fini, patchs positifs."""
        base = {"command": "gridsearch", "model_path": "m", "dataset_dir": "d", "layers": ["0"]}
        with pytest.raises(ConfigError):
            parse_experiment_config({**base, "qs": ["inf"], "patch_sizes": [1]})
        with pytest.raises(ConfigError):
            parse_experiment_config({**base, "qs": [2.0], "patch_sizes": [0]})
        cfg = parse_experiment_config({**base, "qs": [1, 2.5], "patch_sizes": [1, 2]})
        assert isinstance(cfg, GridSearchConfig)

    def test_layer_spec_required_fields(self):
        """dense demande units, conv2d demande filters."""
        with pytest.raises(ValidationError):
            LayerSpec(kind="dense")
        with pytest.raises(ValidationError):
            LayerSpec(kind="conv2d")
        assert LayerSpec(kind="conv2d", filters=2).kernel_size == 3

    def test_train_architecture(self):
        """Architecture nommée ou liste de couches."""
        cfg = parse_experiment_config({"command": "train", "dataset_dir": "d"})
        assert isinstance(cfg, TrainConfig)
        assert cfg.architecture == "small_convnet"
        cfg = parse_experiment_config(
            {
                "command": "train",
                "dataset_dir": "d",
                "architecture": [{"kind": "flatten"}, {"kind": "dense", "units": 2}],
            }
        )
        assert cfg.architecture[1].units == 2


class TestConfigLoading:
    """Tests pour load_experiment_config."""

    def test_json(self, write_config):
        """Fichier JSON."""
        path = write_config({"command": "gen-data", "samples_per_class": 2})
        assert load_experiment_config(path).samples_per_class == 2

    def test_yaml(self, tmp_path):
        """Fichier YAML, "inf" compris."""
        path = tmp_path / "attack.yaml"
        path.write_text(
            "command: attack\nmodel_path: m.tpnn\ndataset_dir: data\nattack:\n  p: inf\n  q: 2\n  top_k: 5\n",
            encoding="utf-8",
        )
        cfg = load_experiment_config(path)
        assert math.isinf(cfg.attack.p)
        assert cfg.attack.q == 2.0

    def test_missing_file(self, tmp_path):
        """Fichier absent."""
        with pytest.raises(ConfigError, match="introuvable"):
            load_experiment_config(tmp_path / "absent.json")

    def test_unparseable(self, tmp_path):
        """JSON ou YAML illisible."""
        bad_json = tmp_path / "bad.json"
        bad_json.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON"):
            load_experiment_config(bad_json)
        bad_yaml = tmp_path / "bad.yaml"
        bad_yaml.write_text("a: [1, 2", encoding="utf-8")
        with pytest.raises(ConfigError, match="YAML"):
            load_experiment_config(bad_yaml)

    def test_not_a_mapping(self, write_config):
        """Le document doit être un objet."""
        path = write_config([1, 2])
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_shipped_configs(self):
        """Les exemples de configs/ sont valides."""
        paths = sorted(CONFIG_DIR.glob("*.*"))
        assert paths
        commands = {load_experiment_config(path).command for path in paths}
        assert commands == {"gen-data", "train", "attack", "eval", "gridsearch"}


class TestSettings:
    """Tests pour les réglages d'environnement."""

    def test_env_prefix(self, monkeypatch, tmp_path):
        """Les variables TPOWER_ sont lues."""
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("TPOWER_MAX_WORKERS", "3")
        monkeypatch.setenv("TPOWER_OUTPUT_DIR", str(tmp_path / "runs"))
        settings = get_settings()
        assert settings.MAX_WORKERS == 3
        assert settings.OUTPUT_DIR == tmp_path / "runs"
        assert settings.EVAL_BATCH_SIZE == 256


class TestCli:
    """Tests pour les codes de sortie du CLI."""

    def test_gen_data_ok(self, cli_env, write_config, capsys):
        """Succès: code 0 et rapport JSON sur stdout."""
        path = write_config(
            {"command": "gen-data", "num_classes": 2, "image_size": 4, "channels": 1, "samples_per_class": 2}
        )
        code = main(["gen-data", "--config", str(path), "--out", str(cli_env / "data")])
        assert code == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report["n_samples"] == 4
        assert report["metadata"]["command"] == "gen-data"
        assert (cli_env / "data" / "manifest.json").is_file()

    def test_invalid_config(self, cli_env, write_config, capsys):
        """Clé inconnue: code 2, rien sur stdout."""
        path = write_config({"command": "gen-data", "samples_per_class": 2, "bogus": True})
        code = main(["gen-data", "--config", str(path), "--out", str(cli_env / "data")])
        captured = capsys.readouterr()
        assert code == EXIT_CONFIG_ERROR
        assert captured.out == ""
        assert "bogus" in captured.err
        assert not (cli_env / "data").exists()

    def test_command_mismatch(self, cli_env, write_config):
        """La configuration doit décrire la commande demandée."""
        path = write_config({"command": "gen-data", "samples_per_class": 2})
        assert main(["train", "--config", str(path)]) == EXIT_CONFIG_ERROR

    def test_missing_config(self, cli_env):
        """Fichier de configuration absent: code 2."""
        assert main(["eval", "--config", str(cli_env / "absent.json")]) == EXIT_CONFIG_ERROR

    def test_domain_error(self, cli_env, write_config, dataset_dir, capsys):
        """Modèle introuvable: code 1."""
        path = write_config(
            {
                "command": "eval",
                "model_path": str(cli_env / "absent.tpnn"),
                "dataset_dir": str(dataset_dir),
                "perturbation_path": str(cli_env / "absent.tpuap"),
            }
        )
        assert main(["eval", "--config", str(path), "--out", str(cli_env / "eval")]) == EXIT_DOMAIN_ERROR
        assert "introuvable" in capsys.readouterr().err

    def test_unknown_command(self, cli_env):
        """Commande inconnue: argparse sort avec le code 2."""
        with pytest.raises(SystemExit) as exc_info:
            main(["deploy", "--config", "x.json"])
        assert exc_info.value.code == 2
