import pytest

from fedu.config import ExperimentConfig, config_from_mapping, dump_config, load_config, parse_config
from fedu.errors import ConfigurationError
from fedu.federated import Encoder, PredictorPolicy


def test_defaults_are_the_benchmark_preset():
    cfg = ExperimentConfig()
    assert (cfg.num_classes, cfg.dim, cfg.num_clients, cfg.partition) == (10, 16, 5, "noniid")
    assert (cfg.local_epochs, cfg.mu, cfg.ema_decay) == (1, 0.2, 0.99)
    p = cfg.protocol()
    assert (p.aggregate_source, p.update_target, p.predictor_policy) == (Encoder.ONLINE, Encoder.ONLINE, PredictorPolicy.DAPU)
    assert cfg.encoder_spec().layer_widths == (16, 64, 32)
    assert cfg.predictor_spec().layer_widths == (32, 64, 32)


def test_empty_document_gives_defaults():
    assert parse_config("") == ExperimentConfig()


def test_parses_values():
    cfg = parse_config("rounds: 7\nmu: 1\nencoder_hidden: [8, 8]\npredictor: local\nclients_per_round: 3\n")
    assert cfg.rounds == 7 and cfg.mu == 1.0 and isinstance(cfg.mu, float)
    assert cfg.encoder_spec().layer_widths == (16, 8, 8, 32)
    assert cfg.selection().clients_per_round == 3


def test_unknown_key_reports_line():
    with pytest.raises(ConfigurationError) as exc:
        parse_config("rounds: 3\n\nlearning_rat: 0.1\n")
    assert exc.value.line == 3 and exc.value.field == "learning_rat"
    assert "line 3" in str(exc.value)


@pytest.mark.parametrize(
    "text,field,line",
    [
        ("rounds: three\n", "rounds", 1),
        ("seed: 1\nbatch_size: 1.5\n", "batch_size", 2),
        ("symmetric_loss: 1\n", "symmetric_loss", 1),
        ("rounds: 2\nrounds: 3\n", "rounds", 2),
        ("seed: 0\nmu: -0.5\n", "mu", 2),
        ("ema_decay: 2\n", "ema_decay", 1),
        ("aggregate: both\n", "aggregate", 1),
        ("update: sideways\n", "update", 1),
        ("num_clients: 3\n", "num_clients", 1),
        ("partition: dirichlet\n", "partition", 1),
        ("a: 1\nclients_per_round: 9\n", "a", 1),
        ("clients_per_round: 9\n", "clients_per_round", 1),
        ("encoder_hidden: [0]\n", "encoder_hidden", 1),
        ("rounds: ~\n", "rounds", 1),
    ],
)
def test_invalid_values_name_field_and_line(text, field, line):
    with pytest.raises(ConfigurationError) as exc:
        parse_config(text)
    assert exc.value.field == field
    assert exc.value.line == line


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigurationError):
        parse_config("- 1\n- 2\n")


def test_malformed_yaml_reports_line():
    with pytest.raises(ConfigurationError) as exc:
        parse_config("rounds: 3\nmu: [0.1\n")
    assert exc.value.line is not None


def test_cifar_paths_required(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        parse_config("dataset: cifar10\n")
    assert exc.value.field == "cifar_train_path"
    with pytest.raises(ConfigurationError) as exc:
        parse_config(f"dataset: cifar10\ncifar_train_path: {tmp_path}/nope.bin\ncifar_test_path: x\n")
    assert exc.value.field == "cifar_train_path" and exc.value.line == 2


def test_cifar_input_dim(tmp_path):
    for name in ("a.bin", "b.bin"):
        (tmp_path / name).write_bytes(b"")
    cfg = parse_config(
        f"dataset: cifar10\ncifar_train_path: {tmp_path}/a.bin\ncifar_test_path: {tmp_path}/b.bin\n"
        "cifar_downsample: 8\ncifar_classes: [0, 1]\nnum_clients: 2\n"
    )
    assert cfg.input_dim() == 48


def test_dump_round_trip():
    cfg = ExperimentConfig(rounds=3, mu=0.05, encoder_hidden=[4])
    assert parse_config(dump_config(cfg)) == cfg
    assert config_from_mapping(cfg.to_dict()) == cfg


def test_missing_file():
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config("/definitely/not/here.yaml")


def test_output_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("FEDU_OUTPUT_DIR", str(tmp_path))
    assert ExperimentConfig().resolved_output_dir() == tmp_path
    assert ExperimentConfig(output_dir="elsewhere").resolved_output_dir().name == "elsewhere"
