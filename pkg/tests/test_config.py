import pytest

from hierbert.config import Variant, apply_overrides, build_config, load_config, parse_override_value
from hierbert.exceptions import ConfigurationError
from hierbert.heads import ConcatMode


def _config(**data):
    base = {"encoder": {"num_layers": 4}}
    base.update(data)
    return build_config(base)


def test_defaults_are_valid():
    config = build_config({})
    assert config.variant is Variant.BERT_BASELINE
    placement = config.head_placement()
    assert (placement.mlm_layer, placement.nsp_layer) == (4, 4)
    assert config.pretrain.lr == 1e-4 and config.finetune.lr == 1e-5


def test_lowered_heads_default_to_the_middle():
    assert _config(variant="lower_nsp").head_placement().nsp_layer == 2
    lower_mask = _config(variant="lower_mask").head_placement()
    assert (lower_mask.mlm_layer, lower_mask.nsp_layer) == (2, 4)


@pytest.mark.parametrize("data", [
    {"variant": "lower_nsp", "placement": {"nsp_layer": 4}},
    {"variant": "lower_mask", "placement": {"mlm_layer": 4}},
    {"variant": "bert_baseline", "placement": {"nsp_layer": 2}},
    {"variant": "without_nsp", "pt_concat": "nsp_output"},
    {"variant": "without_nsp", "freeze": {"enabled": True}},
    {"variant": "lower_nsp", "placement": {"nsp_layer": 5}},
    {"data": {"long_len": 512}},
    {"encoder": {"num_layers": 4, "vocab_size": 100}},
    {"seeds": []},
])
def test_inconsistent_configs_are_rejected(data):
    with pytest.raises(ConfigurationError) as excinfo:
        _config(**data)
    assert excinfo.value.exit_code == 2


def test_freeze_variant_enables_policy():
    config = _config(variant="lower_nsp_freeze")
    assert config.freeze_policy().enabled
    assert not _config(variant="lower_nsp").freeze_policy().enabled


def test_config_hash_tracks_content():
    a = _config(variant="lower_nsp")
    b = _config(variant="lower_nsp")
    c = _config(variant="lower_nsp", pt_concat="cls_embedding")
    assert a.config_hash == b.config_hash != c.config_hash
    assert len(a.config_hash) == 64


def test_override_values():
    assert parse_override_value("3") == 3
    assert parse_override_value("1e-3") == 1e-3
    assert parse_override_value("true") is True
    assert parse_override_value("[1, 2]") == [1, 2]
    assert parse_override_value("lower_nsp") == "lower_nsp"
    data = apply_overrides({}, ["placement.nsp_layer=2", "variant=lower_nsp"])
    assert data == {"placement": {"nsp_layer": 2}, "variant": "lower_nsp"}
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["variant"])


def test_load_from_toml(experiment_files):
    config = load_config(experiment_files, ["pt_concat=nsp_output"])
    assert config.variant is Variant.LOWER_NSP
    assert config.pt_concat is ConcatMode.NSP_OUTPUT
    assert config.finetune.phase == "finetune"
    assert config.finetune.weight_decay == 0.0
    assert config.pretrain.total_steps == 4
    assert config.probe.hidden_sizes == (16,)


def test_missing_and_unparseable_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("variant = ", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        load_config(broken)
