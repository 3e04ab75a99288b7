import json

import pytest

from parclip.config import ConfigError, RunConfig, apply_override, from_dict, load_config


def test_defaults_round_trip():
    cfg = RunConfig()
    assert from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_mode_dependent_clean_defaults():
    par = from_dict({"mode": "clean_par"}).clean_settings()
    base = from_dict({"mode": "clean_baseline"}).clean_settings()
    assert (par.schedule, par.epochs) == ("par_custom", 10)
    assert (base.schedule, base.epochs) == ("cosine", 5)
    pinned = from_dict({"mode": "clean_baseline", "clean": {"epochs": 3}}).clean_settings()
    assert pinned.epochs == 3


def test_unset_clean_fields_stay_unset():
    cfg = from_dict({"mode": "clean_par"})
    assert cfg.clean.epochs is None and cfg.to_dict()["clean"]["schedule"] is None


@pytest.mark.parametrize("data, path", [
    ({"bogus": 1}, "bogus"),
    ({"clean": {"taus": 1}}, "clean.taus"),
    ({"poison": {"trigger": {"colour": 1}}}, "poison.trigger.colour"),
    ({"model": {"hidden": "wide"}}, "model.hidden"),
    ({"model": {"hidden": True}}, "model.hidden"),
    ({"clean": {"tau": 0}}, "clean.tau"),
    ({"mode": "attack"}, "mode"),
    ({"poison": {"target_label": "purple blob"}}, "poison.target_label"),
    ({"poison": {"trigger": {"variant": "Sticker"}}}, "poison.trigger.variant"),
    ({"data": {"image_size": 36}}, "model.patch"),
    ({"model": {"stride": 9}}, "model.stride"),
    ({"train": {"schedule": "step"}}, "train.schedule"),
    ({"clean": "fast"}, "clean"),
])
def test_errors_name_the_offending_field(data, path):
    with pytest.raises(ConfigError) as err:
        from_dict(data)
    assert err.value.path == path
    assert str(err.value).startswith(path + ":")


def test_overrides_parse_json_and_strings():
    data = {}
    apply_override(data, "clean.tau=1.5")
    apply_override(data, "poison.trigger.variant=BlendedText")
    apply_override(data, "sweep.taus=[0.5, 1.0]")
    cfg = from_dict(data)
    assert cfg.clean.tau == 1.5 and cfg.poison.trigger.variant == "BlendedText"
    assert cfg.sweep.taus == [0.5, 1.0]
    with pytest.raises(ConfigError):
        apply_override({}, "clean.tau")
    with pytest.raises(ConfigError):
        apply_override({"clean": 3}, "clean.tau=1")


def test_load_config_layers_overrides_on_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "clean": {"tau": 1.0}}))
    cfg = load_config(path, ["clean.tau=2.5"])
    assert cfg.seed == 3 and cfg.clean.tau == 2.5
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)
