import pytest
import yaml

from igvlab.config import config_from_dict, default_config, dump_config, load_config, save_config
from igvlab.errors import ContractError


def test_round_trip_through_yaml(tmp_path):
    config = default_config().with_igv(lambda1=0.3, variant="c+t")
    save_config(config, tmp_path / "run.yaml")
    assert load_config(tmp_path / "run.yaml") == config
    assert dump_config(load_config(tmp_path / "run.yaml")) == dump_config(config)


def test_defaults():
    config = default_config()
    assert config.igv.lambda1 == config.igv.lambda2 == 0.8
    assert config.optim.patience == 5
    assert config.optim.lr == 1e-4
    assert config.run.seeds == (0, 1, 2, 3, 4)
    assert (config.data.num_clips, config.data.num_answers) == (16, 4)
    assert (config.data.rho_train, config.data.rho_test) == (0.9, 0.25)
    assert (config.splits.n_train, config.splits.n_val, config.splits.n_test) == (2000, 500, 500)


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["optim"].update(bogus=1), "unknown config field"),
    (lambda d: d.update(extra={}), "unknown config section"),
    (lambda d: d["igv"].pop("lambda1"), "missing config field"),
    (lambda d: d.pop("model"), "missing config section"),
    (lambda d: d["optim"].update(lr="fast"), "wrong type"),
    (lambda d: d["optim"].update(epochs=2.5), "wrong type"),
    (lambda d: d["igv"].update(variant="nope"), "variant"),
    (lambda d: d["igv"].update(lambda2=-1.0), "lambda"),
    (lambda d: d["data"].update(rho_train=0.1), "rho_train"),
    (lambda d: d["run"].update(seeds=[]), "seeds"),
])
def test_invalid_configs_are_rejected(mutate, message):
    raw = default_config().to_dict()
    mutate(raw)
    with pytest.raises(ContractError, match=message):
        config_from_dict(raw)


def test_integer_accepted_for_float_fields():
    raw = default_config().to_dict()
    raw["igv"]["lambda1"] = 1
    assert config_from_dict(raw).igv.lambda1 == 1.0


def test_unreadable_files(tmp_path):
    with pytest.raises(ContractError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("data: [unclosed", encoding="utf-8")
    with pytest.raises(ContractError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text(yaml.safe_dump([1, 2]), encoding="utf-8")
    with pytest.raises(ContractError):
        load_config(tmp_path / "list.yaml")
