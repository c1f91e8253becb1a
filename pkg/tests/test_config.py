from __future__ import annotations

import json

import pytest

from causalpred.config import SCHEMA, ConfigError, RunConfig, load_config, parse_config


def test_defaults_and_round_trip(tmp_path):
    cfg = parse_config({"schema": SCHEMA, "seed": 3, "localize": {"layers": [1], "d_subs": [2]},
                        "eval": {"predictors": [{"variant": "confidence-answer", "temperature": 2.0}]}})
    assert cfg.seed == 3 and cfg.localize.layers == [1] and cfg.localize.steps == 300
    assert cfg.eval.predictors[0]["variant"] == "confidence-answer"
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    assert load_config(None) == RunConfig()


@pytest.mark.parametrize("data, fragment", [
    ({"schema": SCHEMA, "sedd": 1}, "sedd"),
    ({"schema": SCHEMA, "train": {"stepz": 5}}, "stepz"),
    ({"schema": SCHEMA, "localize": {"layers": 3}}, "localize.layers"),
    ({"schema": SCHEMA, "seed": "one"}, "seed"),
    ({"schema": "other/2"}, "schema"),
    ({"seed": 1}, "schema"),
])
def test_rejections_name_the_offending_key(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(data)


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
