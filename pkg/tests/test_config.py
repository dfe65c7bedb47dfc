import json

import pytest

from ldmric.config import dump_config, load_config, parse_config
from ldmric.errors import ConfigError


def write(tmp_path, obj, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj, indent=2))
    return p


def test_defaults():
    cfg = parse_config({})
    assert cfg.codec.name == "blockdct"
    assert list(cfg.codec.qualities) == [0.5, 1.0, 2.0, 4.0]
    assert cfg.model.ldm.T == 4
    assert cfg.model.lrm.n_latent == 256 and cfg.model.lrm.latent_size == 4
    assert cfg.train1.schedule == "cosine" and cfg.train2.schedule == "step"
    assert cfg.train1.lr == cfg.train2.lr == 1e-4
    assert cfg.model.ldm.schedule().gamma_bar[-1] <= 0.01 + 1e-12


def test_partial_sections_merge_with_defaults():
    cfg = parse_config({"train1": {"iterations": 10}, "model": {"men": {"blocks": 1}}})
    assert cfg.train1.iterations == 10
    assert cfg.train1.cosine_start == 613
    assert cfg.model.men.blocks == 1 and cfg.model.men.widths == (48, 96, 192)


def test_dump_then_load_roundtrip(tmp_path):
    cfg = parse_config({"seed": 3, "codec": {"quality": 2.0}, "data": {"crop_size": 32}})
    p = tmp_path / "d.json"
    p.write_text(dump_config(cfg))
    again = load_config(p)
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize("obj, key", [
    ({"codec": {"qualty": 1}}, "qualty"),
    ({"bogus": 1}, "bogus"),
    ({"codec": {"name": "jpeg"}}, "name"),
    ({"train1": {"lr": "fast"}}, "lr"),
    ({"data": {"augment": 1}}, "augment"),
    ({"model": {"men": {"widths": [48, 96, 192], "heads": [1, 5, 4]}}}, "men"),
    ({"model": {"ldm": {"T": 0}}}, "model"),
    ({"metrics": {"bpp_aggregation": "median"}}, "bpp_aggregation"),
    ({"codec": {"name": "external"}}, "codec"),
])
def test_invalid_configs_report_the_line(tmp_path, obj, key):
    path = write(tmp_path, obj)
    text = path.read_text()
    with pytest.raises(ConfigError) as info:
        load_config(path)
    msg = str(info.value)
    assert msg.startswith(f"{path}:")
    line = int(msg.split(":")[1])
    assert f'"{key}"' in text.splitlines()[line - 1]


def test_invalid_json_and_missing_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 1,\n  oops\n}')
    with pytest.raises(ConfigError, match=r"bad.json:3"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_latent_size_mismatch_rejected():
    with pytest.raises(ConfigError):
        parse_config({"model": {"lrm": {"n_latent": 64}}})
