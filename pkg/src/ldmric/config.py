"""Run configuration: one JSON document covering every pipeline section.

Unknown keys are rejected and every error message names the line of the
offending key in the source file, so a config fails before any work starts.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .codec import CODECS
from .data import AugmentConfig
from .errors import ConfigError
from .ldm import build_schedule
from .lrm import LRMConfig
from .men import MENConfig
from .training import LDMConfig, ModelConfig, TrainConfig, _jsonable


@dataclass
class CodecSection:
    name: str = "blockdct"
    quality: float = 1.0
    qualities: tuple = (0.5, 1.0, 2.0, 4.0)
    command: str | None = None
    template: str = "{cmd} {in} {out} {q}"
    root: str | None = None


@dataclass
class DataSection:
    root: str | None = None
    manifest: str | None = None
    eval_root: str | None = None
    synthetic_count: int = 8
    synthetic_size: int = 96
    crop_size: int = 64
    augment: bool = True
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5


@dataclass
class MetricsSection:
    psnr_cap: float = 100.0
    bpp_aggregation: str = "mean"
    ms_ssim_scales: int = 5


def _train1_default():
    # constant rate for the first ~30% of the run, then cosine annealing to the floor
    return TrainConfig(stage=1, lr=1e-4, iterations=2000, schedule="cosine", cosine_start=613)


def _train2_default():
    # x0.1 decay every fifth of the run
    return TrainConfig(stage=2, lr=1e-4, iterations=3000, schedule="step", decay_every=600, decay_factor=0.1)


@dataclass
class RunConfig:
    seed: int = 0
    codec: CodecSection = field(default_factory=CodecSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train1: TrainConfig = field(default_factory=_train1_default)
    train2: TrainConfig = field(default_factory=_train2_default)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def augment_config(self, seed: int | None = None) -> AugmentConfig | None:
        if not self.data.augment:
            return None
        return AugmentConfig(self.data.crop_size, self.data.hflip_prob, self.data.vflip_prob,
                             self.seed if seed is None else seed)

    def codec_options(self) -> dict:
        c = self.codec
        if c.name == "external":
            return {"command": c.command, "template": c.template}
        if c.name == "precomputed":
            return {"root": c.root}
        return {}

    def tag(self, quality: float | None = None) -> dict:
        return {"codec": self.codec.name, "quality": float(self.codec.quality if quality is None else quality)}


_SECTIONS = {"codec": CodecSection, "data": DataSection, "metrics": MetricsSection}
_TRAIN_DEFAULTS = {"train1": _train1_default, "train2": _train2_default}


def _line_of(text: str, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Ctx:
    def __init__(self, text, source):
        self.text = text
        self.source = source

    def fail(self, key, msg):
        line = _line_of(self.text, key)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: {msg}")


def _build(cls, values, ctx, section, base=None):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        ctx.fail(section, f"section '{section}' must be an object")
    names = {f.name for f in fields(cls)}
    for k in values:
        if k not in names:
            ctx.fail(k, f"unknown key '{k}' in section '{section}'")
    kwargs = asdict(base) if base is not None else {}
    kwargs.update(values)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        ctx.fail(section.rsplit(".", 1)[-1], f"section '{section}': {exc}")
    except TypeError as exc:
        ctx.fail(section, f"section '{section}': {exc}")


def _check_types(values, cls, ctx, section):
    defaults = {f.name: f for f in fields(cls)}
    for k, v in (values or {}).items():
        f = defaults.get(k)
        if f is None or v is None:
            continue
        expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
        if expected.startswith("int") and (not isinstance(v, int) or isinstance(v, bool)):
            ctx.fail(k, f"'{section}.{k}' must be an integer")
        if expected.startswith("float") and (not isinstance(v, (int, float)) or isinstance(v, bool)):
            ctx.fail(k, f"'{section}.{k}' must be a number")
        if expected.startswith("bool") and not isinstance(v, bool):
            ctx.fail(k, f"'{section}.{k}' must be true or false")
        if expected.startswith("tuple") and not isinstance(v, list):
            ctx.fail(k, f"'{section}.{k}' must be a list")


def parse_config(obj: dict, text: str = "", source: str = "<config>") -> RunConfig:
    ctx = _Ctx(text, source)
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    known = {"seed", "codec", "data", "model", "train1", "train2", "metrics"}
    for k in obj:
        if k not in known:
            ctx.fail(k, f"unknown top-level key '{k}'")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        ctx.fail("seed", "'seed' must be an integer")

    sections = {}
    for name, cls in _SECTIONS.items():
        _check_types(obj.get(name), cls, ctx, name)
        sections[name] = _build(cls, obj.get(name), ctx, name)
    for name, factory in _TRAIN_DEFAULTS.items():
        _check_types(obj.get(name), TrainConfig, ctx, name)
        sections[name] = _build(TrainConfig, obj.get(name), ctx, name, base=factory())

    model = obj.get("model") or {}
    if not isinstance(model, dict):
        ctx.fail("model", "section 'model' must be an object")
    for k in model:
        if k not in ("lrm", "men", "ldm"):
            ctx.fail(k, f"unknown key '{k}' in section 'model'")
    parts = {}
    for name, cls in (("lrm", LRMConfig), ("men", MENConfig), ("ldm", LDMConfig)):
        _check_types(model.get(name), cls, ctx, f"model.{name}")
        parts[name] = _build(cls, model.get(name), ctx, f"model.{name}")
    try:
        model_cfg = ModelConfig(**parts)
        model_cfg.ldm.schedule()
    except ConfigError as exc:
        ctx.fail("model", str(exc))
    if len(model_cfg.lrm.widths) != 3:
        ctx.fail("widths", "model.lrm.widths must list three widths")

    cfg = RunConfig(seed=seed, model=model_cfg, **sections)
    c = cfg.codec
    if c.name not in CODECS:
        ctx.fail("name", f"unknown codec '{c.name}' (choose from {', '.join(CODECS)})")
    if c.quality <= 0 or any(q <= 0 for q in c.qualities):
        ctx.fail("quality", "codec qualities must be > 0")
    if c.name == "external" and not c.command:
        ctx.fail("codec", "external codec needs 'command'")
    if c.name == "precomputed" and not (c.root or cfg.data.root):
        ctx.fail("codec", "precomputed codec needs 'root' (or data.root)")
    if cfg.train1.stage != 1 or cfg.train2.stage != 2:
        ctx.fail("stage", "train1.stage must be 1 and train2.stage must be 2")
    if cfg.metrics.bpp_aggregation not in ("mean", "pooled"):
        ctx.fail("bpp_aggregation", "metrics.bpp_aggregation must be 'mean' or 'pooled'")
    if cfg.data.synthetic_count < 1 or cfg.data.synthetic_size < 8:
        ctx.fail("synthetic_count", "synthetic data needs count >= 1 and size >= 8")
    try:
        cfg.augment_config()
    except ConfigError as exc:
        ctx.fail("crop_size", str(exc))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return parse_config(obj, text, str(path))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def default_schedule(cfg: RunConfig):
    return build_schedule(cfg.model.ldm.T, cfg.model.ldm.gamma_bar_first, cfg.model.ldm.gamma_bar_last)
