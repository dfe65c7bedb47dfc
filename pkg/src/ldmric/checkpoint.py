"""On-disk checkpoint: ``manifest.json`` plus one raw ``<f4`` file per array.

Manifest schema (UTF-8 JSON, keys sorted)::

    {
      "format": "ldmric-checkpoint/1",
      "stage": 1 | 2,
      "modules": ["lrm", "men", ...],
      "config": {...},            # model/training/codec configuration
      "config_hash": "<sha256>",
      "schedule": {"T": int, "eta": [...]} | null,
      "tag": {"codec": str, "quality": float},
      "state": {...},             # e.g. iteration counter, optimizer steps
      "arrays": {"<name>": {"file": "<name>.f32", "shape": [...]}}
    }
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

FORMAT = "ldmric-checkpoint/1"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    stage: int
    config: dict
    arrays: dict = field(default_factory=dict)
    schedule: dict | None = None
    tag: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    @property
    def modules(self) -> list[str]:
        return sorted({k.split(".", 1)[0] for k in self.arrays if not k.startswith("optim")})

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for k, v in module.state_dict().items():
            self.arrays[f"{prefix}.{k}"] = v.detach().cpu().numpy().astype("<f4")

    def module_state(self, prefix: str) -> dict:
        p = prefix + "."
        state = {k[len(p):]: torch.from_numpy(v.astype(np.float32)) for k, v in self.arrays.items() if k.startswith(p)}
        if not state:
            raise ConfigError(f"checkpoint has no '{prefix}' parameters")
        return state

    def load_into(self, prefix: str, module: torch.nn.Module) -> torch.nn.Module:
        try:
            module.load_state_dict(self.module_state(prefix))
        except RuntimeError as exc:
            raise ConfigError(f"checkpoint '{prefix}' does not fit the model: {exc}") from exc
        return module

    def manifest(self) -> dict:
        return {
            "format": FORMAT,
            "stage": self.stage,
            "modules": self.modules,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "schedule": self.schedule,
            "tag": self.tag,
            "state": self.state,
            "arrays": {k: {"file": f"{k}.f32", "shape": list(v.shape)} for k, v in sorted(self.arrays.items())},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for old in path.glob("*.f32"):
            if old.stem not in self.arrays:
                old.unlink()
        for k, v in self.arrays.items():
            (path / f"{k}.f32").write_bytes(np.ascontiguousarray(v, dtype="<f4").tobytes())
        text = json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n"
        (path / "manifest.json").write_text(text, encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        mf = path / "manifest.json"
        if not mf.is_file():
            raise ConfigError(f"no checkpoint manifest at {mf}")
        man = json.loads(mf.read_text(encoding="utf-8"))
        if man.get("format") != FORMAT:
            raise ConfigError(f"unsupported checkpoint format {man.get('format')!r}")
        arrays = {}
        for name, spec in man["arrays"].items():
            f = path / spec["file"]
            if not f.is_file():
                raise DataError(f"checkpoint array missing: {f}")
            a = np.frombuffer(f.read_bytes(), dtype="<f4")
            shape = tuple(spec["shape"])
            if a.size != int(np.prod(shape)):
                raise DataError(f"array {name}: {a.size} values, manifest shape {shape}")
            arrays[name] = a.reshape(shape).copy()
        ck = cls(stage=int(man["stage"]), config=man["config"], arrays=arrays, schedule=man.get("schedule"),
                 tag=man.get("tag", {}), state=man.get("state", {}))
        if man.get("config_hash") != config_hash(ck.config):
            raise DataError("checkpoint config hash mismatch")
        return ck
