"""Two-stage training and decoder-side inference.

Stage I fits ``LRM`` + ``MEN`` on (decoded, original) pairs with an L1
loss. Stage II freezes ``LRM``, initialises ``LRM_DM`` and ``MEN`` from the
Stage-I weights and trains the latent denoiser: a first phase updates only
``LRM_DM`` and the denoiser, the second phase also finetunes ``MEN``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import AugmentConfig, PairedSample, infinite_batches
from .errors import ConfigError, TrainingError
from .images import as_image, from_batch, to_batch
from .ldm import Denoiser, NoiseSchedule, build_schedule, diffusion_training_loss, forward_diffuse, \
    generate_prior, reverse_chain
from .lrm import LRM, LRMDM, LRMConfig
from .men import MEN, MENConfig
from .metrics import psnr

log = logging.getLogger(__name__)


@dataclass
class LDMConfig:
    T: int = 4
    hidden: int = 256
    blocks: int = 4
    heads: int = 4
    gamma_bar_first: float = 0.64
    gamma_bar_last: float = 0.01

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.gamma_bar_first, self.gamma_bar_last)


def _from_dict(cls, d):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ModelConfig:
    lrm: LRMConfig = field(default_factory=LRMConfig)
    men: MENConfig = field(default_factory=MENConfig)
    ldm: LDMConfig = field(default_factory=LDMConfig)

    def __post_init__(self):
        if self.men.n_latent != self.lrm.n_latent:
            raise ConfigError(f"men.n_latent {self.men.n_latent} != lrm.n_latent {self.lrm.n_latent}")

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d or {})
        unknown = set(d) - {"lrm", "men", "ldm"}
        if unknown:
            raise ConfigError(f"unknown model sections: {sorted(unknown)}")
        return cls(_from_dict(LRMConfig, d.get("lrm")), _from_dict(MENConfig, d.get("men")),
                   _from_dict(LDMConfig, d.get("ldm")))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass
class TrainConfig:
    """Optimisation settings for one stage.

    ``schedule`` is ``"cosine"`` (constant until ``cosine_start`` then cosine
    annealing to ``lr_floor`` at the last iteration), ``"step"`` (multiply by
    ``decay_factor`` every ``decay_every`` iterations) or ``"constant"``. In
    Stage II the schedule applies to the second phase only; the first phase
    runs at the initial rate.
    """
    stage: int = 1
    lr: float = 1e-4
    iterations: int = 2000
    batch_size: int = 4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"
    cosine_start: int = 0
    lr_floor: float = 1e-6
    decay_every: int = 400
    decay_factor: float = 0.1
    phase_split: float = 0.5
    seed: int = 0
    eval_every: int = 200
    patience: int | None = 5
    workers: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if self.schedule not in ("cosine", "step", "constant"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        if not 0.0 <= self.phase_split <= 1.0:
            raise ConfigError("phase_split must lie in [0, 1]")
        if self.decay_every < 1:
            raise ConfigError("decay_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def lr_at(cfg: TrainConfig, it: int, start: int = 0) -> float:
    """Learning rate at iteration ``it`` of a schedule beginning at ``start``."""
    k = it - start
    if cfg.schedule == "constant" or k < 0:
        return cfg.lr
    if cfg.schedule == "step":
        return cfg.lr * cfg.decay_factor ** (k // cfg.decay_every)
    c0 = max(cfg.cosine_start, start)
    last = cfg.iterations - 1
    if it < c0:
        return cfg.lr
    if last <= c0:
        return cfg.lr_floor
    frac = min((it - c0) / (last - c0), 1.0)
    return cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + math.cos(math.pi * frac))


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Adam update at rate ``lr``; refuses non-finite gradients."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError("non-finite gradient")
        group["lr"] = lr
    optimizer.step()


def _save_optimizer(ck: Checkpoint, optimizer, named: dict) -> None:
    steps = {}
    for name, p in named.items():
        st = optimizer.state.get(p)
        if not st:
            continue
        ck.arrays[f"optim.m.{name}"] = st["exp_avg"].detach().numpy().astype("<f4")
        ck.arrays[f"optim.v.{name}"] = st["exp_avg_sq"].detach().numpy().astype("<f4")
        steps[name] = int(st["step"])
    ck.state["optim_steps"] = steps


def _load_optimizer(ck: Checkpoint, optimizer, named: dict) -> None:
    for name, step in ck.state.get("optim_steps", {}).items():
        p = named[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(ck.arrays[f"optim.m.{name}"].copy()),
            "exp_avg_sq": torch.from_numpy(ck.arrays[f"optim.v.{name}"].copy()),
        }


def _seed_for(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "little") & (2**63 - 1)


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, iteration, loss, lr, wall_ms):
        self.rows.append((iteration, loss, lr, wall_ms))

    @property
    def losses(self):
        return [r[1] for r in self.rows]

    def to_csv(self, timing: bool = True) -> str:
        head = "iteration,loss,lr,wall_ms\n" if timing else "iteration,loss,lr\n"
        body = "".join(
            f"{i},{l:.9g},{r:.9g}" + (f",{w:.3f}\n" if timing else "\n") for i, l, r, w in self.rows
        )
        return head + body


class _EarlyStop:
    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, value) -> bool:
        if value < self.best - 1e-12:
            self.best, self.bad = value, 0
        else:
            self.bad += 1
        return self.patience is not None and self.bad >= self.patience


def _check_loss(loss, it, last_good):
    if not torch.isfinite(loss):
        err = TrainingError(f"loss became non-finite at iteration {it}")
        err.checkpoint = last_good
        raise err


def _batches(data, cfg, aug, start):
    stream = infinite_batches(data, cfg.batch_size, cfg.seed, aug, cfg.workers)
    for _ in range(start):
        next(stream)
    return stream


def l1(a, b):
    return (a - b).abs().mean()


def init_stage1(model_cfg: ModelConfig, seed: int = 0):
    torch.manual_seed(seed)
    return LRM(model_cfg.lrm), MEN(model_cfg.men)


def stage1_checkpoint(lrm, men, model_cfg, train_cfg, tag) -> Checkpoint:
    ck = Checkpoint(stage=1, config={"model": model_cfg.to_dict(), "train": _jsonable(asdict(train_cfg))},
                    tag=dict(tag or {}))
    ck.add_module("lrm", lrm)
    ck.add_module("men", men)
    return ck


def load_stage1(ck: Checkpoint):
    if ck.stage != 1:
        raise ConfigError(f"expected a Stage-I checkpoint, got stage {ck.stage}")
    mc = ModelConfig.from_dict(ck.config["model"])
    lrm = ck.load_into("lrm", LRM(mc.lrm))
    men = ck.load_into("men", MEN(mc.men))
    return mc, lrm, men


def train_stage1(data: Sequence[PairedSample], model_cfg: ModelConfig | None = None,
                 train_cfg: TrainConfig | None = None, aug_cfg: AugmentConfig | None = None,
                 tag: dict | None = None, eval_data: Sequence[PairedSample] | None = None,
                 resume: Checkpoint | None = None, callback: Callable | None = None):
    """Jointly fit LRM and MEN with ``L1(MEN(decoded, LRM(decoded, original)), original)``.

    Returns ``(checkpoint, history)``. Pass ``resume`` to continue a run from
    a checkpoint saved mid-way; the data stream and optimizer state are
    restored so the continuation matches an uninterrupted run.
    """
    model_cfg = model_cfg or ModelConfig()
    cfg = train_cfg or TrainConfig(stage=1)
    if resume is not None:
        model_cfg, lrm, men = load_stage1(resume)
        start = int(resume.state.get("iteration", 0))
    else:
        lrm, men = init_stage1(model_cfg, cfg.seed)
        start = 0
    named = {f"lrm.{k}": p for k, p in lrm.named_parameters()}
    named.update({f"men.{k}": p for k, p in men.named_parameters()})
    opt = make_optimizer(list(named.values()), cfg)
    if resume is not None:
        _load_optimizer(resume, opt, named)

    def snapshot(it):
        ck = stage1_checkpoint(lrm, men, model_cfg, cfg, tag)
        ck.state["iteration"] = it
        _save_optimizer(ck, opt, named)
        return ck

    hist = History()
    stopper = _EarlyStop(cfg.patience)
    batches = _batches(data, cfg, aug_cfg, start)
    last_good = None
    lrm.train()
    men.train()
    for it in range(start, cfg.iterations):
        t0 = time.perf_counter()
        b = next(batches)
        out = men(b.decoded, lrm(b.decoded, b.original))
        loss = l1(out, b.original)
        _check_loss(loss, it, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = lr_at(cfg, it)
        optimizer_step(opt, lr)
        hist.add(it, loss.item(), lr, (time.perf_counter() - t0) * 1e3)
        if callback:
            callback(it, loss.item())
        if eval_data and cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            last_good = snapshot(it + 1)
            val = stage1_l1(eval_data, lrm, men)
            log.info("stage1 it=%d loss=%.5f val=%.5f", it, loss.item(), val)
            if stopper.update(val):
                log.info("early stop at iteration %d", it + 1)
                return snapshot(it + 1), hist
    return snapshot(max(cfg.iterations, start)), hist


@torch.no_grad()
def stage1_l1(data, lrm, men) -> float:
    vals = []
    for s in data:
        x, y = to_batch(s.original), to_batch(s.decoded)
        vals.append(float(l1(men(y, lrm(y, x)), x)))
    return float(np.mean(vals))


class Stage2Models:
    """Container for the frozen LRM and the trainable Stage-II networks."""

    def __init__(self, model_cfg, lrm, lrm_dm, denoiser, men, schedule):
        self.model_cfg = model_cfg
        self.lrm = lrm
        self.lrm_dm = lrm_dm
        self.denoiser = denoiser
        self.men = men
        self.schedule = schedule

    @classmethod
    def from_stage1(cls, ck1: Checkpoint, seed: int = 0) -> "Stage2Models":
        mc, lrm, men = load_stage1(ck1)
        for p in lrm.parameters():
            p.requires_grad_(False)
        lrm.eval()
        torch.manual_seed(seed)
        den = Denoiser(mc.lrm.n_latent, mc.ldm.hidden, mc.ldm.blocks, mc.ldm.heads, mc.lrm.latent_size ** 2)
        return cls(mc, lrm, LRMDM.from_lrm(lrm), den, men, mc.ldm.schedule())

    def checkpoint(self, train_cfg, tag) -> Checkpoint:
        ck = Checkpoint(stage=2, config={"model": self.model_cfg.to_dict(), "train": _jsonable(asdict(train_cfg))},
                        schedule=self.schedule.to_dict(), tag=dict(tag or {}))
        ck.add_module("lrm", self.lrm)
        ck.add_module("lrm_dm", self.lrm_dm)
        ck.add_module("denoiser", self.denoiser)
        ck.add_module("men", self.men)
        return ck

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "Stage2Models":
        if ck.stage != 2:
            raise ConfigError(f"expected a Stage-II checkpoint, got stage {ck.stage}")
        mc = ModelConfig.from_dict(ck.config["model"])
        sched = NoiseSchedule.from_dict(ck.schedule) if ck.schedule else mc.ldm.schedule()
        den = Denoiser(mc.lrm.n_latent, mc.ldm.hidden, mc.ldm.blocks, mc.ldm.heads, mc.lrm.latent_size ** 2)
        m = cls(mc, ck.load_into("lrm", LRM(mc.lrm)), ck.load_into("lrm_dm", LRMDM(mc.lrm)),
                ck.load_into("denoiser", den), ck.load_into("men", MEN(mc.men)), sched)
        for mod in (m.lrm, m.lrm_dm, m.denoiser, m.men):
            mod.eval()
        return m

    @property
    def size_multiple(self) -> int:
        return math.lcm(self.model_cfg.lrm.pu_factor, 2 ** (self.model_cfg.men.scales - 1))

    def trainable(self, include_men: bool) -> dict:
        named = {f"lrm_dm.{k}": p for k, p in self.lrm_dm.named_parameters()}
        named.update({f"denoiser.{k}": p for k, p in self.denoiser.named_parameters()})
        named.update({f"men.{k}": p for k, p in self.men.named_parameters()})
        for k, p in named.items():
            if k.startswith("men."):
                p.requires_grad_(include_men)
        return named

    def training_prior(self, decoded, original, generator):
        """``(F, F_hat, D)`` with ``F_hat`` from the full reverse chain started at forward-diffused ``F``."""
        with torch.no_grad():
            f = self.lrm(decoded, original)
        cond = self.lrm_dm(decoded)
        eps = torch.randn(f.shape, generator=generator, dtype=f.dtype)
        f_T = forward_diffuse(f, self.schedule.T, eps, self.schedule)
        f_hat = reverse_chain(f_T, cond, self.schedule, self.denoiser, generator)
        return f, f_hat, cond

    def generate(self, decoded, seed: int = 0):
        return generate_prior(decoded, self.lrm_dm, self.schedule, self.denoiser, seed)


def train_stage2(data: Sequence[PairedSample], ckpt1: Checkpoint, train_cfg: TrainConfig | None = None,
                 aug_cfg: AugmentConfig | None = None, resume: Checkpoint | None = None,
                 callback: Callable | None = None):
    """Prior-generation training; returns ``(checkpoint, history)``.

    Phase A (first ``phase_split`` of the iterations) minimises the
    noise-prediction loss plus ``L1(F_hat, F)`` over LRM_DM and the
    denoiser with MEN frozen. Phase B minimises
    ``L1(MEN(decoded, F_hat), original) + L1(F_hat, F)`` over all three.
    """
    cfg = train_cfg or TrainConfig(stage=2, iterations=3000, schedule="step")
    if ckpt1 is None or ckpt1.stage != 1:
        raise ConfigError("Stage II needs a Stage-I checkpoint")
    tag = dict(ckpt1.tag)
    models = Stage2Models.from_stage1(ckpt1, cfg.seed)
    start = 0
    if resume is not None:
        if resume.stage != 2:
            raise ConfigError("resume checkpoint must be Stage II")
        for prefix, mod in (("lrm_dm", models.lrm_dm), ("denoiser", models.denoiser), ("men", models.men)):
            resume.load_into(prefix, mod)
        start = int(resume.state.get("iteration", 0))
    split = int(round(cfg.iterations * cfg.phase_split))
    named = models.trainable(include_men=start >= split)
    opt = make_optimizer(list(named.values()), cfg)
    if resume is not None:
        _load_optimizer(resume, opt, named)

    def snapshot(it):
        ck = models.checkpoint(cfg, tag)
        ck.state["iteration"] = it
        _save_optimizer(ck, opt, named)
        return ck

    hist = History()
    batches = _batches(data, cfg, aug_cfg, start)
    models.lrm_dm.train()
    models.denoiser.train()
    models.men.train()
    last_good = None
    for it in range(start, cfg.iterations):
        t0 = time.perf_counter()
        if it == split:
            models.trainable(include_men=True)
        gen = torch.Generator().manual_seed(_seed_for(cfg.seed, it))
        b = next(batches)
        f, f_hat, cond = models.training_prior(b.decoded, b.original, gen)
        prior_term = l1(f_hat, f)
        if it < split:
            loss = diffusion_training_loss(f, cond, models.denoiser, models.schedule, gen, reduction="mean") + prior_term
            lr = cfg.lr
        else:
            loss = l1(models.men(b.decoded, f_hat), b.original) + prior_term
            lr = lr_at(cfg, it, start=split)
        _check_loss(loss, it, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(opt, lr)
        hist.add(it, loss.item(), lr, (time.perf_counter() - t0) * 1e3)
        if callback:
            callback(it, loss.item())
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            last_good = snapshot(it + 1)
    models.trainable(include_men=True)
    return snapshot(max(cfg.iterations, start)), hist


def check_tag(ck: Checkpoint, tag: dict | None) -> None:
    if tag is None or not ck.tag:
        return
    for k, v in tag.items():
        if k in ck.tag and ck.tag[k] != v:
            raise ConfigError(f"checkpoint was trained for {k}={ck.tag[k]!r}, got {v!r}")


@torch.no_grad()
def enhance(decoded, ckpt2: Checkpoint | Stage2Models, seed: int = 0, tag: dict | None = None) -> np.ndarray:
    """Decoder-side enhancement: ``MEN(decoded, LDM(LRM_DM(decoded)))``, clipped to [0, 1]."""
    if isinstance(ckpt2, Checkpoint):
        check_tag(ckpt2, tag)
        models = Stage2Models.from_checkpoint(ckpt2)
    else:
        models = ckpt2
    img = as_image(decoded)
    h, w = img.shape[:2]
    y = to_batch(_pad_to(img, models.size_multiple))
    out = models.men(y, models.generate(y, seed))
    return np.clip(from_batch(out)[0][:h, :w], 0.0, 1.0)


def _pad_to(img: np.ndarray, k: int) -> np.ndarray:
    ph, pw = -img.shape[0] % k, -img.shape[1] % k
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="symmetric")


@torch.no_grad()
def enhance_stage1(decoded, original, ckpt1: Checkpoint) -> np.ndarray:
    """Enhancement with the learned (ground-truth informed) prior; an upper reference for Stage II."""
    _, lrm, men = load_stage1(ckpt1)
    lrm.eval()
    men.eval()
    img = as_image(decoded)
    h, w = img.shape[:2]
    k = math.lcm(lrm.cfg.pu_factor, 2 ** (men.cfg.scales - 1))
    y = to_batch(_pad_to(img, k))
    x = to_batch(_pad_to(as_image(original), k))
    return np.clip(from_batch(men(y, lrm(y, x)))[0][:h, :w], 0.0, 1.0)


@torch.no_grad()
def prior_gap(data, models: Stage2Models, seed: int = 0) -> float:
    """Mean ``L1(F_hat, F)`` over a dataset, with ``F_hat`` generated from noise."""
    vals = []
    for i, s in enumerate(data):
        x, y = to_batch(s.original), to_batch(s.decoded)
        vals.append(float(l1(models.generate(y, seed + i), models.lrm(y, x))))
    return float(np.mean(vals))


def stage_gap_report(data, ckpt1: Checkpoint, ckpt2: Checkpoint, seed: int = 0) -> dict:
    """Mean PSNR of decoded, Stage-I-enhanced and Stage-II-enhanced images against the originals.

    ``stage2_learned_prior`` feeds the Stage-II MEN the learned prior ``F``
    instead of the generated one; its distance to ``stage2`` isolates how much
    the generated prior costs.
    """
    models = Stage2Models.from_checkpoint(ckpt2)
    k = models.size_multiple
    base, s1, s2, s2f = [], [], [], []
    for i, s in enumerate(data):
        base.append(psnr(s.decoded, s.original))
        s1.append(psnr(enhance_stage1(s.decoded, s.original, ckpt1), s.original))
        s2.append(psnr(enhance(s.decoded, models, seed + i), s.original))
        h, w = s.decoded.shape[:2]
        y, x = to_batch(_pad_to(as_image(s.decoded), k)), to_batch(_pad_to(as_image(s.original), k))
        with torch.no_grad():
            out = from_batch(models.men(y, models.lrm(y, x)))[0][:h, :w]
        s2f.append(psnr(np.clip(out, 0.0, 1.0), s.original))
    return {"baseline": float(np.mean(base)), "stage1": float(np.mean(s1)), "stage2": float(np.mean(s2)),
            "stage2_learned_prior": float(np.mean(s2f))}
