"""Adam training loop, checkpoint/resume and the module ablation harness.

The batch for global step ``s`` is a pure function of ``(seed, s)``: epoch
``s // steps_per_epoch`` fixes a seeded permutation of the dataset, and the
crop offsets of each batch come from a generator seeded by
``(seed, epoch, batch)``. Resuming from a checkpoint therefore replays the
exact batches an uninterrupted run would have seen.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .archive import WeightArchive
from .errors import ConfigError, MCGKTError, NumericError, UsageError
from .metrics import evaluate_pairs, psnr, ssim
from .model import (MCGKTModel, ModelConfig, import_ekt, init_model, model_from_archive,
                    model_to_archive)
from .rain import crop_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 500
    steps: Optional[int] = None       # exact step budget, overrides epochs when set
    patch_size: int = 64
    seed: int = 0
    checkpoint_interval: int = 0      # steps between checkpoints, 0 = never
    ikt: bool = True
    ekt: bool = False
    mlcg: bool = True
    ekt_archive: Optional[str] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs and steps must be non-negative")
        if self.patch_size <= 0 or self.patch_size % 8:
            raise ConfigError(f"patch_size must be a positive multiple of 8, got {self.patch_size}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size)

    def total_steps(self, n: int) -> int:
        return self.epochs * self.steps_per_epoch(n) if self.steps is None else self.steps

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, T.Tensor], state: AdamState, lr: float):
    """One bias-corrected Adam update in place; clears the gradients afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


# ---------------------------------------------------------------- batching

def batch_for_step(dataset: Sequence, config: TrainConfig, step: int) -> tuple:
    """Stacked ``(rainy, clean)`` float32 patches for global ``step``."""
    n = len(dataset)
    spe = config.steps_per_epoch(n)
    epoch, b = divmod(step, spe)
    perm = np.random.default_rng([config.seed, epoch]).permutation(n)
    idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
    crop_rng = np.random.default_rng([config.seed, epoch, b, 1])
    rainy, clean = [], []
    for i in idx:
        r, c, _ = crop_pair(_pair_of(dataset[i]), config.patch_size, crop_rng)
        rainy.append(r)
        clean.append(c)
    return np.stack(rainy).astype(np.float32), np.stack(clean).astype(np.float32)


def _pair_of(item):
    return item[1] if isinstance(item, tuple) else item


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: MCGKTModel
    history: list
    state: AdamState
    checkpoints: list = field(default_factory=list)


def build_model(model_config: ModelConfig, config: TrainConfig):
    """Initialise a model with the toggles of ``config`` applied (and EKT import if on)."""
    mc = replace(model_config, enable_ikt=config.ikt, enable_mlcg=config.mlcg)
    model = init_model(mc, seed=config.seed)
    report = None
    if config.ekt:
        if not config.ekt_archive:
            raise ConfigError("EKT enabled but no weight archive given")
        report = import_ekt(model, WeightArchive.load(config.ekt_archive))
    return model, report


def train(
    model: MCGKTModel,
    dataset: Sequence,
    config: TrainConfig,
    *,
    state: Optional[AdamState] = None,
    history: Optional[list] = None,
    checkpoint_dir=None,
    stop_at: Optional[int] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run Adam on MSE(model(rainy patch), clean patch).

    ``state``/``history`` continue a previous run; ``stop_at`` ends early at a
    global step (used to produce mid-run checkpoints).
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    state = state or AdamState()
    history = list(history or [])
    total = config.total_steps(len(dataset))
    end = total if stop_at is None else min(stop_at, total)
    params = model.parameters()
    ckpts = []
    for step in range(state.t, end):
        rainy, clean = batch_for_step(dataset, config, step)
        out = model(T.Tensor(rainy.astype(model.dtype)))
        loss = T.mse_loss(out, T.Tensor(clean.astype(model.dtype)))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(
                f"non-finite loss {value} at step {step}; output range "
                f"[{np.nanmin(out.data):.3g}, {np.nanmax(out.data):.3g}]")
        T.backward(loss)
        adam_step(params, state, config.learning_rate)
        history.append(value)
        if on_step:
            on_step(step, value)
        if checkpoint_dir is not None and config.checkpoint_interval and state.t % config.checkpoint_interval == 0:
            ckpts.append(save_checkpoint(Path(checkpoint_dir) / f"ckpt_{state.t:06d}.mcgw",
                                         model, state, history, config))
    return TrainResult(model, history, state, ckpts)


def save_checkpoint(path, model: MCGKTModel, state: AdamState, history: list, config: TrainConfig) -> Path:
    arch = model_to_archive(model, {
        "train": config.to_dict(),
        "adam": {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "history": [float(h) for h in history],
    })
    for name in state.m:
        arch[f"adam.m.{name}"] = state.m[name]
        arch[f"adam.v.{name}"] = state.v[name]
    return arch.save(path)


def load_checkpoint(path) -> tuple:
    """``(model, AdamState, history, TrainConfig)`` from a checkpoint archive."""
    arch = WeightArchive.load(path)
    model = model_from_archive(arch)
    meta = arch.header.get("adam", {})
    state = AdamState(beta1=meta.get("beta1", 0.9), beta2=meta.get("beta2", 0.999),
                      eps=meta.get("eps", 1e-8), t=int(meta.get("t", 0)))
    for name in model.parameters():
        if f"adam.m.{name}" in arch:
            state.m[name] = arch[f"adam.m.{name}"].astype(model.dtype)
            state.v[name] = arch[f"adam.v.{name}"].astype(model.dtype)
    config = TrainConfig(**arch.header["train"]) if "train" in arch.header else None
    return model, state, list(arch.header.get("history", [])), config


def resume(path, dataset: Sequence, config: Optional[TrainConfig] = None, **kw) -> TrainResult:
    model, state, history, saved = load_checkpoint(path)
    return train(model, dataset, config or saved, state=state, history=history, **kw)


def history_csv(history: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, v in enumerate(history, 1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


# ---------------------------------------------------------------- ablation

ALL_COMBOS = tuple(itertools.product((False, True), repeat=3))   # (ikt, ekt, mlcg)


@dataclass
class AblationRow:
    ikt: Optional[bool]
    ekt: Optional[bool]
    mlcg: Optional[bool]
    psnr: float = math.nan
    ssim: float = math.nan
    status: str = "ok"
    seconds: float = 0.0

    @property
    def label(self) -> str:
        if self.ikt is None:
            return "rainy-input"
        on = [n for n, f in (("IKT", self.ikt), ("EKT", self.ekt), ("MLCG", self.mlcg)) if f]
        return "+".join(on) or "baseline"


def _flag(v):
    return "" if v is None else int(v)


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setup", "ikt", "ekt", "mlcg", "psnr_db", "ssim", "status"])
    for r in rows:
        w.writerow([r.label, _flag(r.ikt), _flag(r.ekt), _flag(r.mlcg),
                    f"{r.psnr:.4f}", f"{r.ssim:.4f}", r.status])
    return buf.getvalue()


def evaluate_model(model: MCGKTModel, eval_set: Sequence) -> tuple:
    rainy = np.stack([_pair_of(p).rainy for p in eval_set])
    derained = model.derain(rainy)
    names = [p[0] if isinstance(p, tuple) else str(i) for i, p in enumerate(eval_set)]
    report = evaluate_pairs((n, d, _pair_of(p).clean) for n, d, p in zip(names, derained, eval_set))
    return report.mean_psnr, report.mean_ssim


def run_ablation(
    train_set: Sequence,
    eval_set: Sequence,
    model_config: ModelConfig,
    config: TrainConfig,
    combos: Sequence = ALL_COMBOS,
    ekt_archive: Optional[str] = None,
) -> list:
    """Train every (ikt, ekt, mlcg) combination under identical seeds and budget.

    The first row scores the rainy inputs themselves. A failing member run is
    recorded with ``status="failed: ..."`` and the harness moves on.
    """
    train_names = {p[0] for p in train_set if isinstance(p, tuple)}
    eval_names = {p[0] for p in eval_set if isinstance(p, tuple)}
    if train_names & eval_names:
        raise ConfigError(f"evaluation split overlaps training split: {sorted(train_names & eval_names)[:5]}")
    if not eval_set:
        raise ConfigError("evaluation split is empty")
    combos = list(dict.fromkeys(tuple(bool(x) for x in c) for c in combos))
    base = AblationRow(None, None, None)
    base.psnr = float(np.mean([psnr(_pair_of(p).rainy, _pair_of(p).clean) for p in eval_set]))
    base.ssim = float(np.mean([ssim(_pair_of(p).rainy, _pair_of(p).clean) for p in eval_set]))
    rows = [base]
    for ikt, ekt, mlcg in combos:
        row = AblationRow(ikt, ekt, mlcg)
        t0 = time.perf_counter()
        try:
            cfg = replace(config, ikt=ikt, ekt=ekt, mlcg=mlcg,
                          ekt_archive=ekt_archive if ekt else None, checkpoint_interval=0)
            model, _ = build_model(model_config, cfg)
            train(model, train_set, cfg)
            row.psnr, row.ssim = evaluate_model(model, eval_set)
        except (MCGKTError, ArithmeticError, ValueError, OSError) as exc:
            row.status = f"failed: {exc}"
            log.warning("ablation run %s failed: %s", row.label, exc)
        row.seconds = time.perf_counter() - t0
        rows.append(row)
    return rows
