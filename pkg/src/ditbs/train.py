"""Flow-matching fine-tuning, AdamW, Euler sampling and base pretraining.

Conventions: ``z_t = (1 - t/T) z0 + (t/T) eps`` and the model regresses the
constant velocity ``u = eps - z0``. Sampling integrates from pure noise at
t = T down to t = 0.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, random_scene, to_float
from .lora import inject
from .model import DiTConfig, MaskSpec, ToyDiT, patchify, unpatchify
from .patches import PatchPlannerConfig, crop_resize, plan_patch
from .runio import atomic_write_text
from .schedule import TIMESTEP_DISTS, build_inputs, noise_for, sample_timestep, schedule_step
from .skip import CacheMismatch, ResidualCache, SkipPlan, compute_k, skipped_forward

MODES = ("plain", "residual", "naive")


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 500
    accumulation: int = 4
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    skip_ratio: float | None = None
    skip_n: int | None = None
    skip_m: int | None = None
    schedule: str = "low_to_high"
    timestep_dist: str = "uniform"
    s_max: int = 64
    patch_multiple: int = 4
    lora_rank: int = 8
    lora_alpha: float = 8.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.iterations < 0 or self.accumulation < 1:
            raise ValueError("iterations must be >= 0 and accumulation >= 1")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if (self.skip_n is None) != (self.skip_m is None):
            raise ValueError("give both skip_n and skip_m, or neither")
        if self.timestep_dist not in TIMESTEP_DISTS:
            raise ValueError(f"unknown timestep distribution {self.timestep_dist!r}")

    def patch_config(self, model_cfg: DiTConfig) -> PatchPlannerConfig:
        return PatchPlannerConfig(model_cfg.img_size, self.s_max, model_cfg.max_t,
                                  self.patch_multiple, self.schedule)

    def skip_k(self, depth: int) -> int:
        if self.skip_n is not None:
            return self.skip_n + self.skip_m
        return compute_k(self.skip_ratio, depth) if self.skip_ratio else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunMetrics:
    records: list[tuple[int, int, float, float]] = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def iteration_losses(self) -> np.ndarray:
        """Mean loss of each iteration (over its accumulation substeps)."""
        if not self.records:
            return np.zeros(0)
        its = np.array([r[0] for r in self.records])
        losses = np.array([r[2] for r in self.records])
        uniq = np.unique(its)
        return np.array([losses[its == i].mean() for i in uniq])

    def final_mean(self, n: int = 50) -> float:
        return float(self.iteration_losses()[-n:].mean())

    def first_mean(self, n: int = 50) -> float:
        return float(self.iteration_losses()[:n].mean())

    def to_csv(self) -> str:
        lines = ["iteration,substep,loss,lr"]
        lines += [f"{i},{s},{loss!r},{lr!r}" for i, s, loss, lr in self.records]
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_csv())


def read_metrics(path: str | Path) -> RunMetrics:
    """Parse a metrics CSV; malformed rows raise with their line number."""
    out = RunMetrics()
    with open(path, newline="") as f:
        rows = csv.reader(f)
        header = next(rows, None)
        if header != ["iteration", "substep", "loss", "lr"]:
            raise ValueError(f"{path}:1: expected header iteration,substep,loss,lr")
        for lineno, row in enumerate(rows, start=2):
            try:
                i, s, loss, lr = row
                out.records.append((int(i), int(s), float(loss), float(lr)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed metrics row {row!r}") from None
    return out


# ---------------------------------------------------------------------------
# loss and optimizer


def fm_loss(v: Tensor, z0, noise) -> Tensor:
    """Mean squared error between predicted velocity and ``noise - z0``."""
    z0, noise = np.asarray(z0), np.asarray(noise)
    if z0.shape != noise.shape:
        raise ad.ShapeError("fm_loss", z0.shape, noise.shape)
    return ad.mse(v, Tensor((noise - z0).astype(v.data.dtype)))


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.sum(~np.isfinite(p.grad)))
                raise NumericError(f"non-finite gradient in {name} ({bad} entries) at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data *= p.data.dtype.type(1 - self.lr * self.wd)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        ad.zero_grads(p for _, p in self.params)


# ---------------------------------------------------------------------------
# training


def resolve_plan(cfg: TrainConfig, depth: int, table=None) -> SkipPlan:
    """Explicit (n, m) wins; otherwise k from the ratio, placed by the table."""
    if cfg.skip_n is not None:
        return SkipPlan(cfg.skip_n, cfg.skip_m, depth)
    k = cfg.skip_k(depth)
    if k == 0:
        return SkipPlan(0, 0, depth)
    if table is not None:
        from .blockselect import select_skip_indices

        return SkipPlan(*select_skip_indices(table, k), depth)
    n = k // 2
    return SkipPlan(n, k - n, depth)


def train(model: ToyDiT, dataset: Dataset, cfg: TrainConfig, mode: str = "residual",
          plan: SkipPlan | None = None, cache: ResidualCache | None = None,
          cache_key: bytes | None = None, log=None) -> RunMetrics:
    """Fine-tune LoRA adapters; the model is modified in place.

    ``plain`` trains adapters on every block with the full forward.
    ``residual`` replays cached residuals around the resident blocks.
    ``naive`` drops the skipped blocks without any replacement.
    """
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}; expected one of {MODES}")
    mcfg = model.cfg
    patch_cfg = cfg.patch_config(mcfg)
    plan = plan or SkipPlan(0, 0, mcfg.depth)
    if mode == "plain" and plan.k:
        raise ValueError("plain mode does not skip blocks")
    if mode == "residual":
        if cache is None:
            raise CacheMismatch("residual training needs a precomputed cache")
        if cache_key is None:
            raise CacheMismatch("residual training needs the expected cache key")
        cache.validate(cache_key, plan, cfg.iterations, cfg.accumulation,
                       mcfg.n_tokens(), mcfg.hidden)
    model.drop_blocks(plan.skipped)
    inject(model, plan.resident, cfg.lora_rank, cfg.lora_alpha, cfg.seed)
    params = model.trainable_parameters()
    opt = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    sizes = dataset.sizes()
    metrics = RunMetrics()
    t0 = time.perf_counter()
    idx = 0
    for it in range(cfg.iterations):
        opt.zero_grad()
        for sub in range(cfg.accumulation):
            step = schedule_step(cfg.seed, it, sub, sizes, patch_cfg, cfg.timestep_dist)
            inputs = build_inputs(step, dataset, patch_cfg, mcfg)
            with ad.Tape() as tape:
                if mode == "plain":
                    v, _ = model.forward(inputs.x_t, inputs.text_ids, inputs.t)
                elif mode == "residual":
                    v = skipped_forward(model, inputs, plan, cache.entries[idx], step)
                else:
                    v = skipped_forward(model, inputs, plan, residual=False)
                loss = fm_loss(v, inputs.z0, inputs.noise)
                scaled = ad.scale(loss, 1.0 / cfg.accumulation)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at iteration {it}, substep {sub}")
            ad.backward(tape, scaled)
            metrics.records.append((it, sub, value, cfg.lr))
            idx += 1
        opt.step()
        if log and (it + 1) % max(1, cfg.iterations // 10) == 0:
            log(f"iteration {it + 1}/{cfg.iterations} loss {metrics.iteration_losses()[-1]:.4f}")
    metrics.stage_seconds["train"] = time.perf_counter() - t0
    return metrics


# ---------------------------------------------------------------------------
# sampling


def generate(model: ToyDiT, prompt, steps: int = 8, seed: int = 0, size: int | None = None,
             mask: MaskSpec | None = None) -> np.ndarray:
    """Euler integration from noise at t=T to t=0; returns a (C, H, W) image."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = model.cfg
    size = cfg.img_size if size is None else size
    ids = np.asarray(prompt, dtype=np.int64).reshape(1, -1)
    noise = np.random.default_rng([seed, 2]).standard_normal(
        (cfg.channels, size, size), dtype=np.float32)
    z = patchify(noise, cfg.patch)[None]
    dt = np.float32(1.0 / steps)
    for i in range(steps):
        t = cfg.max_t * (1 - i / steps)
        v, _ = model.forward(z, ids, t, mask)
        z = z - dt * v.data
    return unpatchify(z[0], cfg.patch, cfg.channels, size)


# ---------------------------------------------------------------------------
# base model


def pretrain_base(cfg: DiTConfig, steps: int = 300, batch: int = 16, lr: float = 2e-3,
                  seed: int = 0, scene_size: int = 64, log=None) -> tuple[ToyDiT, list[float]]:
    """Full-parameter flow-matching pretraining on random procedural scenes.

    Scenes are cropped with the same timestep-aware patch sampling used in
    fine-tuning, so the base model has seen every crop scale.
    """
    model = ToyDiT(cfg, seed)
    model.set_trainable(True)
    params = model.trainable_parameters()
    opt = AdamW(params, lr, weight_decay=0.0)
    patch_cfg = PatchPlannerConfig(cfg.img_size, scene_size, cfg.max_t,
                                   math.gcd(cfg.img_size, scene_size, 4))
    losses = []
    for step in range(steps):
        xs, noises, ids, ts = [], [], [], []
        for b in range(batch):
            rng = np.random.default_rng([seed, 3, step, b])
            img, prompt = random_scene(rng, scene_size)
            t = sample_timestep(rng, cfg.max_t, "uniform")
            pseed = int(rng.integers(0, 2**63 - 1))
            plan = plan_patch(patch_cfg, (scene_size, scene_size), t, pseed, step, b)
            crop = crop_resize(to_float(img), plan, cfg.img_size)
            xs.append(patchify(crop, cfg.patch))
            noises.append(patchify(noise_for(pseed, crop.shape), cfg.patch))
            ids.append(prompt)
            ts.append(t)
        z0, eps = np.stack(xs).astype(np.float32), np.stack(noises)
        tau = (np.asarray(ts, dtype=np.float32) / cfg.max_t)[:, None, None]
        x_t = (1 - tau) * z0 + tau * eps
        # lr warms up over the first tenth, then cosine-decays to zero
        warm = max(1, steps // 10)
        opt.lr = lr * min(1.0, (step + 1) / warm) * 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.zero_grad()
        with ad.Tape() as tape:
            v, _ = model.forward(x_t, np.asarray(ids), np.asarray(ts))
            loss = fm_loss(v, z0, eps)
        ad.backward(tape, loss)
        if not math.isfinite(float(loss.data)):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        opt.step()
        losses.append(float(loss.data))
        if log and (step + 1) % max(1, steps // 10) == 0:
            log(f"pretrain step {step + 1}/{steps} loss {np.mean(losses[-10:]):.4f}")
    model.set_trainable(False)
    return model, losses


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = ("skip_no_residual", "skip_first_only", "skip_last_only", "selected")


def run_cache_key(model: ToyDiT, dataset: Dataset, cfg: TrainConfig) -> bytes:
    from .skip import cache_key, dataset_digest

    if model.digest is None:
        raise ValueError("model has no weights digest; load it from a checkpoint")
    return cache_key(model.cfg.to_dict(), model.digest, dataset_digest(dataset),
                     cfg.patch_config(model.cfg), cfg.seed, cfg.accumulation, cfg.timestep_dist)


def ablation_modes(mode: str, base_path: str | Path, dataset: Dataset, cfg: TrainConfig,
                   table=None, log=None) -> tuple[RunMetrics, SkipPlan]:
    """One ablation run from a base checkpoint; returns metrics and the plan used.

    ``selected`` and ``skip_no_residual`` share the plan resolved from the
    config (and distance table); the other two put the whole budget on one
    side.
    """
    from .model import load_checkpoint
    from .skip import precompute

    if mode not in ABLATIONS:
        raise ValueError(f"unknown ablation {mode!r}; expected one of {ABLATIONS}")
    model = load_checkpoint(base_path)
    depth = model.cfg.depth
    k = cfg.skip_k(depth)
    if mode == "skip_first_only":
        plan = SkipPlan(k, 0, depth)
    elif mode == "skip_last_only":
        plan = SkipPlan(0, k, depth)
    else:
        plan = resolve_plan(cfg, depth, table)
    if mode == "skip_no_residual":
        return train(model, dataset, cfg, "naive", plan, log=log), plan
    key = run_cache_key(model, dataset, cfg)
    t0 = time.perf_counter()
    cache = precompute(model, dataset, cfg.patch_config(model.cfg), plan, cfg.iterations,
                       cfg.accumulation, cfg.seed, key, cfg.timestep_dist, workers=1)
    pre = time.perf_counter() - t0
    metrics = train(model, dataset, cfg, "residual", plan, cache, key, log=log)
    metrics.stage_seconds["precompute"] = pre
    return metrics, plan
