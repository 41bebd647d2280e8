"""Block skipping with precomputed residual features.

The first ``n`` and last ``m`` blocks are removed from fine-tuning. For every
training substep a frozen-model pass stores

    front = f_n - f_0        back = f_L - f_{L-m}

and training replays them additively around the resident blocks:
``f'_n = f'_0 + front`` and ``f'_L = f'_{L-m} + back``.

Cache file (little-endian)::

    "DBSK" | u16 version | 32-byte key | u16 n | u16 m | u16 L | u32 count
    count x ( u32 iteration | u8 substep | u32 sample | u32 t | u64 seed
              | u16 x | u16 y | u16 p | TSR1 front | TSR1 back )

The 32-byte key is a SHA-256 over the model config, base weights, dataset,
patch schedule and seed; it is what ties a cache to one training run.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
import math
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tsr
from .autodiff import Tensor
from .data import Dataset
from .lora import has_adapters
from .model import BlockLoader, ToyDiT
from .patches import PatchPlannerConfig
from .runio import atomic_write_bytes
from .schedule import Step, StepInputs, build_inputs, iter_schedule

MAGIC = b"DBSK"
VERSION = 1
HEADER = struct.Struct("<4sH32sHHHI")
ENTRY_META = struct.Struct("<IBIIQHHH")


class CacheMismatch(RuntimeError):
    """Cache and trainer disagree; training must not proceed."""


@dataclass(frozen=True)
class SkipPlan:
    n: int
    m: int
    L: int

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ValueError("n and m must be non-negative")
        if self.n + self.m >= self.L:
            raise ValueError(f"n + m = {self.n + self.m} must be < L = {self.L}")

    @property
    def k(self) -> int:
        return self.n + self.m

    @property
    def resident(self) -> range:
        return range(self.n, self.L - self.m)

    @property
    def skipped(self) -> list[int]:
        return list(range(self.n)) + list(range(self.L - self.m, self.L))


def compute_k(ratio: float, L: int) -> int:
    """Number of skipped blocks: ratio * L rounded half up."""
    r = Fraction(str(ratio))
    if not 0 < r < 1:
        raise ValueError(f"skip ratio must be in (0, 1), got {ratio}")
    k = math.floor(r * L + Fraction(1, 2))
    if k >= L:
        raise ValueError(f"skip ratio {ratio} leaves no resident block (k={k}, L={L})")
    return k


def cache_key(model_cfg: dict, base_digest: str, dataset_digest: str,
              patch_cfg: PatchPlannerConfig, seed: int, accumulation: int,
              timestep_dist: str) -> bytes:
    """32-byte fingerprint of everything that determines a cache's contents."""
    payload = {"model": model_cfg, "base": base_digest, "dataset": dataset_digest,
               "patch": patch_cfg.to_dict(), "seed": seed, "accumulation": accumulation,
               "timestep_dist": timestep_dist}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()


def dataset_digest(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for img, prompt in zip(dataset.images, dataset.prompts):
        h.update(tsr.encode(img))
        h.update(np.asarray(prompt, dtype="<i8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# entries and cache file


@dataclass
class ResidualEntry:
    iteration: int
    substep: int
    sample_id: int
    t: int
    seed: int
    x: int
    y: int
    p: int
    front: np.ndarray
    back: np.ndarray

    META_FIELDS = ("iteration", "substep", "sample_id", "t", "seed", "x", "y", "p")

    @classmethod
    def for_step(cls, step: Step, front: np.ndarray, back: np.ndarray) -> "ResidualEntry":
        pl = step.plan
        return cls(step.iteration, step.substep, step.sample_id, step.t, step.seed,
                   pl.x, pl.y, pl.size, front, back)

    def meta(self) -> tuple:
        return tuple(getattr(self, f) for f in self.META_FIELDS)

    def check(self, step: Step) -> None:
        pl = step.plan
        expected = (step.iteration, step.substep, step.sample_id, step.t, step.seed,
                    pl.x, pl.y, pl.size)
        for name, got, want in zip(self.META_FIELDS, self.meta(), expected):
            if got != want:
                raise CacheMismatch(f"cache entry {name}={got} but trainer expects {want} "
                                    f"(iteration {step.iteration}, substep {step.substep})")

    def encode(self) -> bytes:
        return ENTRY_META.pack(*self.meta()) + tsr.encode(self.front) + tsr.encode(self.back)


@dataclass
class ResidualCache:
    key: bytes
    plan: SkipPlan
    entries: list[ResidualEntry] = field(default_factory=list)
    version: int = VERSION

    def header_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.key, self.plan.n, self.plan.m,
                           self.plan.L, len(self.entries))

    def to_bytes(self) -> bytes:
        return self.header_bytes() + b"".join(e.encode() for e in self.entries)

    def write(self, path: str | Path) -> None:
        atomic_write_bytes(Path(path), self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ResidualCache":
        if len(buf) < HEADER.size:
            raise CacheMismatch("cache file truncated")
        magic, version, key, n, m, L, count = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise CacheMismatch("not a DBSK cache file")
        if version != VERSION:
            raise CacheMismatch(f"unsupported cache version {version}")
        try:
            plan = SkipPlan(n, m, L)
        except ValueError as e:
            raise CacheMismatch(f"invalid skip plan in header: {e}") from None
        cache = cls(key, plan, [], version)
        pos = HEADER.size
        for _ in range(count):
            if len(buf) < pos + ENTRY_META.size:
                raise CacheMismatch("cache file truncated")
            meta = ENTRY_META.unpack_from(buf, pos)
            pos += ENTRY_META.size
            try:
                front, pos = tsr.decode(buf, pos)
                back, pos = tsr.decode(buf, pos)
            except tsr.FormatError as e:
                raise CacheMismatch(f"corrupt residual in entry {len(cache.entries)}: {e}") from None
            cache.entries.append(ResidualEntry(*meta, front, back))
        if pos != len(buf):
            raise CacheMismatch(f"{len(buf) - pos} trailing bytes after the last entry")
        return cache

    @classmethod
    def read(cls, path: str | Path) -> "ResidualCache":
        return cls.from_bytes(Path(path).read_bytes())

    def residual_shapes(self, n_tokens: int, hidden: int) -> tuple[tuple, tuple]:
        front = (n_tokens, hidden) if self.plan.n else (0,)
        back = (n_tokens, hidden) if self.plan.m else (0,)
        return front, back

    def predicted_size(self, n_tokens: int, hidden: int) -> int:
        front, back = self.residual_shapes(n_tokens, hidden)
        per_entry = ENTRY_META.size + tsr.encoded_size(front) + tsr.encoded_size(back)
        return HEADER.size + len(self.entries) * per_entry

    def validate(self, key: bytes, plan: SkipPlan, iterations: int, accumulation: int,
                 n_tokens: int, hidden: int) -> None:
        if self.key != key:
            raise CacheMismatch("cache key differs from the training configuration "
                                "(model, base weights, dataset, patch schedule or seed changed)")
        if self.plan != plan:
            raise CacheMismatch(f"cache skip plan {self.plan} != training plan {plan}")
        if len(self.entries) != iterations * accumulation:
            raise CacheMismatch(f"cache has {len(self.entries)} entries, training needs "
                                f"{iterations} x {accumulation}")
        front, back = self.residual_shapes(n_tokens, hidden)
        for e in self.entries:
            if e.front.shape != front or e.back.shape != back:
                raise CacheMismatch(f"residual shapes {e.front.shape}/{e.back.shape} "
                                    f"do not match expected {front}/{back}")


# ---------------------------------------------------------------------------
# precompute


def _residuals(feats: dict[int, np.ndarray], plan: SkipPlan) -> tuple[np.ndarray, np.ndarray]:
    empty = np.zeros((0,), dtype=np.float32)
    front = (feats[plan.n] - feats[0])[0] if plan.n else empty
    back = (feats[plan.L] - feats[plan.L - plan.m])[0] if plan.m else empty
    return front.astype(np.float32), back.astype(np.float32)


def _needed(plan: SkipPlan) -> tuple[set[int], int]:
    """Feature indices to keep and how deep the pass must go."""
    if plan.k == 0:
        return set(), 0
    keep = {0, plan.n} if plan.n else set()
    if plan.m:
        keep |= {plan.L - plan.m, plan.L}
    return keep, max(keep)


def residual_entry(model: ToyDiT, step: Step, inputs: StepInputs, plan: SkipPlan) -> ResidualEntry:
    keep, depth = _needed(plan)
    feats = {}
    if depth:
        x = model.embed(inputs.x_t, inputs.text_ids, inputs.t)
        feats[0] = x.data
        for i in range(depth):
            x = model.run_blocks(x, i, i + 1)
            if i + 1 in keep:
                feats[i + 1] = x.data
    return ResidualEntry.for_step(step, *_residuals(feats, plan))


def _precompute_chunk(model, dataset, patch_cfg, plan, steps):
    return [residual_entry(model, s, build_inputs(s, dataset, patch_cfg, model.cfg), plan)
            for s in steps]


def default_workers() -> int:
    env = os.environ.get("DITBS_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def precompute(model: ToyDiT, dataset: Dataset, patch_cfg: PatchPlannerConfig, plan: SkipPlan,
               iterations: int, accumulation: int, seed: int, key: bytes,
               timestep_dist: str = "uniform", workers: int | None = None) -> ResidualCache:
    """Monolithic precompute over the frozen base model.

    Work is split into contiguous iteration ranges when ``workers > 1``; the
    merged cache is identical to a serial run.
    """
    if has_adapters(model):
        raise ValueError("precompute runs on the frozen base model, without adapters")
    if not len(dataset):
        raise ValueError("dataset is empty")
    if plan.L != model.cfg.depth:
        raise ValueError(f"skip plan L={plan.L} but model has {model.cfg.depth} blocks")
    steps = list(iter_schedule(seed, iterations, accumulation, dataset.sizes(), patch_cfg,
                               timestep_dist))
    workers = min(workers or default_workers(), max(len(steps), 1))
    if workers <= 1:
        entries = _precompute_chunk(model, dataset, patch_cfg, plan, steps)
    else:
        bounds = np.linspace(0, len(steps), workers + 1).astype(int)
        chunks = [steps[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            parts = pool.map(_precompute_chunk, [model] * workers, [dataset] * workers,
                             [patch_cfg] * workers, [plan] * workers, chunks)
            entries = [e for part in parts for e in part]
    return ResidualCache(key, plan, entries)


def staged_precompute(loader: BlockLoader, dataset: Dataset, patch_cfg: PatchPlannerConfig,
                      plan: SkipPlan, iterations: int, accumulation: int, seed: int, key: bytes,
                      window: int = 1, timestep_dist: str = "uniform") -> ResidualCache:
    """Precompute holding at most ``window`` blocks in memory at a time.

    Features for every entry advance one window of blocks at a time; blocks
    are loaded from the checkpoint on demand and released afterwards.
    ``loader.peak`` reports the most blocks that were ever resident.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not len(dataset):
        raise ValueError("dataset is empty")
    model = loader.stem_model()
    steps = list(iter_schedule(seed, iterations, accumulation, dataset.sizes(), patch_cfg,
                               timestep_dist))
    keep, depth = _needed(plan)
    states: list[Tensor | None] = []
    feats: list[dict[int, np.ndarray]] = []
    for s in steps:
        f = {}
        x = None
        if depth:
            inp = build_inputs(s, dataset, patch_cfg, model.cfg)
            x = model.embed(inp.x_t, inp.text_ids, inp.t)
            f[0] = x.data
        states.append(x)
        feats.append(f)
    for start in range(0, depth, window):
        stop = min(start + window, depth)
        for i in range(start, stop):
            loader.load(model, i)
        for j in range(len(states)):
            x = states[j]
            for i in range(start, stop):
                x = model.run_blocks(x, i, i + 1)
                if i + 1 in keep:
                    feats[j][i + 1] = x.data
            states[j] = x
        for i in range(start, stop):
            loader.release(model, i)
    entries = [ResidualEntry.for_step(s, *_residuals(f, plan)) for s, f in zip(steps, feats)]
    return ResidualCache(key, plan, entries)


# ---------------------------------------------------------------------------
# training-time forward


def skipped_forward(model: ToyDiT, inputs: StepInputs, plan: SkipPlan,
                    entry: ResidualEntry | None = None, step: Step | None = None,
                    residual: bool = True) -> Tensor:
    """Velocity prediction with skipped blocks replaced by stored residuals.

    With ``residual=False`` the skipped runs are dropped outright
    (``f'_n = f'_0``, ``f'_L = f'_{L-m}``), which is the naive baseline.
    """
    cfg = model.cfg
    if plan.L != cfg.depth:
        raise CacheMismatch(f"skip plan L={plan.L} but model has {cfg.depth} blocks")
    if residual and plan.k:
        if entry is None:
            raise CacheMismatch("residual replay needs a cache entry")
        if step is not None:
            entry.check(step)
        n_tokens = inputs.x_t.shape[1] + cfg.n_text
        for name, arr, active in (("front", entry.front, plan.n), ("back", entry.back, plan.m)):
            want = (n_tokens, cfg.hidden) if active else (0,)
            if arr.shape != want:
                raise CacheMismatch(f"{name} residual has shape {arr.shape}, expected {want}")
    x = model.embed(inputs.x_t, inputs.text_ids, inputs.t)
    if residual and plan.n:
        x = ad.add(x, Tensor(entry.front[None]))
    x = model.run_blocks(x, plan.n, plan.L - plan.m)
    if residual and plan.m:
        x = ad.add(x, Tensor(entry.back[None]))
    return model.project(x)
