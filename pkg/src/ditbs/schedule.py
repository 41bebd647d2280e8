"""Counter-based derivation of every per-substep random choice.

Precompute and training must see the same sample, timestep, noise and crop
for each (iteration, substep). Both derive them from
``SeedSequence([master_seed, iteration, substep])`` so neither stage needs
shared state or has to consume a stream in order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .data import Dataset
from .model import DiTConfig, patchify
from .patches import PatchPlan, PatchPlannerConfig, plan_patch, replay

TIMESTEP_DISTS = ("uniform", "logit_normal")


@dataclass(frozen=True)
class Step:
    iteration: int
    substep: int
    sample_id: int
    t: int
    seed: int
    plan: PatchPlan


def sample_timestep(rng: np.random.Generator, max_t: int, dist: str) -> int:
    if dist == "uniform":
        return int(rng.integers(0, max_t + 1))
    if dist == "logit_normal":
        tau = 1.0 / (1.0 + np.exp(-rng.standard_normal()))
        return int(np.rint(tau * max_t))
    raise ValueError(f"unknown timestep distribution {dist!r}")


def schedule_step(master_seed: int, iteration: int, substep: int,
                  sizes: list[tuple[int, int]], patch_cfg: PatchPlannerConfig,
                  timestep_dist: str = "uniform") -> Step:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, iteration, substep]))
    sample_id = int(rng.integers(len(sizes)))
    t = sample_timestep(rng, patch_cfg.max_t, timestep_dist)
    seed = int(rng.integers(0, 2**63 - 1))
    plan = plan_patch(patch_cfg, sizes[sample_id], t, seed, iteration, sample_id)
    return Step(iteration, substep, sample_id, t, seed, plan)


def iter_schedule(master_seed: int, iterations: int, accumulation: int,
                  sizes: list[tuple[int, int]], patch_cfg: PatchPlannerConfig,
                  timestep_dist: str = "uniform", start: int = 0) -> Iterator[Step]:
    for it in range(start, iterations):
        for sub in range(accumulation):
            yield schedule_step(master_seed, it, sub, sizes, patch_cfg, timestep_dist)


@dataclass
class StepInputs:
    x_t: np.ndarray        # (1, N_img, token_dim) noisy tokens fed to the model
    z0: np.ndarray         # clean tokens
    noise: np.ndarray
    text_ids: np.ndarray   # (1, n_text)
    t: int

    @property
    def target(self) -> np.ndarray:
        return self.noise - self.z0


def noise_for(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng([seed, 0]).standard_normal(shape, dtype=np.float32)


def interpolate(z0: np.ndarray, noise: np.ndarray, t: float, max_t: int) -> np.ndarray:
    """Point on the straight path: t=0 is data, t=T is pure noise."""
    tau = np.float32(t / max_t)
    return (1 - tau) * z0 + tau * noise


def build_inputs(step: Step, dataset: Dataset, patch_cfg: PatchPlannerConfig,
                 model_cfg: DiTConfig) -> StepInputs:
    img = replay(patch_cfg, step.plan, dataset.images[step.sample_id], step.sample_id)
    z0 = patchify(img, model_cfg.patch)[None].astype(np.float32)
    noise = patchify(noise_for(step.seed, img.shape), model_cfg.patch)[None]
    x_t = interpolate(z0, noise, step.t, model_cfg.max_t)
    ids = np.asarray(dataset.prompts[step.sample_id], dtype=np.int64)[None]
    return StepInputs(x_t, z0, noise, ids, step.t)
