"""Run directory layout, run configuration and the pipeline stages.

Layout of a run directory::

    config.json          every configuration field (written by make-dataset)
    dataset/             PPM images + manifest.json
    base/                pretrained base checkpoint
    selection/           distances.csv, selection.json
    cache.dbsk           precomputed residuals
    adapters/            LoRA checkpoint
    metrics.csv          per-substep training loss
    samples/             generated images
    plots/*.svg
    report.md
    .stamps/<stage>.json input fingerprints for no-op reruns

Every stage records a fingerprint of its configuration and input files.
Rerunning a stage whose fingerprint is unchanged does nothing unless
``force`` is set.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blockselect, data, plots, skip
from .lora import load_adapters, save_adapters
from .model import DiTConfig, BlockLoader, load_checkpoint, save_checkpoint
from .runio import atomic_write_text, canonical_json, sha256_hex, write_json
from .schedule import build_inputs, iter_schedule
from .train import (ABLATIONS, TrainConfig, ablation_modes, fm_loss, generate, pretrain_base,
                    read_metrics, resolve_plan, run_cache_key, train)

log = logging.getLogger("ditbs")


class MissingStage(RuntimeError):
    """An upstream stage has not produced its output yet."""


@dataclass
class BaseConfig:
    steps: int = 600
    batch: int = 16
    lr: float = 2e-3


@dataclass
class DataConfig:
    n: int = 8
    size: int = 64


@dataclass
class SelectConfig:
    steps: int = 8
    size: int = 32
    embedder: str = "random"        # "random" or a path to external vectors (JSON)
    checkpoints: list = field(default_factory=list)   # empty: the run's base model


@dataclass
class PrecomputeConfig:
    staged: bool = False
    window: int = 1


@dataclass
class RunConfig:
    model: DiTConfig = field(default_factory=DiTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    select: SelectConfig = field(default_factory=SelectConfig)
    precompute: PrecomputeConfig = field(default_factory=PrecomputeConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "base": asdict(self.base), "data": asdict(self.data),
                "select": asdict(self.select), "precompute": asdict(self.precompute)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "train", "base", "data", "select", "precompute"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config sections {sorted(extra)}")
        return cls(DiTConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {})),
                   BaseConfig(**d.get("base", {})), DataConfig(**d.get("data", {})),
                   SelectConfig(**d.get("select", {})), PrecomputeConfig(**d.get("precompute", {})))


class RunDirectory:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.config = self.root / "config.json"
        self.dataset = self.root / "dataset"
        self.manifest = self.dataset / "manifest.json"
        self.base = self.root / "base"
        self.selection = self.root / "selection"
        self.distances = self.selection / "distances.csv"
        self.selection_json = self.selection / "selection.json"
        self.cache = self.root / "cache.dbsk"
        self.plan = self.root / "plan.json"
        self.adapters = self.root / "adapters"
        self.metrics = self.root / "metrics.csv"
        self.samples = self.root / "samples"
        self.plots = self.root / "plots"
        self.report = self.root / "report.md"
        self.timings = self.root / "timings.json"
        self.stamps = self.root / ".stamps"

    def load_config(self) -> RunConfig:
        if not self.config.exists():
            raise MissingStage(f"{self.config} not found; run make-dataset first")
        return RunConfig.from_dict(json.loads(self.config.read_text()))

    def save_config(self, cfg: RunConfig) -> None:
        write_json(self.config, cfg.to_dict())

    def require(self, path: Path, stage: str) -> None:
        if not path.exists():
            raise MissingStage(f"{path} not found; run {stage} first")

    # -- stamps ------------------------------------------------------------

    def fingerprint(self, stage: str, conf: dict, inputs=(), extra=None) -> str:
        files = {}
        for p in inputs:
            p = Path(p)
            if p.is_dir():
                p = p / "manifest.json"
            files[str(p.relative_to(self.root))] = sha256_hex(p.read_bytes()) if p.exists() else None
        payload = {"stage": stage, "config": conf, "inputs": files, "extra": extra}
        return sha256_hex(canonical_json(payload).encode())

    def up_to_date(self, stage: str, fp: str, outputs) -> bool:
        stamp = self.stamps / f"{stage}.json"
        if not stamp.exists() or not all(Path(o).exists() for o in outputs):
            return False
        return json.loads(stamp.read_text()).get("fingerprint") == fp

    def mark(self, stage: str, fp: str) -> None:
        write_json(self.stamps / f"{stage}.json", {"fingerprint": fp})

    def record_time(self, stage: str, seconds: float) -> None:
        times = json.loads(self.timings.read_text()) if self.timings.exists() else {}
        times[stage] = round(seconds, 3)
        write_json(self.timings, times)


# config sections each stage depends on; anything else may change freely
STAGE_SECTIONS = {"make-dataset": ("model", "base", "data"), "select-blocks": ("model", "select"),
                  "precompute": ("model", "train"), "train": ("model", "train")}


def _stage(run: RunDirectory, name: str, cfg: RunConfig, inputs, outputs, force: bool, extra=None):
    """Fingerprint of a stage, or None when its outputs are already up to date."""
    full = cfg.to_dict()
    conf = {k: full[k] for k in STAGE_SECTIONS[name]}
    conf["seed"] = cfg.seed
    if name == "make-dataset":
        conf["s_max"] = cfg.train.s_max
    fp = run.fingerprint(name, conf, inputs, extra)
    if not force and run.up_to_date(name, fp, outputs):
        log.info("%s: up to date (use --force to rerun)", name)
        return None
    return fp


# ---------------------------------------------------------------------------
# stages


def make_dataset(run: RunDirectory, cfg: RunConfig, force: bool = False) -> bool:
    """Write the synthetic subject dataset and pretrain the base model."""
    run.save_config(cfg)
    fp = _stage(run, "make-dataset", cfg, (), (run.manifest, run.base), force)
    if fp is None:
        return False
    t0 = time.perf_counter()
    data.write_dataset(run.dataset, cfg.data.n, cfg.data.size, cfg.seed)
    model, _ = pretrain_base(cfg.model, cfg.base.steps, cfg.base.batch, cfg.base.lr, cfg.seed,
                             scene_size=cfg.train.s_max, log=log.info)
    save_checkpoint(model, run.base)
    run.record_time("make-dataset", time.perf_counter() - t0)
    run.mark("make-dataset", fp)
    return True


def load_run_dataset(run: RunDirectory, cfg: RunConfig) -> data.Dataset:
    run.require(run.manifest, "make-dataset")
    return data.load_dataset(run.manifest, cfg.train.s_max)


def _embedder(cfg: RunConfig):
    if cfg.select.embedder == "random":
        return blockselect.RandomConvEmbedder(cfg.seed)
    return blockselect.ExternalEmbedder(cfg.select.embedder)


def select_blocks(run: RunDirectory, cfg: RunConfig, force: bool = False) -> bool:
    ckpts = [Path(c) for c in cfg.select.checkpoints] or [run.base]
    for c in ckpts:
        if not (c / "manifest.json").exists():
            raise MissingStage(f"checkpoint {c} not found; run make-dataset first")
    ds = load_run_dataset(run, cfg)
    fp = _stage(run, "select-blocks", cfg, [run.manifest, *ckpts], (run.distances, run.selection_json), force)
    if fp is None:
        return False
    t0 = time.perf_counter()
    models = [load_checkpoint(c) for c in ckpts]
    prompt = ds.prompts[0]
    table = blockselect.build_distance_table(models, prompt, _embedder(cfg), cfg.select.steps,
                                             cfg.select.size, cfg.seed)
    table.write(run.distances)
    L = cfg.model.depth
    choices = {str(k): list(blockselect.select_skip_indices(table, k)) for k in range(2, L)}
    write_json(run.selection_json, {"N": table.N, "L": L, "prompt": prompt, "choices": choices})
    plots.write_svg(run.plots / "heatmap.svg", plots.heatmap_svg(table))
    run.record_time("select-blocks", time.perf_counter() - t0)
    run.mark("select-blocks", fp)
    return True


def _table(run: RunDirectory, cfg: RunConfig):
    if run.distances.exists():
        return blockselect.DistanceTable.read(run.distances)
    return None


def plan_for(run: RunDirectory, cfg: RunConfig) -> skip.SkipPlan:
    table = _table(run, cfg)
    k = cfg.train.skip_k(cfg.model.depth)
    if cfg.train.skip_n is None and k and (table is None or k < 2):
        log.warning("no distance table usable for k=%d; splitting the budget evenly", k)
        table = None
    return resolve_plan(cfg.train, cfg.model.depth, table)


def precompute_stage(run: RunDirectory, cfg: RunConfig, force: bool = False) -> bool:
    run.require(run.base, "make-dataset")
    ds = load_run_dataset(run, cfg)
    plan = plan_for(run, cfg)
    fp = _stage(run, "precompute", cfg, [run.manifest, run.base, run.distances], (run.cache,), force,
                extra=[plan.n, plan.m])
    if fp is None:
        return False
    t0 = time.perf_counter()
    tc = cfg.train
    patch_cfg = tc.patch_config(cfg.model)
    if cfg.precompute.staged:
        loader = BlockLoader(run.base)
        key = run_cache_key(loader.stem_model(), ds, tc)
        cache = skip.staged_precompute(loader, ds, patch_cfg, plan, tc.iterations, tc.accumulation,
                                       tc.seed, key, cfg.precompute.window, tc.timestep_dist)
        log.info("staged precompute: peak resident blocks %d", loader.peak)
    else:
        model = load_checkpoint(run.base)
        key = run_cache_key(model, ds, tc)
        cache = skip.precompute(model, ds, patch_cfg, plan, tc.iterations, tc.accumulation,
                                tc.seed, key, tc.timestep_dist)
    cache.write(run.cache)
    write_json(run.plan, {"n": plan.n, "m": plan.m, "L": plan.L})
    run.record_time("precompute", time.perf_counter() - t0)
    run.mark("precompute", fp)
    return True


def train_stage(run: RunDirectory, cfg: RunConfig, mode: str = "residual", force: bool = False) -> bool:
    run.require(run.base, "make-dataset")
    ds = load_run_dataset(run, cfg)
    if mode == "residual":
        run.require(run.cache, "precompute")
    plan = skip.SkipPlan(0, 0, cfg.model.depth) if mode == "plain" else plan_for(run, cfg)
    inputs = [run.manifest, run.base] + ([run.cache] if mode == "residual" else [])
    fp = _stage(run, "train", cfg, inputs, (run.adapters, run.metrics), force, extra=mode)
    if fp is None:
        return False
    t0 = time.perf_counter()
    model = load_checkpoint(run.base, skip_blocks=plan.skipped)
    cache = key = None
    if mode == "residual":
        cache = skip.ResidualCache.read(run.cache)
        key = run_cache_key(model, ds, cfg.train)
    metrics = train(model, ds, cfg.train, mode, plan, cache, key, log=log.info)
    if cfg.train.iterations:
        save_adapters(model, run.adapters)
    metrics.write_csv(run.metrics)
    run.record_time("train", time.perf_counter() - t0)
    run.mark("train", fp)
    return True


def load_adapted(run: RunDirectory):
    run.require(run.base, "make-dataset")
    model = load_checkpoint(run.base)
    if run.adapters.exists():
        load_adapters(model, run.adapters)
    return model


def generate_stage(run: RunDirectory, cfg: RunConfig, prompt=None, steps: int = 8, count: int = 4,
                   size: int | None = None, force: bool = False) -> list[Path]:
    model = load_adapted(run)
    prompt = prompt or load_run_dataset(run, cfg).prompts[0]
    paths = []
    for i in range(count):
        img = generate(model, prompt, steps, cfg.seed + i, size)
        path = run.samples / f"sample_{i:02d}.ppm"
        data.write_ppm(path, data.to_uint8(img))
        paths.append(path)
    return paths


def eval_loss(model, ds: data.Dataset, cfg: RunConfig, substeps: int = 64) -> float:
    """Full-forward flow-matching loss on a held-out slice of the schedule."""
    tc = cfg.train
    patch_cfg = tc.patch_config(cfg.model)
    losses = []
    for step in iter_schedule(tc.seed + 7919, substeps, 1, ds.sizes(), patch_cfg, tc.timestep_dist):
        inp = build_inputs(step, ds, patch_cfg, cfg.model)
        v, _ = model.forward(inp.x_t, inp.text_ids, inp.t)
        losses.append(float(fm_loss(v, inp.z0, inp.noise).data))
    return float(np.mean(losses))


def ablation_stage(run: RunDirectory, cfg: RunConfig) -> dict:
    ds = load_run_dataset(run, cfg)
    run.require(run.base, "make-dataset")
    table = _table(run, cfg)
    series, rows = {}, []
    base = load_checkpoint(run.base)
    plain = train(base, ds, cfg.train, "plain")
    series["plain LoRA"] = plain.iteration_losses()
    rows.append(("plain", "0+0", plain.final_mean()))
    for mode in ABLATIONS:
        metrics, plan = ablation_modes(mode, run.base, ds, cfg.train, table)
        series[mode] = metrics.iteration_losses()
        rows.append((mode, f"{plan.n}+{plan.m}", metrics.final_mean()))
    lines = ["mode,plan,final50_loss"] + [f"{m},{p},{v!r}" for m, p, v in rows]
    atomic_write_text(run.root / "ablation.csv", "\n".join(lines) + "\n")
    plots.write_svg(run.plots / "ablation.svg", plots.loss_curve_svg(series, "ablation: per-iteration loss"))
    return {m: v for m, _, v in rows}


def eval_stage(run: RunDirectory, cfg: RunConfig, ablation: bool = False) -> str:
    run.require(run.metrics, "train")
    ds = load_run_dataset(run, cfg)
    metrics = read_metrics(run.metrics)
    base_loss = eval_loss(load_checkpoint(run.base), ds, cfg)
    tuned_loss = eval_loss(load_adapted(run), ds, cfg)
    plan = json.loads(run.plan.read_text()) if run.plan.exists() else None
    lines = ["# Run report", "",
             f"- blocks: {cfg.model.depth}, hidden {cfg.model.hidden}, training crops {cfg.model.img_size}px",
             f"- iterations: {cfg.train.iterations} x {cfg.train.accumulation}, lr {cfg.train.lr}, seed {cfg.seed}",
             f"- skip plan: {'n=%d, m=%d' % (plan['n'], plan['m']) if plan else 'none'}", "",
             "| quantity | value |", "|---|---|"]
    if metrics.records:
        lines += [f"| train loss, first 50 iterations | {metrics.first_mean():.4f} |",
                  f"| train loss, last 50 iterations | {metrics.final_mean():.4f} |"]
    lines += [f"| held-out loss, base model | {base_loss:.4f} |",
              f"| held-out loss, adapted model | {tuned_loss:.4f} |"]
    if ablation:
        res = ablation_stage(run, cfg)
        lines += ["", "## Ablation (mean loss over the last 50 iterations)", "",
                  "| mode | loss |", "|---|---|"] + [f"| {m} | {v:.4f} |" for m, v in res.items()]
    text = "\n".join(lines) + "\n"
    atomic_write_text(run.report, text)
    return text


def plot_stage(run: RunDirectory, metrics_path: Path | None = None,
               distances_path: Path | None = None) -> list[Path]:
    out = []
    metrics_path = metrics_path or (run.metrics if run.metrics.exists() else None)
    distances_path = distances_path or (run.distances if run.distances.exists() else None)
    if metrics_path is None and distances_path is None:
        raise MissingStage("nothing to plot: no metrics.csv or distances.csv; run train or select-blocks")
    if metrics_path is not None:
        m = read_metrics(metrics_path)
        path = run.plots / "loss.svg"
        plots.write_svg(path, plots.loss_curve_svg({"loss": m.iteration_losses()}))
        out.append(path)
    if distances_path is not None:
        table = blockselect.DistanceTable.read(distances_path)
        path = run.plots / "heatmap.svg"
        plots.write_svg(path, plots.heatmap_svg(table))
        out.append(path)
    return out
