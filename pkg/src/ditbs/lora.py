"""Low-rank adapters on the linear layers of resident blocks."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tsr
from .autodiff import Tensor
from .model import ToyDiT
from .runio import atomic_dir, canonical_json


class AdapterError(RuntimeError):
    pass


class LoraLayer:
    """delta(x) = (alpha / r) * x A^T B^T, with A: r x in and B: out x r."""

    def __init__(self, fan_in: int, fan_out: int, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(alpha)
        self.A = Tensor(rng.standard_normal((rank, fan_in)) / np.sqrt(rank), requires_grad=True)  # variance 1/r
        self.B = Tensor(np.zeros((fan_out, rank)), requires_grad=True)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.matmul(x, ad.transpose(self.A))
        return ad.scale(ad.matmul(h, ad.transpose(self.B)), self.scaling)

    def delta_weight(self) -> np.ndarray:
        """Weight delta in the base layer's (in, out) layout."""
        return (self.scaling * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))).T


def inject(model: ToyDiT, blocks, rank: int = 8, alpha: float = 8.0, seed: int = 0) -> ToyDiT:
    """Attach adapters to every linear of ``blocks`` and freeze the base.

    The model is modified in place and returned. Blocks that are not resident
    (skipped, weights dropped) cannot take adapters.
    """
    blocks = sorted(set(int(b) for b in blocks))
    for i in blocks:
        if not 0 <= i < model.cfg.depth:
            raise AdapterError(f"block {i} outside [0, {model.cfg.depth})")
        if model.blocks[i] is None:
            raise AdapterError(f"block {i} is skipped; its weights are offloaded")
    model.set_trainable(False)
    for i in blocks:
        rng = np.random.default_rng([seed, i])
        for _, lin in model.blocks[i].linears():
            lin.lora = LoraLayer(lin.fan_in, lin.fan_out, rank, alpha, rng)
    return model


def has_adapters(model: ToyDiT) -> bool:
    return next(model.adapter_parameters(), None) is not None


def merge(model: ToyDiT) -> ToyDiT:
    """Fold adapters into the base weights and remove them (in place)."""
    if not has_adapters(model):
        raise AdapterError("model has no adapters to merge")
    for blk in model.blocks:
        if blk is None:
            continue
        for _, lin in blk.linears():
            if lin.lora is not None:
                merged = lin.W.data.astype(np.float64) + lin.lora.delta_weight()
                lin.W.data = merged.astype(lin.W.data.dtype)
                lin.lora = None
    return model


def adapter_spec(model: ToyDiT) -> dict:
    for i, blk in enumerate(model.blocks):
        if blk is None:
            continue
        for _, lin in blk.linears():
            if lin.lora is not None:
                return {"rank": lin.lora.rank, "alpha": lin.lora.alpha}
    raise AdapterError("model has no adapters")


def adapted_blocks(model: ToyDiT) -> list[int]:
    return sorted({int(name.split(".")[1]) for name, _ in model.adapter_parameters()})


def save_adapters(model: ToyDiT, path: str | Path) -> None:
    spec = adapter_spec(model)
    files = {}
    with atomic_dir(Path(path)) as tmp:
        for name, p in model.adapter_parameters():
            fname = f"{name}.tsr"
            (tmp / fname).write_bytes(tsr.encode(p.data))
            files[name] = fname
        manifest = {"format": "ditbs-adapters/1", "base_digest": model.digest,
                    "blocks": adapted_blocks(model), "params": files, **spec}
        (tmp / "manifest.json").write_text(canonical_json(manifest))


def load_adapters(model: ToyDiT, path: str | Path) -> ToyDiT:
    """Inject adapters from an adapter checkpoint onto a loaded base model."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if model.digest is not None and manifest.get("base_digest") not in (None, model.digest):
        raise AdapterError("adapter checkpoint was trained on a different base model")
    inject(model, manifest["blocks"], manifest["rank"], manifest["alpha"])
    params = dict(model.adapter_parameters())
    for name, fname in manifest["params"].items():
        arr = tsr.load(path / fname)
        if params[name].shape != arr.shape:
            raise ad.ShapeError(f"load {name}", params[name].shape, arr.shape)
        params[name].data = arr.astype(ad.default_dtype())
    return model
