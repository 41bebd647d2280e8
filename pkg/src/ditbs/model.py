"""Miniature joint-attention diffusion transformer.

Text tokens and image tokens are concatenated into one residual stream and
processed by ``depth`` identical pre-LN blocks (joint self-attention + MLP).
The timestep enters once, as a sinusoidal embedding passed through a small
MLP and added to every token of the block-0 input. Image positions use fixed
sinusoidal embeddings of normalized grid coordinates, so the same weights run
at any square resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import tsr
from .autodiff import Tensor
from .runio import atomic_dir, canonical_json


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 8          # L, number of blocks
    hidden: int = 64
    heads: int = 4
    patch: int = 4          # pixels per token side
    img_size: int = 16      # training-side resolution (s_min)
    channels: int = 3
    vocab: int = 32
    n_text: int = 4
    max_t: int = 1000       # T
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.img_size % self.patch:
            raise ValueError(f"img_size {self.img_size} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.depth < 3:
            raise ValueError("depth must be >= 3")
        if self.max_t < 1:
            raise ValueError("max_t must be >= 1")
        if min(self.hidden, self.heads, self.patch, self.channels, self.vocab, self.n_text) < 1:
            raise ValueError("config sizes must be positive")

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def n_img(self, size: int | None = None) -> int:
        size = self.img_size if size is None else size
        return (size // self.patch) ** 2

    def n_tokens(self, size: int | None = None) -> int:
        return self.n_text + self.n_img(size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        return cls(**d)


@dataclass(frozen=True)
class MaskSpec:
    """Which blocks get image-query -> text-key attention suppressed."""

    mode: str = "none"      # none | first_n | last_m | custom
    count: int = 0
    blocks: frozenset = field(default_factory=frozenset)

    @classmethod
    def first(cls, n: int) -> "MaskSpec":
        return cls("first_n", n)

    @classmethod
    def last(cls, m: int) -> "MaskSpec":
        return cls("last_m", m)

    @classmethod
    def custom(cls, blocks) -> "MaskSpec":
        return cls("custom", 0, frozenset(int(b) for b in blocks))

    @classmethod
    def all(cls, depth: int) -> "MaskSpec":
        return cls.custom(range(depth))

    def masked_blocks(self, depth: int) -> frozenset:
        if self.mode == "none":
            return frozenset()
        if self.mode in ("first_n", "last_m"):
            if not 0 <= self.count < depth:
                raise ValueError(f"mask count {self.count} must be in [0, {depth})")
            if self.mode == "first_n":
                return frozenset(range(self.count))
            return frozenset(range(depth - self.count, depth))
        if self.mode == "custom":
            bad = [b for b in self.blocks if not 0 <= b < depth]
            if bad:
                raise ValueError(f"masked blocks {sorted(bad)} outside [0, {depth})")
            return self.blocks
        raise ValueError(f"unknown mask mode {self.mode!r}")


# ---------------------------------------------------------------------------
# patchify


def patchify(image: np.ndarray, d: int) -> np.ndarray:
    """(C, H, W) -> (H/d * W/d, d*d*C); a leading batch axis is kept."""
    image = np.asarray(image)
    batched = image.ndim == 4
    x = image if batched else image[None]
    b, c, h, w = x.shape
    if h % d or w % d:
        raise ValueError(f"image {h}x{w} not divisible by patch {d}")
    x = x.reshape(b, c, h // d, d, w // d, d).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, (h // d) * (w // d), c * d * d)
    return x if batched else x[0]


def unpatchify(tokens: np.ndarray, d: int, channels: int, size: int | None = None) -> np.ndarray:
    tokens = np.asarray(tokens)
    batched = tokens.ndim == 3
    x = tokens if batched else tokens[None]
    b, n, _ = x.shape
    g = size // d if size else math.isqrt(n)
    if g * g != n:
        raise ValueError(f"{n} tokens do not form a square grid")
    x = x.reshape(b, g, g, channels, d, d).transpose(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, channels, g * d, g * d)
    return x if batched else x[0]


# ---------------------------------------------------------------------------
# constant embeddings


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


@lru_cache(maxsize=32)
def _pos_embedding(grid: int, dim: int) -> np.ndarray:
    q = dim // 4
    freqs = np.exp(-math.log(100.0) * np.arange(q) / max(q, 1))
    centers = (np.arange(grid) + 0.5) / grid * 16.0
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    cy, cx = cy.reshape(-1, 1) * freqs, cx.reshape(-1, 1) * freqs
    emb = np.zeros((grid * grid, dim))
    emb[:, :4 * q] = np.concatenate([np.sin(cy), np.cos(cy), np.sin(cx), np.cos(cx)], axis=1)
    emb.setflags(write=False)
    return emb


@lru_cache(maxsize=64)
def cross_attention_mask(n_text: int, n_tokens: int) -> np.ndarray:
    """True at (image query, text key) positions."""
    m = np.zeros((n_tokens, n_tokens), dtype=bool)
    m[n_text:, :n_text] = True
    m.setflags(write=False)
    return m


# ---------------------------------------------------------------------------
# layers


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(fan_in) if std is None else std
        self.W = Tensor(rng.standard_normal((fan_in, fan_out)) * std)
        self.b = Tensor(np.zeros(fan_out))
        self.lora = None

    @property
    def fan_in(self) -> int:
        return self.W.shape[0]

    @property
    def fan_out(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, self.W), self.b)
        if self.lora is not None:
            y = ad.add(y, self.lora(x))
        return y

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "W", self.W
        yield "b", self.b


class LayerNorm:
    def __init__(self, dim: int):
        self.g = Tensor(np.ones(dim))
        self.b = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.g, self.b)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "g", self.g
        yield "b", self.b


class Block:
    LINEARS = ("q", "k", "v", "o", "fc1", "fc2")

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.heads = cfg.heads
        out_std = 1.0 / math.sqrt(h * 2 * cfg.depth)
        self.ln1 = LayerNorm(h)
        self.q = Linear(h, h, rng)
        self.k = Linear(h, h, rng)
        self.v = Linear(h, h, rng)
        self.o = Linear(h, h, rng, std=out_std)
        self.ln2 = LayerNorm(h)
        self.fc1 = Linear(h, cfg.mlp_ratio * h, rng)
        self.fc2 = Linear(cfg.mlp_ratio * h, h, rng, std=out_std / math.sqrt(cfg.mlp_ratio))

    def linears(self) -> Iterator[tuple[str, Linear]]:
        for name in self.LINEARS:
            yield name, getattr(self, name)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("ln1", "q", "k", "v", "o", "ln2", "fc1", "fc2"):
            for pname, p in getattr(self, name).params():
                yield f"{name}.{pname}", p

    def attention(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        b, n, h = x.shape
        nh, dh = self.heads, h // self.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))

        q, v = split(self.q(x)), split(self.v(x))
        kt = ad.transpose(ad.reshape(self.k(x), (b, n, nh, dh)), (0, 2, 3, 1))
        scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(dh))
        probs = ad.softmax_masked(scores, mask)
        out = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, n, h))
        return self.o(out)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = ad.add(x, self.attention(self.ln1(x), mask))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))


class Stem:
    """Input embeddings: patch projection, text table, timestep MLP."""

    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        h = cfg.hidden
        self.cfg = cfg
        self.patch = Linear(cfg.token_dim, h, rng)
        self.text = Tensor(rng.standard_normal((cfg.vocab, h)))
        self.text_pos = Tensor(rng.standard_normal((cfg.n_text, h)) * 0.1)
        self.time1 = Linear(h, h, rng)
        self.time2 = Linear(h, h, rng)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for pname, p in self.patch.params():
            yield f"patch.{pname}", p
        yield "text.table", self.text
        yield "text.pos", self.text_pos
        for pname, p in self.time1.params():
            yield f"time1.{pname}", p
        for pname, p in self.time2.params():
            yield f"time2.{pname}", p


class Head:
    def __init__(self, cfg: DiTConfig, rng: np.random.Generator):
        self.norm = LayerNorm(cfg.hidden)
        self.proj = Linear(cfg.hidden, cfg.token_dim, rng)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for pname, p in self.norm.params():
            yield f"norm.{pname}", p
        for pname, p in self.proj.params():
            yield f"proj.{pname}", p


class ToyDiT:
    def __init__(self, cfg: DiTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = Stem(cfg, rng)
        self.blocks: list[Block | None] = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.head = Head(cfg, rng)
        self.digest: str | None = None

    # -- parameters --------------------------------------------------------

    def parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Base (non-adapter) parameters of resident modules, in a fixed order."""
        for pname, p in self.stem.params():
            yield f"stem.{pname}", p
        for i, blk in enumerate(self.blocks):
            if blk is not None:
                for pname, p in blk.params():
                    yield f"blocks.{i}.{pname}", p
        for pname, p in self.head.params():
            yield f"head.{pname}", p

    def adapter_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, blk in enumerate(self.blocks):
            if blk is None:
                continue
            for lname, lin in blk.linears():
                if lin.lora is not None:
                    yield f"blocks.{i}.{lname}.lora.A", lin.lora.A
                    yield f"blocks.{i}.{lname}.lora.B", lin.lora.B

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        ps = list(self.parameters()) + list(self.adapter_parameters())
        return [(n, p) for n, p in ps if p.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.parameters():
            p.requires_grad = flag

    @property
    def resident_blocks(self) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b is not None]

    def drop_blocks(self, indices) -> None:
        """Release block weights (the offloading step of block skipping)."""
        for i in indices:
            self.blocks[i] = None

    # -- forward pieces ----------------------------------------------------

    def _check_inputs(self, image_tokens: Tensor, text_ids: np.ndarray, t) -> np.ndarray:
        cfg = self.cfg
        if image_tokens.data.ndim != 3 or image_tokens.shape[-1] != cfg.token_dim:
            raise ad.ShapeError("forward", image_tokens.shape, ("B", "N", cfg.token_dim))
        if text_ids.shape != (image_tokens.shape[0], cfg.n_text):
            raise ad.ShapeError("forward", text_ids.shape, (image_tokens.shape[0], cfg.n_text))
        if text_ids.min() < 0 or text_ids.max() >= cfg.vocab:
            raise ValueError(f"text id outside vocabulary [0, {cfg.vocab})")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (image_tokens.shape[0],))
        if np.any(t < 0) or np.any(t > cfg.max_t):
            raise ValueError(f"timestep outside [0, {cfg.max_t}]")
        return t

    def embed(self, image_tokens, text_ids, t) -> Tensor:
        """f_0: the block-0 input for a batch."""
        cfg = self.cfg
        image_tokens = ad.as_tensor(image_tokens)
        text_ids = np.asarray(text_ids)
        if text_ids.ndim == 1:
            text_ids = text_ids[None]
        t = self._check_inputs(image_tokens, text_ids, t)
        b, n_img, _ = image_tokens.shape
        grid = math.isqrt(n_img)
        if grid * grid != n_img:
            raise ValueError(f"{n_img} image tokens do not form a square grid")
        s = self.stem
        with ad.flop_scope("stem"):
            pos = Tensor(_pos_embedding(grid, cfg.hidden))
            x_img = ad.add(s.patch(image_tokens), pos)
            x_txt = ad.add(ad.embed_lookup(s.text, text_ids), s.text_pos)
            x = ad.concat([x_txt, x_img], axis=1)
            temb = Tensor(timestep_embedding(t, cfg.hidden))
            temb = s.time2(ad.gelu(s.time1(temb)))
            temb = ad.expand(ad.reshape(temb, (b, 1, cfg.hidden)), (b, x.shape[1], cfg.hidden))
        return ad.add(x, temb)

    def run_blocks(self, x: Tensor, start: int, stop: int, mask: MaskSpec | None = None,
                   trace: list | None = None) -> Tensor:
        masked = (mask or MaskSpec()).masked_blocks(self.cfg.depth)
        attn_mask = cross_attention_mask(self.cfg.n_text, x.shape[1])
        for i in range(start, stop):
            blk = self.blocks[i]
            if blk is None:
                raise RuntimeError(f"block {i} is not resident (skipped/offloaded)")
            with ad.flop_scope("block"):
                x = blk(x, attn_mask if i in masked else None)
            if trace is not None:
                trace.append(x)
        return x

    def project(self, x: Tensor) -> Tensor:
        """Final norm + linear head applied to the image tokens."""
        with ad.flop_scope("head"):
            y = self.head.norm(x)
            y = ad.slice_axis(y, 1, self.cfg.n_text, x.shape[1])
            return self.head.proj(y)

    def forward(self, image_tokens, text_ids, t, mask: MaskSpec | None = None,
                trace: bool = False):
        """Predict velocity tokens; with ``trace`` also return [f_0, ..., f_L]."""
        mask = mask or MaskSpec()
        mask.masked_blocks(self.cfg.depth)
        x = self.embed(image_tokens, text_ids, t)
        acts = [x] if trace else None
        x = self.run_blocks(x, 0, self.cfg.depth, mask, acts)
        return self.project(x), acts

    __call__ = forward


# ---------------------------------------------------------------------------
# checkpoints


def _digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(tsr.encode(p.data))
    return h.hexdigest()


def weights_digest(model: ToyDiT) -> str:
    if len(model.resident_blocks) != model.cfg.depth:
        raise RuntimeError("digest needs every block resident")
    return _digest(model.parameters())


def save_checkpoint(model: ToyDiT, path: str | Path) -> str:
    """Write a directory of TSR1 tensors plus ``manifest.json``; returns the digest."""
    params = list(model.parameters())
    digest = weights_digest(model)
    files = {}
    with atomic_dir(Path(path)) as tmp:
        for name, p in params:
            fname = f"{name}.tsr"
            (tmp / fname).write_bytes(tsr.encode(p.data))
            files[name] = fname
        manifest = {"format": "ditbs-checkpoint/1", "config": model.cfg.to_dict(),
                    "digest": digest, "params": files}
        (tmp / "manifest.json").write_text(canonical_json(manifest))
    return digest


def read_manifest(path: str | Path) -> dict:
    import json

    return json.loads((Path(path) / "manifest.json").read_text())


def _assign(model: ToyDiT, name: str, arr: np.ndarray) -> None:
    target = dict(model.parameters())[name]
    if target.shape != arr.shape:
        raise ad.ShapeError(f"load {name}", target.shape, arr.shape)
    target.data = arr.astype(ad.default_dtype())


def load_checkpoint(path: str | Path, skip_blocks=()) -> ToyDiT:
    """Load a checkpoint; blocks in ``skip_blocks`` are never materialized."""
    path = Path(path)
    manifest = read_manifest(path)
    cfg = DiTConfig.from_dict(manifest["config"])
    model = ToyDiT(cfg)
    model.drop_blocks(skip_blocks)
    params = dict(model.parameters())
    for name, fname in manifest["params"].items():
        if name in params:
            _assign(model, name, tsr.load(path / fname))
    model.digest = manifest["digest"]
    return model


class BlockLoader:
    """Loads one block at a time from a checkpoint and tracks residency.

    Used by staged precompute: ``peak`` records the most blocks ever resident
    at once.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.manifest = read_manifest(self.path)
        self.cfg = DiTConfig.from_dict(self.manifest["config"])
        self.resident: set[int] = set()
        self.peak = 0

    def stem_model(self) -> ToyDiT:
        """A model with stem + head loaded and no blocks resident."""
        model = ToyDiT(self.cfg)
        model.drop_blocks(range(self.cfg.depth))
        for name, fname in self.manifest["params"].items():
            if not name.startswith("blocks."):
                _assign(model, name, tsr.load(self.path / fname))
        model.digest = self.manifest["digest"]
        return model

    def load(self, model: ToyDiT, i: int) -> None:
        blk = Block(self.cfg, np.random.default_rng(0))
        params = dict(blk.params())
        prefix = f"blocks.{i}."
        for name, fname in self.manifest["params"].items():
            if name.startswith(prefix):
                params[name[len(prefix):]].data = tsr.load(self.path / fname).astype(ad.default_dtype())
        model.blocks[i] = blk
        self.resident.add(i)
        self.peak = max(self.peak, len(self.resident))

    def release(self, model: ToyDiT, i: int) -> None:
        model.blocks[i] = None
        self.resident.discard(i)
