"""Choosing which leading/trailing blocks to skip.

For each fine-tuned model j, an image is generated without masking and then
again with image-to-text attention masked in the first n (or last m) blocks.
Summed over models, the semantic distance between the masked and unmasked
images measures how much text conditioning those blocks carry:

    front[n] = sum_j D(x_g^j, x_front_n^j)      back[m] = sum_j D(x_g^j, x_back_m^j)

For a skip budget k the chosen split minimizes front[n] + back[k - n] over
n = 1 .. k-1. The table is built once and any k is answered from it.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MaskSpec, ToyDiT
from .runio import atomic_write_text


def semantic_distance(a, b) -> float:
    """1 - cosine similarity, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("semantic distance of a zero vector is undefined")
    return float(np.clip(1.0 - np.dot(a, b) / (na * nb), 0.0, 2.0))


# ---------------------------------------------------------------------------
# embedders


class RandomConvEmbedder:
    """Frozen random 3x3 conv + tanh, 4x4 average pooling grid, projection.

    Stand-in for a pretrained image encoder: deterministic for a seed and
    unit-normalized. tanh keeps features sign-symmetric; with ReLU every
    pooled feature is positive and all images end up nearly parallel.
    """

    kind = "frozen_random_encoder"

    def __init__(self, seed: int = 0, channels: int = 3, filters: int = 16, dim: int = 64, grid: int = 4):
        rng = np.random.default_rng([seed, 11])
        self.seed, self.grid, self.dim = seed, grid, dim
        self.kernels = rng.standard_normal((filters, channels, 3, 3)) / np.sqrt(9 * channels)
        self.proj = rng.standard_normal((filters * grid * grid, dim)) / np.sqrt(filters * grid * grid)

    def embed(self, image: np.ndarray, key: str | None = None) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        c, h, w = x.shape
        if h % self.grid or w % self.grid:
            raise ValueError(f"image {h}x{w} not divisible by pooling grid {self.grid}")
        pad = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))  # c, h, w, 3, 3
        feat = np.tanh(np.einsum("chwij,fcij->fhw", win, self.kernels))
        g = self.grid
        pooled = feat.reshape(feat.shape[0], g, h // g, g, w // g).mean(axis=(2, 4))
        v = pooled.reshape(-1) @ self.proj
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


class ExternalEmbedder:
    """Vectors supplied by file, keyed by generation id ("j/ref", "j/front/n", "j/back/m")."""

    kind = "external_vectors"

    def __init__(self, path: str | Path):
        raw = json.loads(Path(path).read_text())
        self.vectors = {}
        dims = set()
        for k, v in raw.items():
            v = np.asarray(v, dtype=np.float64)
            n = np.linalg.norm(v)
            if n == 0:
                raise ValueError(f"zero embedding for {k!r}")
            self.vectors[k] = v / n
            dims.add(v.shape)
        if len(dims) > 1:
            raise ValueError("external embeddings have mixed dimensions")
        self.dim = dims.pop()[0] if dims else 0

    def embed(self, image, key: str | None = None) -> np.ndarray:
        if key not in self.vectors:
            raise KeyError(f"no external embedding for {key!r}")
        return self.vectors[key]


# ---------------------------------------------------------------------------
# table


@dataclass
class DistanceTable:
    front: np.ndarray   # front[n - 1] for n = 1 .. L-1
    back: np.ndarray    # back[m - 1] for m = 1 .. L-1
    N: int

    def __post_init__(self):
        self.front = np.asarray(self.front, dtype=np.float64)
        self.back = np.asarray(self.back, dtype=np.float64)
        if self.front.shape != self.back.shape or self.front.ndim != 1:
            raise ValueError("front and back must be 1-D of equal length L-1")
        if self.N < 1:
            raise ValueError("N must be >= 1")

    @property
    def L(self) -> int:
        return len(self.front) + 1

    def score(self, n: int, m: int) -> float:
        return float(self.front[n - 1] + self.back[m - 1])

    def grid(self) -> np.ndarray:
        """(L-1) x (L-1) matrix of front[n] + back[m]; NaN where n + m >= L."""
        g = self.front[:, None] + self.back[None, :]
        n = np.arange(1, self.L)
        g[(n[:, None] + n[None, :]) >= self.L] = np.nan
        return g

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["side", "index", "distance_sum"])
        for side, arr in (("front", self.front), ("back", self.back)):
            for i, d in enumerate(arr, start=1):
                w.writerow([side, i, repr(float(d))])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_csv())

    @classmethod
    def from_csv(cls, text: str, N: int = 1) -> "DistanceTable":
        rows = csv.reader(io.StringIO(text))
        if next(rows, None) != ["side", "index", "distance_sum"]:
            raise ValueError("line 1: expected header side,index,distance_sum")
        vals = {"front": {}, "back": {}}
        for lineno, row in enumerate(rows, start=2):
            try:
                side, idx, d = row
                vals[side][int(idx)] = float(d)
            except (ValueError, KeyError):
                raise ValueError(f"line {lineno}: malformed distance row {row!r}") from None
        n = len(vals["front"])
        for side in vals:
            if sorted(vals[side]) != list(range(1, n + 1)):
                raise ValueError(f"{side} indices must be 1..{n}")
        return cls(np.array([vals["front"][i] for i in range(1, n + 1)]),
                   np.array([vals["back"][i] for i in range(1, n + 1)]), N)

    @classmethod
    def read(cls, path: str | Path, N: int = 1) -> "DistanceTable":
        return cls.from_csv(Path(path).read_text(), N)


def select_skip_indices(table: DistanceTable, k: int) -> tuple[int, int]:
    """argmin of front[n] + back[k-n] over n = 1..k-1; ties go to the smaller n."""
    if not 2 <= k <= table.L - 1:
        raise ValueError(f"k={k} outside [2, {table.L - 1}] (both n and m must be >= 1)")
    best, best_n = None, None
    for n in range(1, k):
        s = table.score(n, k - n)
        if best is None or s < best:
            best, best_n = s, n
    return best_n, k - best_n


def build_distance_table(models: list[ToyDiT], prompt, embedder=None, steps: int = 8,
                         size: int = 32, seed: int = 0) -> DistanceTable:
    """Generate under every first-n / last-m mask and sum semantic distances.

    Model j uses generation seed ``seed + j`` for its reference and all of its
    masked variants, so they share initial noise.
    """
    from .train import generate

    if not models:
        raise ValueError("need at least one model")
    cfg = models[0].cfg
    for j, mdl in enumerate(models[1:], start=1):
        if mdl.cfg != cfg:
            raise ValueError(f"model {j} config differs from model 0")
    embedder = embedder or RandomConvEmbedder(seed)
    L = cfg.depth
    front = np.zeros(L - 1)
    back = np.zeros(L - 1)
    for j, mdl in enumerate(models):
        s = seed + j
        ref = embedder.embed(generate(mdl, prompt, steps, s, size), f"{j}/ref")
        for i in range(1, L):
            img = generate(mdl, prompt, steps, s, size, MaskSpec.first(i))
            front[i - 1] += semantic_distance(ref, embedder.embed(img, f"{j}/front/{i}"))
            img = generate(mdl, prompt, steps, s, size, MaskSpec.last(i))
            back[i - 1] += semantic_distance(ref, embedder.embed(img, f"{j}/back/{i}"))
    return DistanceTable(front, back, len(models))
