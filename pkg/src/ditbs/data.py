"""Synthetic images, PPM (P6) I/O and dataset manifests.

Token vocabulary used by the toy "text encoder" (one id per word)::

    0 pad, 1 "a", 2-7 colours, 8-11 shapes, 12-15 backgrounds,
    16-23 reserved subject tokens ("<*>")

Prompts are four ids: ``[a, <modifier>, <shape>, <background>]`` where the
modifier is a colour word during base pretraining and a subject token during
personalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tsr
from .runio import atomic_write_bytes, write_json

PAD, A = 0, 1
COLORS = {2: (220, 40, 40), 3: (40, 180, 60), 4: (40, 80, 220), 5: (230, 210, 40),
          6: (40, 200, 210), 7: (200, 50, 200)}
SHAPES = {8: "square", 9: "circle", 10: "triangle", 11: "cross"}
BACKGROUNDS = {12: "stripes", 13: "checker", 14: "noise", 15: "gradient"}
SUBJECT_TOKENS = tuple(range(16, 24))
SUBJECT_COLOR = (255, 140, 0)


def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        w = r / 3
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.integers(60, 150, size=3).astype(np.float64)
    alt = np.clip(base + rng.integers(-50, 51, size=3), 0, 255)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        period = int(rng.integers(4, 12))
        sel = ((xx + yy) // period) % 2 == 0
    elif kind == "checker":
        period = int(rng.integers(4, 12))
        sel = ((xx // period) + (yy // period)) % 2 == 0
    elif kind == "noise":
        sel = rng.random((size, size)) < 0.5
    elif kind == "gradient":
        ramp = (xx / max(size - 1, 1))[..., None]
        return base * (1 - ramp) + alt * ramp
    else:
        raise ValueError(f"unknown background {kind!r}")
    return np.where(sel[..., None], base, alt)


def render(shape: str, color, background: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """An (H, W, 3) uint8 image of one shape on a textured background."""
    img = _background(background, size, rng)
    r = size * rng.uniform(0.18, 0.32)
    cx, cy = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(shape, size, cx, cy, r)
    img[mask] = np.asarray(color, dtype=np.float64)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def random_scene(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, list[int]]:
    color = int(rng.choice(list(COLORS)))
    shape = int(rng.choice(list(SHAPES)))
    bg = int(rng.choice(list(BACKGROUNDS)))
    img = render(SHAPES[shape], COLORS[color], BACKGROUNDS[bg], size, rng)
    return img, [A, color, shape, bg]


def subject_images(n: int = 8, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, list[int]]]:
    """The personalization set: one orange ring subject in ``n`` scenes."""
    rng = np.random.default_rng([seed, 7])
    out = []
    bgs = list(BACKGROUNDS)
    for i in range(n):
        bg = bgs[i % len(bgs)]
        img = render("ring", SUBJECT_COLOR, BACKGROUNDS[bg], size, rng)
        out.append((img, [A, SUBJECT_TOKENS[0], 9, bg]))
    return out


def to_float(img_hwc: np.ndarray) -> np.ndarray:
    """uint8 (H, W, C) -> float32 (C, H, W) in [-1, 1]."""
    return (img_hwc.astype(np.float32) / np.float32(127.5) - 1).transpose(2, 0, 1).copy()


def to_uint8(img_chw: np.ndarray) -> np.ndarray:
    x = (np.asarray(img_chw, dtype=np.float64).transpose(1, 2, 0) + 1) * 127.5
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM


def encode_ppm(img: np.ndarray) -> bytes:
    h, w, c = img.shape
    if c != 3 or img.dtype != np.uint8:
        raise ValueError("PPM P6 needs (H, W, 3) uint8")
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("only binary PPM (P6) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError("truncated PPM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: Path, img: np.ndarray) -> None:
    atomic_write_bytes(Path(path), encode_ppm(img))


def read_ppm(path: Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: list[np.ndarray]                 # float32 (C, H, W) in [-1, 1]
    prompts: list[list[int]]
    subject_tokens: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def sizes(self) -> list[tuple[int, int]]:
        return [img.shape[1:] for img in self.images]


def center_pad(img: np.ndarray, size: int) -> np.ndarray:
    c, h, w = img.shape
    ph, pw = max(size - h, 0), max(size - w, 0)
    if not ph and not pw:
        return img
    return np.pad(img, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="edge")


def synthetic_dataset(n: int = 8, size: int = 64, seed: int = 0) -> Dataset:
    items = subject_images(n, size, seed)
    return Dataset([to_float(img) for img, _ in items], [p for _, p in items],
                   [p[1] for _, p in items])


def write_dataset(root: Path, n: int = 8, size: int = 64, seed: int = 0) -> Path:
    root = Path(root)
    entries = []
    for i, (img, prompt) in enumerate(subject_images(n, size, seed)):
        name = f"img{i:02d}.ppm"
        write_ppm(root / name, img)
        entries.append({"path": name, "format": "PPM-P6", "subject_token": prompt[1],
                        "prompt": prompt})
    manifest = root / "manifest.json"
    write_json(manifest, {"images": entries})
    return manifest


def load_dataset(manifest_path: Path, s_max: int | None = None) -> Dataset:
    """Load a manifest; images smaller than ``s_max`` are centre-padded."""
    manifest_path = Path(manifest_path)
    meta = json.loads(manifest_path.read_text())
    root = manifest_path.parent / meta.get("root", ".")
    images, prompts, subjects = [], [], []
    for entry in meta["images"]:
        path = root / entry["path"]
        if not path.exists():
            raise FileNotFoundError(f"dataset image missing: {path}")
        fmt = entry.get("format", "PPM-P6")
        if fmt == "PPM-P6":
            img = to_float(read_ppm(path))
        elif fmt == "TSR1":
            img = tsr.load(path).astype(np.float32)
        else:
            raise ValueError(f"unsupported image format {fmt!r}")
        if s_max is not None:
            img = center_pad(img, s_max)
        token = int(entry["subject_token"])
        images.append(img)
        prompts.append(list(entry.get("prompt", [A, token, PAD, PAD])))
        subjects.append(token)
    if not images:
        raise ValueError("dataset manifest lists no images")
    return Dataset(images, prompts, subjects)
