"""Analytic parameter, memory and FLOP accounting for DiT fine-tuning.

An :class:`ArchSpec` is an inventory of linear layers (plus attention
products and non-matmul parameters) grouped into a stem, a stack of blocks
and a head. Counting walks the inventory in forward order and decides for
every matrix product whether backward needs the input gradient, the weight
gradient, both or neither:

* a weight gradient is needed only for trainable weights (every weight under
  full fine-tuning, only the low-rank factors under LoRA);
* an input gradient is needed once anything upstream of that input is
  trainable. Inside a block with adapters everything after the first adapted
  projection qualifies; the block's entry projections qualify only if an
  earlier block already carried a trainable parameter.

Each needed gradient costs one extra product of the forward size. This makes
frozen-base LoRA training come out at roughly 2x forward and full
fine-tuning at 3x forward, and it is exact for the toy model (checked
against the runtime FLOP counter of the autodiff engine).

Memory follows the three-way split parameter / optimizer state / other,
where "other" is saved activations of blocks on the tape plus gradients of
trainable parameters. Attention is assumed memory-efficient (no N x N
buffer is kept), so activation memory is linear in the token count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .model import DiTConfig
from .skip import SkipPlan

STRATEGIES = ("full_ft", "lora", "lora_blockskip")
TOKEN_KINDS = ("all", "image", "text", "one")
READS = ("data", "cond", "stream", "inner")
GIB = 1024 ** 3
OPT_STATE_BYTES = 4
GRAD_BYTES = 4
ADAPTER_BYTES = 4


@dataclass(frozen=True)
class LinearSpec:
    name: str
    fan_in: int
    fan_out: int
    bias: bool = True
    tokens: str = "all"     # which tokens pass through the layer
    reads: str = "stream"   # data | cond | stream | inner (see module doc)
    lora: bool = False

    def __post_init__(self):
        if self.tokens not in TOKEN_KINDS:
            raise ValueError(f"{self.name}: unknown token kind {self.tokens!r}")
        if self.reads not in READS:
            raise ValueError(f"{self.name}: unknown input kind {self.reads!r}")
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError(f"{self.name}: dims must be positive")

    @property
    def params(self) -> int:
        return self.fan_in * self.fan_out + (self.fan_out if self.bias else 0)

    def lora_params(self, rank: int) -> int:
        return rank * (self.fan_in + self.fan_out) if self.lora else 0


@dataclass(frozen=True)
class AttnSpec:
    """Score and mixing products of one attention op.

    ``softmax``: 2 Nq Nk dim for QK^T plus the same for PV.
    ``linear``: 2 Nk dim head_dim for K^T V plus 2 Nq dim head_dim for Q(K^T V).
    """

    q_tokens: str = "all"
    k_tokens: str = "all"
    dim: int = 0
    kind: str = "softmax"
    head_dim: int = 0


@dataclass(frozen=True)
class BlockGroup:
    kind: str
    count: int
    linears: tuple[LinearSpec, ...]
    attention: tuple[AttnSpec, ...] = ()
    extra_params: int = 0   # norms, scale tables, depthwise kernels

    @property
    def params(self) -> int:
        return sum(l.params for l in self.linears) + self.extra_params


@dataclass(frozen=True)
class ArchSpec:
    name: str
    hidden: int
    pixels_per_token: int
    n_text: int
    stem: tuple[LinearSpec, ...]
    blocks: tuple[BlockGroup, ...]
    head: tuple[LinearSpec, ...]
    stem_extra_params: int = 0
    head_extra_params: int = 0
    param_bytes: int = 2
    lora_rank: int = 8
    note: str = ""

    @property
    def depth(self) -> int:
        return sum(g.count for g in self.blocks)

    def block_groups(self) -> list[BlockGroup]:
        """One entry per block, in execution order."""
        return [g for g in self.blocks for _ in range(g.count)]

    def tokens(self, kind: str, resolution: int) -> int:
        if resolution % self.pixels_per_token:
            raise ValueError(f"resolution {resolution} not a multiple of {self.pixels_per_token}")
        n_img = (resolution // self.pixels_per_token) ** 2
        return {"all": n_img + self.n_text, "image": n_img, "text": self.n_text, "one": 1}[kind]

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dit_config(cls, cfg: DiTConfig, lora_rank: int = 8) -> "ArchSpec":
        h, f = cfg.hidden, cfg.mlp_ratio * cfg.hidden
        stem = (LinearSpec("patch", cfg.token_dim, h, tokens="image", reads="data"),
                LinearSpec("time1", h, h, tokens="one", reads="data"),
                LinearSpec("time2", h, h, tokens="one", reads="cond"))
        lin = (LinearSpec("q", h, h, lora=True), LinearSpec("k", h, h, lora=True),
               LinearSpec("v", h, h, lora=True), LinearSpec("o", h, h, reads="inner", lora=True),
               LinearSpec("fc1", h, f, reads="inner", lora=True),
               LinearSpec("fc2", f, h, reads="inner", lora=True))
        group = BlockGroup("joint", cfg.depth, lin, (AttnSpec("all", "all", h),), extra_params=4 * h)
        head = (LinearSpec("proj", h, cfg.token_dim, tokens="image"),)
        return cls(name="toy", hidden=h, pixels_per_token=cfg.patch, n_text=cfg.n_text,
                   stem=stem, blocks=(group,), head=head,
                   stem_extra_params=cfg.vocab * h + cfg.n_text * h, head_extra_params=2 * h,
                   param_bytes=4, lora_rank=lora_rank, note="instantiable toy model")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        def lins(items):
            return tuple(LinearSpec(**x) for x in items)

        groups = tuple(BlockGroup(g["kind"], g["count"], lins(g["linears"]),
                                  tuple(AttnSpec(**a) for a in g.get("attention", [])),
                                  g.get("extra_params", 0)) for g in d["blocks"])
        return cls(name=d["name"], hidden=d["hidden"], pixels_per_token=d["pixels_per_token"],
                   n_text=d["n_text"], stem=lins(d["stem"]), blocks=groups, head=lins(d["head"]),
                   stem_extra_params=d.get("stem_extra_params", 0),
                   head_extra_params=d.get("head_extra_params", 0),
                   param_bytes=d.get("param_bytes", 2), lora_rank=d.get("lora_rank", 8),
                   note=d.get("note", ""))


PRESETS = ("flux-like", "sana-like")


def load_preset(name: str) -> ArchSpec:
    fname = name.replace("-", "_") + ".json"
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    text = resources.files("ditbs.presets").joinpath(fname).read_text()
    return ArchSpec.from_dict(json.loads(text))


def load_spec(path: str | Path) -> ArchSpec:
    return ArchSpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# counting


def _resident(spec: ArchSpec, plan: SkipPlan | None) -> list[int]:
    if plan is None:
        return list(range(spec.depth))
    if plan.L != spec.depth:
        raise ValueError(f"skip plan L={plan.L} but spec has {spec.depth} blocks")
    return list(plan.resident)


def _check_strategy(strategy: str, plan: SkipPlan | None) -> None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy != "lora_blockskip" and plan is not None and plan.k:
        raise ValueError(f"strategy {strategy} does not skip blocks")


def base_params(spec: ArchSpec, plan: SkipPlan | None = None) -> int:
    groups = spec.block_groups()
    blocks = sum(groups[i].params for i in _resident(spec, plan))
    stem = sum(l.params for l in spec.stem) + spec.stem_extra_params
    head = sum(l.params for l in spec.head) + spec.head_extra_params
    return stem + blocks + head


def adapter_params(spec: ArchSpec, plan: SkipPlan | None = None, rank: int | None = None) -> int:
    rank = spec.lora_rank if rank is None else rank
    groups = spec.block_groups()
    return sum(l.lora_params(rank) for i in _resident(spec, plan) for l in groups[i].linears)


def param_count(spec: ArchSpec, plan: SkipPlan | None = None, rank: int | None = 0) -> int:
    """Resident base parameters plus adapters of rank ``rank`` (0: none)."""
    return base_params(spec, plan) + (adapter_params(spec, plan, rank) if rank else 0)


def trainable_params(spec: ArchSpec, strategy: str, plan: SkipPlan | None = None,
                     rank: int | None = None) -> int:
    _check_strategy(strategy, plan)
    if strategy == "full_ft":
        return base_params(spec)
    return adapter_params(spec, plan, rank)


@dataclass
class FlopBreakdown:
    forward: int = 0
    backward: int = 0
    by_part: dict = field(default_factory=dict)

    @property
    def train(self) -> int:
        return self.forward + self.backward


def _walk(spec: ArchSpec, resolution: int, plan: SkipPlan | None, strategy: str,
          rank: int | None) -> FlopBreakdown:
    _check_strategy(strategy, plan)
    rank = spec.lora_rank if rank is None else rank
    full = strategy == "full_ft"
    use_lora = not full
    out = FlopBreakdown()
    state = {"cond": full, "stream": full}

    def linear(l: LinearSpec, inner_hot: bool, part: str) -> None:
        n = spec.tokens(l.tokens, resolution)
        f = 2 * n * l.fan_in * l.fan_out
        ig = {"data": False, "cond": state["cond"], "stream": state["stream"], "inner": inner_hot}[l.reads]
        fwd, bwd = f, f * (ig + full)
        if use_lora and l.lora and part == "blocks":
            down, up = 2 * n * l.fan_in * rank, 2 * n * rank * l.fan_out
            fwd += down + up
            bwd += down * (ig + 1) + up * 2
        out.forward += fwd
        out.backward += bwd
        out.by_part[part] = out.by_part.get(part, 0) + fwd

    for l in spec.stem:
        linear(l, state["stream"], "stem")
    groups = spec.block_groups()
    for i in _resident(spec, plan):
        g = groups[i]
        trainable = full or (use_lora and any(l.lora for l in g.linears))
        hot = state["stream"] or trainable
        for l in g.linears:
            linear(l, hot, "blocks")
        for a in g.attention:
            nq, nk = spec.tokens(a.q_tokens, resolution), spec.tokens(a.k_tokens, resolution)
            if a.kind == "softmax":
                f = 4 * nq * nk * a.dim
            elif a.kind == "linear":
                f = 2 * (nq + nk) * a.dim * a.head_dim
            else:
                raise ValueError(f"unknown attention kind {a.kind!r}")
            out.forward += f
            out.backward += 2 * f if hot else 0
            out.by_part["blocks"] = out.by_part.get("blocks", 0) + f
        state["stream"] = hot
    for l in spec.head:
        linear(l, state["stream"], "head")
    return out


def flop_breakdown(spec: ArchSpec, resolution: int, plan: SkipPlan | None = None,
                   strategy: str = "lora", rank: int | None = None) -> FlopBreakdown:
    return _walk(spec, resolution, plan, strategy, rank)


def precompute_flops(spec: ArchSpec, resolution: int) -> int:
    """Frozen forward through the stem and every block (the head is not needed)."""
    fb = _walk(spec, resolution, None, "lora", 0)
    return fb.by_part.get("stem", 0) + fb.by_part.get("blocks", 0)


def flops_report(spec: ArchSpec, resolution: int, plan: SkipPlan | None = None,
                 strategy: str | None = None, rank: int | None = None) -> tuple[int, int]:
    """(training FLOPs per sample step, precompute FLOPs per sample step)."""
    if strategy is None:
        strategy = "lora_blockskip" if plan is not None else "lora"
    train = _walk(spec, resolution, plan, strategy, rank).train
    pre = precompute_flops(spec, resolution) if strategy == "lora_blockskip" else 0
    return train, pre


def activation_elems(spec: ArchSpec, group: BlockGroup, resolution: int) -> int:
    """Saved elements of one block: every projection input plus q, k, v, out."""
    total = 0
    for l in group.linears:
        if l.tokens != "one":
            total += spec.tokens(l.tokens, resolution) * l.fan_in
    for a in group.attention:
        nq, nk = spec.tokens(a.q_tokens, resolution), spec.tokens(a.k_tokens, resolution)
        total += a.dim * (2 * nq + 2 * nk)
    return total


@dataclass
class CostReport:
    strategy: str
    resolution: int
    plan: SkipPlan | None
    param_bytes: int
    optimizer_bytes: int
    other_bytes: int
    train_flops: int
    precompute_flops: int

    @property
    def total_bytes(self) -> int:
        return self.param_bytes + self.optimizer_bytes + self.other_bytes

    def row(self) -> dict:
        return {"strategy": self.strategy,
                "skip": f"{self.plan.n}+{self.plan.m}" if self.plan and self.plan.k else "-",
                "resolution": f"{self.resolution}x{self.resolution}",
                "total_gib": self.total_bytes / GIB, "param_gib": self.param_bytes / GIB,
                "optimizer_gib": self.optimizer_bytes / GIB, "other_gib": self.other_bytes / GIB,
                "train_tflops": self.train_flops / 1e12,
                "precompute_tflops": self.precompute_flops / 1e12}


def memory_report(spec: ArchSpec, strategy: str, resolution: int, plan: SkipPlan | None = None,
                  rank: int | None = None) -> CostReport:
    _check_strategy(strategy, plan)
    if strategy != "lora_blockskip":
        plan = None
    n_adapter = adapter_params(spec, plan, rank) if strategy != "full_ft" else 0
    param_bytes = base_params(spec, plan) * spec.param_bytes + n_adapter * ADAPTER_BYTES
    n_train = trainable_params(spec, strategy, plan, rank)
    optimizer = 2 * OPT_STATE_BYTES * n_train
    groups = spec.block_groups()
    full = strategy == "full_ft"
    first = 0 if full else _first_trainable(spec, plan)
    taped = [i for i in _resident(spec, plan) if i >= first]
    acts = sum(activation_elems(spec, groups[i], resolution) for i in taped)
    other = acts * spec.param_bytes + n_train * GRAD_BYTES
    train, pre = flops_report(spec, resolution, plan, strategy, rank)
    return CostReport(strategy, resolution, plan, param_bytes, optimizer, other, train, pre)


def _first_trainable(spec: ArchSpec, plan: SkipPlan | None) -> int:
    groups = spec.block_groups()
    for i in _resident(spec, plan):
        if any(l.lora for l in groups[i].linears):
            return i
    return spec.depth


# ---------------------------------------------------------------------------
# tables

COLUMNS = ("strategy", "skip", "resolution", "total_gib", "param_gib", "optimizer_gib",
           "other_gib", "train_tflops", "precompute_tflops")
HEADERS = ("Method", "Skip", "Resolution", "Total", "Parameter", "Optimizer State",
           "Other", "Training TFLOPs", "Precompute TFLOPs")


def _cell(key: str, v) -> str:
    if isinstance(v, float):
        if key.endswith("gib"):
            return f"{v:.2f} GiB"
        return f"{v:.2f}" if v else "--"
    return str(v)


def markdown_table(reports: list[CostReport]) -> str:
    lines = ["| " + " | ".join(HEADERS) + " |", "|" + "---|" * len(HEADERS)]
    for r in reports:
        row = r.row()
        lines.append("| " + " | ".join(_cell(k, row[k]) for k in COLUMNS) + " |")
    return "\n".join(lines) + "\n"


def csv_table(reports: list[CostReport]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in reports:
        row = r.row()
        w.writerow([f"{row[k]:.6f}" if isinstance(row[k], float) else row[k] for k in COLUMNS])
    return buf.getvalue()

