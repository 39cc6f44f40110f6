"""Hierarchical memory bank: storage, accounting, fetch, and masking.

One memory block exists per cluster tree node. A block at level l is a
flat float32 vector of s_l parameters whose layout is a fixed sequence of
per-layer slots (weight matrices for the chosen memory type). Fetching an
index (i_1, ..., i_p) returns the root-to-leaf path of blocks. A single
"generic" block of size sum(s_l) rides along for out-of-distribution use
and is trained on a sampled fraction of sequences.

Block sizes per memory type, with r the width multiplier, d the model
width, H = heads * head_dim, d_f the FFN width, and l the number of
layers the memory is placed on:

    ffn        3 * r * l * d
    lora_qk    2 * r * l * (d + H)
    lora_ov    2 * r * l * (d + H)
    lora_ffn   3 * r * l * (d + d_f)
    kv         2 * r * l * H

The bank holds k^l blocks at level l; total bank size is sum_l s_l * k^l
and a fetch touches sum_l s_l parameters regardless of which path is hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import fileio

BANK_MAGIC = "HMBANK"

MEMORY_TYPES = ("ffn", "lora_qk", "lora_ov", "lora_ffn", "kv")
PLACEMENTS = ("uniform", "early", "mid", "late")

# LoRa-style attachments scale their delta by alpha / r.
LORA_ALPHA = 2.0


class BankError(RuntimeError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    mem_type: str = "ffn"
    rs: tuple[int, ...] = (16, 16)     # width multiplier per level, coarse to fine
    placement: str = "uniform"
    masked_policy: str = "generic"     # what a blocked fetch substitutes: generic | zero

    def __post_init__(self):
        if self.mem_type not in MEMORY_TYPES:
            raise ValueError(f"unknown memory type {self.mem_type!r}, expected one of {MEMORY_TYPES}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}, expected one of {PLACEMENTS}")
        # r_l = 0 marks a level holding no memories, e.g. single-level setups
        if not self.rs or any(r < 0 for r in self.rs):
            raise ValueError(f"width multipliers must be >= 0 per level, got {self.rs}")
        if self.masked_policy not in ("generic", "zero"):
            raise ValueError(f"masked_policy must be 'generic' or 'zero', got {self.masked_policy!r}")

    @property
    def depth(self) -> int:
        return len(self.rs)


def layer_subset(placement: str, num_layers: int) -> list[int]:
    """1-based layers a non-uniform placement covers.

    The subset size scales with depth as ceil(num_layers * 10 / 35): early
    takes the first chunk, late the last, mid a centered chunk starting at
    floor((num_layers - m) / 2) + 1.
    """
    if placement == "uniform":
        return list(range(1, num_layers + 1))
    m = min(num_layers, math.ceil(num_layers * 10 / 35))
    if placement == "early":
        return list(range(1, m + 1))
    if placement == "late":
        return list(range(num_layers - m + 1, num_layers + 1))
    if placement == "mid":
        start = (num_layers - m) // 2 + 1
        return list(range(start, start + m))
    raise ValueError(f"unknown placement {placement!r}")


def block_size(mem_type: str, r: int, dim: int, heads: int, head_dim: int, ffn_dim: int, placed_layers: int) -> int:
    """Closed-form parameter count of one level's block."""
    H = heads * head_dim
    if mem_type == "ffn":
        return 3 * r * placed_layers * dim
    if mem_type == "lora_qk":
        return 2 * r * placed_layers * (dim + H)
    if mem_type == "lora_ov":
        return 2 * r * placed_layers * (dim + H)
    if mem_type == "lora_ffn":
        return 3 * r * placed_layers * (dim + ffn_dim)
    if mem_type == "kv":
        return 2 * r * placed_layers * H
    raise ValueError(f"unknown memory type {mem_type!r}")


@dataclass(frozen=True)
class Slot:
    layer: int          # 1-based layer the slot attaches to
    name: str           # role within the layer, e.g. "m1", "qa"
    shape: tuple[int, ...]
    init: str           # "tn" | "zero" | "kaiming"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def level_slots(mem_type: str, r: int, dim: int, heads: int, head_dim: int, ffn_dim: int, layers: list[int]) -> list[Slot]:
    """Flat slot layout of one block; concatenation order is the layout."""
    H = heads * head_dim
    out: list[Slot] = []
    for li in layers:
        if mem_type == "ffn":
            out += [
                Slot(li, "m1", (dim, r), "tn"),
                Slot(li, "m2", (dim, r), "tn"),
                Slot(li, "m3", (r, dim), "zero"),
            ]
        elif mem_type == "lora_qk":
            out += [
                Slot(li, "qa", (dim, r), "kaiming"),
                Slot(li, "qb", (r, H), "zero"),
                Slot(li, "ka", (dim, r), "kaiming"),
                Slot(li, "kb", (r, H), "zero"),
            ]
        elif mem_type == "lora_ov":
            out += [
                Slot(li, "va", (dim, r), "kaiming"),
                Slot(li, "vb", (r, H), "zero"),
                Slot(li, "oa", (H, r), "kaiming"),
                Slot(li, "ob", (r, dim), "zero"),
            ]
        elif mem_type == "lora_ffn":
            out += [
                Slot(li, "f1a", (dim, r), "kaiming"),
                Slot(li, "f1b", (r, ffn_dim), "zero"),
                Slot(li, "f2a", (dim, r), "kaiming"),
                Slot(li, "f2b", (r, ffn_dim), "zero"),
                Slot(li, "f3a", (ffn_dim, r), "kaiming"),
                Slot(li, "f3b", (r, dim), "zero"),
            ]
        elif mem_type == "kv":
            out += [
                Slot(li, "mk", (r, H), "tn"),
                Slot(li, "mv", (r, H), "zero"),
            ]
        else:
            raise ValueError(f"unknown memory type {mem_type!r}")
    return out


def bank_accounting(cfg: MemoryConfig, dim: int, heads: int, head_dim: int, ffn_dim: int, num_layers: int, k: int) -> dict:
    """Fetch/bank parameter totals plus the per-level block sizes.

    c0 is the block size at r=1 (the granularity the width multipliers
    scale), identical across levels.
    """
    placed = len(layer_subset(cfg.placement, num_layers))
    sizes = [block_size(cfg.mem_type, r, dim, heads, head_dim, ffn_dim, placed) for r in cfg.rs]
    c0 = block_size(cfg.mem_type, 1, dim, heads, head_dim, ffn_dim, placed)
    fetch = int(sum(sizes))
    bank = int(sum(s * k ** (l + 1) for l, s in enumerate(sizes)))
    return {
        "level_sizes": sizes,
        "fetch_params": fetch,
        "bank_params": bank,
        "generic_params": fetch,
        "c0": c0,
        "placed_layers": placed,
    }


@dataclass
class MemoryBank:
    cfg: MemoryConfig
    k: int
    dims: dict                     # dim, heads, head_dim, ffn_dim, num_layers
    levels: list[np.ndarray]       # levels[l-1]: (k^l, s_l) float32
    generic: list[np.ndarray]      # generic[l-1]: (s_l,) float32
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return self.cfg.depth

    def level_size(self, level: int) -> int:
        return self.levels[level - 1].shape[1]

    def block(self, level: int, index: tuple) -> np.ndarray:
        """Read-only view of one block's parameters."""
        if len(index) != level:
            raise BankError(f"index {index} is not a level-{level} path")
        flat = 0
        for i in index:
            if not (1 <= i <= self.k):
                raise BankError(f"index component {i} outside 1..{self.k} in {index}")
            flat = flat * self.k + (i - 1)
        return self.levels[level - 1][flat]


class BlockMask:
    """A set of masked subtree roots, closed over descendants.

    Masking node (l, i_1..i_l) masks its whole subtree: any path whose
    prefix matches a masked root is treated as blocked at fetch time.
    """

    def __init__(self, roots=()):
        roots = [tuple(int(i) for i in r) for r in roots]
        for r in roots:
            if not r:
                raise BankError("cannot mask the tree root (empty path)")
        self.roots = frozenset(roots)

    def blocked_level(self, index: tuple) -> int | None:
        """Smallest level at which ``index``'s path enters a masked subtree."""
        hits = [len(r) for r in self.roots if index[: len(r)] == r]
        return min(hits) if hits else None

    def is_blocked(self, index: tuple, level: int) -> bool:
        bl = self.blocked_level(index[:level])
        return bl is not None and bl <= level

    def __bool__(self):
        return bool(self.roots)


@dataclass
class FetchedMemory:
    """Root-to-leaf path of block parameter vectors (views, not copies)."""

    index: tuple
    levels: list[np.ndarray]            # one (s_l,) view per level
    sources: list[tuple]                # ("cluster", path) | ("generic", l) | ("zero", l)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(64):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


def init_bank(cfg: MemoryConfig, *, dim: int, heads: int, head_dim: int, ffn_dim: int, num_layers: int, k: int, seed: int = 0) -> MemoryBank:
    """Allocate and gracefully initialize every block.

    Graceful means a freshly initialized memory leaves the model's output
    exactly unchanged: down/out projections ("zero" slots) start at zero
    while input-side slots get small random values, so each attachment's
    delta is identically zero at step 0.
    """
    if not any(cfg.rs):
        raise BankError(f"bank with multipliers {cfg.rs} would hold no parameters")
    layers = layer_subset(cfg.placement, num_layers)
    rng = np.random.default_rng([seed, 0xB4_4E])
    levels = []
    generic = []
    for l, r in enumerate(cfg.rs, start=1):
        slots = level_slots(cfg.mem_type, r, dim, heads, head_dim, ffn_dim, layers)
        s_l = sum(s.size for s in slots)
        n_blocks = k ** l
        arr = np.empty((n_blocks, s_l), dtype=np.float32)
        gen = np.empty(s_l, dtype=np.float32)
        off = 0
        for s in slots:
            block_cols = slice(off, off + s.size)
            if s.init == "zero":
                arr[:, block_cols] = 0.0
                gen[block_cols] = 0.0
            elif s.init == "tn":
                arr[:, block_cols] = _trunc_normal(rng, (n_blocks, s.size)).astype(np.float32)
                gen[block_cols] = _trunc_normal(rng, (s.size,)).astype(np.float32)
            elif s.init == "kaiming":
                bound = 1.0 / math.sqrt(s.shape[0])
                arr[:, block_cols] = rng.uniform(-bound, bound, (n_blocks, s.size)).astype(np.float32)
                gen[block_cols] = rng.uniform(-bound, bound, s.size).astype(np.float32)
            off += s.size
        levels.append(arr)
        generic.append(gen)
    dims = {"dim": dim, "heads": heads, "head_dim": head_dim, "ffn_dim": ffn_dim, "num_layers": num_layers}
    return MemoryBank(cfg=cfg, k=k, dims=dims, levels=levels, generic=generic, meta={"seed": seed})


def fetch(bank: MemoryBank, index: tuple, mask: BlockMask | None = None) -> FetchedMemory:
    """Blocks along the path to ``index``; masked levels fall back to the
    generic block (or zeros, per config policy)."""
    if len(index) != bank.depth:
        raise BankError(f"fetch index {index} must have depth {bank.depth}")
    out = []
    sources = []
    for level in range(1, bank.depth + 1):
        if mask is not None and mask.is_blocked(index, level):
            if bank.cfg.masked_policy == "zero":
                out.append(np.zeros_like(bank.generic[level - 1]))
                sources.append(("zero", level))
            else:
                out.append(bank.generic[level - 1])
                sources.append(("generic", level))
        else:
            out.append(bank.block(level, index[:level]))
            sources.append(("cluster", tuple(index[:level])))
    return FetchedMemory(index=tuple(index), levels=out, sources=sources)


def fetch_generic(bank: MemoryBank) -> FetchedMemory:
    """The generic path: every level served by the shared generic block."""
    return FetchedMemory(
        index=(),
        levels=[bank.generic[l] for l in range(bank.depth)],
        sources=[("generic", l + 1) for l in range(bank.depth)],
    )


def save_bank(bank: MemoryBank, path, extra_meta: dict | None = None) -> None:
    meta = {
        "config": asdict(bank.cfg),
        "k": bank.k,
        "dims": bank.dims,
        "bank_meta": bank.meta,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {}
    for l in range(1, bank.depth + 1):
        arrays[f"level{l}"] = bank.levels[l - 1]
    for l in range(1, bank.depth + 1):
        arrays[f"generic.l{l}"] = bank.generic[l - 1]
    fileio.write_artifact(path, BANK_MAGIC, meta, arrays)


def load_bank(path) -> MemoryBank:
    _, meta, arrays = fileio.read_artifact(path, expect_magic=BANK_MAGIC)
    cfg = MemoryConfig(
        mem_type=meta["config"]["mem_type"],
        rs=tuple(meta["config"]["rs"]),
        placement=meta["config"]["placement"],
        masked_policy=meta["config"].get("masked_policy", "generic"),
    )
    depth = cfg.depth
    return MemoryBank(
        cfg=cfg,
        k=meta["k"],
        dims=meta["dims"],
        levels=[arrays[f"level{l}"] for l in range(1, depth + 1)],
        generic=[arrays[f"generic.l{l}"] for l in range(1, depth + 1)],
        meta=meta.get("bank_meta", {}),
    )


def save_bank_shards(bank: MemoryBank, directory) -> list:
    """One shard file per level-1 subtree (bank.l1-<i>.shard).

    Every shard carries a copy of the generic block; merge verifies they
    agree. Shard i holds level-1 row i and, for each deeper level l, the
    contiguous row range of subtree i (k^(l-1) rows).
    """
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(bank.k):
        arrays = {"level1": bank.levels[0][i : i + 1]}
        for l in range(2, bank.depth + 1):
            span = bank.k ** (l - 1)
            arrays[f"level{l}"] = bank.levels[l - 1][i * span : (i + 1) * span]
        for l in range(1, bank.depth + 1):
            arrays[f"generic.l{l}"] = bank.generic[l - 1]
        meta = {
            "config": asdict(bank.cfg),
            "k": bank.k,
            "dims": bank.dims,
            "bank_meta": bank.meta,
            "shard": i,
        }
        p = directory / f"bank.l1-{i + 1}.shard"
        fileio.write_artifact(p, BANK_MAGIC, meta, arrays)
        paths.append(p)
    return paths


def merge_bank_shards(paths) -> MemoryBank:
    """Reassemble a bank from its per-subtree shards (inverse of the split)."""
    shards = []
    for p in paths:
        _, meta, arrays = fileio.read_artifact(p, expect_magic=BANK_MAGIC)
        shards.append((meta, arrays))
    shards.sort(key=lambda s: s[0]["shard"])
    meta0 = shards[0][0]
    cfg = MemoryConfig(
        mem_type=meta0["config"]["mem_type"],
        rs=tuple(meta0["config"]["rs"]),
        placement=meta0["config"]["placement"],
        masked_policy=meta0["config"].get("masked_policy", "generic"),
    )
    k = meta0["k"]
    if len(shards) != k or [m["shard"] for m, _ in shards] != list(range(k)):
        raise BankError(f"expected shards 0..{k - 1}, got {[m['shard'] for m, _ in shards]}")
    depth = cfg.depth
    levels = []
    for l in range(1, depth + 1):
        levels.append(np.concatenate([arrays[f"level{l}"] for _, arrays in shards], axis=0))
    generic = [shards[0][1][f"generic.l{l}"] for l in range(1, depth + 1)]
    for m, arrays in shards[1:]:
        for l in range(1, depth + 1):
            if not np.array_equal(arrays[f"generic.l{l}"], generic[l - 1]):
                raise BankError(f"shard {m['shard']}: generic block disagrees at level {l}")
    return MemoryBank(cfg=cfg, k=k, dims=meta0["dims"], levels=levels, generic=generic, meta=meta0.get("bank_meta", {}))
