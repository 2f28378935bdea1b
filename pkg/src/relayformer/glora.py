"""Global-Local Relay Attention blocks and the stacked backbone.

Each block runs ordinary pre-norm self-attention plus MLP inside every unit
over ``[relay tokens; patch tokens]``, then a global self-attention round
over the relay tokens of all units. Both attention rounds share the same
projection weights; two LoRA adapter sets (``local`` and ``global``) let
the rounds diverge cheaply.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from relayformer.config import ModelConfig
from relayformer.errors import ShapeError
from relayformer.nn import LayerNorm, Linear, LoraAdapter, Module, make_rng
from relayformer.numerics import Tensor, concat, gelu, softmax_rows
from relayformer.rope import RopeConfig, angles_4d, apply_rotary, relay_positions
from relayformer.tiling import UnitGrid

PROJECTIONS = ("q", "k", "v", "o")


def lora_linear(x: Tensor, base: Linear, adapter: LoraAdapter | None = None) -> Tensor:
    """``x @ (W + scale * A @ B) + b``, computed without materializing the sum."""
    y = base(x)
    if adapter is None:
        return y
    if adapter.A.shape[0] != base.d_in or adapter.B.shape[1] != base.d_out:
        raise ShapeError("adapter shape does not match its base layer")
    return y + ((x @ adapter.A) @ adapter.B) * adapter.scale


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, d = x.shape
    return x.reshape(*lead, s, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, hd = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, s, h * hd)


def _head_angles(angles: np.ndarray | None) -> np.ndarray | None:
    # (..., S, hd/2) -> (..., 1, S, hd/2) so it broadcasts over heads
    if angles is None or angles.ndim == 2:
        return angles
    return angles[..., None, :, :]


def multihead_attention(
    xq: Tensor,
    xkv: Tensor,
    proj: dict[str, Linear],
    heads: int,
    adapters: dict[str, LoraAdapter] | None = None,
    angles_q: np.ndarray | None = None,
    angles_k: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention with optional rotary angles on q and k."""
    adapters = adapters or {}
    q = _split_heads(lora_linear(xq, proj["q"], adapters.get("q")), heads)
    k = _split_heads(lora_linear(xkv, proj["k"], adapters.get("k")), heads)
    v = _split_heads(lora_linear(xkv, proj["v"], adapters.get("v")), heads)
    if angles_q is not None:
        q = apply_rotary(q, _head_angles(angles_q))
    if angles_k is not None:
        k = apply_rotary(k, _head_angles(angles_k))
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = softmax_rows((q @ k.swapaxes(-1, -2)) * scale)
    out = _merge_heads(weights @ v)
    return lora_linear(out, proj["o"], adapters.get("o"))


class GloraBlock(Module):
    """Parameters of one block.

    ``ln1``/``attn``/``ln2``/``fc1``/``fc2`` are the backbone weights shared by
    both attention rounds. ``lora_local``, ``lora_global`` and ``ln_global``
    exist only on relay blocks and count as added parameters.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, relay: bool):
        dt = np.dtype(np.float32 if cfg.dtype == "f32" else np.float64)
        d = cfg.dim
        self.ln1 = LayerNorm(d, dt)
        self.attn = {p: Linear(d, d, rng, dt) for p in PROJECTIONS}
        self.ln2 = LayerNorm(d, dt)
        self.fc1 = Linear(d, cfg.mlp_dim, rng, dt)
        self.fc2 = Linear(cfg.mlp_dim, d, rng, dt)
        self._heads = cfg.heads
        self._relay = relay
        if relay and cfg.lora_rank > 0:
            self.lora_local = {p: LoraAdapter(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt) for p in PROJECTIONS}
            self.lora_global = {p: LoraAdapter(d, d, cfg.lora_rank, cfg.lora_alpha, rng, dt) for p in PROJECTIONS}
        if relay:
            self.ln_global = LayerNorm(d, dt)

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def is_relay(self) -> bool:
        return self._relay

    def adapters(self, mode: str) -> dict[str, LoraAdapter] | None:
        return getattr(self, f"lora_{mode}", None)


def local_attention(unit_tokens: Tensor, block: GloraBlock, mode: str = "local") -> Tensor:
    """Pre-norm attention and MLP residual blocks over each unit's tokens.

    ``unit_tokens`` is ``[..., n + N, d]`` with relay tokens first.
    """
    adapters = block.adapters(mode) if block.is_relay else None
    h = block.ln1(unit_tokens)
    x = unit_tokens + multihead_attention(h, h, block.attn, block.heads, adapters)
    h = block.ln2(x)
    return x + block.fc2(gelu(block.fc1(h)))


def global_relay_attention(relay: Tensor, angles: np.ndarray, block: GloraBlock, mode: str = "global") -> Tensor:
    """Pre-norm residual attention across the relay tokens of all units.

    ``relay`` is ``[..., M, n, d]``; ``angles`` are the 4D rotary angles of the
    flattened ``M * n`` tokens, ``[..., M*n, head_dim/2]``.
    """
    *lead, m, n, d = relay.shape
    if angles.shape[-2] != m * n:
        raise ShapeError(f"{angles.shape[-2]} relay positions for {m}x{n} relay tokens")
    flat = relay.reshape(*lead, m * n, d)
    ln = block.ln_global if block.is_relay else block.ln1
    h = ln(flat)
    out = flat + multihead_attention(
        h, h, block.attn, block.heads, block.adapters(mode), angles_q=angles, angles_k=angles
    )
    return out.reshape(*lead, m, n, d)


def glora_block(
    patches: Tensor,
    relay: Tensor | None,
    block: GloraBlock,
    angles: np.ndarray | None,
    global_step: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """One block: local round on ``[T_i; X_i]`` per unit, then the relay round.

    Patch tokens only see the local round; relay tokens see both.
    """
    if relay is None or relay.shape[-2] == 0:
        return local_attention(patches, block), relay
    n = relay.shape[-2]
    joint = local_attention(concat([relay, patches], axis=-2), block)
    relay, patches = joint[..., :n, :], joint[..., n:, :]
    if global_step and block.is_relay:
        relay = global_relay_attention(relay, angles, block)
    return patches, relay


def patchify(units: Tensor, patch_size: int) -> Tensor:
    """``[..., M, P, P, C]`` pixels to ``[..., M, N, patch_size*patch_size*C]`` rows."""
    *lead, m, p, p2, c = units.shape
    if p != p2 or p % patch_size:
        raise ShapeError(f"units of {p}x{p2} cannot be cut into {patch_size}px patches")
    g = p // patch_size
    x = units.reshape(*lead, m, g, patch_size, g, patch_size, c)
    nl = len(lead)
    order = tuple(range(nl)) + tuple(nl + i for i in (0, 1, 3, 2, 4, 5))
    return x.transpose(order).reshape(*lead, m, g * g, patch_size * patch_size * c)


class RelayBackbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = make_rng(cfg.init_seed) if rng is None else rng
        dt = np.dtype(np.float32 if cfg.dtype == "f32" else np.float64)
        self._cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.dim, rng, dt)
        self.pos_embed = Tensor(rng.normal(0.0, 0.02, size=(cfg.patches_per_unit, cfg.dim)).astype(dt), requires_grad=True)
        if cfg.n_relay:
            self.relay_tokens = Tensor(rng.normal(0.0, 0.02, size=(cfg.n_relay, cfg.dim)).astype(dt), requires_grad=True)
        self.blocks = [GloraBlock(cfg, rng, cfg.is_relay_layer(i)) for i in range(cfg.depth)]
        self._rope = RopeConfig(cfg.head_dim, cfg.rope_base)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def rope(self) -> RopeConfig:
        return self._rope

    def relay_angles(self, positions: np.ndarray) -> np.ndarray:
        return angles_4d(positions, self._rope)


def relay_angles_for(grids: UnitGrid | Sequence[UnitGrid], backbone: RelayBackbone) -> np.ndarray:
    """Rotary angle table for one grid ``[M*n, hd/2]`` or a batch ``[B, M*n, hd/2]``."""
    n = backbone.config.n_relay
    if isinstance(grids, UnitGrid):
        return backbone.relay_angles(relay_positions(grids, n))
    tables = [relay_positions(g, n) for g in grids]
    if len({t.shape for t in tables}) != 1:
        raise ShapeError("batched grids must share the unit count")
    return backbone.relay_angles(np.stack(tables))


def embed_units(units: Tensor, backbone: RelayBackbone) -> Tensor:
    cfg = backbone.config
    tokens = backbone.patch_embed(patchify(units, cfg.patch_size))
    return tokens + backbone.pos_embed


def backbone_forward(
    units: Tensor,
    grid: UnitGrid | Sequence[UnitGrid],
    backbone: RelayBackbone,
    global_step: bool | None = None,
    positions: np.ndarray | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Run the backbone on pixel units ``[..., M, P, P, C]``.

    Returns ``(X, T)`` with ``X`` of shape ``[..., M, N, d]`` and ``T`` of
    shape ``[..., M, n, d]`` (``None`` when there are no relay tokens).
    ``positions`` overrides the (tok, x, y, t) table derived from ``grid``.
    """
    cfg = backbone.config
    if not isinstance(units, Tensor):
        units = Tensor(units)
    if units.shape[-3:] != (cfg.unit_size, cfg.unit_size, cfg.in_channels):
        raise ShapeError(f"units of shape {units.shape[-3:]} do not match the config")
    expected = grid.total_units if isinstance(grid, UnitGrid) else grid[0].total_units
    m = units.shape[-4]
    if m != expected:
        raise ShapeError(f"{m} units given but the grid has {expected}")
    global_step = cfg.global_attention if global_step is None else global_step

    x = embed_units(units, backbone)
    relay = None
    angles = None
    if cfg.n_relay:
        lead = units.shape[:-3]
        relay = backbone.relay_tokens.broadcast_to(lead + (cfg.n_relay, cfg.dim))
        if positions is not None:
            angles = backbone.relay_angles(positions)
        else:
            angles = relay_angles_for(grid, backbone)
    for block in backbone.blocks:
        x, relay = glora_block(x, relay, block, angles, global_step)
    return x, relay
