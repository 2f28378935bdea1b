"""Analytic multiply-accumulate and parameter counts.

Counting convention (shared with :func:`relayformer.numerics.count_macs`):
a matrix product ``[M, K] @ [K, N]`` costs ``M*K*N``; softmax, layer norm,
GELU and sigmoid cost one unit per output element; additions, scaling and
rotary rotations are free. Reported FLOPs are ``2 * MACs``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from relayformer.config import ModelConfig
from relayformer.decoder import decoder_flops
from relayformer.tiling import compute_unit_grid, feature_extent


def local_unit_macs(tokens: int, d: int, h: int, d_ff: int, rank: int) -> int:
    """One unit through pre-norm attention and MLP with ``tokens`` = N + n."""
    s = tokens
    attn = 4 * s * d * d + 2 * s * s * d + h * s * s
    lora = 4 * 2 * s * d * rank
    mlp = 2 * s * d * d_ff + s * d_ff
    norms = 2 * s * d
    return attn + lora + mlp + norms


def global_relay_macs(relay_tokens: int, d: int, h: int, rank: int) -> int:
    """Relay round over ``relay_tokens`` = M * n tokens."""
    g = relay_tokens
    return g * d + 4 * g * d * d + 8 * g * d * rank + 2 * g * g * d + h * g * g


def glora_cost(
    M: int,
    N: int,
    n: int,
    d: int,
    L: int,
    h: int,
    rank: int = 8,
    d_ff: int | None = None,
    relay_layers: list[int] | None = None,
    global_attention: bool = True,
) -> dict[str, int]:
    """MACs of ``L`` GLoRA blocks over ``M`` units of ``N`` patches and ``n`` relay tokens.

    The attention terms scale as ``M * (N + n)^2 * d`` (local) and
    ``(M * n)^2 * d`` (global); the rest is linear in token count.
    """
    d_ff = 4 * d if d_ff is None else d_ff
    local = glob = quadratic_global = 0
    for layer in range(L):
        relay = relay_layers is None or layer in relay_layers
        r = rank if relay else 0
        local += M * local_unit_macs(N + n, d, h, d_ff, r)
        if relay and n and global_attention:
            g = M * n
            glob += global_relay_macs(g, d, h, rank)
            quadratic_global += 2 * g * g * d + h * g * g
    return {
        "local": local,
        "global": glob,
        "global_quadratic": quadratic_global,
        "total": local + glob,
    }


@dataclass
class CostReport:
    patch_embed: int
    glora_local: int
    glora_global: int
    glora_global_quadratic: int
    decoder: int
    params_backbone: int
    params_added: int
    units: int
    one_shot: bool
    breakdown: dict = field(default_factory=dict)

    @property
    def backbone(self) -> int:
        return self.patch_embed + self.glora_local + self.glora_global

    @property
    def total(self) -> int:
        return self.backbone + self.decoder

    @property
    def flops(self) -> int:
        return 2 * self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(backbone=self.backbone, total=self.total, flops=self.flops,
                 gflops=self.flops / 1e9, params_ratio=self.params_added / self.params_backbone)
        return d


def cost_report(cfg: ModelConfig, height: int, width: int, clip_len: int = 1, one_shot: bool = True) -> CostReport:
    """Per-forward cost of the full model on one clip."""
    grid = compute_unit_grid(height, width, cfg.unit_size, clip_len)
    m = grid.total_units
    n_patch = cfg.patches_per_unit
    embed = m * n_patch * cfg.patch_dim * cfg.dim
    core = glora_cost(
        m, n_patch, cfg.n_relay, cfg.dim, cfg.depth, cfg.heads, cfg.lora_rank,
        cfg.mlp_dim, cfg.relay_layers, cfg.global_attention,
    )
    h_f, w_f = feature_extent(grid, cfg.patch_size)
    dec = decoder_flops(clip_len, h_f, w_f, cfg)
    backbone_params, added = param_count(cfg)
    return CostReport(
        patch_embed=embed,
        glora_local=core["local"],
        glora_global=core["global"],
        glora_global_quadratic=core["global_quadratic"],
        decoder=dec.one_shot if one_shot else dec.per_frame_mode,
        params_backbone=backbone_params,
        params_added=added,
        units=m,
        one_shot=one_shot,
        breakdown={"decoder_one_shot": dec.one_shot, "decoder_per_frame": dec.per_frame_mode},
    )


def param_count(cfg: ModelConfig) -> tuple[int, int]:
    """(backbone, added) parameter counts from the configuration alone.

    Added parameters are the relay tokens, both LoRA adapter sets, the relay
    round's layer norm, and the whole mask decoder.
    """
    d, d_ff, dl = cfg.dim, cfg.mlp_dim, cfg.d_low
    block = 2 * 2 * d + 4 * (d * d + d) + (d * d_ff + d_ff) + (d_ff * d + d)
    backbone = (cfg.patch_dim * d + d) + cfg.patches_per_unit * d + cfg.depth * block

    relay_blocks = cfg.depth if cfg.relay_layers is None else len(cfg.relay_layers)
    lora = 2 * 4 * (2 * d * cfg.lora_rank) if cfg.lora_rank else 0
    added = cfg.n_relay * d + relay_blocks * (lora + 2 * d)

    layer = (
        2 * d + (d * d + d) + 2 * (dl * d + d) + (d * d + d)
        + 2 * d + 4 * (d * d + d)
    )
    heads = 2 * d + (d * d + d) + (d + 1) + (d * d + d) + (d * dl + dl)
    added += cfg.num_queries * d + (d * dl + dl) + cfg.decoder_layers * layer + heads
    return backbone, added
