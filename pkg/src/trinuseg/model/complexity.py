"""Parameter and FLOP accounting for the tri-decoder network.

Parameters are counted as distinct learnable scalars: weights referenced by
several decoders are counted once.  FLOPs are an analytic
multiply-accumulate count (x2) for one forward pass at a stated input size:
linear layers cost 2*in*out per token, the attention core costs
2*N^2*D per window for the score matrix and the same for applying it, and
the patch-embedding convolution 2*k^2*C_in*C_out per output token.
Normalizations and activations are not counted.  Padded window tokens are
included since they are computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import chain

from .blocks import effective_window
from .config import (
    N_DECODERS,
    SWIN_BOTTLENECK_DEPTH,
    Bottleneck,
    ModelConfig,
)
from .network import TriDecoderNet


@dataclass
class ComplexityReport:
    """Distinct-parameter and forward-FLOP counts, per component."""

    total_params: int
    params_by_component: dict[str, int]
    flops: float = 0.0
    flops_by_component: dict[str, float] = field(default_factory=dict)
    flops_by_kind: dict[str, float] = field(default_factory=dict)
    input_size: int | None = None

    def params_millions(self) -> float:
        return self.total_params / 1e6

    def flops_giga(self) -> float:
        return self.flops / 1e9


def count_parameters(model: TriDecoderNet) -> ComplexityReport:
    """Exact distinct-scalar count with a per-component breakdown.

    Components: encoder (embedding, stages, mergers), bottleneck, the
    globally shared decoder attention weights, the decoders' private
    weights, and the output heads (final expansion + per-branch projection).
    """
    seen: set[int] = set()

    def tally(params) -> int:
        total = 0
        for p in params:
            if id(p) in seen:
                continue
            seen.add(id(p))
            total += p.numel()
        return total

    components: dict[str, int] = {}
    components["encoder"] = tally(chain(
        model.patch_embed.parameters(),
        model.encoder_stages.parameters(),
        model.mergers.parameters(),
    ))
    components["bottleneck"] = tally(model.bottleneck.parameters())
    components["decoder_shared"] = tally(chain.from_iterable(
        g.shared_parameters() for g in model.shared_attention_groups()))
    components["heads"] = tally(chain.from_iterable(
        chain(dec.final_expand.parameters(), dec.head.parameters())
        for dec in model.decoders))
    components["decoder_private"] = tally(model.decoders.parameters())
    total = sum(components.values())
    return ComplexityReport(total_params=total, params_by_component=components)


class _FlopLedger:
    def __init__(self):
        self.by_component: dict[str, float] = {}
        self.by_kind: dict[str, float] = {}

    def add(self, component: str, kind: str, flops: float) -> None:
        self.by_component[component] = self.by_component.get(component, 0.0) + flops
        self.by_kind[kind] = self.by_kind.get(kind, 0.0) + flops

    def total(self) -> float:
        return sum(self.by_component.values())


def _window_block_flops(ledger: _FlopLedger, component: str,
                        side: int, dim: int, window: int) -> None:
    pad = (window - side % window) % window
    hp = side + pad
    padded_tokens = hp * hp
    tokens = side * side
    n_windows = (hp // window) ** 2
    n = window * window
    ledger.add(component, "linear", 2.0 * padded_tokens * dim * 3 * dim)  # qkv
    ledger.add(component, "attention", 2.0 * n_windows * n * n * dim)     # scores
    ledger.add(component, "attention", 2.0 * n_windows * n * n * dim)     # apply
    ledger.add(component, "linear", 2.0 * padded_tokens * dim * dim)      # out proj
    ledger.add(component, "linear", 2.0 * tokens * dim * 4 * dim * 2)     # mlp


def estimate_flops(model: TriDecoderNet,
                   input_size: int | None = None) -> ComplexityReport:
    """Analytic forward-pass FLOPs at ``input_size`` (defaults to the config's).

    Attention sharing does not change the count: the computation graph has
    the same shape whether head weights are shared or private.
    """
    config = model.config
    if input_size is None:
        input_size = config.input_size
    div = config.patch_size * (2 ** config.n_stages)
    if input_size % div != 0:
        raise ValueError(
            f"input_size must be divisible by patch_size * 2^n_stages = {div}, "
            f"got {input_size}")

    ledger = _FlopLedger()
    s0 = input_size // config.patch_size
    ledger.add("encoder", "embed",
               2.0 * s0 * s0 * config.in_channels
               * config.patch_size ** 2 * config.embed_dim)

    for k in range(config.n_stages):
        dim = config.stage_dim(k)
        side = config.stage_side(k, input_size)
        window = effective_window(side, config.window_size)
        for _ in range(config.encoder_depths[k]):
            _window_block_flops(ledger, "encoder", side, dim, window)
        merged = side // 2
        ledger.add("encoder", "linear", 2.0 * merged * merged * 4 * dim * 2 * dim)

    bdim = config.bottleneck_dim
    bside = config.bottleneck_side(input_size)
    if config.bottleneck is Bottleneck.TOKEN_MLP:
        ledger.add("bottleneck", "linear",
                   3 * 2.0 * bside * bside * bdim * bdim)
    else:
        bwindow = effective_window(bside, config.window_size)
        for _ in range(SWIN_BOTTLENECK_DEPTH):
            _window_block_flops(ledger, "bottleneck", bside, bdim, bwindow)

    for k in range(config.n_stages):
        dim = config.stage_dim(k)
        side = config.stage_side(k, input_size)
        window = effective_window(side, config.window_size)
        upper_dim = config.stage_dim(k + 1)
        upper_side = side // 2
        per_decoder = _FlopLedger()
        per_decoder.add("decoders", "linear",
                        2.0 * upper_side * upper_side * upper_dim * 2 * upper_dim)
        per_decoder.add("decoders", "linear", 2.0 * side * side * 2 * dim * dim)
        for _ in range(config.decoder_depths[k]):
            _window_block_flops(per_decoder, "decoders", side, dim, window)
        for kind, val in per_decoder.by_kind.items():
            ledger.add("decoders", kind, N_DECODERS * val)

    side = config.stage_side(0, input_size)
    dim = config.embed_dim
    head_flops = 0.0
    p = config.patch_size
    while p > 1:
        head_flops += 2.0 * side * side * dim * 2 * dim
        side *= 2
        dim //= 2
        p //= 2
    head_flops += 2.0 * side * side * dim * config.num_classes_per_branch
    ledger.add("heads", "linear", N_DECODERS * head_flops)

    report = count_parameters(model)
    report.flops = ledger.total()
    report.flops_by_component = ledger.by_component
    report.flops_by_kind = ledger.by_kind
    report.input_size = input_size
    return report


# Paper-style ablation rows, heaviest first: the four MLP x AS combinations.
ABLATION_COMPLEXITY_ROWS = (
    ("wo_mlp_wo_as", False, False),
    ("wo_mlp", False, True),
    ("wo_as", True, False),
    ("full", True, True),
)


def complexity_grid(config: ModelConfig,
                    input_size: int | None = None) -> list[dict]:
    """Params/FLOPs for the four bottleneck x sharing combinations."""
    from .network import build_model

    rows = []
    for name, mlp, sharing in ABLATION_COMPLEXITY_ROWS:
        variant = config.with_toggles(mlp=mlp, sharing=sharing)
        model = build_model(variant, seed=0)
        report = estimate_flops(model, input_size)
        rows.append({
            "name": name,
            "mlp": mlp,
            "attention_sharing": sharing,
            "params": report.total_params,
            "params_millions": report.params_millions(),
            "flops": report.flops,
            "flops_giga": report.flops_giga(),
            "input_size": report.input_size,
        })
    return rows


def format_complexity_table(rows: list[dict]) -> str:
    header = f"{'variant':<16} {'MLP':<5} {'AS':<5} {'params(M)':>10} {'GFLOPs':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row['name']:<16} {str(row['mlp']):<5} "
            f"{str(row['attention_sharing']):<5} "
            f"{row['params_millions']:>10.3f} {row['flops_giga']:>10.2f}"
        )
    return "\n".join(lines)
