"""Closed-form parameter and FLOPs accounting over model shape records.

One multiply-accumulate counts as 2 FLOPs. The per-term formulas are listed
in docs/flops.md; estimates deliberately skip normalization, softmax and
rotary arithmetic (sub-percent at every shape of interest).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .tensor import ParameterError


@dataclass(frozen=True)
class LayerShape:
    n_heads: int
    d_ffn: int


@dataclass(frozen=True)
class ShapeRecord:
    """Everything the accounting formulas need to size a model."""
    d_model: int
    vocab_size: int
    head_dim: int
    layers: tuple
    n_visual_tokens: int
    d_vision: int
    d_descriptor: int
    ffn_matrices: int = 2
    vision_flops_override: float | None = None

    @property
    def n_layers(self):
        return len(self.layers)


def shape_of(model):
    cfg = model.config
    return ShapeRecord(
        d_model=cfg.d_model,
        vocab_size=cfg.vocab_size,
        head_dim=cfg.head_dim,
        layers=tuple(LayerShape(nh, ff) for nh, ff in model.layer_shapes()),
        n_visual_tokens=cfg.n_visual_tokens,
        d_vision=cfg.d_vision,
        d_descriptor=cfg.d_descriptor,
    )


def shape_of_config(config):
    return ShapeRecord(
        d_model=config.d_model,
        vocab_size=config.vocab_size,
        head_dim=config.head_dim,
        layers=tuple(LayerShape(config.n_heads, config.d_ffn)
                     for _ in range(config.n_layers)),
        n_visual_tokens=config.n_visual_tokens,
        d_vision=config.d_vision,
        d_descriptor=config.d_descriptor,
    )


def layer_param_count(shape, layer):
    d = shape.d_model
    attn = 4 * d * layer.n_heads * shape.head_dim
    mlp = shape.ffn_matrices * d * layer.d_ffn
    norms = 2 * d
    return attn + mlp + norms


def decoder_param_count(shape):
    """Prunable decoder mass: transformer-block parameters only."""
    return sum(layer_param_count(shape, layer) for layer in shape.layers)


def param_counts(shape):
    """Closed-form parameter counts per scope."""
    d = shape.d_model
    counts = {
        "vision": shape.d_descriptor * shape.n_visual_tokens * shape.d_vision,
        "projector": shape.d_vision * d + d + d * d + d,
        "embedding": shape.vocab_size * d,
        "decoder-blocks": decoder_param_count(shape),
        "final-norm": d,
        "head": d * shape.vocab_size,
    }
    counts["total"] = (counts["vision"] + counts["projector"] + counts["embedding"]
                       + counts["decoder-blocks"] + counts["final-norm"] + counts["head"])
    return counts


def count_params(model, scope="total"):
    """Count live parameters of a model; scope names follow param_partition,
    plus "decoder-blocks" (all layers) and "total"."""
    from .model import param_partition

    part = param_partition(model)
    if scope == "total":
        names = [n for group in part.values() for n in group]
    elif scope == "decoder-blocks":
        names = [n for s, group in part.items() if s.startswith("decoder-layer-") for n in group]
    elif scope in part:
        names = part[scope]
    else:
        raise ParameterError(f"unknown scope {scope!r}")
    by_name = dict(model.named_parameters())
    return sum(int(by_name[n].data.size) for n in names)


def layer_flops(shape, layer, seq_len):
    d = shape.d_model
    width = layer.n_heads * shape.head_dim
    attn_proj = 2 * seq_len * 4 * d * width
    attn_scores = 2 * seq_len * seq_len * width
    mlp = 2 * seq_len * shape.ffn_matrices * d * layer.d_ffn
    return attn_proj + attn_scores + mlp


def transformer_stack_flops(n_layers, d_model, n_heads, head_dim, d_ffn, seq_len,
                            ffn_matrices=2):
    """Blocks-only FLOPs for a plain stack (used for vision-tower estimates)."""
    layer = LayerShape(n_heads, d_ffn)
    shape = ShapeRecord(d_model=d_model, vocab_size=1, head_dim=head_dim,
                        layers=(layer,) * n_layers, n_visual_tokens=1,
                        d_vision=1, d_descriptor=1, ffn_matrices=ffn_matrices)
    return sum(layer_flops(shape, l, seq_len) for l in shape.layers)


def estimate_flops(shape, seq_len):
    """Forward-pass FLOPs for one sequence of seq_len tokens."""
    if seq_len < 1:
        raise ParameterError("seq_len must be >= 1")
    d = shape.d_model
    blocks = sum(layer_flops(shape, layer, seq_len) for layer in shape.layers)
    head = 2 * seq_len * d * shape.vocab_size
    projector = 2 * shape.n_visual_tokens * (shape.d_vision * d + d * d)
    if shape.vision_flops_override is not None:
        vision = shape.vision_flops_override
    else:
        vision = 2 * shape.d_descriptor * shape.n_visual_tokens * shape.d_vision
    return blocks + head + projector + vision


def scale_shape_widthwise(shape, ratio):
    """Predict the per-layer shape after removing `ratio` of block params widthwise.

    Heads scale proportionally; the ffn width absorbs head-rounding so each
    layer's parameter count lands as close to (1-ratio) of the original as
    integer granularity allows. Floors: >= 1 head, >= head_dim channels.
    """
    if not (0 < ratio < 1):
        raise ParameterError(f"ratio must be in (0,1), got {ratio}")
    d = shape.d_model
    new_layers = []
    for layer in shape.layers:
        total = layer_param_count(shape, layer)
        prunable = total - 2 * d
        target_prunable = prunable - ratio * total
        nh = max(1, round(layer.n_heads * (1 - ratio)))
        attn = 4 * d * nh * shape.head_dim
        ffn = round((target_prunable - attn) / (shape.ffn_matrices * d))
        ffn = max(shape.head_dim, ffn)
        new_layers.append(LayerShape(nh, ffn))
    return replace(shape, layers=tuple(new_layers))


def scale_shape_layerwise(shape, ratio):
    """Predict the shape after removing the fewest whole layers reaching `ratio`."""
    if not (0 < ratio < 1):
        raise ParameterError(f"ratio must be in (0,1), got {ratio}")
    total = decoder_param_count(shape)
    sizes = [layer_param_count(shape, layer) for layer in shape.layers]
    removed = 0
    kept = list(shape.layers)
    # Uniform-importance assumption: drop from the front, never the last layer.
    i = 0
    while removed < ratio * total and len(kept) > 1 and i < len(sizes) - 1:
        removed += sizes[i]
        kept.pop(0)
        i += 1
    return replace(shape, layers=tuple(kept))


def llava_7b_shape():
    """Reference 7B-scale shape used by the FLOPs anchor checks.

    The decoder mirrors a Vicuna-7B stack (gated 3-matrix MLP); the vision
    term is a ViT-L/14-336-shaped tower (24 layers, d=1024, 16 heads,
    ffn=4096, 577 tokens) costed with the same per-layer formula.
    """
    vision = transformer_stack_flops(
        n_layers=24, d_model=1024, n_heads=16, head_dim=64, d_ffn=4096,
        seq_len=577, ffn_matrices=2)
    return ShapeRecord(
        d_model=4096, vocab_size=32000, head_dim=128,
        layers=(LayerShape(32, 11008),) * 32,
        n_visual_tokens=576, d_vision=1024, d_descriptor=1024,
        ffn_matrices=3, vision_flops_override=float(vision))
