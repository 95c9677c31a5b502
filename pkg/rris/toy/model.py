"""Desk-scale referring segmentation model.

A strided patch-embedding vision stub yields four feature stages (strides 4,
8, 16 and 32). Stages 2 to 4 are fused with language by a VLTF each, and the
next stage consumes ``raw + standardize(fused)``. An FPN-style top-down
decoder produces 2-channel score maps per level, and a binary head decides
whether the referred object exists at all.

Feature maps are [N, H, W, C] on the spatial side and [N, H*W, C] when they
enter attention.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from rris.config import ModelConfig
from rris.errors import ModelError
from rris.masks import BinaryMask
from rris.toy import autograd as ag
from rris.toy.autograd import Var
from rris.toy.layers import (
    Linear,
    MhcaParams,
    VltfParams,
    init_linear,
    init_mhca,
    init_vltf,
    linear,
    mhca,
    standardize,
    vltf_forward,
)

FIRST_PATCH = 4
FUSED_STAGES = (2, 3, 4)


@dataclass
class ToyModelParams:
    stages: List[Linear]
    word_embedding: np.ndarray
    position_embedding: np.ndarray
    vltfs: List[VltfParams]
    laterals: List[Linear]
    mask_heads: List[Linear]
    head_attention: MhcaParams
    head_out: Linear


@dataclass
class ForwardTrace:
    image_size: int
    stages: List[Var] = field(default_factory=list)
    fused: List[Var] = field(default_factory=list)
    cond_tokens: List[Var] = field(default_factory=list)
    blank_tokens: List[Var] = field(default_factory=list)
    tokens_last: Optional[Var] = None
    features: List[Var] = field(default_factory=list)
    masks: List[Var] = field(default_factory=list)
    e_hat: Optional[Var] = None
    attention: Dict[str, Var] = field(default_factory=dict)


def init_params(config: ModelConfig) -> ToyModelParams:
    rng = np.random.default_rng(config.seed)
    scale = config.init_scale
    c = config.stage_channels

    stages = [init_linear(rng, FIRST_PATCH * FIRST_PATCH * config.in_channels, c[0], scale)]
    stages += [init_linear(rng, 4 * c[i - 1], c[i], scale) for i in range(1, 4)]

    vltfs = [
        init_vltf(
            rng,
            vision_dim=c[stage - 1],
            language_dim=config.language_dim,
            dim=config.fusion_dim,
            heads=config.fusion_heads,
            memory_tokens=config.memory_tokens,
            blank_tokens=config.blank_tokens,
            scale=scale,
        )
        for stage in FUSED_STAGES
    ]

    if config.query_mode == "V":
        head_attention = init_mhca(
            rng, config.decoder_dim, config.fusion_dim, config.decoder_dim, config.decoder_dim, config.head_heads, scale
        )
    else:
        head_attention = init_mhca(
            rng, config.fusion_dim, config.decoder_dim, config.decoder_dim, config.decoder_dim, config.head_heads, scale
        )

    return ToyModelParams(
        stages=stages,
        word_embedding=rng.normal(0.0, scale, (config.vocab_size, config.language_dim)),
        position_embedding=rng.normal(0.0, scale, (config.max_text_len, config.language_dim)),
        vltfs=vltfs,
        laterals=[init_linear(rng, c[i], config.decoder_dim, scale) for i in range(4)],
        mask_heads=[init_linear(rng, config.decoder_dim, 2, scale) for _ in range(4)],
        head_attention=head_attention,
        head_out=init_linear(rng, config.decoder_dim, 1, scale),
    )


def _flat(x: Var) -> Var:
    n, h, w, c = x.shape
    return ag.reshape(x, (n, h * w, c))


def _spatial(x: Var, side: int) -> Var:
    n, _, c = x.shape
    return ag.reshape(x, (n, side, side, c))


def encode_language(params: ToyModelParams, token_ids: np.ndarray, max_len: int) -> Var:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 2 or token_ids.shape[1] == 0:
        raise ModelError(f"token ids must be a non-empty [N, T] array, got shape {token_ids.shape}", code="shape-mismatch")
    length = token_ids.shape[1]
    if length > max_len:
        raise ModelError(f"{length} tokens exceed the limit of {max_len}", code="token-overflow")
    words = ag.embed(ag.as_var(params.word_embedding), token_ids)
    positions = ag.embed(ag.as_var(params.position_embedding), np.arange(length))
    return words + positions


def encoder_forward(params: ToyModelParams, config: ModelConfig, images: np.ndarray, token_ids: np.ndarray) -> ForwardTrace:
    """Vision stages with language fusion after stages 2, 3 and 4."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != config.in_channels:
        raise ModelError(f"images must be [N, H, W, {config.in_channels}], got {images.shape}", code="shape-mismatch")
    n, height, width, _ = images.shape
    if height != width or height % 32:
        raise ModelError(f"image side must be square and divisible by 32, got {height}x{width}", code="shape-mismatch")
    if np.asarray(token_ids).shape[0] != n:
        raise ModelError("one token sequence per image is required", code="shape-mismatch")

    language = encode_language(params, token_ids, config.max_text_len)
    trace = ForwardTrace(image_size=height)

    x = ag.space_to_depth(ag.as_var(images), FIRST_PATCH)
    side = height // FIRST_PATCH
    raw = ag.tanh(_flat(linear(x, params.stages[0])))
    trace.stages.append(raw)

    for stage in FUSED_STAGES:
        # Stage i+1 reads the raw stage-i feature plus the normalized fusion output
        if stage == 2:
            stage_input = trace.stages[-1]
        else:
            stage_input = trace.stages[-1] + standardize(trace.fused[-1], config.norm_eps)
        x = ag.space_to_depth(_spatial(stage_input, side), 2)
        side //= 2
        raw = ag.tanh(_flat(linear(x, params.stages[stage - 1])))
        trace.stages.append(raw)

        out = vltf_forward(params.vltfs[stage - 2], raw, language)
        trace.fused.append(out.fused)
        trace.cond_tokens.append(out.cond_tokens)
        trace.blank_tokens.append(out.blank_tokens)
        for name, attn in out.attention.items():
            trace.attention[f"vltf{stage}.{name}"] = attn
        if stage == 4:
            trace.tokens_last = out.tokens

    return trace


def fpn_decode(params: ToyModelParams, v1: Var, f2: Var, f3: Var, f4: Var):
    """Top-down pathway from the coarsest fused feature to V_1's resolution.

    Returns (S_1..S_4, M_1..M_4) as [N, H, W, C] maps, finest first.
    """
    levels = [v1, f2, f3, f4]
    sides = []
    for level in levels:
        side = int(round(np.sqrt(level.shape[1])))
        if side * side != level.shape[1]:
            raise ModelError(f"feature with {level.shape[1]} positions is not square", code="shape-mismatch")
        sides.append(side)
    for finer, coarser in zip(sides, sides[1:]):
        if finer != 2 * coarser:
            raise ModelError(f"decoder levels {sides} are not successive x2 scales", code="shape-mismatch")

    laterals = [_spatial(linear(level, lat), side) for level, lat, side in zip(levels, params.laterals, sides)]
    features = [laterals[3]]
    for lateral in reversed(laterals[:3]):
        features.insert(0, lateral + ag.upsample2x(features[0]))
    masks = [linear(s, head) for s, head in zip(features, params.mask_heads)]
    return features, masks


def binary_head(params: ToyModelParams, s1: Var, tokens: Var, query_mode: str = "V"):
    """Existence probability from decoder features and the last VLTF tokens.

    Mode "V" lets the finest decoder feature query the tokens, mode "T" the
    reverse. The attended sequence is mean-pooled before the output unit.
    """
    s1 = _flat(s1) if s1.ndim == 4 else s1
    if query_mode == "V":
        attended, attention = mhca(params.head_attention, s1, tokens, tokens)
    elif query_mode == "T":
        attended, attention = mhca(params.head_attention, tokens, s1, s1)
    else:
        raise ModelError(f"unknown query mode {query_mode!r}", code="shape-mismatch")
    pooled = ag.mean(attended, axis=1)
    logit = linear(pooled, params.head_out)
    e_hat = ag.sigmoid(ag.reshape(logit, (logit.shape[0],)))
    return e_hat, attention


def forward(params: ToyModelParams, config: ModelConfig, images: np.ndarray, token_ids: np.ndarray) -> ForwardTrace:
    trace = encoder_forward(params, config, images, token_ids)
    features, masks = fpn_decode(params, trace.stages[0], *trace.fused)
    trace.features = features
    trace.masks = masks
    trace.e_hat, trace.attention["head"] = binary_head(params, features[0], trace.tokens_last, config.query_mode)
    return trace


def downsample_majority(gt: np.ndarray, factor: int) -> np.ndarray:
    """[N, H, W] bool -> [N, H/f, W/f]; a cell is foreground when at least half its pixels are."""
    n, h, w = gt.shape
    if h % factor or w % factor:
        raise ModelError(f"{h}x{w} mask cannot be pooled by {factor}", code="shape-mismatch")
    counts = gt.reshape(n, h // factor, factor, w // factor, factor).sum(axis=(2, 4))
    return 2 * counts >= factor * factor


def cross_entropy(scores: Var, target: np.ndarray) -> Var:
    """Mean per-pixel 2-class cross entropy of [N, H, W, 2] scores against a bool map."""
    if scores.shape[:-1] != target.shape or scores.shape[-1] != 2:
        raise ModelError(f"scores {scores.shape} do not match target {target.shape}", code="shape-mismatch")
    onehot = np.stack([~target, target], axis=-1).astype(np.float64)
    logp = ag.log_softmax(scores, axis=-1)
    return -ag.sum_(logp * onehot) * (1.0 / target.size)


def seg_loss(masks: Sequence[Var], gt: np.ndarray, image_size: int, weight: float) -> Var:
    """CE on M_1 plus ``weight`` times the CE of the coarser maps."""
    gt = np.asarray(gt, dtype=bool)
    if gt.ndim == 2:
        gt = gt[None]
    if gt.shape[1:] != (image_size, image_size):
        raise ModelError(f"ground truth {gt.shape} does not match image size {image_size}", code="shape-mismatch")

    losses = []
    for m in masks:
        factor = image_size // m.shape[1]
        losses.append(cross_entropy(m, downsample_majority(gt, factor)))
    auxiliary = losses[1]
    for loss in losses[2:]:
        auxiliary = auxiliary + loss
    return losses[0] + weight * auxiliary


def exist_loss(e_hat, exists) -> Var:
    """Binary cross entropy, averaged over the batch."""
    e_hat = ag.as_var(e_hat)
    exists = np.asarray(exists, dtype=np.float64).reshape(e_hat.shape)
    terms = exists * ag.log(e_hat) + (1.0 - exists) * ag.log(1.0 - e_hat)
    return -ag.mean(terms)


def total_loss(seg: Var, exist: Var, weight: float) -> Var:
    return seg + weight * exist


def model_loss(params: ToyModelParams, config: ModelConfig, images, token_ids, gt, exists) -> Var:
    trace = forward(params, config, images, token_ids)
    ls = seg_loss(trace.masks, gt, trace.image_size, config.seg_weight)
    le = exist_loss(trace.e_hat, exists)
    return total_loss(ls, le, config.exist_weight)


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def predict_mask(trace: ForwardTrace, index: int = 0) -> BinaryMask:
    """Empty mask when the head says the object is absent, else the argmax of M_1.

    Equal scores go to background.
    """
    e_hat = float(np.ravel(_values(trace.e_hat))[index])
    size = trace.image_size
    if e_hat < 0.5:
        return BinaryMask.zeros(size, size)
    scores = _values(trace.masks[0])[index]
    foreground = scores[..., 1] > scores[..., 0]
    factor = size // foreground.shape[0]
    return BinaryMask(foreground.repeat(factor, axis=0).repeat(factor, axis=1))


def trace_to_json(trace: ForwardTrace) -> dict:
    """Attention maps, token values and head output for inspection."""
    attention = {name: _values(a).tolist() for name, a in sorted(trace.attention.items())}
    row_sums = {name: _values(a).sum(axis=-1).tolist() for name, a in sorted(trace.attention.items())}
    return {
        "image_size": trace.image_size,
        "e_hat": _values(trace.e_hat).tolist(),
        "attention": attention,
        "attention_row_sums": row_sums,
        "cond_tokens": [_values(t).tolist() for t in trace.cond_tokens],
        "blank_tokens": [_values(t).tolist() for t in trace.blank_tokens],
        "mask_shapes": [list(_values(m).shape) for m in trace.masks],
    }
