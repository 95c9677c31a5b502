"""Parameter containers and the attention building blocks of the toy model.

Parameter bundles are dataclasses whose leaves are numpy arrays. ``lift``
turns the leaves into ``Var`` so a forward pass records a graph, and
``named_leaves`` walks any bundle in a fixed order under dotted names.
"""

import dataclasses
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from rris.errors import ModelError
from rris.toy import autograd as ag
from rris.toy.autograd import Var


@dataclass
class Linear:
    """Channel projection ``x @ weight + bias`` (a 1x1 convolution on feature maps)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def dims(self) -> Tuple[int, int]:
        return tuple(self.weight.shape)


@dataclass
class MhcaParams:
    query: Linear
    key: Linear
    value: Linear
    output: Linear
    heads: int = dataclasses.field(default=1, metadata={"static": True})

    @property
    def dim(self) -> int:
        return self.query.dims[1]


@dataclass
class VltfParams:
    vision_proj: Linear
    language_proj: Linear
    mhca1: MhcaParams
    mhca2: MhcaParams
    mhca3: MhcaParams
    memory_tokens: np.ndarray
    blank_tokens: np.ndarray
    output_proj: Linear


def _is_static(field) -> bool:
    return field.metadata.get("static", False)


def named_leaves(params, prefix: str = "") -> Iterator[Tuple[str, object]]:
    """(dotted name, leaf) for every learned array of a bundle, in declaration order."""
    if dataclasses.is_dataclass(params):
        for field in dataclasses.fields(params):
            if _is_static(field):
                continue
            yield from named_leaves(getattr(params, field.name), f"{prefix}{field.name}.")
    elif isinstance(params, (list, tuple)):
        for i, item in enumerate(params):
            yield from named_leaves(item, f"{prefix}{i}.")
    else:
        yield prefix.rstrip("."), params


def map_leaves(fn, params):
    if dataclasses.is_dataclass(params):
        updates = {f.name: map_leaves(fn, getattr(params, f.name)) for f in dataclasses.fields(params) if not _is_static(f)}
        return dataclasses.replace(params, **updates)
    if isinstance(params, (list, tuple)):
        return type(params)(map_leaves(fn, item) for item in params)
    return fn(params)


def lift(params):
    """Same bundle with every array wrapped as a graph leaf."""
    return map_leaves(lambda leaf: Var(leaf), params)


def leaf_grads(lifted) -> Dict[str, np.ndarray]:
    return {
        name: (np.zeros_like(var.value) if var.grad is None else var.grad)
        for name, var in named_leaves(lifted)
    }


def param_count(params) -> int:
    return sum(int(np.size(leaf)) for _, leaf in named_leaves(params))


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, scale: float) -> Linear:
    return Linear(weight=rng.normal(0.0, scale, (d_in, d_out)), bias=rng.normal(0.0, scale, d_out))


def init_mhca(rng: np.random.Generator, d_query: int, d_kv: int, dim: int, d_out: int, heads: int, scale: float) -> MhcaParams:
    if dim % heads:
        raise ModelError(f"attention dim {dim} is not divisible by {heads} heads")
    return MhcaParams(
        query=init_linear(rng, d_query, dim, scale),
        key=init_linear(rng, d_kv, dim, scale),
        value=init_linear(rng, d_kv, dim, scale),
        output=init_linear(rng, dim, d_out, scale),
        heads=heads,
    )


def init_vltf(
    rng: np.random.Generator,
    vision_dim: int,
    language_dim: int,
    dim: int,
    heads: int,
    memory_tokens: int,
    blank_tokens: int,
    scale: float,
) -> VltfParams:
    return VltfParams(
        vision_proj=init_linear(rng, vision_dim, dim, scale),
        language_proj=init_linear(rng, language_dim, dim, scale),
        mhca1=init_mhca(rng, dim, dim, dim, dim, heads, scale),
        mhca2=init_mhca(rng, dim, dim, dim, dim, heads, scale),
        mhca3=init_mhca(rng, dim, dim, dim, dim, heads, scale),
        memory_tokens=rng.normal(0.0, scale, (memory_tokens, dim)),
        blank_tokens=rng.normal(0.0, scale, (blank_tokens, dim)),
        output_proj=init_linear(rng, dim, vision_dim, scale),
    )


def linear(x: Var, p: Linear) -> Var:
    if x.shape[-1] != p.weight.shape[0]:
        raise ModelError(f"projection expects {p.weight.shape[0]} channels, got {x.shape[-1]}", code="shape-mismatch")
    return ag.matmul(x, p.weight) + p.bias


def _split_heads(x: Var, heads: int) -> Var:
    n, length, dim = x.shape
    return ag.transpose(ag.reshape(x, (n, length, heads, dim // heads)), (0, 2, 1, 3))


def mhca(p: MhcaParams, query: Var, key: Var, value: Var) -> Tuple[Var, Var]:
    """Scaled dot-product cross attention.

    query [N, Lq, Dq], key/value [N, Lk, Dkv] -> output [N, Lq, Dout] and
    attention [N, heads, Lq, Lk].
    """
    query, key, value = ag.as_var(query), ag.as_var(key), ag.as_var(value)
    if key.shape[:2] != value.shape[:2] or query.shape[0] != key.shape[0]:
        raise ModelError(
            f"attention inputs disagree: query {query.shape}, key {key.shape}, value {value.shape}",
            code="shape-mismatch",
        )

    n, lq, _ = query.shape
    dim, heads = p.dim, p.heads
    q = _split_heads(linear(query, p.query), heads)
    k = _split_heads(linear(key, p.key), heads)
    v = _split_heads(linear(value, p.value), heads)

    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dim // heads))
    attention = ag.softmax(scores, axis=-1)
    context = ag.transpose(ag.matmul(attention, v), (0, 2, 1, 3))
    output = linear(ag.reshape(context, (n, lq, dim)), p.output)
    return output, attention


@dataclass
class VltfOutput:
    fused: Var
    cond_tokens: Var
    blank_tokens: Var
    attention: Dict[str, Var]

    @property
    def tokens(self) -> Var:
        return ag.concat([self.cond_tokens, self.blank_tokens], axis=1)


def vltf_forward(p: VltfParams, vision: Var, language: Var) -> VltfOutput:
    """Inject language into a vision feature through memory and blank tokens.

    The language feature first attends over the vision feature, memory tokens
    then read from that vision-aware language to become conditional tokens,
    and finally the vision feature attends over conditional plus blank
    tokens. Blank tokens never see the language input.
    """
    vision, language = ag.as_var(vision), ag.as_var(language)
    if vision.ndim != 3 or language.ndim != 3 or vision.shape[0] != language.shape[0]:
        raise ModelError(f"vision {vision.shape} and language {language.shape} must be [N, L, C]", code="shape-mismatch")

    n = vision.shape[0]
    v = linear(vision, p.vision_proj)
    lang = linear(language, p.language_proj)
    dim = v.shape[-1]

    lang_v, attn1 = mhca(p.mhca1, lang, v, v)

    memory = ag.broadcast_to(ag.as_var(p.memory_tokens), (n, p.memory_tokens.shape[0], dim))
    cond, attn2 = mhca(p.mhca2, memory, lang_v, lang_v)

    blank = ag.broadcast_to(ag.as_var(p.blank_tokens), (n, p.blank_tokens.shape[0], dim))
    tokens = ag.concat([cond, blank], axis=1)
    x, attn3 = mhca(p.mhca3, v, tokens, tokens)

    return VltfOutput(
        fused=linear(x, p.output_proj),
        cond_tokens=cond,
        blank_tokens=blank,
        attention={"mhca1": attn1, "mhca2": attn2, "mhca3": attn3},
    )


def standardize(x: Var, eps: float) -> Var:
    """Per-channel zero mean, unit variance over the positions axis of [N, L, C]."""
    centered = x - ag.mean(x, axis=1, keepdims=True)
    variance = ag.mean(centered * centered, axis=1, keepdims=True)
    return centered / ag.sqrt(variance + eps)


def attention_row_error(attentions: List[np.ndarray]) -> float:
    """Largest deviation of any attention row sum from 1."""
    errors = [np.abs(a.sum(axis=-1) - 1.0).max() for a in attentions if a.size]
    return float(max(errors, default=0.0))
