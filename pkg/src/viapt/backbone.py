"""Toy vision transformer with pluggable prompt-injection forward rules.

Pre-norm attention blocks over the token layout [class, prompts, image].
Three forward rules are exposed: shallow prompting (prompts only at layer 1,
outputs propagate), deep prompting (fresh prompts every layer, propagated
prompt outputs discarded), and a plain no-prompt forward used for
pretraining. Backbone weights are frozen during prompt tuning; only the
classification head trains.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DimensionError
from .numerics import RngState, Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_side: int = 16
    patch_side: int = 4
    embed_dim: int = 48
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    classes: int = 5

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def tokens(self) -> int:
        """Image token count k."""
        return (self.image_side // self.patch_side) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class TokenSequence:
    """Per-layer (class token, prompt block, image block) triple, all width d."""

    x: Tensor        # (B, 1, d)
    prompts: Tensor  # (B, p, d)
    image: Tensor    # (B, k, d)
    layer_index: int = 0


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [
            ("ln1.g", self.ln1_g), ("ln1.b", self.ln1_b),
            ("attn.wq", self.wq), ("attn.bq", self.bq),
            ("attn.wk", self.wk), ("attn.bk", self.bk),
            ("attn.wv", self.wv), ("attn.bv", self.bv),
            ("attn.wo", self.wo), ("attn.bo", self.bo),
            ("ln2.g", self.ln2_g), ("ln2.b", self.ln2_b),
            ("mlp.w1", self.w1), ("mlp.b1", self.b1),
            ("mlp.w2", self.w2), ("mlp.b2", self.b2),
        ]


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    layers: list[LayerParams]
    head_w: Tensor
    head_b: Tensor
    pos_encoding: np.ndarray = field(repr=False, default=None)

    def named_tensors(self):
        items = [
            ("backbone.patch.w", self.patch_w),
            ("backbone.patch.b", self.patch_b),
            ("backbone.cls", self.cls_token),
        ]
        for i, lp in enumerate(self.layers):
            items.extend((f"backbone.layer{i}.{n}", t) for n, t in lp.tensors())
        items.append(("head.w", self.head_w))
        items.append(("head.b", self.head_b))
        return items

    def freeze(self):
        """Frozen-backbone mode: only the head stays trainable."""
        for name, t in self.named_tensors():
            t.trainable = name.startswith("head.")

    def unfreeze_all(self):
        for _, t in self.named_tensors():
            t.trainable = True


def sinusoidal_position_encoding(k: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos encoding over image-token index (prompts and class token
    carry no position encoding)."""
    pos = np.arange(k, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.zeros((k, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d - d // 2])
    return pe.astype(dtype)


def _uniform_fan_in(rng: RngState, name: str, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.derive(name).uniform(shape, -bound, bound, dtype=dtype), trainable=True, name=name)


def _zeros(name: str, shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), trainable=True, name=name)


def _ones(name: str, shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), trainable=True, name=name)


def init_backbone(cfg: ViTConfig, rng: RngState, dtype=np.float32) -> BackboneParams:
    """Fresh backbone, all tensors trainable (pretraining mode); call
    .freeze() for the prompt-tuning phase."""
    d = cfg.embed_dim
    patch_dim = cfg.patch_side * cfg.patch_side
    layers = []
    for i in range(cfg.layers):
        pre = f"backbone.layer{i}"
        hidden = d * cfg.mlp_ratio
        layers.append(LayerParams(
            ln1_g=_ones(f"{pre}.ln1.g", (d,), dtype),
            ln1_b=_zeros(f"{pre}.ln1.b", (d,), dtype),
            wq=_uniform_fan_in(rng, f"{pre}.attn.wq", (d, d), d, dtype),
            bq=_zeros(f"{pre}.attn.bq", (d,), dtype),
            wk=_uniform_fan_in(rng, f"{pre}.attn.wk", (d, d), d, dtype),
            bk=_zeros(f"{pre}.attn.bk", (d,), dtype),
            wv=_uniform_fan_in(rng, f"{pre}.attn.wv", (d, d), d, dtype),
            bv=_zeros(f"{pre}.attn.bv", (d,), dtype),
            wo=_uniform_fan_in(rng, f"{pre}.attn.wo", (d, d), d, dtype),
            bo=_zeros(f"{pre}.attn.bo", (d,), dtype),
            ln2_g=_ones(f"{pre}.ln2.g", (d,), dtype),
            ln2_b=_zeros(f"{pre}.ln2.b", (d,), dtype),
            w1=_uniform_fan_in(rng, f"{pre}.mlp.w1", (d, hidden), d, dtype),
            b1=_zeros(f"{pre}.mlp.b1", (hidden,), dtype),
            w2=_uniform_fan_in(rng, f"{pre}.mlp.w2", (hidden, d), hidden, dtype),
            b2=_zeros(f"{pre}.mlp.b2", (d,), dtype),
        ))
    return BackboneParams(
        patch_w=_uniform_fan_in(rng, "backbone.patch.w", (patch_dim, d), patch_dim, dtype),
        patch_b=_zeros("backbone.patch.b", (d,), dtype),
        cls_token=_zeros("backbone.cls", (d,), dtype),
        layers=layers,
        head_w=_uniform_fan_in(rng, "head.w", (d, cfg.classes), d, dtype),
        head_b=_zeros("head.b", (cfg.classes,), dtype),
        pos_encoding=sinusoidal_position_encoding(cfg.tokens, d, dtype),
    )


def reinit_head(params: BackboneParams, cfg: ViTConfig, rng: RngState, classes: int, dtype=np.float32):
    """Fresh trainable head for a new downstream class count."""
    d = cfg.embed_dim
    params.head_w = _uniform_fan_in(rng, "head.w", (d, classes), d, dtype)
    params.head_b = _zeros("head.b", (classes,), dtype)


# --------------------------------------------------------------------------
# forward rules
# --------------------------------------------------------------------------

def _as_batched(arr: np.ndarray, rank: int):
    """Add a leading batch axis when the array has the unbatched rank."""
    if arr.ndim == rank:
        return arr[None], True
    if arr.ndim == rank + 1:
        return arr, False
    raise DimensionError(f"expected rank {rank} or {rank + 1}, got shape {arr.shape}")


def extract_patches(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(B, C, H, W) -> (B, k, C*ps*ps), non-overlapping row-major patches."""
    b, c, h, w = images.shape
    hp, wp = h // patch_side, w // patch_side
    x = images.reshape(b, c, hp, patch_side, wp, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, hp * wp, c * patch_side * patch_side)


def embed_patches(image, params: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Patchify, project, and add the fixed position encoding.

    Accepts (C, H, W) or (B, C, H, W); returns (k, d) or (B, k, d).
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    data, single = _as_batched(data, 3)
    if data.shape[-2:] != (cfg.image_side, cfg.image_side):
        raise DimensionError(
            f"image is {data.shape[-2:]}, config wants {(cfg.image_side, cfg.image_side)}"
        )
    patches = extract_patches(data, cfg.patch_side)
    pe = nm.constant(params.pos_encoding, dtype=params.pos_encoding.dtype)
    e0 = nm.add(nm.add(nm.matmul(Tensor(patches), params.patch_w), params.patch_b), pe)
    return nm.reshape(e0, e0.shape[1:]) if single else e0


def layer_forward(seq: TokenSequence, lp: LayerParams, cfg: ViTConfig, return_attn: bool = False):
    """One pre-norm block over the concatenated sequence, re-split afterwards."""
    d = cfg.embed_dim
    for blk in (seq.x, seq.prompts, seq.image):
        if blk.data.shape[-1] != d:
            raise DimensionError(f"token width {blk.data.shape[-1]} != embed dim {d}")
    p = seq.prompts.data.shape[-2]
    k = seq.image.data.shape[-2]
    t = nm.concat([seq.x, seq.prompts, seq.image], axis=-2)
    bsz, total = t.data.shape[0], t.data.shape[1]

    h = nm.layernorm(t, lp.ln1_g, lp.ln1_b)
    def heads(y):
        y = nm.reshape(y, (bsz, total, cfg.heads, cfg.head_dim))
        return nm.transpose(y, (0, 2, 1, 3))
    q = heads(nm.add(nm.matmul(h, lp.wq), lp.bq))
    kk = heads(nm.add(nm.matmul(h, lp.wk), lp.bk))
    v = heads(nm.add(nm.matmul(h, lp.wv), lp.bv))
    scores = nm.scale(nm.matmul(q, nm.swap_last2(kk)), 1.0 / np.sqrt(cfg.head_dim))
    attn = nm.softmax(scores)
    ctx = nm.matmul(attn, v)
    ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (bsz, total, d))
    t = nm.add(t, nm.add(nm.matmul(ctx, lp.wo), lp.bo))

    h2 = nm.layernorm(t, lp.ln2_g, lp.ln2_b)
    mlp = nm.add(nm.matmul(nm.gelu(nm.add(nm.matmul(h2, lp.w1), lp.b1)), lp.w2), lp.b2)
    t = nm.add(t, mlp)

    out = TokenSequence(
        x=nm.narrow(t, -2, 0, 1),
        prompts=nm.narrow(t, -2, 1, p),
        image=nm.narrow(t, -2, 1 + p, k),
        layer_index=seq.layer_index + 1,
    )
    if return_attn:
        return out, attn.data
    return out


def head(x_n: Tensor, params: BackboneParams) -> Tensor:
    """Trainable linear classification map on the final class token."""
    data = x_n if isinstance(x_n, Tensor) else Tensor(np.asarray(x_n))
    if data.data.ndim == 1:
        data = nm.reshape(data, (1, -1))
        return nm.reshape(nm.add(nm.matmul(data, params.head_w), params.head_b), (-1,))
    return nm.add(nm.matmul(data, params.head_w), params.head_b)


def initial_sequence(e0: Tensor, prompt_block: Tensor, params: BackboneParams) -> TokenSequence:
    bsz = e0.data.shape[0]
    x0 = nm.broadcast_batch(nm.reshape(params.cls_token, (1, -1)), bsz)
    return TokenSequence(x=x0, prompts=prompt_block, image=e0, layer_index=0)


def _prep_e0(e0) -> tuple[Tensor, bool]:
    t = e0 if isinstance(e0, Tensor) else Tensor(np.asarray(e0))
    if t.data.ndim == 2:
        return nm.reshape(t, (1,) + t.data.shape), True
    return t, False


def _prep_prompts(block, bsz: int, dtype) -> Tensor:
    t = block if isinstance(block, Tensor) else Tensor(np.asarray(block, dtype=dtype))
    if t.data.ndim == 2:
        return nm.broadcast_batch(t, bsz)
    return t


def forward_vpt_shallow(e0, prompts_p0, params: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Prompts inserted only at layer 1; their outputs propagate unchanged
    through all later layers. Returns logits (B, classes) or (classes,)."""
    e0, single = _prep_e0(e0)
    block = _prep_prompts(prompts_p0, e0.data.shape[0], e0.data.dtype)
    seq = initial_sequence(e0, block, params)
    for lp in params.layers:
        seq = layer_forward(seq, lp, cfg)
    logits = head(nm.reshape(seq.x, (seq.x.data.shape[0], -1)), params)
    return nm.reshape(logits, (-1,)) if single else logits


def forward_vpt_deep(e0, prompts_per_layer, params: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Fresh prompts at every layer; propagated prompt outputs are discarded."""
    if len(prompts_per_layer) != cfg.layers:
        raise ConfigError(f"need {cfg.layers} prompt blocks, got {len(prompts_per_layer)}")
    e0, single = _prep_e0(e0)
    bsz = e0.data.shape[0]
    seq = initial_sequence(e0, _prep_prompts(prompts_per_layer[0], bsz, e0.data.dtype), params)
    for i, lp in enumerate(params.layers):
        if i > 0:
            seq = TokenSequence(
                x=seq.x,
                prompts=_prep_prompts(prompts_per_layer[i], bsz, e0.data.dtype),
                image=seq.image,
                layer_index=seq.layer_index,
            )
        seq = layer_forward(seq, lp, cfg)
    logits = head(nm.reshape(seq.x, (seq.x.data.shape[0], -1)), params)
    return nm.reshape(logits, (-1,)) if single else logits


def forward_plain(e0, params: BackboneParams, cfg: ViTConfig) -> Tensor:
    """No-prompt forward (p = 0), used for backbone pretraining."""
    e0_t, _ = _prep_e0(e0)
    empty = Tensor(np.zeros((e0_t.data.shape[0], 0, cfg.embed_dim), dtype=e0_t.data.dtype))
    single = not isinstance(e0, Tensor) and np.asarray(e0).ndim == 2 or (
        isinstance(e0, Tensor) and e0.data.ndim == 2
    )
    seq = initial_sequence(e0_t, empty, params)
    for lp in params.layers:
        seq = layer_forward(seq, lp, cfg)
    logits = head(nm.reshape(seq.x, (seq.x.data.shape[0], -1)), params)
    return nm.reshape(logits, (-1,)) if single else logits
