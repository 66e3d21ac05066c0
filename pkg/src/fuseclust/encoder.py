"""Dual-branch token encoder: pre-norm ViT blocks, token-axis fuse and
split, N-fold stacking with shared branch blocks, final normalization,
and summary-token extraction.

Per stage i the two branches pass one shared-parameter block, their token
sequences are concatenated along the token axis, a fused block with its
own parameters runs on the doubled sequence, and the result is split back
into the two branches. Attention is length-agnostic, so the fused blocks
reuse the branch block shapes.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError
from .rng import stream, truncated_normal


class ViTBlockParams:
    """One pre-norm transformer block: LN, multi-head attention (Q, K, V, O),
    LN, then a GELU MLP with hidden width 4E."""

    def __init__(self, embed, heads, seed, tag, dtype=np.float32):
        if embed % heads != 0:
            raise ShapeError(f"embed {embed} not divisible by heads {heads}")
        self.embed = embed
        self.heads = heads
        self.tag = tag

        def w(name, shape):
            return ad.parameter(
                truncated_normal(stream(seed, tag, name), shape, dtype=dtype),
                name=f"{tag}.{name}")

        def zeros(name, shape):
            return ad.parameter(np.zeros(shape, dtype=dtype), name=f"{tag}.{name}")

        def ones(name, shape):
            return ad.parameter(np.ones(shape, dtype=dtype), name=f"{tag}.{name}")

        self.ln1_g = ones("ln1_g", (embed,))
        self.ln1_b = zeros("ln1_b", (embed,))
        self.wq = w("wq", (embed, embed))
        self.bq = zeros("bq", (embed,))
        self.wk = w("wk", (embed, embed))
        self.bk = zeros("bk", (embed,))
        self.wv = w("wv", (embed, embed))
        self.bv = zeros("bv", (embed,))
        self.wo = w("wo", (embed, embed))
        self.bo = zeros("bo", (embed,))
        self.ln2_g = ones("ln2_g", (embed,))
        self.ln2_b = zeros("ln2_b", (embed,))
        self.w1 = w("w1", (embed, 4 * embed))
        self.b1 = zeros("b1", (4 * embed,))
        self.w2 = w("w2", (4 * embed, embed))
        self.b2 = zeros("b2", (embed,))

    def parameters(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo, self.ln2_g, self.ln2_b,
                self.w1, self.b1, self.w2, self.b2]


def _heads_view(x, heads):
    b, t, e = x.shape
    dh = e // heads
    h = ad.reshape(x, (b, t, heads, dh))
    return ad.transpose(h, (0, 2, 1, 3))


def vit_block_forward(x, p):
    """x: [B, T', E] for any T' >= 1. Returns (output, attention [B,h,T',T'])."""
    if x.shape[-1] != p.embed:
        raise ShapeError(f"embed mismatch: tokens {x.shape} vs block {p.embed}")
    b, t, e = x.shape
    dh = e // p.heads
    h = ad.layer_norm(x, p.ln1_g, p.ln1_b)
    q = _heads_view(ad.linear(h, p.wq, p.bq), p.heads)
    k = _heads_view(ad.linear(h, p.wk, p.bk), p.heads)
    v = _heads_view(ad.linear(h, p.wv, p.bv), p.heads)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                    1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, e))
    x = ad.add(x, ad.linear(ctx, p.wo, p.bo))
    m = ad.gelu(ad.linear(ad.layer_norm(x, p.ln2_g, p.ln2_b), p.w1, p.b1))
    x = ad.add(x, ad.linear(m, p.w2, p.b2))
    return x, attn


def cat_tokens(a, b):
    """[B,T,E] + [B,T,E] -> [B,2T,E]; first half a, second half b, exact copy."""
    if a.shape != b.shape:
        raise ShapeError(f"cat_tokens shape mismatch: {a.shape} vs {b.shape}")
    return ad.concat([a, b], axis=1)


def split_tokens(y):
    """Exact inverse of cat_tokens."""
    if y.shape[1] % 2 != 0:
        raise ShapeError(f"cannot split odd token count {y.shape[1]}")
    return ad.split(y, 2, axis=1)


def extract_summary(tokens, clip_fusion_enabled):
    """Token 0 (the ViT CLS) without fusion; token 1 (the multimodal anchor
    placed after CLS) with fusion."""
    idx = 1 if clip_fusion_enabled else 0
    if tokens.shape[1] <= idx:
        raise ShapeError(
            f"need at least {idx + 1} tokens, got {tokens.shape[1]}")
    out = ad.narrow(tokens, 1, idx, 1)
    return ad.reshape(out, (tokens.shape[0], tokens.shape[2]))


class MFAVBsParams:
    """N shared branch blocks, N fused blocks, one final LayerNorm."""

    def __init__(self, embed, heads, n_stages, seed, dtype=np.float32):
        self.embed = embed
        self.heads = heads
        self.n_stages = n_stages
        self.shared = [ViTBlockParams(embed, heads, seed, f"enc.shared{i}", dtype)
                       for i in range(n_stages)]
        self.fused = [ViTBlockParams(embed, heads, seed, f"enc.fused{i}", dtype)
                      for i in range(n_stages)]
        self.final_g = ad.parameter(np.ones(embed, dtype=dtype), name="enc.final_g")
        self.final_b = ad.parameter(np.zeros(embed, dtype=dtype), name="enc.final_b")

    def parameters(self):
        out = []
        for blk in self.shared + self.fused:
            out += blk.parameters()
        return out + [self.final_g, self.final_b]


def mfavbs_stage(a, b, shared, fused):
    """One fuse/split stage: shared block on each branch, token-axis concat,
    fused block on the doubled sequence, exact split back into branches.

    Returns (a, b, (attn_a, attn_b, attn_fused))."""
    a, at_a = vit_block_forward(a, shared)
    b, at_b = vit_block_forward(b, shared)
    y = cat_tokens(a, b)
    y, at_f = vit_block_forward(y, fused)
    a, b = split_tokens(y)
    return a, b, (at_a, at_b, at_f)


def mfavbs_forward(y_a, y_b, p, clip_fusion_enabled=False, collect_attn=False,
                   start_stage=0):
    """Run the stacked fuse/split encoder.

    Returns (h_a [B,E], h_b [B,E], attn) where attn is a list of
    (name, [B,heads,T',T'] Tensor) in execution order when collect_attn,
    else an empty list. start_stage lets a caller resume from saved
    stage-boundary tokens; the ops from identical inputs are identical.
    """
    if y_a.shape != y_b.shape:
        raise ShapeError(f"branch shape mismatch: {y_a.shape} vs {y_b.shape}")
    a, b = y_a, y_b
    attn = []
    for i in range(start_stage, p.n_stages):
        try:
            a, b, (at_a, at_b, at_f) = mfavbs_stage(a, b, p.shared[i], p.fused[i])
        except (ShapeError, ad.NumericError) as e:
            raise type(e)(f"stage {i}: {e}") from None
        if collect_attn:
            attn += [(f"stage{i}.branch_a", at_a),
                     (f"stage{i}.branch_b", at_b),
                     (f"stage{i}.fused", at_f)]
    a = ad.layer_norm(a, p.final_g, p.final_b)
    b = ad.layer_norm(b, p.final_g, p.final_b)
    return (extract_summary(a, clip_fusion_enabled),
            extract_summary(b, clip_fusion_enabled),
            attn)


def make_identity_fused_block(embed, heads, seed, tag, dtype=np.float32):
    """Fused block whose residual contributions are zero (zero O-projection
    and zero second MLP layer), so it passes tokens through unchanged."""
    blk = ViTBlockParams(embed, heads, seed, tag, dtype)
    blk.wo.data[:] = 0.0
    blk.w2.data[:] = 0.0
    return blk
