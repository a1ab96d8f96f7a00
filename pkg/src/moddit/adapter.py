"""Identity-offset adapter: reference features to conditioning offsets.

For each subject we get reference patch features f_c and a caption span.
Two small cross-attention resamplers turn f_c into (a) one shared offset
vector and (b) one offset per backbone block. Offsets are added to the
global conditioning row, but only on the span's token rows, so each
subject steers the modulation of its own caption tokens and nothing else.
Both resamplers end in a zero-init projection: a fresh adapter is exactly
a no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .nn import Linear, MHA, ParamStore


@dataclass
class OffsetBundle:
    subject_id: str
    span: tuple                 # half-open token range in the padded caption
    shared: Tensor              # [1, d_cond]
    per_block: Tensor           # [n_blocks, d_cond]


class Resampler:
    """Cross-attention stack reading reference features into query rows."""

    def __init__(self, store: ParamStore, name: str, width: int, heads: int,
                 depth: int, d_feat: int, d_out: int):
        self.layers = []
        for i in range(depth):
            attn = MHA(store, f"{name}.layer{i}.attn", width, heads, d_kv=d_feat)
            f1 = Linear(store, f"{name}.layer{i}.ffn1", width, 2 * width)
            f2 = Linear(store, f"{name}.layer{i}.ffn2", 2 * width, width)
            self.layers.append((attn, f1, f2))
        self.out = Linear(store, f"{name}.out", width, d_out, init="zeros")

    def __call__(self, queries: Tensor, feats: Tensor) -> Tensor:
        if queries.shape[0] < 1:
            raise ValidationError("resampler needs at least one query row")
        x = queries
        for attn, f1, f2 in self.layers:
            x = ad.add(x, attn(ad.layer_norm(x), feats))
            x = ad.add(x, f2(ad.silu(f1(ad.layer_norm(x)))))
        return self.out(ad.layer_norm(x))


class OffsetAdapter:
    def __init__(self, store: ParamStore, cfg):
        w = cfg.resampler_width
        self.n_blocks = cfg.n_blocks
        self.span_proj = Linear(store, "adapter.span_proj", cfg.text_dim, w)
        self.block_queries = store.create("adapter.block_queries",
                                          (cfg.n_blocks, w), ("normal", 0.02))
        self.mean_proj = Linear(store, "adapter.mean_proj", cfg.text_dim, w)
        self.shared = Resampler(store, "adapter.shared", w, cfg.resampler_heads,
                                cfg.resampler_depth, cfg.clip_dim, cfg.cond_dim)
        self.per_block = Resampler(store, "adapter.per_block", w, cfg.resampler_heads,
                                   cfg.resampler_depth, cfg.clip_dim, cfg.cond_dim)

    def build_bundle(self, subject_id: str, span, text_tokens: Tensor,
                     text_mask: np.ndarray, ref_feats: Tensor) -> OffsetBundle:
        """Offsets for one subject from its caption span and reference features."""
        s, e = span
        t_len = text_tokens.shape[0]
        if not (0 <= s < e <= t_len):
            raise ValidationError(f"subject {subject_id!r}: span {span} outside caption")
        if text_mask[s:e].min() < 1.0:
            raise ValidationError(
                f"subject {subject_id!r}: span {span} covers padded caption rows")
        span_tok = ad.narrow(text_tokens, 0, s, e - s)
        span_mean = ad.tmean(span_tok, axis=0, keepdims=True)

        q_shared = self.span_proj(span_tok)
        shared = ad.tmean(self.shared(q_shared, ref_feats), axis=0, keepdims=True)

        q_block = ad.add(self.block_queries, self.mean_proj(span_mean))
        per_block = self.per_block(q_block, ref_feats)
        return OffsetBundle(subject_id=subject_id, span=(s, e),
                            shared=shared, per_block=per_block)


def validate_spans(bundles, t_len: int):
    """Spans must be pairwise disjoint; overlaps name the offending subjects."""
    taken = {}
    for b in bundles:
        s, e = b.span
        for i in range(s, e):
            if i in taken:
                raise ValidationError(
                    f"overlapping subject spans: {taken[i]!r} and {b.subject_id!r} "
                    f"both claim token {i}")
            taken[i] = b.subject_id
        if e > t_len:
            raise ValidationError(f"subject {b.subject_id!r}: span {b.span} exceeds caption")


def per_block_conditioning(y_global: Tensor, bundles, t_len: int, n_blocks: int):
    """One [t_len, d_cond] conditioning tensor per block.

    Every text row starts from the broadcast global row; each subject's
    offsets are added on its span rows only, as mask * delta, so rows
    outside every span keep the global conditioning bit-for-bit.
    """
    validate_spans(bundles, t_len)
    dtype = y_global.dtype
    ones = Tensor(np.ones((t_len, 1), dtype=dtype))
    base = ad.mul(ones, y_global)
    out = []
    for i in range(n_blocks):
        y = base
        for b in bundles:
            s, e = b.span
            m = np.zeros((t_len, 1), dtype=dtype)
            m[s:e] = 1.0
            delta = ad.add(b.shared, ad.narrow(b.per_block, 0, i, 1))
            y = ad.add(y, ad.mul(Tensor(m), delta))
        out.append(y)
    return out


def embedding_injection(bundles, t_len: int, dim: int, dtype) -> Tensor | None:
    """Ablation path: shared offsets added to text embeddings on span rows.

    Requires cond_dim == model dim. Returns None when there are no bundles.
    """
    if not bundles:
        return None
    delta = None
    for b in bundles:
        if b.shared.shape[1] != dim:
            raise ValidationError(
                "embedding injection needs cond_dim == dim, "
                f"got offset width {b.shared.shape[1]} vs stream width {dim}")
        s, e = b.span
        m = np.zeros((t_len, 1), dtype=dtype)
        m[s:e] = 1.0
        term = ad.mul(Tensor(m), b.shared)
        delta = term if delta is None else ad.add(delta, term)
    return delta
