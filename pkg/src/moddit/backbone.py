"""Flow-matching transformer backbone with token-wise modulated conditioning.

The denoiser is a two-phase stack. Double blocks keep text and target-image
tokens in separate parameter streams joined by one attention over the
concatenated sequence. Single blocks run one unified stream over
[text, target, reference] tokens, which is where reference latents are
injected. Every block derives its scale/shift/gate modulation from a
conditioning row per token: text rows may each carry their own conditioning
vector, which is the hook the identity-offset adapter uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import LAT_DIM, LatentGrid, TextEncoding
from .errors import ValidationError
from .nn import Linear, ParamStore
from .sequence import build_plan, rope_tables


@dataclass
class AttentionRecord:
    """Text-to-target attention map from one double block head, [T, N_img].

    Rows belonging to caption padding are zeroed.
    """
    block: int
    head: int
    probs: Tensor


@dataclass
class Modulation:
    alpha1: Tensor
    beta1: Tensor
    gamma1: Tensor
    alpha2: Tensor
    beta2: Tensor
    gamma2: Tensor


class ModulationHead:
    """Maps conditioning rows to the six adaln vectors of one block stream.

    Zero-init so every block starts as the identity map.
    """

    def __init__(self, store: ParamStore, name: str, d_cond: int, d: int):
        self.d = d
        self.lin = Linear(store, name, d_cond, 6 * d, init="zeros")

    def __call__(self, y: Tensor) -> Modulation:
        raw = self.lin(ad.silu(y))
        c = [ad.narrow(raw, 1, i * self.d, self.d) for i in range(6)]
        one = Tensor(np.ones((1, 1), dtype=raw.dtype))
        return Modulation(alpha1=ad.add(one, c[0]), beta1=c[1], gamma1=c[2],
                          alpha2=ad.add(one, c[3]), beta2=c[4], gamma2=c[5])


def adaln(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Scale/shift-modulated layer norm, rows of x conditioned independently."""
    return ad.add(ad.mul(ad.layer_norm(x), alpha), beta)


def gated_residual(x: Tensor, update: Tensor, gamma: Tensor) -> Tensor:
    return ad.add(x, ad.mul(gamma, update))


def _key_bias(key_mask: np.ndarray, dtype) -> Tensor:
    bias = np.where(key_mask > 0.5, 0.0, -1e9).astype(dtype)
    return Tensor(bias.reshape(1, 1, -1))


class _AttnCore:
    """Shared q/k/v/o projection set with rotary phases at attention time."""

    def __init__(self, store, name, d, heads, lora_rank):
        self.heads = heads
        self.dh = d // heads
        self.wq = Linear(store, f"{name}.q", d, d, lora_rank=lora_rank)
        self.wk = Linear(store, f"{name}.k", d, d, lora_rank=lora_rank)
        self.wv = Linear(store, f"{name}.v", d, d, lora_rank=lora_rank)
        self.wo = Linear(store, f"{name}.o", d, d, lora_rank=lora_rank)

    def qkv(self, x: Tensor):
        n = x.shape[0]

        def split(t):
            return ad.transpose(ad.reshape(t, (n, self.heads, self.dh)), (1, 0, 2))

        return split(self.wq(x)), split(self.wk(x)), split(self.wv(x))

    def attend(self, q, k, v, cos, sin, key_bias):
        if cos.shape[0] != q.shape[1]:
            raise ValidationError(
                f"rotary table rows {cos.shape[0]} != sequence length {q.shape[1]}")
        q = ad.rope_apply(q, cos, sin)
        k = ad.rope_apply(k, cos, sin)
        scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.dh))
        probs = ad.softmax(ad.add(scores, key_bias), axis=-1)
        ctx = ad.bmm(probs, v)
        l = ctx.shape[1]
        return ad.reshape(ad.transpose(ctx, (1, 0, 2)), (l, self.heads * self.dh)), probs


class _FFN:
    def __init__(self, store, name, d, mult, lora_rank):
        self.f1 = Linear(store, f"{name}.1", d, mult * d, lora_rank=lora_rank)
        self.f2 = Linear(store, f"{name}.2", mult * d, d, lora_rank=lora_rank)

    def __call__(self, x):
        return self.f2(ad.silu(self.f1(x)))


class DoubleBlock:
    """Separate text/image parameter streams, one joint attention."""

    def __init__(self, store, name, d, d_cond, heads, ffn_mult, lora_rank):
        self.mod_text = ModulationHead(store, f"{name}.mod_text", d_cond, d)
        self.mod_img = ModulationHead(store, f"{name}.mod_img", d_cond, d)
        self.attn_text = _AttnCore(store, f"{name}.attn_text", d, heads, lora_rank)
        self.attn_img = _AttnCore(store, f"{name}.attn_img", d, heads, lora_rank)
        self.ffn_text = _FFN(store, f"{name}.ffn_text", d, ffn_mult, lora_rank)
        self.ffn_img = _FFN(store, f"{name}.ffn_img", d, ffn_mult, lora_rank)

    def __call__(self, xt, xi, y_text, y_img, cos, sin, key_bias):
        t, n = xt.shape[0], xi.shape[0]
        if y_img.shape[0] != 1:
            raise ValidationError(
                f"image-stream conditioning must be global, got {y_img.shape[0]} rows")
        mt = self.mod_text(y_text)
        mi = self.mod_img(y_img)
        qt, kt, vt = self.attn_text.qkv(adaln(xt, mt.alpha1, mt.beta1))
        qi, ki, vi = self.attn_img.qkv(adaln(xi, mi.alpha1, mi.beta1))
        q = ad.concat([qt, qi], axis=1)
        k = ad.concat([kt, ki], axis=1)
        v = ad.concat([vt, vi], axis=1)
        ctx, probs = self.attn_text.attend(q, k, v, cos, sin, key_bias)
        xt = gated_residual(xt, self.attn_text.wo(ad.narrow(ctx, 0, 0, t)), mt.gamma1)
        xi = gated_residual(xi, self.attn_img.wo(ad.narrow(ctx, 0, t, n)), mi.gamma1)
        xt = gated_residual(xt, self.ffn_text(adaln(xt, mt.alpha2, mt.beta2)), mt.gamma2)
        xi = gated_residual(xi, self.ffn_img(adaln(xi, mi.alpha2, mi.beta2)), mi.gamma2)
        return xt, xi, probs


class SingleBlock:
    """One unified stream over [text, target, reference] tokens."""

    def __init__(self, store, name, d, d_cond, heads, ffn_mult, lora_rank):
        self.mod = ModulationHead(store, f"{name}.mod", d_cond, d)
        self.attn = _AttnCore(store, f"{name}.attn", d, heads, lora_rank)
        self.ffn = _FFN(store, f"{name}.ffn", d, ffn_mult, lora_rank)

    def __call__(self, x, y_rows, cos, sin, key_bias):
        m = self.mod(y_rows)
        q, k, v = self.attn.qkv(adaln(x, m.alpha1, m.beta1))
        ctx, _ = self.attn.attend(q, k, v, cos, sin, key_bias)
        x = gated_residual(x, self.attn.wo(ctx), m.gamma1)
        x = gated_residual(x, self.ffn(adaln(x, m.alpha2, m.beta2)), m.gamma2)
        return x


class Backbone:
    def __init__(self, store: ParamStore, cfg):
        cfg.validate()
        self.cfg = cfg
        self.store = store
        d, dc = cfg.dim, cfg.cond_dim
        self.text_in = Linear(store, "core.text_in", cfg.text_dim, d)
        self.img_in = Linear(store, "core.img_in", LAT_DIM, d)
        self.cond1 = Linear(store, "core.cond1", 2 * cfg.clip_dim, dc)
        self.cond2 = Linear(store, "core.cond2", dc, dc)
        self.doubles = [DoubleBlock(store, f"core.double{i}", d, dc, cfg.heads,
                                    cfg.ffn_mult, cfg.lora_rank)
                        for i in range(cfg.double_blocks)]
        self.singles = [SingleBlock(store, f"core.single{i}", d, dc, cfg.heads,
                                    cfg.ffn_mult, cfg.lora_rank)
                        for i in range(cfg.single_blocks)]
        self.readout = Linear(store, "core.readout", d, LAT_DIM)
        n2 = cfg.clip_dim // 2
        self._time_freqs = (cfg.time_scale
                            * 10000.0 ** (-np.arange(n2, dtype=np.float64) / n2))

    # -- conditioning ------------------------------------------------------

    def base_conditioning(self, t, pooled: Tensor) -> Tensor:
        """Global conditioning row [1, d_cond] from timestep and pooled text."""
        if not isinstance(t, Tensor):
            t = Tensor(np.full((1, 1), float(t), dtype=pooled.dtype))
        freqs = Tensor(self._time_freqs.reshape(1, -1).astype(pooled.dtype))
        ang = ad.mul(t, freqs)
        emb = ad.concat([ad.tsin(ang), ad.tcos(ang)], axis=1)
        h = ad.silu(self.cond1(ad.concat([emb, pooled], axis=1)))
        return self.cond2(h)

    def lora_linears(self):
        out = []
        for blk in self.doubles:
            for core in (blk.attn_text, blk.attn_img):
                out += [core.wq, core.wk, core.wv, core.wo]
            out += [blk.ffn_text.f1, blk.ffn_text.f2, blk.ffn_img.f1, blk.ffn_img.f2]
        for blk in self.singles:
            out += [blk.attn.wq, blk.attn.wk, blk.attn.wv, blk.attn.wo,
                    blk.ffn.f1, blk.ffn.f2]
        return out

    # -- forward -----------------------------------------------------------

    def forward(self, enc: TextEncoding, z: LatentGrid, y_global: Tensor,
                y_text_per_block, ref_latents=(), text_delta=None,
                want_records=False):
        """Full pass. y_global is [1, d_cond]; y_text_per_block holds one
        [T, d_cond] tensor per block (doubles then singles)."""
        cfg = self.cfg
        if len(y_text_per_block) != cfg.n_blocks:
            raise ValidationError(
                f"need {cfg.n_blocks} per-block conditioning rows, got {len(y_text_per_block)}")
        t_len = enc.tokens.shape[0]
        n_img = z.data.shape[0]
        dtype = enc.tokens.dtype

        xt = self.text_in(enc.tokens)
        if text_delta is not None:
            xt = ad.add(xt, text_delta)
        xi = self.img_in(Tensor(z.data.astype(dtype)))

        plan_d = build_plan(t_len, z.grid)
        cos_d, sin_d = rope_tables(plan_d, cfg.head_dim, cfg.rope_base, dtype)
        mask_d = np.ones(plan_d.length)
        mask_d[:t_len] = enc.mask
        bias_d = _key_bias(mask_d, dtype)

        records = []
        row_keep = Tensor(enc.mask.reshape(1, t_len, 1).astype(dtype))
        for i, blk in enumerate(self.doubles):
            xt, xi, probs = blk(xt, xi, y_text_per_block[i], y_global, cos_d, sin_d, bias_d)
            if want_records:
                t2i = ad.mul(ad.narrow(ad.narrow(probs, 1, 0, t_len), 2, t_len, n_img), row_keep)
                for h in range(cfg.heads):
                    records.append(AttentionRecord(
                        block=i, head=h,
                        probs=ad.reshape(ad.narrow(t2i, 0, h, 1), (t_len, n_img))))

        ref_grids = [r.grid for r in ref_latents]
        plan_s = build_plan(t_len, z.grid, ref_grids)
        cos_s, sin_s = rope_tables(plan_s, cfg.head_dim, cfg.rope_base, dtype)
        mask_s = np.ones(plan_s.length)
        mask_s[:t_len] = enc.mask
        bias_s = _key_bias(mask_s, dtype)

        parts = [xt, xi]
        for r in ref_latents:
            parts.append(self.img_in(Tensor(r.data.astype(dtype))))
        x = ad.concat(parts, axis=0)

        n_rest = plan_s.length - t_len
        ones_rest = Tensor(np.ones((n_rest, 1), dtype=dtype))
        for j, blk in enumerate(self.singles):
            y_rows = ad.concat([y_text_per_block[cfg.double_blocks + j],
                                ad.mul(ones_rest, y_global)], axis=0)
            x = blk(x, y_rows, cos_s, sin_s, bias_s)

        target = ad.narrow(x, 0, t_len, n_img)
        vel = self.readout(ad.layer_norm(target))
        return vel, records
