"""Parameter registry and small layer helpers on top of the tensor engine.

Parameters are named, created in a ParamStore, and initialized from per-name
child rng streams, so initialization does not depend on construction order
and two models built from the same seed match exactly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvariantError, ValidationError
from .rng import Rng


class ParamStore:
    def __init__(self, rng: Rng, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}

    def create(self, name: str, shape, init) -> Tensor:
        """init: 'zeros', 'fanin', or ('normal', std)."""
        if name in self.params:
            raise InvariantError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float64)
        else:
            if init == "fanin":
                std = 1.0 / np.sqrt(shape[0])
            elif isinstance(init, tuple) and init[0] == "normal":
                std = init[1]
            else:
                raise ValidationError(f"unknown init {init!r}")
            data = self.rng.split(f"param:{name}").normal(shape) * std
        t = Tensor(data.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def named(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValidationError(
                f"state mismatch: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.data.shape:
                raise ValidationError(
                    f"param {k}: stored shape {arr.shape} != model shape {t.data.shape}")
            t.data = arr.astype(self.dtype)

    def set_trainable(self, prefixes=(), suffixes=()) -> list[str]:
        """Mark parameters trainable iff the name matches a prefix or suffix."""
        chosen = []
        for name, t in self.params.items():
            t.requires_grad = (any(name.startswith(p) for p in prefixes)
                               or any(name.endswith(s) for s in suffixes))
            if t.requires_grad:
                chosen.append(name)
        if not chosen:
            raise ValidationError(
                f"no parameters match trainable selectors {sorted(prefixes)} {sorted(suffixes)}")
        return sorted(chosen)

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None


class Linear:
    """y = x @ W + b, with an optional low-rank additive adapter.

    The adapter follows W_eff = W + (B A)^T with A (rank x d_in) zero-init
    and B (d_out x rank) random small, so a fresh adapter changes nothing.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 init="fanin", bias: bool = True, lora_rank: int = 0):
        self.name = name
        self.w = store.create(f"{name}.w", (d_in, d_out), init)
        self.b = store.create(f"{name}.b", (d_out,), "zeros") if bias else None
        self.lora_rank = lora_rank
        self.lora_enabled = False
        if lora_rank:
            self.lora_a = store.create(f"{name}.lora_a", (lora_rank, d_in), "zeros")
            self.lora_b = store.create(f"{name}.lora_b", (d_out, lora_rank), ("normal", 0.02))

    def weight(self) -> Tensor:
        if self.lora_rank and self.lora_enabled:
            delta = ad.matmul(ad.transpose(self.lora_a, (1, 0)),
                              ad.transpose(self.lora_b, (1, 0)))
            return ad.add(self.w, delta)
        return self.w

    def merged_weight_value(self) -> np.ndarray:
        """Plain array with any adapter folded in."""
        w = self.w.data.copy()
        if self.lora_rank and self.lora_enabled:
            w = w + (self.lora_b.data @ self.lora_a.data).T
        return w

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight())
        if self.b is not None:
            y = ad.add(y, self.b)
        return y


class MHA:
    """Multi-head attention without positional rotation (encoders, resampler)."""

    def __init__(self, store: ParamStore, name: str, d_model: int, heads: int,
                 d_kv: int | None = None):
        if d_model % heads:
            raise ValidationError(f"{name}: width {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.dh = d_model // heads
        d_kv = d_kv or d_model
        self.wq = Linear(store, f"{name}.q", d_model, d_model)
        self.wk = Linear(store, f"{name}.k", d_kv, d_model)
        self.wv = Linear(store, f"{name}.v", d_kv, d_model)
        self.wo = Linear(store, f"{name}.o", d_model, d_model)

    def __call__(self, xq: Tensor, xkv: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        lq, lk = xq.shape[0], xkv.shape[0]
        h, dh = self.heads, self.dh

        def split(t, n):
            return ad.transpose(ad.reshape(t, (n, h, dh)), (1, 0, 2))

        q = split(self.wq(xq), lq)
        k = split(self.wk(xkv), lk)
        v = split(self.wv(xkv), lk)
        scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask > 0.5, 0.0, -1e9).astype(scores.dtype)
            scores = ad.add(scores, Tensor(bias.reshape(1, 1, lk)))
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.bmm(probs, v)
        out = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (lq, h * dh))
        return self.wo(out)


class EncoderBlock:
    """Pre-norm self-attention + FFN with residuals."""

    def __init__(self, store: ParamStore, name: str, d: int, heads: int, ffn_mult: int = 4):
        self.attn = MHA(store, f"{name}.attn", d, heads)
        self.f1 = Linear(store, f"{name}.ffn1", d, ffn_mult * d)
        self.f2 = Linear(store, f"{name}.ffn2", ffn_mult * d, d)

    def __call__(self, x: Tensor, key_mask=None) -> Tensor:
        a = ad.layer_norm(x)
        x = ad.add(x, self.attn(a, a, key_mask))
        x = ad.add(x, self.f2(ad.silu(self.f1(ad.layer_norm(x)))))
        return x
