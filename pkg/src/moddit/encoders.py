"""Conditioning encoders and the fixed latent codec.

The image codec is a frozen orthogonal patchify: 4x4 RGB patches are
flattened to 48 channels and rotated by a fixed orthogonal matrix, so
encode/decode is exactly invertible and needs no training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .grammar import T_MAX, VOCAB
from .nn import EncoderBlock, Linear, ParamStore
from .rng import Rng, fnv1a64

PATCH = 4
LAT_DIM = 3 * PATCH * PATCH  # 48
REF_PATCH = 8


@dataclass
class TextEncoding:
    tokens: Tensor          # [T_MAX, d_txt]
    pooled: Tensor          # [1, d_clip]
    mask: np.ndarray        # [T_MAX] float, 1 on real tokens
    ids: np.ndarray


@dataclass
class LatentGrid:
    data: np.ndarray        # [gh*gw, 48]
    grid: tuple


class TextEncoder:
    """Tiny transformer over padded captions with a masked-mean pooled summary."""

    def __init__(self, store: ParamStore, d_txt: int, d_clip: int, heads: int, depth: int = 2):
        self.d_txt = d_txt
        self.tok_emb = store.create("text.tok_emb", (len(VOCAB), d_txt), ("normal", 0.02))
        self.pos_emb = store.create("text.pos_emb", (T_MAX, d_txt), ("normal", 0.02))
        self.blocks = [EncoderBlock(store, f"text.block{i}", d_txt, heads) for i in range(depth)]
        self.pool_proj = Linear(store, "text.pool", d_txt, d_clip)

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> TextEncoding:
        ids = np.asarray(ids)
        mask = np.asarray(mask, dtype=self.tok_emb.data.dtype)
        if ids.shape != (T_MAX,) or mask.shape != (T_MAX,):
            raise ValidationError(f"caption must be padded to {T_MAX}, got {ids.shape}")
        if mask[0] != 1.0:
            raise ValidationError("empty caption: first token must be real")
        x = ad.add(ad.gather_rows(self.tok_emb, ids), self.pos_emb)
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        x = ad.layer_norm(x)
        m = Tensor(mask.reshape(T_MAX, 1))
        summed = ad.tsum(ad.mul(x, m), axis=0, keepdims=True)
        pooled = self.pool_proj(ad.mul(summed, 1.0 / float(mask.sum())))
        return TextEncoding(tokens=x, pooled=pooled, mask=mask, ids=ids)


class RefEncoder:
    """Encodes a 32x32 identity crop into 16 patch-token features."""

    def __init__(self, store: ParamStore, d_clip: int, heads: int):
        d_patch = 3 * REF_PATCH * REF_PATCH
        self.n_tokens = (32 // REF_PATCH) ** 2
        self.proj = Linear(store, "ref.proj", d_patch, d_clip)
        self.pos_emb = store.create("ref.pos_emb", (self.n_tokens, d_clip), ("normal", 0.02))
        self.block = EncoderBlock(store, "ref.block0", d_clip, heads)
        self.out = Linear(store, "ref.out", d_clip, d_clip)

    def __call__(self, crop: np.ndarray) -> Tensor:
        crop = np.asarray(crop)
        if crop.shape != (32, 32, 3):
            raise ValidationError(f"reference crop must be 32x32x3, got {crop.shape}")
        patches = _patchify(crop.astype(self.pos_emb.data.dtype), REF_PATCH)
        x = ad.add(self.proj(Tensor(patches)), self.pos_emb)
        x = self.block(x)
        return self.out(ad.layer_norm(x))


def _patchify(img: np.ndarray, p: int) -> np.ndarray:
    h, w, c = img.shape
    x = img.reshape(h // p, p, w // p, p, c)
    return x.transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)


def _unpatchify(tok: np.ndarray, grid, p: int) -> np.ndarray:
    gh, gw = grid
    x = tok.reshape(gh, gw, p, p, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, 3)


def _orthogonal_basis() -> np.ndarray:
    rng = Rng(fnv1a64(b"latent-codec-basis"))
    m = rng.normal((LAT_DIM, LAT_DIM))  # float64
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))[None, :]
    return q


_BASIS = _orthogonal_basis()


def encode_image(img: np.ndarray, dtype=np.float32) -> LatentGrid:
    """Float image in [0,1], sides divisible by 4, to latent tokens."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 image, got {img.shape}")
    h, w, _ = img.shape
    if h % PATCH or w % PATCH:
        raise ValidationError(f"image sides must be divisible by {PATCH}, got {h}x{w}")
    tokens = (_patchify(img, PATCH) - 0.5) @ _BASIS
    return LatentGrid(data=tokens.astype(dtype), grid=(h // PATCH, w // PATCH))


def decode_latent(lat: LatentGrid) -> np.ndarray:
    gh, gw = lat.grid
    tok = np.asarray(lat.data, dtype=np.float64)
    if tok.shape != (gh * gw, LAT_DIM):
        raise ValidationError(f"latent shape {tok.shape} does not match grid {lat.grid}")
    flat = tok @ _BASIS.T + 0.5
    return np.clip(_unpatchify(flat, lat.grid, PATCH), 0.0, 1.0)
