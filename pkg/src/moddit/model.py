"""Composite generator: encoders + backbone + identity-offset adapter.

Also owns the flow-matching sampler (plain Euler from t=1 to t=0) and the
frozen-twin snapshot used by the regularization losses.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .adapter import OffsetAdapter, embedding_injection, per_block_conditioning
from .autodiff import Tensor, no_grad
from .backbone import Backbone
from .config import ModelConfig
from .encoders import (LAT_DIM, LatentGrid, RefEncoder, TextEncoder, TextEncoding,
                       decode_latent, encode_image)
from .errors import ValidationError
from .nn import ParamStore
from .rng import Rng


class Model:
    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.store = ParamStore(Rng(seed), dtype=dtype)
        self.text_encoder = TextEncoder(self.store, cfg.text_dim, cfg.clip_dim,
                                        heads=2, depth=cfg.text_depth)
        self.ref_encoder = RefEncoder(self.store, cfg.clip_dim, heads=2)
        self.backbone = Backbone(self.store, cfg)
        self.adapter = OffsetAdapter(self.store, cfg)

    # -- adapters ------------------------------------------------------------

    def set_lora(self, enabled: bool):
        for lin in self.backbone.lora_linears():
            if lin.lora_rank:
                lin.lora_enabled = enabled

    def lora_param_names(self):
        names = []
        for lin in self.backbone.lora_linears():
            if lin.lora_rank:
                names += [f"{lin.name}.lora_a", f"{lin.name}.lora_b"]
        return names

    # -- encoding ------------------------------------------------------------

    def encode_text(self, ids, mask) -> TextEncoding:
        return self.text_encoder(ids, mask)

    def build_bundles(self, enc: TextEncoding, subjects):
        """subjects: iterable of (subject_id, span, crop float [32,32,3])."""
        bundles = []
        for subject_id, span, crop in subjects:
            feats = self.ref_encoder(np.asarray(crop, dtype=self.store.dtype))
            bundles.append(self.adapter.build_bundle(subject_id, span, enc.tokens,
                                                     enc.mask, feats))
        return bundles

    @staticmethod
    def ref_latents(crops):
        return [encode_image(np.asarray(c)) for c in crops]

    # -- forward -------------------------------------------------------------

    def velocity(self, enc: TextEncoding, z: LatentGrid, t, bundles=(),
                 ref_latents=(), want_records=False):
        """Flow velocity on the target grid plus double-block attention records."""
        y = self.backbone.base_conditioning(t, enc.pooled)
        t_len = enc.tokens.shape[0]
        if self.cfg.offsets_to_embeddings:
            text_delta = embedding_injection(bundles, t_len, self.cfg.dim,
                                             self.store.dtype)
            y_blocks = per_block_conditioning(y, (), t_len, self.cfg.n_blocks)
        else:
            text_delta = None
            y_blocks = per_block_conditioning(y, bundles, t_len, self.cfg.n_blocks)
        return self.backbone.forward(enc, z, y, y_blocks, ref_latents=ref_latents,
                                     text_delta=text_delta, want_records=want_records)

    # -- sampling ------------------------------------------------------------

    def sample(self, enc: TextEncoding, grid, steps: int, noise: np.ndarray,
               bundles=(), ref_latents=()):
        """Euler integration of the learned flow from noise to image."""
        gh, gw = grid
        n = gh * gw
        noise = np.asarray(noise, dtype=self.store.dtype)
        if noise.shape != (n, LAT_DIM):
            raise ValidationError(f"noise shape {noise.shape} != ({n}, {LAT_DIM})")
        if steps < 1:
            raise ValidationError("sampler needs at least one step")
        z = noise.copy()
        dt = 1.0 / steps
        with no_grad():
            for k in range(steps):
                t = 1.0 - k * dt
                v, _ = self.velocity(enc, LatentGrid(data=z, grid=grid), t,
                                     bundles=bundles, ref_latents=ref_latents)
                z = z - dt * v.data
        return decode_latent(LatentGrid(data=z, grid=grid))

    @staticmethod
    def draw_noise(rng: Rng, grid, dtype=np.float32) -> np.ndarray:
        gh, gw = grid
        return rng.normal((gh * gw, LAT_DIM)).astype(dtype)

    # -- state ---------------------------------------------------------------

    def state(self):
        return self.store.state()

    def load_state(self, state):
        self.store.load_state(state)

    def merged_state(self):
        """State dict with any enabled low-rank adapters folded into weights."""
        st = self.store.state()
        for lin in self.backbone.lora_linears():
            if lin.lora_rank:
                st[f"{lin.name}.w"] = lin.merged_weight_value()
        return st

    def frozen(self) -> "Model":
        """Detached snapshot of the current function, adapters folded in."""
        twin = Model(self.cfg, seed=self.seed, dtype=self.store.dtype)
        twin.store.load_state(self.merged_state())
        twin.set_lora(False)
        for t in twin.store.params.values():
            t.requires_grad = False
        return twin

    def to_double(self) -> "Model":
        twin = Model(self.cfg, seed=self.seed, dtype=np.float64)
        twin.store.load_state(self.state())
        twin.set_lora(any(lin.lora_enabled for lin in self.backbone.lora_linears()
                          if lin.lora_rank))
        return twin
