"""What lives inside the model: parameter groups, streams, and records.

Uses a micro configuration so everything is instant; the default
configuration has the same structure at dim=120.
"""

import numpy as np

from moddit.config import ModelConfig
from moddit.dataset import all_identities, gen_scene
from moddit.encoders import encode_image
from moddit.model import Model
from moddit.ppm import to_float
from moddit.rng import Rng
from moddit.training import subjects_of

cfg = ModelConfig(dim=24, heads=4, double_blocks=2, single_blocks=2,
                  cond_dim=24, clip_dim=16, text_dim=16, text_depth=1,
                  resampler_width=16, resampler_depth=2, resampler_heads=2,
                  lora_rank=2, ffn_mult=2)
model = Model(cfg, seed=0)

groups = {}
for name, t in model.store.named():
    groups.setdefault(name.split(".")[0], [0, 0])
    groups[name.split(".")[0]][0] += 1
    groups[name.split(".")[0]][1] += t.data.size
for g, (n, sz) in sorted(groups.items()):
    print(f"{g:<8} {n:>3} tensors {sz:>8,} values")

# four parameter families, four training stages:
#   core+text  -> dense pretraining
#   adapter    -> offset resampler (stage 1+)
#   .lora_a/b  -> low-rank deltas inside core linears (stage 2+)
#   ref        -> reference-latent projector for single blocks (stage 2+)

scene = gen_scene(Rng(11), 2, all_identities(), generic_prob=0.0)
enc = model.encode_text(scene.caption_ids, scene.caption_mask)
print(f"text encoding: tokens {enc.tokens.shape}, pooled {enc.pooled.shape}")

lat = encode_image(to_float(scene.image))
noisy = lat.data + Model.draw_noise(Rng(1), lat.grid)
from moddit.encoders import LatentGrid  # local import keeps the tour linear

vel, records = model.velocity(enc, LatentGrid(data=noisy, grid=lat.grid), 0.5,
                              want_records=True)
print(f"velocity {vel.shape} over a {lat.grid} latent grid")
print(f"{len(records)} attention records (text rows onto image keys), "
      f"first probs shape {records[0].probs.shape}")

bundles = model.build_bundles(enc, subjects_of(scene))
print(f"{len(bundles)} offset bundles; each carries shared {bundles[0].shared.shape} "
      f"and per-block {bundles[0].per_block.shape} offsets")
print("fresh adapters emit exact zeros:",
      bool(np.all(bundles[0].shared.data == 0.0)
           and np.all(bundles[0].per_block.data == 0.0)))
