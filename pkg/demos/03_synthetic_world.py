"""Tour of the synthetic world: scenes, captions, spans, masks, crops.

Writes a few PPM images under demos/out/ so you can look at what the
model actually trains on.
"""

import os

from moddit import ppm
from moddit.dataset import all_identities, concat_pair, gen_scene
from moddit.grammar import T_MAX
from moddit.rng import Rng

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)

pool = all_identities()
print(f"{len(pool)} identities: 5 shapes x 2 sizes x 8 colors")

rng = Rng(2024)
scene = gen_scene(rng, 2, pool, generic_prob=0.0)
print("caption:", " ".join(scene.caption_tokens))
for ref, spec in zip(scene.subjects, scene.scene):
    s, e = ref.span
    words = scene.caption_tokens[s:e]
    print(f"  span {ref.span} -> {' '.join(words)!r}, subject {spec.identity}, "
          f"cell {spec.cell}, mask covers {int(ref.mask.sum())} px")
ppm.write_ppm(os.path.join(out_dir, "scene.ppm"), scene.image)
for j, ref in enumerate(scene.subjects):
    ppm.write_ppm(os.path.join(out_dir, f"crop{j}.ppm"), ref.crop)

# captions are padded to a fixed length with an explicit mask
ids, mask = scene.caption_ids, scene.caption_mask
assert ids.shape == (T_MAX,) and mask.shape == (T_MAX,)
print(f"padded to {T_MAX} tokens, {int(mask.sum())} real")

# concat pairs glue two singles side by side; only one half keeps its
# offsets, and the token mask records which latent columns those are
left = gen_scene(rng, 1, pool, generic_prob=0.0)
right = gen_scene(rng, 1, pool, generic_prob=0.0)
pair = concat_pair(left, right, rng)
print("concat caption:", " ".join(pair.caption_tokens))
print(f"image {pair.image.shape[1]}px wide, modulated latent columns "
      f"{pair.mod_cols}, grid {pair.grid}")
region = pair.region_token_mask()
print(f"region mask marks {int(region.sum())} of {region.size} latent tokens "
      "as belonging to the modulated half")
ppm.write_ppm(os.path.join(out_dir, "concat.ppm"), pair.image)
print(f"wrote scene.ppm, crops, concat.ppm under {out_dir}")
