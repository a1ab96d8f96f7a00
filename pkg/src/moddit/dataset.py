"""Synthetic dataset: sample generation, manifests, and disk layout.

A Sample bundles everything one training step needs: a padded caption with
per-subject token spans, the target image, per-subject reference crops and
pixel masks, and (for side-by-side pairs) the latent-column mask that says
which half is being modulated. Samples are generated procedurally from an
Rng, written to disk as PPM images plus a line-delimited JSON manifest, and
read back lazily during training.

Identity = (shape, color, size), 80 combinations total. A seeded shuffle
splits them into a training pool and a benchmark-only pool, so benchmark
references are identities the model never saw rendered during training.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import grammar, ppm, render
from .errors import ValidationError
from .rng import Rng

KINDS = ("single", "multi", "concat", "cross")


@dataclass
class SubjectSpec:
    shape: str
    color: str
    size: str
    cell: tuple[int, int]

    @property
    def identity(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.size)


@dataclass
class SubjectRef:
    """A subject with its caption span and reference crop."""

    spec: SubjectSpec
    span: tuple[int, int]
    crop: np.ndarray  # uint8 [32,32,3]
    mask: np.ndarray | None = None  # bool [H,W] in the target image


@dataclass
class Sample:
    kind: str
    caption_tokens: list[str]
    caption_ids: np.ndarray  # int64 [T_MAX]
    caption_mask: np.ndarray  # float64 [T_MAX]
    image: np.ndarray  # uint8 [H,W,3]
    subjects: list[SubjectRef]  # subjects receiving offsets, spans aligned
    scene: list[SubjectSpec]  # every subject actually drawn
    bg: str
    grid: tuple[int, int]  # latent grid (rows, cols)
    mod_cols: tuple[int, int] | None = None  # latent columns being modulated
    sample_id: int = -1

    def region_token_mask(self) -> np.ndarray | None:
        """Token-level mask, 1 where the latent column is being modulated."""
        if self.mod_cols is None:
            return None
        gh, gw = self.grid
        cols = np.arange(gw)
        inside = (cols >= self.mod_cols[0]) & (cols < self.mod_cols[1])
        return np.repeat(inside[None, :], gh, axis=0).reshape(-1).astype(np.float64)


def all_identities() -> list[tuple[str, str, str]]:
    out = []
    for shape in grammar.SHAPES:
        for color in grammar.SUBJECT_COLORS:
            for size in grammar.SIZES:
                out.append((shape, color, size))
    return out


def split_identities(rng: Rng, bench_fraction: float = 0.2):
    """Seeded partition into (train pool, bench-only pool)."""
    ids = all_identities()
    rng.shuffle(ids)
    n_bench = max(1, int(round(len(ids) * bench_fraction)))
    return ids[n_bench:], ids[:n_bench]


# -- generation ------------------------------------------------------------------


def _draw_subjects(rng: Rng, n: int, pool) -> list[SubjectSpec]:
    if n < 1 or n > render.GRID * render.GRID:
        raise ValidationError(f"cannot place {n} subjects on the grid")
    idents = set()
    while len(idents) < n:
        idents.add(pool[rng.integers(0, len(pool))])
    cells = set()
    while len(cells) < n:
        cells.add((rng.integers(0, render.GRID), rng.integers(0, render.GRID)))
    specs = []
    for ident, cell in zip(sorted(idents), sorted(cells)):
        specs.append(SubjectSpec(ident[0], ident[1], ident[2], cell))
    # reading order keeps caption order deterministic
    specs.sort(key=lambda s: s.cell)
    return specs


def gen_scene(rng: Rng, n_subjects: int, pool, generic_prob: float = 0.0,
              drop_size_prob: float = 0.25) -> Sample:
    """One rendered scene with caption, spans, crops, and masks.

    Each subject phrase independently may go generic ('a shape') or drop its
    size word, which is what forces identity to flow through the reference
    crop rather than the text.
    """
    specs = _draw_subjects(rng, n_subjects, pool)
    bg = list(grammar.BG_COLORS)[rng.integers(0, len(grammar.BG_COLORS))]
    phrases = []
    for spec in specs:
        generic = rng.uniform() < generic_prob
        with_size = rng.uniform() >= drop_size_prob
        phrases.append(grammar.subject_phrase(spec.shape, spec.color, spec.size,
                                              generic=generic, with_size=with_size))
    tokens, spans = grammar.build_caption(phrases, bg)
    ids, mask = grammar.pad_caption(grammar.tokenize(tokens))
    img, masks = render.render_scene([(s.shape, s.color, s.size, *s.cell) for s in specs], bg)
    subjects = [
        SubjectRef(spec, span, render.render_crop(spec.shape, spec.color, spec.size), m)
        for spec, span, m in zip(specs, spans, masks)
    ]
    gh = render.IMAGE_SIZE // 4
    return Sample("single" if n_subjects == 1 else "multi", tokens, ids, mask,
                  img, subjects, list(specs), bg, (gh, gh))


def concat_pair(a: Sample, b: Sample, rng: Rng) -> Sample:
    """Side-by-side pair; offsets apply to one half, the other is preserved.

    Both inputs must be single-scene samples at native resolution. The rng
    picks which half keeps its offset bundles; the other half's spans are
    dropped and its latent columns form the preservation region.
    """
    for s in (a, b):
        if s.kind not in ("single", "multi"):
            raise ValidationError(f"concat_pair wants single-scene samples, got {s.kind!r}")
        if s.image.shape[1] != render.IMAGE_SIZE:
            raise ValidationError("concat_pair inputs must be native-width scenes")
    tokens, spans = grammar.merge_captions(a.caption_tokens, [s.span for s in a.subjects],
                                           b.caption_tokens, [s.span for s in b.subjects])
    ids, mask = grammar.pad_caption(grammar.tokenize(tokens))
    img = np.concatenate([a.image, b.image], axis=1)
    gh, gw = a.grid[0], a.grid[1] + b.grid[1]
    modulate_left = rng.uniform() < 0.5
    n_left = len(a.subjects)
    if modulate_left:
        kept = list(zip(a.subjects, spans[:n_left]))
        mod_cols = (0, a.grid[1])
    else:
        kept = list(zip(b.subjects, spans[n_left:]))
        mod_cols = (a.grid[1], gw)
    subjects = []
    for src, span in kept:
        m = np.zeros((img.shape[0], img.shape[1]), dtype=bool)
        xoff = 0 if modulate_left else a.image.shape[1]
        m[:, xoff : xoff + render.IMAGE_SIZE] = src.mask
        subjects.append(SubjectRef(src.spec, span, src.crop, m))
    scene = list(a.scene) + [SubjectSpec(s.shape, s.color, s.size, (s.cell[0], s.cell[1] + render.GRID))
                             for s in b.scene]
    return Sample("concat", tokens, ids, mask, img, subjects, scene,
                  a.bg, (gh, gw), mod_cols=mod_cols)


def cross_pair(rng: Rng, pool, generic_prob: float = 0.5,
               drop_size_prob: float = 0.25) -> Sample:
    """Same identity, different rendering: the crop comes from a re-render
    with jittered size (+-1 px), jittered center, and its own background."""
    sample = gen_scene(rng, 1, pool, generic_prob=generic_prob,
                       drop_size_prob=drop_size_prob)
    spec = sample.subjects[0].spec
    crop_bg = list(grammar.BG_COLORS)[rng.integers(0, len(grammar.BG_COLORS))]
    crop = render.render_crop(
        spec.shape, spec.color, spec.size,
        bg=grammar.BG_COLORS[crop_bg],
        jitter_h=rng.integers(-1, 2),
        jitter_y=rng.integers(-1, 2),
        jitter_x=rng.integers(-1, 2),
    )
    sample.subjects[0].crop = crop
    sample.kind = "cross"
    return sample


# -- disk layout -------------------------------------------------------------------


def _record_for(sample: Sample, img_rel: str, crop_rels, mask_rels) -> dict:
    return {
        "id": sample.sample_id,
        "kind": sample.kind,
        "caption": sample.caption_tokens,
        "spans": [list(s.span) for s in sample.subjects],
        "subjects": [
            {"shape": s.spec.shape, "color": s.spec.color, "size": s.spec.size,
             "cell": list(s.spec.cell), "crop": c, "mask": m}
            for s, c, m in zip(sample.subjects, crop_rels, mask_rels)
        ],
        "scene": [
            {"shape": s.shape, "color": s.color, "size": s.size, "cell": list(s.cell)}
            for s in sample.scene
        ],
        "bg": sample.bg,
        "image": img_rel,
        "grid": list(sample.grid),
        "mod_cols": list(sample.mod_cols) if sample.mod_cols else None,
    }


def generate_dataset(out_dir: str, rng: Rng, counts: dict, generic_prob: float = 0.5,
                     bench_fraction: float = 0.2, multi_max: int = 3,
                     drop_size_prob: float = 0.25) -> dict:
    """Write the full training corpus and the identity split.

    counts: {"single": n, "multi": n, "concat": n, "cross": n}.
    Returns summary info (also written as dataset.json).
    """
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("img", "crop", "mask"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    train_pool, bench_pool = split_identities(rng.split("identity-split"), bench_fraction)

    gen_rng = rng.split("samples")
    records = []
    sid = 0

    def emit(sample: Sample):
        nonlocal sid
        sample.sample_id = sid
        img_rel = f"img/{sid:06d}.ppm"
        ppm.write_ppm(os.path.join(out_dir, img_rel), sample.image)
        crop_rels, mask_rels = [], []
        for j, s in enumerate(sample.subjects):
            crop_rel = f"crop/{sid:06d}_{j}.ppm"
            mask_rel = f"mask/{sid:06d}_{j}.ppm"
            ppm.write_ppm(os.path.join(out_dir, crop_rel), s.crop)
            mask_img = np.repeat((s.mask.astype(np.uint8) * 255)[:, :, None], 3, axis=2)
            ppm.write_ppm(os.path.join(out_dir, mask_rel), mask_img)
            crop_rels.append(crop_rel)
            mask_rels.append(mask_rel)
        records.append(_record_for(sample, img_rel, crop_rels, mask_rels))
        sid += 1

    for _ in range(counts.get("single", 0)):
        emit(gen_scene(gen_rng, 1, train_pool, generic_prob, drop_size_prob))
    for _ in range(counts.get("multi", 0)):
        n = gen_rng.integers(2, multi_max + 1)
        emit(gen_scene(gen_rng, n, train_pool, generic_prob, drop_size_prob))
    for _ in range(counts.get("concat", 0)):
        left = gen_scene(gen_rng, 1, train_pool, generic_prob, drop_size_prob)
        right = gen_scene(gen_rng, 1, train_pool, generic_prob, drop_size_prob)
        emit(concat_pair(left, right, gen_rng))
    for _ in range(counts.get("cross", 0)):
        emit(cross_pair(gen_rng, train_pool, generic_prob, drop_size_prob))

    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    info = {
        "counts": counts,
        "generic_prob": generic_prob,
        "vocab_hash": grammar.vocab_hash(),
        "train_identities": [list(i) for i in train_pool],
        "bench_identities": [list(i) for i in bench_pool],
    }
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(info, fh, sort_keys=True, indent=1)
    return info


@dataclass
class _LazyRecord:
    rec: dict
    root: str

    def load(self) -> Sample:
        rec = self.rec
        tokens = rec["caption"]
        ids, mask = grammar.pad_caption(grammar.tokenize(tokens))
        img = ppm.read_ppm(os.path.join(self.root, rec["image"]))
        subjects = []
        for sub, span in zip(rec["subjects"], rec["spans"]):
            spec = SubjectSpec(sub["shape"], sub["color"], sub["size"], tuple(sub["cell"]))
            crop = ppm.read_ppm(os.path.join(self.root, sub["crop"]))
            m = ppm.read_ppm(os.path.join(self.root, sub["mask"]))[:, :, 0] > 127
            subjects.append(SubjectRef(spec, tuple(span), crop, m))
        scene = [SubjectSpec(s["shape"], s["color"], s["size"], tuple(s["cell"]))
                 for s in rec["scene"]]
        mod_cols = tuple(rec["mod_cols"]) if rec["mod_cols"] else None
        return Sample(rec["kind"], tokens, ids, mask, img, subjects, scene,
                      rec["bg"], tuple(rec["grid"]), mod_cols=mod_cols, sample_id=rec["id"])


class TrainData:
    """Lazy manifest-backed dataset with per-kind pools."""

    def __init__(self, root: str):
        self.root = root
        manifest = os.path.join(root, "manifest.jsonl")
        if not os.path.exists(manifest):
            raise ValidationError(f"no manifest.jsonl under {root}")
        self.pools: dict[str, list[_LazyRecord]] = {k: [] for k in KINDS}
        with open(manifest) as fh:
            for line in fh:
                rec = json.loads(line)
                self.pools[rec["kind"]].append(_LazyRecord(rec, root))
        with open(os.path.join(root, "dataset.json")) as fh:
            self.info = json.load(fh)
        if self.info["vocab_hash"] != grammar.vocab_hash():
            raise ValidationError("dataset was generated with a different vocabulary")

    def draw(self, kind: str, rng: Rng) -> Sample:
        pool = self.pools.get(kind)
        if not pool:
            raise ValidationError(f"dataset has no samples of kind {kind!r}")
        return pool[rng.integers(0, len(pool))].load()

    def draw_mixed(self, mix: dict, rng: Rng) -> Sample:
        """Draw a kind according to mix fractions, then a sample of that kind."""
        kinds = [k for k in KINDS if mix.get(k, 0.0) > 0]
        weights = np.array([mix[k] for k in kinds], dtype=np.float64)
        weights /= weights.sum()
        u = rng.uniform()
        acc = 0.0
        chosen = kinds[-1]
        for k, w in zip(kinds, weights):
            acc += w
            if u < acc:
                chosen = k
                break
        return self.draw(chosen, rng)

    @property
    def bench_identities(self):
        return [tuple(i) for i in self.info["bench_identities"]]


# -- benchmark manifest ---------------------------------------------------------


def build_bench_manifest(path: str, rng: Rng, identities, suite_sizes: dict) -> list[dict]:
    """Deterministic benchmark entries: generic prompts plus reference ids.

    Each entry carries n reference identities (n = 1, 2, or 3 by suite), a
    background for the prompt, and per-subject generic spans. Raises if a
    suite asks for more distinct (identity set, background) combinations
    than exist.
    """
    identities = [tuple(i) for i in identities]
    suites = {"single": 1, "dual": 2, "triple": 3}
    entries = []
    for suite, n_subj in suites.items():
        size = suite_sizes.get(suite, 0)
        combos = 1
        for k in range(n_subj):
            combos = combos * (len(identities) - k) // (k + 1)
        combos *= len(grammar.BG_COLORS)
        if size > combos:
            raise ValidationError(
                f"suite {suite!r} wants {size} entries but only {combos} combinations exist")
        seen = set()
        srng = rng.split(f"bench-{suite}")
        while len([e for e in entries if e["suite"] == suite]) < size:
            picked = set()
            while len(picked) < n_subj:
                picked.add(identities[srng.integers(0, len(identities))])
            bg = list(grammar.BG_COLORS)[srng.integers(0, len(grammar.BG_COLORS))]
            key = (tuple(sorted(picked)), bg)
            if key in seen:
                continue
            seen.add(key)
            subjects = sorted(picked)
            phrases = [grammar.subject_phrase(s, c, z, generic=True) for s, c, z in subjects]
            tokens, spans = grammar.build_caption(phrases, bg)
            entries.append({
                "suite": suite,
                "prompt": tokens,
                "spans": [list(s) for s in spans],
                "subjects": [list(s) for s in subjects],
                "bg": bg,
            })
    payload = {"vocab_hash": grammar.vocab_hash(), "entries": entries}
    with open(path, "w") as fh:
        for entry in [payload]:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return entries


def load_bench_manifest(path: str) -> list[dict]:
    with open(path) as fh:
        payload = json.loads(fh.readline())
    if payload["vocab_hash"] != grammar.vocab_hash():
        raise ValidationError("bench manifest was built with a different vocabulary")
    return payload["entries"]
