"""Staged training: optimizer, loss assembly, metrics log, checkpoints.

Stage semantics (what trains, what is injected) are fixed by stage index:

  stage 0   dense backbone + text encoder, flow loss only, no subjects
  stage 1   adapter + both encoders; offsets active, no reference latents
  stage 2   adds low-rank backbone adapters and reference-latent injection
  stage 3   same trainables, cross-image pairs join the data mix

The frozen twin used by the region and attention losses is re-snapshotted
at the start of every stage past 0. The optimizer restarts at each stage
boundary because the trainable set changes.
"""

from __future__ import annotations

import os
import time
from dataclasses import fields as dc_fields

import numpy as np

from . import autodiff as ad
from .autodiff import backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ModelConfig
from .encoders import LatentGrid, encode_image
from .errors import InvariantError, ValidationError
from .grammar import vocab_hash
from .losses import attention_loss, combine, flow_loss, flow_target, noisy_latent, region_loss
from .model import Model
from .ppm import to_float
from .rng import Rng

METRICS_HEADER = "step,stage,flow,region,attention,total,wall_ms"

STAGE_GROUPS = {
    0: dict(prefixes=("core.", "text."), suffixes=(), lora=False,
            bundles=False, refs=False),
    1: dict(prefixes=("adapter.", "text.", "ref."), suffixes=(), lora=False,
            bundles=True, refs=False),
    2: dict(prefixes=("adapter.", "text.", "ref."), suffixes=(".lora_a", ".lora_b"),
            lora=True, bundles=True, refs=True),
    3: dict(prefixes=("adapter.", "text.", "ref."), suffixes=(".lora_a", ".lora_b"),
            lora=True, bundles=True, refs=True),
}


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(named_params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def lr_at(tr, k: int, steps: int) -> float:
    """Learning rate for step k of a stage, fresh schedule per stage."""
    if tr.lr_schedule == "constant" or steps <= 1:
        return tr.lr
    progress = k / (steps - 1)
    scale = tr.lr_floor + (1.0 - tr.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * progress))
    return tr.lr * scale


def _fmt(x: float) -> str:
    return repr(float(x))


class MetricsLog:
    def __init__(self):
        self.rows = []

    def add(self, step, stage, flow, region, attention, total, wall_ms):
        self.rows.append(f"{step},{stage},{_fmt(flow)},{_fmt(region)},"
                         f"{_fmt(attention)},{_fmt(total)},{wall_ms:.3f}")

    def write(self, path: str):
        with open(path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in self.rows:
                fh.write(row + "\n")


def subjects_of(sample):
    return [(s.spec.identity, s.span, to_float(s.crop)) for s in sample.subjects]


def sample_losses(model: Model, twin, sample, t: float, eps: np.ndarray,
                  stage_idx: int, settings):
    """Loss graph for one training sample. twin may be None in stage 0."""
    group = STAGE_GROUPS[stage_idx]
    x = encode_image(to_float(sample.image), dtype=model.store.dtype)
    z = LatentGrid(data=noisy_latent(x.data, eps, t), grid=x.grid)
    target = flow_target(x.data, eps)

    enc = model.encode_text(sample.caption_ids, sample.caption_mask)
    bundles = model.build_bundles(enc, subjects_of(sample)) if group["bundles"] else []
    refs = (Model.ref_latents([to_float(s.crop) for s in sample.subjects])
            if group["refs"] and sample.subjects else [])

    region_mask = sample.region_token_mask()
    want_region = settings.region_weight > 0 and stage_idx >= 1 and sample.kind == "concat"
    if want_region and region_mask is None:
        raise ValidationError("region loss requested for a sample without a region mask")
    want_attn = settings.attention_weight > 0 and stage_idx >= 1 and bundles

    v, recs = model.velocity(enc, z, t, bundles=bundles, ref_latents=refs,
                             want_records=bool(want_attn))

    region = attn = None
    degenerate = False
    if want_region or want_attn:
        with no_grad():
            enc_b = twin.encode_text(sample.caption_ids, sample.caption_mask)
            v_base, recs_base = twin.velocity(enc_b, z, t, want_records=bool(want_attn))
        if want_region:
            region, degenerate = region_loss(v, v_base.data, region_mask)
        if want_attn:
            attn = attention_loss(recs, recs_base)

    flow = flow_loss(v, target)
    return combine(flow, region, attn, settings.region_weight,
                   settings.attention_weight, region_degenerate=degenerate)


def _model_meta(model: Model) -> dict:
    meta = {"vocab_hash": str(vocab_hash()),
            "lora_enabled": "1" if any(l.lora_enabled for l in model.backbone.lora_linears()
                                       if l.lora_rank) else "0"}
    for f in dc_fields(ModelConfig):
        meta[f"model.{f.name}"] = repr(getattr(model.cfg, f.name))
    return meta


def model_to_checkpoint(model: Model, step: int, stage: int, rng_states=(),
                        optimizer: Adam | None = None) -> Checkpoint:
    ckpt = Checkpoint()
    ckpt.meta.update(_model_meta(model))
    ckpt.meta["step"] = str(step)
    ckpt.meta["stage"] = str(stage)
    for name, (seed, counter) in rng_states:
        ckpt.meta[f"rng.{name}.seed"] = str(int(seed))
        ckpt.meta[f"rng.{name}.counter"] = str(int(counter))
    for name, arr in model.state().items():
        ckpt.tensors[f"param.{name}"] = arr
    if optimizer is not None:
        ckpt.meta["opt.t"] = str(optimizer.t)
        for name, _ in optimizer.params:
            ckpt.tensors[f"opt.m.{name}"] = optimizer.m[name]
            ckpt.tensors[f"opt.v.{name}"] = optimizer.v[name]
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    if ckpt.require("vocab_hash") != str(vocab_hash()):
        raise ValidationError("checkpoint was trained with a different vocabulary")
    defaults = ModelConfig()
    kwargs = {}
    for f in dc_fields(ModelConfig):
        raw = ckpt.require(f"model.{f.name}")
        ref = getattr(defaults, f.name)
        if isinstance(ref, bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(ref, int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    model = Model(ModelConfig(**kwargs), seed=0)
    state = {}
    for key, arr in ckpt.tensors.items():
        if key.startswith("param."):
            state[key[len("param."):]] = arr
    model.load_state(state)
    model.set_lora(ckpt.meta.get("lora_enabled") == "1")
    return model


def run_stages(model: Model, cfg: Config, data, out_dir: str, stages,
               log: MetricsLog | None = None, start_step: int = 0,
               ablate_attention: bool = False, progress=None):
    """Train the given stages in order. Returns (log, final step count).

    On a non-finite loss the last good parameter snapshot is written to
    <out_dir>/aborted.ckpt and InvariantError is raised.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = log or MetricsLog()
    step = start_step
    tr = cfg.train
    master = Rng(tr.seed)
    rng_data = master.split("data")
    rng_noise = master.split("noise")
    rng_t = master.split("t")

    for stage_idx in stages:
        settings = cfg.stages[stage_idx]
        if ablate_attention and stage_idx >= 1:
            settings = type(settings)(**{**settings.__dict__, "attention_weight": 0.0})
        group = STAGE_GROUPS[stage_idx]
        model.set_lora(group["lora"])
        if settings.steps == 0:
            continue
        for kind, frac in settings.mix().items():
            if frac > 0 and not data.pools.get(kind):
                raise ValidationError(f"stage{stage_idx} mix needs {kind!r} samples "
                                      "but the dataset has none")
        twin = model.frozen() if stage_idx >= 1 else None
        trainable = model.store.set_trainable(group["prefixes"], group["suffixes"])
        opt = Adam([(n, model.store.params[n]) for n in trainable],
                   lr=tr.lr, beta1=tr.beta1, beta2=tr.beta2, eps=tr.eps)
        last_good = model.state()

        for k in range(settings.steps):
            opt.lr = lr_at(tr, k, settings.steps)
            t0 = time.perf_counter()
            step += 1
            model.store.zero_grads()
            fl = rg = at = tt = 0.0
            for _ in range(tr.batch):
                sample = data.draw_mixed(settings.mix(), rng_data)
                t_val = float(rng_t.uniform())
                gh, gw = sample.grid
                eps = rng_noise.normal((gh * gw, 48)).astype(model.store.dtype)
                total, report = sample_losses(model, twin, sample, t_val, eps,
                                              stage_idx, settings)
                if not np.isfinite(report.total):
                    ck = model_to_checkpoint(model, step - 1, stage_idx)
                    ck.tensors.update({f"param.{k}": v for k, v in last_good.items()})
                    save_checkpoint(os.path.join(out_dir, "aborted.ckpt"), ck)
                    log.write(os.path.join(out_dir, "metrics.csv"))
                    raise InvariantError(
                        f"non-finite loss at step {step}; last good state saved")
                backward(ad.mul(total, 1.0 / tr.batch))
                fl += report.flow / tr.batch
                rg += report.region / tr.batch
                at += report.attention / tr.batch
                tt += report.total / tr.batch
            opt.step()
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log.add(step, stage_idx, fl, rg, at, tt, wall_ms)
            if step % tr.log_every == 0:
                last_good = model.state()
                if progress:
                    progress(step, stage_idx, fl, tt)

        rngs = [("data", rng_data.state), ("noise", rng_noise.state),
                ("t", rng_t.state)]
        save_checkpoint(os.path.join(out_dir, f"stage{stage_idx}.ckpt"),
                        model_to_checkpoint(model, step, stage_idx, rngs, opt))

    log.write(os.path.join(out_dir, "metrics.csv"))
    rngs = [("data", rng_data.state), ("noise", rng_noise.state),
            ("t", rng_t.state)]
    save_checkpoint(os.path.join(out_dir, "final.ckpt"),
                    model_to_checkpoint(model, step, stages[-1] if stages else -1, rngs))
    return log, step


def load_model(path: str) -> Model:
    return model_from_checkpoint(load_checkpoint(path))


# -- finite-difference audit ---------------------------------------------------


def _gradcheck_model(cfg: ModelConfig | None, seed: int) -> Model:
    if cfg is None:
        cfg = ModelConfig(dim=24, heads=4, double_blocks=2, single_blocks=2,
                          cond_dim=24, clip_dim=16, text_dim=16, text_depth=1,
                          resampler_width=16, resampler_depth=2, resampler_heads=2,
                          lora_rank=2, ffn_mult=2)
    model = Model(cfg, seed, dtype=np.float64)
    model.set_lora(True)
    rng = Rng(seed).split("gradcheck-jitter")
    for _, t in model.store.named():
        # wake the zero-initialized paths (gates, adapter outputs, low-rank A)
        t.data = t.data + 0.05 * rng.normal(t.data.shape)
    return model


def gradient_report(cfg: ModelConfig | None = None, seed: int = 0,
                    coords: int = 2, probes=None) -> dict:
    """Max finite-difference error for each loss, through every pathway.

    The audit runs on a two-subject concatenated sample with offsets,
    reference latents, and low-rank adapters enabled, so one velocity call
    covers text conditioning, per-token offsets, resamplers, reference
    injection, and the readout. float64 only.
    """
    from .dataset import all_identities, concat_pair, gen_scene
    from .gradcheck import grad_check

    model = _gradcheck_model(cfg, seed)
    srng = Rng(seed).split("gradcheck-scene")
    pool = all_identities()
    sample = concat_pair(gen_scene(srng, 1, pool, 0.0), gen_scene(srng, 1, pool, 0.0),
                         srng)
    subjects = subjects_of(sample)
    crops = [to_float(s.crop) for s in sample.subjects]
    x = encode_image(to_float(sample.image), dtype=np.float64)
    drng = Rng(seed).split("gradcheck-noise")
    eps = drng.normal(x.data.shape)
    t_val = 0.6
    z = LatentGrid(data=noisy_latent(x.data, eps, t_val), grid=x.grid)
    target = flow_target(x.data, eps)
    region_mask = sample.region_token_mask()

    twin = model.frozen()
    with no_grad():
        enc_b = twin.encode_text(sample.caption_ids, sample.caption_mask)
        v_base, recs_base = twin.velocity(enc_b, z, t_val, want_records=True)
    v_base = v_base.data

    def forward(want_records):
        enc = model.encode_text(sample.caption_ids, sample.caption_mask)
        bundles = model.build_bundles(enc, subjects)
        refs = Model.ref_latents(crops)
        return model.velocity(enc, z, t_val, bundles=bundles, ref_latents=refs,
                              want_records=want_records)

    def total_loss():
        vel, recs = forward(True)
        fl = flow_loss(vel, target)
        rg = region_loss(vel, v_base, region_mask)[0]
        at = attention_loss(recs, recs_base)
        return combine(fl, rg, at, 10.0, 0.01)[0]

    losses = {
        "flow": lambda: flow_loss(forward(False)[0], target),
        "region": lambda: region_loss(forward(False)[0], v_base, region_mask)[0],
        "attention": lambda: attention_loss(forward(True)[1], recs_base),
        "total": total_loss,
    }

    if probes is None:
        probes = ["adapter.", ".lora_a", ".lora_b", "text.", "ref.",
                  "core.double0", "core.single0", "core.readout", "core.cond1"]
    model.store.set_trainable(prefixes=("",))
    picked = {}
    for pat in probes:
        for name, tensor in model.store.named():
            if pat in name:
                picked[name] = tensor
                break
    report = {}
    for loss_name, f in losses.items():
        # eps balances truncation against roundoff: some probed coordinates
        # carry gradients near 1e-8, where a 1e-6 step is pure noise
        report[loss_name] = grad_check(f, picked, eps=1e-4,
                                       max_coords_per_param=coords,
                                       rng=Rng(seed).split(f"coords-{loss_name}"))
    return report
