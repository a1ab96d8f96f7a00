"""Backbone, adapter, and composite model contracts.

The load-bearing properties here are exactness claims: zero offsets must
reproduce the plain text-to-image pass bit for bit, and offsets must touch
modulation rows only inside their spans. Everything else (hand oracles,
finite differences) guards the arithmetic.
"""

import dataclasses

import numpy as np
import pytest

from moddit import autodiff as ad
from moddit.adapter import OffsetBundle, Resampler, embedding_injection, per_block_conditioning
from moddit.autodiff import Tensor, backward, no_grad
from moddit.backbone import adaln, gated_residual
from moddit.config import ModelConfig
from moddit.encoders import _BASIS, LatentGrid, decode_latent, encode_image
from moddit.errors import ValidationError
from moddit.grammar import PAD_ID, T_MAX, build_caption, pad_caption, subject_phrase, tokenize
from moddit.model import Model
from moddit.render import render_crop
from moddit.rng import Rng
from moddit.sequence import ROLE_REF, ROLE_TARGET, ROLE_TEXT, build_plan, rotary_phases


def micro_cfg(**over):
    base = dict(dim=24, heads=4, double_blocks=2, single_blocks=2, cond_dim=24,
                clip_dim=16, text_dim=16, text_depth=1, resampler_width=16,
                resampler_depth=2, resampler_heads=2, lora_rank=2, ffn_mult=2)
    base.update(over)
    return ModelConfig(**base)


def randomize(store, rng, prefixes=("",), scale=0.05):
    for name, t in store.params.items():
        if any(name.startswith(p) for p in prefixes):
            t.data = (rng.normal(t.data.shape) * scale).astype(t.data.dtype)


def caption_with_subject():
    tokens, spans = build_caption([subject_phrase("circle", "red", "small")], "white")
    ids, mask = pad_caption(tokenize(tokens))
    crop = render_crop("circle", "red", "small").astype(np.float64) / 255.0
    return ids, mask, spans[0], crop


# ---------------------------------------------------------------- sequence


def test_plan_layout():
    plan = build_plan(3, (2, 2), [(1, 2)])
    assert plan.length == 3 + 4 + 2
    assert plan.text == (0, 3) and plan.target == (3, 7) and plan.refs == [(7, 9)]
    np.testing.assert_array_equal(plan.positions[:3], [(-1, 0, 0), (-1, 1, 0), (-1, 2, 0)])
    np.testing.assert_array_equal(plan.positions[3:7],
                                  [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1)])
    np.testing.assert_array_equal(plan.positions[7:], [(1, 0, 0), (1, 0, 1)])
    assert set(plan.roles[:3]) == {ROLE_TEXT}
    assert set(plan.roles[3:7]) == {ROLE_TARGET}
    assert set(plan.roles[7:]) == {ROLE_REF}


def test_plan_needs_text():
    with pytest.raises(ValidationError):
        build_plan(0, (2, 2))


def test_rotary_phase_hand_values():
    ang = rotary_phases(np.array([[2, 3, 4]]), head_dim=6)
    np.testing.assert_allclose(ang, [[2.0, 3.0, 4.0]], atol=1e-12)
    ang = rotary_phases(np.array([[2, 3, 4]]), head_dim=12)
    want = [[2.0, 0.02, 3.0, 0.03, 4.0, 0.04]]
    np.testing.assert_allclose(ang, want, atol=1e-12)


def test_rotary_rejects_unpaired_head_dim():
    with pytest.raises(ValidationError):
        rotary_phases(np.zeros((1, 3)), head_dim=32)


# ------------------------------------------------------------------- codec


def test_codec_orthogonal_and_roundtrip():
    eye = _BASIS @ _BASIS.T
    np.testing.assert_allclose(eye, np.eye(48), atol=1e-12)
    rng = Rng(3)
    img = rng.uniform((32, 32, 3))
    lat = encode_image(img, dtype=np.float64)
    assert lat.grid == (8, 8) and lat.data.shape == (64, 48)
    back = decode_latent(lat)
    np.testing.assert_allclose(back, img, atol=1e-12)
    lat32 = encode_image(img)  # float32 path
    np.testing.assert_allclose(decode_latent(lat32), img, atol=1e-5)


def test_codec_preserves_norms():
    rng = Rng(4)
    img = rng.uniform((8, 8, 3))
    lat = encode_image(img, dtype=np.float64)
    flat = img.reshape(2, 4, 2, 4, 3).transpose(0, 2, 1, 3, 4).reshape(4, 48) - 0.5
    np.testing.assert_allclose(np.linalg.norm(lat.data, axis=1),
                               np.linalg.norm(flat, axis=1), atol=1e-12)


def test_codec_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        encode_image(np.zeros((30, 32, 3)))
    with pytest.raises(ValidationError):
        encode_image(np.zeros((32, 32)))
    with pytest.raises(ValidationError):
        decode_latent(LatentGrid(data=np.zeros((3, 48)), grid=(2, 2)))


# ---------------------------------------------------------------- encoders


def test_text_encoder_ignores_padding_content():
    m = Model(micro_cfg(), seed=5)
    ids, mask, _, _ = caption_with_subject()
    n_valid = int(mask.sum())
    assert n_valid < T_MAX
    ids2 = ids.copy()
    ids2[-1] = 3  # a real vocab id parked in a padded slot
    a = m.encode_text(ids, mask)
    b = m.encode_text(ids2, mask)
    np.testing.assert_array_equal(a.tokens.data[:n_valid], b.tokens.data[:n_valid])
    np.testing.assert_array_equal(a.pooled.data, b.pooled.data)


def test_text_encoder_rejects_bad_captions():
    m = Model(micro_cfg(), seed=5)
    with pytest.raises(ValidationError):
        m.encode_text(np.zeros(5, dtype=np.int64), np.ones(5))
    mask = np.zeros(T_MAX)
    with pytest.raises(ValidationError):
        m.encode_text(np.full(T_MAX, PAD_ID), mask)


def test_ref_encoder_deterministic():
    m = Model(micro_cfg(), seed=5)
    _, _, _, crop = caption_with_subject()
    f1 = m.ref_encoder(crop.astype(np.float32))
    f2 = m.ref_encoder(crop.astype(np.float32))
    assert f1.shape == (16, 16)
    np.testing.assert_array_equal(f1.data, f2.data)
    with pytest.raises(ValidationError):
        m.ref_encoder(np.zeros((16, 16, 3), dtype=np.float32))


# ------------------------------------------------------------- modulation


def test_adaln_hand_value():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = adaln(x, Tensor(np.full((1, 1), 2.0)), Tensor(np.full((1, 1), 1.0)))
    np.testing.assert_allclose(out.data, [[-1.4495, 1.0, 3.4495]], atol=1e-3)
    plain = adaln(x, Tensor(np.ones((1, 1))), Tensor(np.zeros((1, 1))))
    np.testing.assert_array_equal(plain.data, ad.layer_norm(x).data)
    const = adaln(Tensor(np.full((1, 4), 5.0)), Tensor(np.full((1, 1), 9.0)),
                  Tensor(np.full((1, 1), 0.25)))
    np.testing.assert_array_equal(const.data, np.full((1, 4), 0.25))


def test_gated_residual_hand_value():
    out = gated_residual(Tensor(np.array([1.0])), Tensor(np.array([3.0])),
                         Tensor(np.array([2.0])))
    np.testing.assert_allclose(out.data, [7.0], atol=0)


def test_modulation_zero_init_identity():
    m = Model(micro_cfg(), seed=5)
    head = m.backbone.doubles[0].mod_text
    y = Tensor(Rng(9).normal((3, 24)).astype(np.float32))
    mod = head(y)
    np.testing.assert_array_equal(mod.alpha1.data, np.ones((3, 24), dtype=np.float32))
    np.testing.assert_array_equal(mod.beta1.data, np.zeros((3, 24), dtype=np.float32))
    np.testing.assert_array_equal(mod.gamma1.data, np.zeros((3, 24), dtype=np.float32))
    np.testing.assert_array_equal(mod.alpha2.data, np.ones((3, 24), dtype=np.float32))


def test_modulation_per_row_contract():
    m = Model(micro_cfg(), seed=5)
    rng = Rng(10)
    randomize(m.store, rng, prefixes=("core.double0.mod_text",), scale=0.2)
    head = m.backbone.doubles[0].mod_text
    y = rng.normal((3, 24)).astype(np.float32)
    y[1] = y[0]
    mod = head(Tensor(y))
    np.testing.assert_array_equal(mod.beta1.data[0], mod.beta1.data[1])
    assert not np.array_equal(mod.beta1.data[0], mod.beta1.data[2])


# ------------------------------------------------------------------ blocks


def test_blocks_are_identity_at_init():
    m = Model(micro_cfg(), seed=5)
    rng = Rng(11)
    ids, mask, _, _ = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=rng.normal((16, 48)).astype(np.float32), grid=(4, 4))
    y = m.backbone.base_conditioning(0.5, enc.pooled)
    xt0 = m.backbone.text_in(enc.tokens)
    xi0 = m.backbone.img_in(Tensor(z.data))
    from moddit.sequence import rope_tables
    plan = build_plan(T_MAX, z.grid)
    cos, sin = rope_tables(plan, m.cfg.head_dim, m.cfg.rope_base, np.float32)
    from moddit.backbone import _key_bias
    km = np.ones(plan.length)
    km[:T_MAX] = enc.mask
    bias = _key_bias(km, np.float32)
    ones = Tensor(np.ones((T_MAX, 1), dtype=np.float32))
    y_text = ad.mul(ones, y)
    xt, xi, _ = m.backbone.doubles[0](xt0, xi0, y_text, y, cos, sin, bias)
    np.testing.assert_array_equal(xt.data, xt0.data)
    np.testing.assert_array_equal(xi.data, xi0.data)

    x0 = ad.concat([xt0, xi0], axis=0)
    y_rows = ad.mul(Tensor(np.ones((plan.length, 1), dtype=np.float32)), y)
    x1 = m.backbone.singles[0](x0, y_rows, cos, sin, bias)
    np.testing.assert_array_equal(x1.data, x0.data)


def test_double_block_rejects_per_token_image_conditioning():
    m = Model(micro_cfg(), seed=5)
    y2 = Tensor(np.zeros((2, 24), dtype=np.float32))
    with pytest.raises(ValidationError):
        m.backbone.doubles[0](Tensor(np.zeros((3, 24), dtype=np.float32)),
                              Tensor(np.zeros((4, 24), dtype=np.float32)),
                              y2, y2, None, None, None)


def test_double_block_image_permutation_leaves_text_alone():
    # float64 model so reordering noise stays at machine precision
    m = Model(micro_cfg(), seed=5, dtype=np.float64)
    rng = Rng(12)
    randomize(m.store, rng, prefixes=("core.double0",), scale=0.2)
    blk = m.backbone.doubles[0]
    t_len, n_img = 6, 9
    xt = Tensor(rng.normal((t_len, 24)))
    xi = rng.normal((n_img, 24))
    y = Tensor(rng.normal((1, 24)))
    y_text = ad.mul(Tensor(np.ones((t_len, 1))), y)
    plan = build_plan(t_len, (3, 3))
    from moddit.backbone import _key_bias
    from moddit.sequence import rope_tables
    cos, sin = rope_tables(plan, m.cfg.head_dim, m.cfg.rope_base, np.float64)
    bias = _key_bias(np.ones(plan.length), np.float64)

    out1, _, _ = blk(xt, Tensor(xi), y_text, y, cos, sin, bias)
    perm = Rng(13).shuffle(np.arange(n_img))
    cos2 = cos.copy()
    sin2 = sin.copy()
    cos2[t_len:] = cos[t_len:][perm]
    sin2[t_len:] = sin[t_len:][perm]
    out2, _, _ = blk(xt, Tensor(xi[perm]), y_text, y, cos2, sin2, bias)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


def test_attention_rows_are_subdistributions():
    m = Model(micro_cfg(), seed=5)
    rng = Rng(14)
    randomize(m.store, rng, scale=0.05)
    ids, mask, span, crop = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=rng.normal((16, 48)).astype(np.float32), grid=(4, 4))
    _, records = m.velocity(enc, z, 0.5, want_records=True)
    assert len(records) == m.cfg.double_blocks * m.cfg.heads
    n_valid = int(mask.sum())
    for r in records:
        assert r.probs.shape == (T_MAX, 16)
        sums = r.probs.data.sum(axis=1)
        assert sums.max() <= 1.0 + 1e-5 and r.probs.data.min() >= 0.0
        np.testing.assert_array_equal(r.probs.data[n_valid:], 0.0)


# --------------------------------------------------- offsets and locality


def rand_bundle(rng, span, n_blocks, d_cond, dtype=np.float32, sid="s"):
    return OffsetBundle(subject_id=sid, span=span,
                        shared=Tensor(rng.normal((1, d_cond)).astype(dtype)),
                        per_block=Tensor(rng.normal((n_blocks, d_cond)).astype(dtype)))


def test_per_token_locality_many_configs():
    rng = Rng(15)
    n_blocks, d_cond, t_len = 4, 12, 10
    for _ in range(100):
        y = Tensor(rng.normal((1, d_cond)).astype(np.float32))
        s = int(rng.integers(0, t_len - 1))
        e = int(rng.integers(s + 1, t_len + 1))
        b = rand_bundle(rng, (s, e), n_blocks, d_cond)
        base = per_block_conditioning(y, (), t_len, n_blocks)
        offs = per_block_conditioning(y, [b], t_len, n_blocks)
        for i in range(n_blocks):
            outside = np.r_[0:s, e:t_len]
            np.testing.assert_array_equal(offs[i].data[outside], base[i].data[outside])
            assert not np.array_equal(offs[i].data[s:e], base[i].data[s:e])


def test_offset_additivity_on_disjoint_spans():
    rng = Rng(16)
    y = Tensor(rng.normal((1, 8)).astype(np.float32))
    a = rand_bundle(rng, (1, 3), 3, 8, sid="a")
    b = rand_bundle(rng, (5, 6), 3, 8, sid="b")
    both = per_block_conditioning(y, [a, b], 7, 3)
    only_a = per_block_conditioning(y, [a], 7, 3)
    only_b = per_block_conditioning(y, [b], 7, 3)
    for i in range(3):
        np.testing.assert_array_equal(both[i].data[1:3], only_a[i].data[1:3])
        np.testing.assert_array_equal(both[i].data[5:6], only_b[i].data[5:6])
        np.testing.assert_array_equal(both[i].data[0], only_a[i].data[0])


def test_overlapping_spans_name_subjects():
    rng = Rng(17)
    y = Tensor(rng.normal((1, 8)).astype(np.float32))
    a = rand_bundle(rng, (1, 4), 3, 8, sid="left")
    b = rand_bundle(rng, (3, 5), 3, 8, sid="right")
    with pytest.raises(ValidationError, match="left.*right|right.*left"):
        per_block_conditioning(y, [a, b], 7, 3)


def test_bundle_span_validation():
    m = Model(micro_cfg(), seed=5)
    ids, mask, span, crop = caption_with_subject()
    enc = m.encode_text(ids, mask)
    feats = m.ref_encoder(crop.astype(np.float32))
    with pytest.raises(ValidationError):
        m.adapter.build_bundle("s", (T_MAX - 2, T_MAX), enc.tokens, enc.mask, feats)
    with pytest.raises(ValidationError):
        m.adapter.build_bundle("s", (5, 5), enc.tokens, enc.mask, feats)
    with pytest.raises(ValidationError):
        Resampler.__call__(m.adapter.shared, Tensor(np.zeros((0, 16), dtype=np.float32)),
                           feats)


# -------------------------------------------------------------- composite


def test_zero_offset_equivalence_is_bitwise():
    m = Model(micro_cfg(), seed=6)
    ids, mask, span, crop = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=Rng(18).normal((16, 48)).astype(np.float32), grid=(4, 4))
    bundles = m.build_bundles(enc, [("s0", span, crop)])
    assert np.all(bundles[0].shared.data == 0.0)
    assert np.all(bundles[0].per_block.data == 0.0)
    v_plain, _ = m.velocity(enc, z, 0.3)
    v_bund, _ = m.velocity(enc, z, 0.3, bundles=bundles)
    np.testing.assert_array_equal(v_plain.data, v_bund.data)

    m.set_lora(True)  # fresh adapters are exact no-ops too
    v_lora, _ = m.velocity(enc, z, 0.3, bundles=bundles)
    np.testing.assert_array_equal(v_plain.data, v_lora.data)


def test_velocity_deterministic():
    m = Model(micro_cfg(), seed=6)
    rng = Rng(19)
    randomize(m.store, rng, scale=0.05)
    ids, mask, _, _ = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=rng.normal((16, 48)).astype(np.float32), grid=(4, 4))
    v1, _ = m.velocity(enc, z, 0.7)
    v2, _ = m.velocity(enc, z, 0.7)
    np.testing.assert_array_equal(v1.data, v2.data)


def test_reference_latents_reach_target_tokens():
    m = Model(micro_cfg(), seed=6)
    rng = Rng(20)
    randomize(m.store, rng, scale=0.05)
    ids, mask, span, crop = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=rng.normal((16, 48)).astype(np.float32), grid=(4, 4))
    refs = Model.ref_latents([crop])
    v0, _ = m.velocity(enc, z, 0.5)
    v1, _ = m.velocity(enc, z, 0.5, ref_latents=refs)
    assert not np.allclose(v0.data, v1.data)


def test_embedding_injection_ablation():
    m = Model(micro_cfg(offsets_to_embeddings=True), seed=6)
    # live backbone weights, adapter projections still zero
    randomize(m.store, Rng(30), prefixes=("core.", "text.", "ref."), scale=0.05)
    ids, mask, span, crop = caption_with_subject()
    enc = m.encode_text(ids, mask)
    z = LatentGrid(data=Rng(21).normal((16, 48)).astype(np.float32), grid=(4, 4))
    bundles = m.build_bundles(enc, [("s0", span, crop)])
    v0, _ = m.velocity(enc, z, 0.5)
    v1, _ = m.velocity(enc, z, 0.5, bundles=bundles)
    np.testing.assert_array_equal(v0.data, v1.data)  # zero-init still a no-op
    # a live offset lands on the embeddings instead of the conditioning
    hot = dataclasses.replace(bundles[0],
                              shared=Tensor(np.full((1, 24), 0.5, dtype=np.float32)))
    v2, _ = m.velocity(enc, z, 0.5, bundles=[hot])
    assert not np.array_equal(v0.data, v2.data)
    with pytest.raises(ValidationError):
        embedding_injection([rand_bundle(Rng(0), (0, 1), 4, 12)], 5, 24, np.float32)


def test_sampler_single_step_is_one_euler_update():
    m = Model(micro_cfg(), seed=6)
    rng = Rng(22)
    randomize(m.store, rng, scale=0.05)
    ids, mask, _, _ = caption_with_subject()
    enc = m.encode_text(ids, mask)
    noise = Model.draw_noise(rng, (8, 8))
    img = m.sample(enc, (8, 8), steps=1, noise=noise)
    with no_grad():
        v, _ = m.velocity(enc, LatentGrid(data=noise.copy(), grid=(8, 8)), 1.0)
    want = decode_latent(LatentGrid(data=noise - v.data, grid=(8, 8)))
    np.testing.assert_array_equal(img, want)
    img2 = m.sample(enc, (8, 8), steps=1, noise=noise)
    np.testing.assert_array_equal(img, img2)
    with pytest.raises(ValidationError):
        m.sample(enc, (8, 8), steps=0, noise=noise)


def test_frozen_twin_matches_live_function():
    m = Model(micro_cfg(), seed=6)
    rng = Rng(23)
    randomize(m.store, rng, scale=0.05)
    m.set_lora(True)
    for lin in m.backbone.lora_linears():
        lin.lora_a.data = (rng.normal(lin.lora_a.data.shape) * 0.1).astype(np.float32)
    twin = m.frozen()
    assert all(not t.requires_grad for t in twin.store.params.values())
    ids, mask, _, _ = caption_with_subject()
    enc_live = m.encode_text(ids, mask)
    enc_twin = twin.encode_text(ids, mask)
    z = LatentGrid(data=rng.normal((16, 48)).astype(np.float32), grid=(4, 4))
    v_live, _ = m.velocity(enc_live, z, 0.4)
    v_twin, _ = twin.velocity(enc_twin, z, 0.4)
    np.testing.assert_allclose(v_twin.data, v_live.data, atol=1e-5)


def test_base_conditioning_time_gradient():
    m = Model(micro_cfg(), seed=6, dtype=np.float64)
    rng = Rng(24)
    pooled = Tensor(rng.normal((1, 16)))
    w = Tensor(np.linspace(0.5, 1.5, 24).reshape(1, 24))
    t = Tensor(np.full((1, 1), 0.37), requires_grad=True)
    y = m.backbone.base_conditioning(t, pooled)
    backward(ad.tsum(ad.mul(y, w)))
    g = t.grad[0, 0]
    eps = 1e-6
    with no_grad():
        lo = m.backbone.base_conditioning(Tensor(np.full((1, 1), 0.37 - eps)), pooled)
        hi = m.backbone.base_conditioning(Tensor(np.full((1, 1), 0.37 + eps)), pooled)
    fd = ((hi.data * w.data).sum() - (lo.data * w.data).sum()) / (2 * eps)
    assert abs(g - fd) / max(abs(g), abs(fd), 1e-8) < 1e-5
